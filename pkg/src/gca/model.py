"""Recurrent Granger-causal structure encoder and domain-sensitive decoder.

Batched throughout: a history batch is (B, T, M); structures are (B, M, M)
per lag with entry (i, m) gating source variable m into target variable i.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class ModelConfig:
    M: int
    k: int
    d_alpha: int = 4
    d_beta: int = 4
    enc_hidden: int = 16
    g_hidden: int = 3
    agg_hidden: int = 16
    prior_p: float = 0.1
    sigma_dec: float = 1.0
    threshold: float = 0.5
    structured: bool = True

    def __post_init__(self):
        if self.M < 1 or self.k < 1:
            raise ValueError("M and k must be >= 1")
        if not 0.0 < self.prior_p < 1.0:
            raise ValueError("prior_p must lie in (0, 1)")
        if self.sigma_dec <= 0:
            raise ValueError("sigma_dec must be positive")


@dataclass
class FullTimeGraph:
    """Per-lag edge logits and relaxed (or thresholded) samples, lag 1 first."""

    logits: list[Tensor]
    samples: list[Tensor]

    @property
    def k(self) -> int:
        return len(self.logits)

    def probabilities(self) -> list[Tensor]:
        return [ad.sigmoid(lg) for lg in self.logits]


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)
    embeddings: dict[str, dict[str, Tensor]] = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, domains, rng: np.random.Generator) -> "ModelParams":
        c = config
        p = cls(config)

        def dense(name, fan_in, shape):
            p.tensors[name] = Tensor(rng.standard_normal(shape) / np.sqrt(fan_in), requires_grad=True)

        def zeros(name, shape):
            p.tensors[name] = Tensor(np.zeros(shape), requires_grad=True)

        if c.structured:
            for j in range(1, c.k + 1):
                n_in = (j - 1) * c.M * c.M + c.k * c.M + c.d_alpha
                dense(f"enc{j}.w1", n_in, (n_in, c.enc_hidden))
                zeros(f"enc{j}.b1", (c.enc_hidden,))
                dense(f"enc{j}.w2", c.enc_hidden, (c.enc_hidden, c.M * c.M))
                zeros(f"enc{j}.b2", (c.M * c.M,))
        n_g = c.M + c.d_beta
        for j in range(1, c.k + 1):
            dense(f"g{j}.w", n_g, (c.M, n_g, c.g_hidden))
            zeros(f"g{j}.b", (c.M, c.g_hidden))
        n_agg = c.k * c.g_hidden
        dense("agg.w1", n_agg, (c.M, n_agg, c.agg_hidden))
        zeros("agg.b1", (c.M, c.agg_hidden))
        dense("agg.w2", c.agg_hidden, (c.M, c.agg_hidden, 1))
        zeros("agg.b2", (c.M,))
        if c.structured:
            for d in domains:
                p.add_domain(d, rng)
        return p

    def add_domain(self, domain_id, rng: np.random.Generator) -> None:
        key = str(domain_id)
        if key in self.embeddings:
            return
        self.embeddings[key] = {
            "alpha": Tensor(0.5 * rng.standard_normal(self.config.d_alpha), requires_grad=True),
            "beta": Tensor(0.5 * rng.standard_normal(self.config.d_beta), requires_grad=True),
        }

    def embedding(self, domain_id) -> dict[str, Tensor]:
        key = str(domain_id)
        if not self.config.structured:
            zero = Tensor(np.zeros(self.config.d_beta))
            return {"alpha": Tensor(np.zeros(self.config.d_alpha)), "beta": zero}
        try:
            return self.embeddings[key]
        except KeyError:
            raise KeyError(f"unknown domain_id {key!r}; known: {sorted(self.embeddings)}") from None

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = list(self.tensors.items())
        for d in sorted(self.embeddings):
            for nm in ("alpha", "beta"):
                out.append((f"emb[{d}].{nm}", self.embeddings[d][nm]))
        return out

    def n_parameters(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def copy(self) -> "ModelParams":
        return ModelParams.from_dict(self.to_dict())

    def to_dict(self) -> dict:
        return {
            "model_config": asdict(self.config),
            "params": {n: {"shape": list(t.shape), "values": t.values.tolist()}
                       for n, t in self.tensors.items()},
            "embeddings": {d: {nm: e[nm].values.tolist() for nm in ("alpha", "beta")}
                           for d, e in sorted(self.embeddings.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        p = cls(ModelConfig(**d["model_config"]))
        for n, entry in d["params"].items():
            vals = np.asarray(entry["values"], dtype=np.float64)
            p.tensors[n] = Tensor(vals.reshape(entry["shape"]), requires_grad=True)
        for dom, e in d.get("embeddings", {}).items():
            p.embeddings[str(dom)] = {nm: Tensor(np.asarray(e[nm], dtype=np.float64), requires_grad=True)
                                      for nm in ("alpha", "beta")}
        return p


# -- structure encoder --------------------------------------------------------


def gumbel_bernoulli_sample(logit, temperature: float, rng: np.random.Generator | None = None,
                            noise: np.ndarray | None = None):
    """Relaxed Bernoulli draw: class-1 coordinate of a 2-class Gumbel-Softmax over (logit, 0).

    ``noise`` (shape ``(2,) + logit.shape``) replaces the Gumbel draws when given.
    Accepts a float or a Tensor; returns the same kind.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    scalar = not isinstance(logit, Tensor)
    lg = ad.as_tensor(logit)
    if noise is None:
        noise = rng.gumbel(size=(2,) + lg.shape)
    # softmax([l + g1, g2] / t)[0] == sigmoid((l + g1 - g2) / t)
    shifted = ad.add(lg, noise[0] - noise[1])
    y = ad.clip(ad.sigmoid(ad.mul(shifted, 1.0 / temperature)), 1e-12, 1.0 - 1e-12)
    return y.item() if scalar else y


def _history_features(history: np.ndarray | Tensor, k: int) -> Tensor:
    h = ad.as_tensor(history)
    B, T, M = h.shape
    if T < k:
        raise ValueError(f"history has {T} steps but the model needs at least k={k}")
    recent = h.data[:, T - k:, :][:, ::-1, :]  # most recent first
    if isinstance(history, Tensor) and history.requires_grad:
        idx = np.arange(T - 1, T - k - 1, -1)
        return ad.reshape(ad.take(history, (slice(None), idx)), (B, k * M))
    return Tensor(recent.reshape(B, k * M))


def encode_structures(history, domain_id, params: ModelParams, temperature: float = 1.0,
                      rng: np.random.Generator | None = None, hard: bool = False) -> FullTimeGraph:
    """Encode lag structures recurrently: lag j sees the samples of lags 1..j-1.

    ``hard`` replaces relaxed draws with probabilities thresholded at
    ``config.threshold``; no randomness is consumed then.
    """
    c = params.config
    if not c.structured:
        raise ValueError("unstructured (baseline) models have no structure encoder")
    hist = ad.as_tensor(history)
    if hist.ndim == 2:
        hist = ad.reshape(hist, (1,) + hist.shape)
    B = hist.shape[0]
    feats = _history_features(hist, c.k)
    alpha = ad.broadcast_to(params.embedding(domain_id)["alpha"], (B, c.d_alpha))
    logits, samples = [], []
    for j in range(1, c.k + 1):
        prev = [ad.reshape(s, (B, c.M * c.M)) for s in samples]
        inp = ad.concat(prev + [feats, alpha])
        t = params.tensors
        hid = ad.tanh(ad.add(ad.matmul(inp, t[f"enc{j}.w1"]), t[f"enc{j}.b1"]))
        out = ad.add(ad.matmul(hid, t[f"enc{j}.w2"]), t[f"enc{j}.b2"])
        lg = ad.reshape(out, (B, c.M, c.M))
        if hard:
            s = Tensor((ad._stable_sigmoid(lg.data) >= c.threshold).astype(np.float64))
        else:
            s = gumbel_bernoulli_sample(lg, temperature, rng)
        logits.append(lg)
        samples.append(s)
    return FullTimeGraph(logits, samples)


def summary_graph(graph: FullTimeGraph) -> Tensor:
    """Lag-average of edge probabilities, shape (B, M, M)."""
    probs = graph.probabilities()
    acc = probs[0]
    for p in probs[1:]:
        acc = ad.add(acc, p)
    return ad.mul(acc, 1.0 / len(probs))


# -- decoder ------------------------------------------------------------------


def _gate(z: Tensor, A: Tensor | None) -> Tensor:
    """Target-wise masked copies of ``z``: (..., M) -> (..., M_target, M_source)."""
    lead, M = z.shape[:-1], z.shape[-1]
    zz = ad.reshape(z, lead + (1, M))
    if A is None:
        return ad.broadcast_to(zz, lead + (M, M))
    B = A.shape[0]
    mid = (1,) * (len(lead) - 1)
    return ad.mul(zz, ad.reshape(A, (B,) + mid + (M, M)))


def intra_lag_effect(z_lag, A_j: Tensor | None, beta: Tensor, params: ModelParams, lag: int) -> Tensor:
    """Lag-``lag`` effect on every target: row i is g_{lag,i}(z masked by row i of A_j, beta).

    ``z_lag`` is (B, ..., M); ``A_j`` is (B, M, M) or None (no gating).
    Returns (B, ..., M, g_hidden).
    """
    c = params.config
    z = ad.as_tensor(z_lag)
    if z.shape[-1] != c.M:
        raise ad.ShapeError(f"intra_lag_effect: expected {c.M} variables, got shape {list(z.shape)}")
    if A_j is not None and A_j.shape[-2:] != (c.M, c.M):
        raise ad.ShapeError(f"intra_lag_effect: structure shape {list(A_j.shape)} is not {c.M}x{c.M}")
    lead = z.shape[:-1]
    masked = _gate(z, A_j)
    b = ad.broadcast_to(beta, lead + (c.M, c.d_beta))
    inp = ad.reshape(ad.concat([masked, b]), lead + (c.M, 1, c.M + c.d_beta))
    t = params.tensors
    pre = ad.reshape(ad.matmul(inp, t[f"g{lag}.w"]), lead + (c.M, c.g_hidden))
    return ad.tanh(ad.add(pre, t[f"g{lag}.b"]))


def inter_lag_aggregate(effects: list[Tensor], params: ModelParams) -> Tensor:
    """Per-variable MLP over the concatenated lag effects (lag 1 first); returns (..., M)."""
    c = params.config
    if len(effects) != c.k:
        raise ValueError(f"inter_lag_aggregate: expected {c.k} lag effects, got {len(effects)}")
    e = ad.concat(effects)
    lead = e.shape[:-2]
    t = params.tensors
    x = ad.reshape(e, lead + (c.M, 1, c.k * c.g_hidden))
    hid = ad.add(ad.reshape(ad.matmul(x, t["agg.w1"]), lead + (c.M, c.agg_hidden)), t["agg.b1"])
    hid = ad.reshape(ad.tanh(hid), lead + (c.M, 1, c.agg_hidden))
    out = ad.reshape(ad.matmul(hid, t["agg.w2"]), lead + (c.M,))
    return ad.add(out, t["agg.b2"])


def _structure(graph: FullTimeGraph | None, j: int) -> Tensor | None:
    return None if graph is None else graph.samples[j]


def predict_from_lags(lag_values: list, graph: FullTimeGraph | None, domain_id,
                      params: ModelParams) -> Tensor:
    """Next-step prediction from ``lag_values[j]`` = z_{t-1-j}, each (B, ..., M)."""
    beta = params.embedding(domain_id)["beta"]
    effects = [intra_lag_effect(lag_values[j], _structure(graph, j), beta, params, j + 1)
               for j in range(params.config.k)]
    return inter_lag_aggregate(effects, params)


def one_step_predict(history, graph: FullTimeGraph | None, domain_id, params: ModelParams) -> Tensor:
    """Predict the step after ``history`` (B, T, M) -> (B, M)."""
    h = ad.as_tensor(history)
    k = params.config.k
    if h.shape[-2] < k:
        raise ValueError(f"history has {h.shape[-2]} steps but the model needs at least k={k}")
    T = h.shape[-2]
    lags = [Tensor(h.data[:, T - 1 - j, :]) if not h.requires_grad else ad.take(h, (slice(None), T - 1 - j))
            for j in range(k)]
    return predict_from_lags(lags, graph, domain_id, params)


def teacher_forced_predict(history: np.ndarray, graph: FullTimeGraph | None, domain_id,
                           params: ModelParams, n_steps: int) -> tuple[Tensor, np.ndarray]:
    """Predict each of the last ``n_steps`` history positions from true predecessors.

    Returns predictions (B, n_steps, M) and the matching targets.
    """
    x = np.asarray(history, dtype=np.float64)
    k = params.config.k
    T = x.shape[1]
    if T < k + n_steps:
        raise ValueError(f"history of {T} steps cannot supply {n_steps} predictions at lag {k}")
    pos = np.arange(T - n_steps, T)
    lags = [Tensor(x[:, pos - 1 - j, :]) for j in range(k)]
    return predict_from_lags(lags, graph, domain_id, params), x[:, pos, :]


def rollout(history, graph: FullTimeGraph | None, horizon: int, domain_id,
            params: ModelParams) -> list[Tensor]:
    """Autoregressive rollout; each prediction is fed back as the newest lag."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    x = np.asarray(history, dtype=np.float64)
    k = params.config.k
    if x.shape[1] < k:
        raise ValueError(f"history has {x.shape[1]} steps but the model needs at least k={k}")
    recent: list = [Tensor(x[:, -1 - j, :]) for j in range(k)]
    preds = []
    for _ in range(horizon):
        z = predict_from_lags(recent, graph, domain_id, params)
        preds.append(z)
        recent = [z] + recent[:-1]
    return preds


def forecast(history, horizon: int, domain_id, params: ModelParams, mode: str = "hard",
             temperature: float = 1.0, rng: np.random.Generator | None = None) -> Tensor:
    """Forecast ``horizon`` steps; returns (B, horizon, M) (or (horizon, M) for 2-D input)."""
    if mode not in ("hard", "stochastic"):
        raise ValueError("mode must be 'hard' or 'stochastic'")
    x = np.asarray(history.data if isinstance(history, Tensor) else history, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    graph = None
    if params.config.structured:
        graph = encode_structures(x, domain_id, params, temperature, rng, hard=(mode == "hard"))
    out = ad.stack(rollout(x, graph, horizon, domain_id, params), axis=1)
    return ad.reshape(out, out.shape[1:]) if single else out
