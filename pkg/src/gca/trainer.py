"""Semi-supervised training loop, Adam, temperature annealing, model selection."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .model import ModelConfig, ModelParams, forecast
from .objectives import Hyper, baseline_loss, total_loss

log = logging.getLogger("gca")

MODES = ("gca", "gca_r", "gca_e", "baseline")
HISTORY_COLUMNS = ["step", "neg_elbo_s", "neg_elbo_t", "l_r", "l_d", "l_e", "total", "temperature",
                   "epoch", "val_mse", "gamma", "delta", "lambda"]


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    max_lag: int = 3
    window: int = 30
    horizon: int = 10
    target_var: int = 0
    gamma: float = 1.0
    delta: float = 0.01
    lam: float = 1.0
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 100
    labeled_target_fraction: float = 0.05
    temp_start: float = 1.0
    temp_end: float = 0.5
    temp_decay: float | None = None
    seed: int = 0
    mode: str = "gca"
    n_predict_steps: int = 8
    prior_p: float = 0.1
    sigma_dec: float = 1.0
    threshold: float = 0.5
    d_alpha: int = 4
    d_beta: int = 4
    enc_hidden: int = 16
    g_hidden: int = 3
    agg_hidden: int = 16
    steps_per_epoch: int | None = None
    use_unlabeled_target: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "gca_r":
            self.gamma = 0.0
        elif self.mode == "gca_e":
            self.lam = 0.0
        for name in ("lr", "batch_size", "epochs", "temp_start", "temp_end", "max_lag", "window",
                     "horizon", "n_predict_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.labeled_target_fraction <= 1.0:
            raise ValueError("labeled_target_fraction must lie in [0, 1]")
        if self.temp_decay is not None and not 0 < self.temp_decay <= 1:
            raise ValueError("temp_decay must lie in (0, 1]")
        Hyper(self.gamma, self.delta, self.lam)

    @property
    def hyper(self) -> Hyper:
        return Hyper(self.gamma, self.delta, self.lam)

    def model_config(self, M: int) -> ModelConfig:
        return ModelConfig(M=M, k=self.max_lag, d_alpha=self.d_alpha, d_beta=self.d_beta,
                           enc_hidden=self.enc_hidden, g_hidden=self.g_hidden,
                           agg_hidden=self.agg_hidden, prior_p=self.prior_p, sigma_dec=self.sigma_dec,
                           threshold=self.threshold, structured=self.mode != "baseline")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


# -- optimizer ------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: list[tuple[str, ad.Tensor]], grads: dict[str, np.ndarray],
              state: OptimizerState, lr: float) -> OptimizerState:
    """Bias-corrected Adam update applied in place to ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ad.NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params:
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != t.shape:
            raise ad.ShapeError(f"adam_step: gradient shape {g.shape} != parameter shape {t.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def temperature_schedule(epoch: int, config: TrainConfig) -> float:
    """Exponential decay from ``temp_start`` reaching ``temp_end`` at 80% of the epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    horizon = 0.8 * config.epochs
    if config.temp_decay is None and epoch >= horizon:
        return config.temp_end
    decay = config.temp_decay
    if decay is None:
        decay = (config.temp_end / config.temp_start) ** (1.0 / horizon)
    return max(config.temp_end, config.temp_start * decay ** epoch)


# -- evaluation helpers ------------------------------------------------------------


def forecast_dataset(params: ModelParams, dataset: Dataset, chunk: int = 256) -> np.ndarray:
    """Hard-mode forecasts for every window: (N, tau, M)."""
    out = []
    with ad.no_grad():
        for s in range(0, len(dataset), chunk):
            xb = dataset.x[s:s + chunk]
            out.append(forecast(xb, dataset.horizon, dataset.domain_id, params, mode="hard").data)
    return np.concatenate(out, axis=0)


def validation_mse(params: ModelParams, dataset: Dataset, target_var: int) -> float:
    pred = forecast_dataset(params, dataset)
    return float(np.mean((pred[:, :, target_var] - dataset.y[:, :, target_var]) ** 2))


def select_model(history: list[dict], checkpoints: dict[int, dict]) -> dict:
    """Checkpoint with the lowest validation MSE; earliest epoch wins ties."""
    scored = [(h["val_mse"], h["epoch"]) for h in history if h.get("val_mse") is not None]
    if not scored:
        raise ValueError("no validation point recorded")
    best = min(scored)  # tuples: lower MSE, then earlier epoch
    return checkpoints[best[1]]


# -- training ---------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    best_epoch: int
    history: list[dict]
    checkpoints: dict[int, dict]


def labeled_split(target: Dataset, fraction: float) -> tuple[Dataset, Dataset]:
    """Chronologically earliest ``fraction`` of windows as labeled; the rest unlabeled."""
    order = np.argsort(target.starts, kind="stable")
    n_lab = int(round(fraction * len(target)))
    if fraction > 0 and n_lab == 0:
        n_lab = 1
    return target.subset(order[:n_lab]), target.subset(order[n_lab:])


def _checkpoint(params: ModelParams, config: TrainConfig, epoch: int, val: float, meta: dict) -> dict:
    d = params.to_dict()
    d["train_config"] = asdict(config)
    d["epoch"] = epoch
    d["val_mse"] = val
    d.update(meta)
    return d


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([_fmt(row[c]) for c in HISTORY_COLUMNS])


def train(source: Dataset, target: Dataset | None, config: TrainConfig,
          target_val: Dataset | None = None, run_dir=None, meta: dict | None = None) -> TrainResult:
    """Train on labeled source, few labeled target and all target windows.

    ``target=None`` trains on the source domain alone (alignment compares the
    source with itself). Validation uses ``target_val`` when given, otherwise
    the labeled target subset, otherwise the source windows.
    """
    if source is None or len(source) == 0:
        raise ValueError("source dataset is empty")
    meta = dict(meta or {})
    rng = np.random.default_rng(config.seed)
    M = source.M
    if target is not None and target.M != M:
        raise ValueError("source and target have different variable counts")
    if source.T < config.max_lag + config.n_predict_steps:
        raise ValueError("window too short for max_lag + n_predict_steps")

    domains = [source.domain_id] + ([target.domain_id] if target is not None else [])
    params = ModelParams.init(config.model_config(M), domains, rng)
    state = OptimizerState()

    if target is not None:
        labeled, unlabeled = labeled_split(target, config.labeled_target_fraction)
    else:
        labeled, unlabeled = None, None
    val_set = target_val
    if val_set is None:
        val_set = labeled if labeled is not None and len(labeled) else source

    run_path = Path(run_dir) if run_dir is not None else None
    if run_path is not None:
        (run_path / "checkpoints").mkdir(parents=True, exist_ok=True)

    history: list[dict] = []
    checkpoints: dict[int, dict] = {}
    step = 0
    hyper = config.hyper
    n_src = len(source)
    bs = config.batch_size
    tape = ad.active_tape()
    named = params.parameters()

    for epoch in range(config.epochs):
        temp = temperature_schedule(epoch, config)
        order = rng.permutation(n_src)
        starts = list(range(0, n_src, bs))
        if config.steps_per_epoch is not None:
            starts = starts[: config.steps_per_epoch]
        sums = dict.fromkeys(("neg_elbo_s", "neg_elbo_t", "l_r", "l_d", "l_e", "total"), 0.0)
        for s0 in starts:
            src = source.subset(order[s0:s0 + bs])
            lab = _sample(labeled, bs, rng)
            tape.reset()
            for _, t in named:
                t.grad = None
            try:
                if config.mode == "baseline":
                    loss = baseline_loss([src] + ([lab] if lab is not None else []), params,
                                         config.target_var, config.n_predict_steps, config.lam)
                    parts = {"neg_elbo_s": loss.item(), "neg_elbo_t": 0.0, "l_r": 0.0, "l_d": 0.0,
                             "l_e": 0.0, "total": loss.item()}
                else:
                    all_t = _sample(target, bs, rng) if target is not None else src
                    unl = _sample(unlabeled, bs, rng) if config.use_unlabeled_target else None
                    lb = total_loss(src, lab, all_t, params, hyper, temp, rng, config.target_var,
                                    config.n_predict_steps, unlabeled_target=unl)
                    loss = lb.total
                    parts = lb.as_dict()
            except ad.NumericError as exc:
                raise TrainingDivergedError(f"epoch {epoch} step {step}: {exc}") from exc
            if not math.isfinite(parts["total"]) or abs(parts["total"]) > 1e8:
                raise TrainingDivergedError(
                    f"epoch {epoch} step {step}: total loss {parts['total']!r} diverged")
            loss.backward()
            grads = {n: t.grad for n, t in named if t.grad is not None}
            try:
                adam_step(named, grads, state, config.lr)
            except ad.NumericError as exc:
                raise TrainingDivergedError(str(exc)) from exc
            step += 1
            for key in sums:
                sums[key] += parts[key]

        n_steps = max(len(starts), 1)
        row = {key: v / n_steps for key, v in sums.items()}
        val = validation_mse(params, val_set, config.target_var)
        row.update(step=step, temperature=temp, epoch=epoch, val_mse=val, gamma=config.gamma,
                   delta=config.delta, **{"lambda": config.lam})
        history.append(row)
        ckpt = _checkpoint(params, config, epoch, val, meta)
        checkpoints[epoch] = ckpt
        if run_path is not None:
            (run_path / "checkpoints" / f"epoch_{epoch}.json").write_text(json.dumps(ckpt))
            write_history(run_path / "history.csv", history)
        log.info("epoch=%d total=%.6g elbo_s=%.6g elbo_t=%.6g l_r=%.6g l_d=%.6g l_e=%.6g val_mse=%.6g temp=%.4g",
                 epoch, row["total"], row["neg_elbo_s"], row["neg_elbo_t"], row["l_r"], row["l_d"],
                 row["l_e"], val, temp)

    best = select_model(history, checkpoints)
    if run_path is not None:
        (run_path / "best.json").write_text(json.dumps(best))
    return TrainResult(params, ModelParams.from_dict(best), best["epoch"], history, checkpoints)


def _sample(ds: Dataset | None, n: int, rng: np.random.Generator) -> Dataset | None:
    if ds is None or len(ds) == 0:
        return None
    idx = rng.choice(len(ds), size=min(n, len(ds)), replace=False)
    return ds.subset(np.sort(idx))
