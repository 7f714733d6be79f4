"""Multi-domain nonlinear VAR simulation, windowing, normalization, splits."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class UnstableSimulationError(RuntimeError):
    pass


@dataclass
class WeightedLagStructure:
    lag: int
    adjacency: np.ndarray  # (M, M) ints; (i, m) = 1 iff z^m at this lag drives z^i
    weights: np.ndarray

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=int)
        self.weights = np.asarray(self.weights, dtype=float)
        if not np.isin(self.adjacency, (0, 1)).all():
            raise ValueError("adjacency must be binary")
        if np.any(self.weights * (1 - self.adjacency) != 0):
            raise ValueError("weights must vanish off the adjacency")


@dataclass
class DomainConfig:
    noise_std: float
    sample_interval: int = 1
    nonlinearity_c: float = 0.0
    domain_id: str = "0"
    # phi may be read as a variance; when set, noise std is sqrt(phi).
    noise_is_variance: bool = False

    def __post_init__(self):
        self.domain_id = str(self.domain_id)
        if self.sample_interval < 1:
            raise ValueError("sample_interval must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.nonlinearity_c < 0:
            raise ValueError("nonlinearity_c must be >= 0")

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.noise_std)) if self.noise_is_variance else float(self.noise_std)


DOMAIN_PRESETS: dict[str, tuple[float, int, float]] = {
    "1": (1.0, 1, 0.02),
    "2": (5.0, 2, 0.04),
    "3": (10.0, 3, 0.06),
}


def preset_domain(domain_id, **overrides) -> DomainConfig:
    """Domain settings of the three simulated domains, by id."""
    key = str(domain_id)
    if key not in DOMAIN_PRESETS:
        raise KeyError(f"no preset for domain {key!r}; known: {sorted(DOMAIN_PRESETS)}")
    phi, interval, c = DOMAIN_PRESETS[key]
    kw = dict(noise_std=phi, sample_interval=interval, nonlinearity_c=c, domain_id=key)
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return DomainConfig(**kw)


@dataclass
class TimeSeriesWindow:
    x: np.ndarray
    y: np.ndarray
    domain_id: str


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, series: np.ndarray) -> np.ndarray:
        return (np.asarray(series, dtype=float) - self.mean) / self.std

    def denormalize(self, series: np.ndarray) -> np.ndarray:
        return np.asarray(series, dtype=float) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


@dataclass
class Dataset:
    """Stacked windows of one domain: ``x`` is (N, T, M), ``y`` is (N, tau, M)."""

    x: np.ndarray
    y: np.ndarray
    domain_id: str
    starts: np.ndarray
    stats: NormStats | None = None
    ground_truth: list[WeightedLagStructure] | None = None

    def __post_init__(self):
        self.domain_id = str(self.domain_id)
        if self.x.ndim != 3 or self.y.ndim != 3:
            raise ValueError("x and y must be (N, T, M) and (N, tau, M)")
        if len(self.x) != len(self.y) or len(self.x) != len(self.starts):
            raise ValueError("x, y and starts disagree on the number of windows")
        if self.x.shape[2] != self.y.shape[2]:
            raise ValueError("history and target have different variable counts")
        if self.ground_truth is not None and self.ground_truth[0].adjacency.shape[0] != self.M:
            raise ValueError("ground truth does not match the dataset's variable count")

    def __len__(self) -> int:
        return len(self.x)

    def __getitem__(self, i: int) -> TimeSeriesWindow:
        return TimeSeriesWindow(self.x[i], self.y[i], self.domain_id)

    def __iter__(self) -> Iterator[TimeSeriesWindow]:
        return (self[i] for i in range(len(self)))

    @property
    def windows(self) -> list[TimeSeriesWindow]:
        return list(self)

    @property
    def M(self) -> int:
        return self.x.shape[2]

    @property
    def T(self) -> int:
        return self.x.shape[1]

    @property
    def horizon(self) -> int:
        return self.y.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.x[idx], self.y[idx], self.domain_id, self.starts[idx],
                       self.stats, self.ground_truth)


# -- generation -------------------------------------------------------------


def companion_radius(weights: np.ndarray) -> float:
    """Spectral radius of the companion matrix of ``z_t = sum_j W_j z_{t-j}``."""
    k, M, _ = weights.shape
    comp = np.zeros((k * M, k * M))
    comp[:M, :] = np.concatenate(list(weights), axis=1)
    if k > 1:
        comp[M:, :-M] = np.eye((k - 1) * M)
    return float(np.max(np.abs(np.linalg.eigvals(comp))))


def stabilize(weights: np.ndarray, radius: float = 0.95) -> np.ndarray:
    w = np.array(weights, dtype=float)
    while companion_radius(w) > radius:
        w *= 0.95
    return w


def sample_structures(M: int, k: int, density: float, weight_scale: float,
                      rng: np.random.Generator, radius: float = 0.95) -> list[WeightedLagStructure]:
    if M < 1 or k < 1:
        raise ValueError("M and k must be >= 1")
    if not 0.0 <= density <= 1.0:
        raise ValueError("density must lie in [0, 1]")
    if weight_scale < 0.05:
        raise ValueError("weight_scale must be at least 0.05")
    adj = (rng.random((k, M, M)) < density).astype(int)
    mag = rng.uniform(0.05, weight_scale, size=(k, M, M))
    sign = np.where(rng.random((k, M, M)) < 0.5, -1.0, 1.0)
    w = stabilize(adj * mag * sign, radius)
    return [WeightedLagStructure(j + 1, adj[j], w[j]) for j in range(k)]


def stack_weights(structures: Sequence[WeightedLagStructure]) -> np.ndarray:
    return np.stack([s.weights for s in structures])


def stack_adjacency(structures: Sequence[WeightedLagStructure]) -> np.ndarray:
    return np.stack([s.adjacency for s in structures])


def simulate_domain(structures: Sequence[WeightedLagStructure], config: DomainConfig, length: int,
                    rng: np.random.Generator, burn_in: int = 200,
                    initial: np.ndarray | None = None) -> np.ndarray:
    """Run ``z_t = sum_j W_j (z_{t-j} + c sin z_{t-j}) + eps_t``.

    The first ``k`` states are i.i.d. standard normal unless ``initial``
    (shape (k, M), oldest first) is given. The first ``burn_in`` rows of the
    trajectory, initial states included, are dropped; ``length`` rows remain.
    """
    W = stack_weights(structures)
    k, M, _ = W.shape
    if length <= k:
        raise ValueError("length must exceed the maximum lag")
    total = burn_in + length
    z = np.zeros((max(total, k), M))
    z[:k] = rng.standard_normal((k, M)) if initial is None else np.asarray(initial, float).reshape(k, M)
    noise = rng.standard_normal((max(total, k), M)) * config.sigma
    c = config.nonlinearity_c
    for t in range(k, total):
        acc = noise[t].copy()
        for j in range(k):
            prev = z[t - 1 - j]
            acc += W[j] @ (prev + c * np.sin(prev))
        if np.max(np.abs(acc)) > 1e6:
            raise UnstableSimulationError(
                f"unstable system at step {t} (|z| > 1e6); re-sample the structures"
            )
        z[t] = acc
    return z[burn_in:total]


def subsample_interval(series: np.ndarray, interval: int) -> np.ndarray:
    if interval < 1:
        raise ValueError("interval must be >= 1")
    return np.asarray(series)[::interval]


def perturb_weights(structures: Sequence[WeightedLagStructure], rng: np.random.Generator,
                    low: float = 0.8, high: float = 1.2) -> list[WeightedLagStructure]:
    W = stack_weights(structures) * rng.uniform(low, high, size=(len(structures),) + structures[0].weights.shape)
    W = stabilize(W)
    return [WeightedLagStructure(s.lag, s.adjacency, W[i]) for i, s in enumerate(structures)]


def generate_domains(M: int, k: int, density: float, configs: Sequence[DomainConfig], length: int,
                     seed: int, weight_scale: float = 1.0, burn_in: int = 200,
                     perturb: bool = False):
    """Simulate every domain from one shared structure sample.

    Each domain is simulated for ``length * interval`` steps and then
    subsampled, so all returned series have ``length`` rows.
    Returns ``(structures, {domain_id: series})``.
    """
    rng = np.random.default_rng(seed)
    structures = sample_structures(M, k, density, weight_scale, rng)
    out = {}
    for cfg in configs:
        own = perturb_weights(structures, rng) if perturb else structures
        raw = simulate_domain(own, cfg, length * cfg.sample_interval, rng, burn_in=burn_in)
        out[cfg.domain_id] = subsample_interval(raw, cfg.sample_interval)
    return structures, out


# -- preprocessing ------------------------------------------------------------


def zscore_normalize(series: np.ndarray) -> tuple[np.ndarray, NormStats]:
    series = np.asarray(series, dtype=float)
    mu = series.mean(axis=0)
    mu = mu + (series - mu).mean(axis=0)  # compensates rounding when |mean| >> std
    sd = series.std(axis=0)
    for i, s in enumerate(sd):
        if s < 1e-8:
            raise ValueError(f"variable {i} is (near) constant; cannot z-score it")
    stats = NormStats(mu, sd)
    return stats.normalize(series), stats


def window_dataset(series: np.ndarray, T: int, tau: int, stride: int = 1, domain_id="0",
                   stats: NormStats | None = None,
                   ground_truth: list[WeightedLagStructure] | None = None) -> Dataset:
    series = np.asarray(series, dtype=float)
    n = len(series)
    if T < 1 or tau < 1 or stride < 1:
        raise ValueError("T, tau and stride must be >= 1")
    if n < T + tau:
        raise ValueError(f"series of length {n} is shorter than T + tau = {T + tau}")
    starts = np.arange(0, n - T - tau + 1, stride)
    idx = starts[:, None] + np.arange(T + tau)[None, :]
    chunks = series[idx]
    return Dataset(chunks[:, :T].copy(), chunks[:, T:].copy(), domain_id, starts, stats, ground_truth)


def split_dataset(dataset: Dataset, ratios=(0.6, 0.2, 0.2), rng: np.random.Generator | None = None,
                  chronological: bool = True) -> tuple[Dataset, Dataset, Dataset]:
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("ratios must be three positive numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    n = len(dataset)
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"split of {n} windows by {tuple(ratios)} leaves an empty part")
    if chronological:
        order = np.argsort(dataset.starts, kind="stable")
    else:
        if rng is None:
            raise ValueError("shuffled split needs a generator")
        order = rng.permutation(n)
    parts = order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]
    return tuple(dataset.subset(np.sort(p) if not chronological else p) for p in parts)


# -- file formats -------------------------------------------------------------


def write_series_csv(path, series: np.ndarray) -> None:
    series = np.asarray(series, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"var_{i}" for i in range(series.shape[1])])
        for t, row in enumerate(series):
            w.writerow([t] + [repr(float(v)) for v in row])


def read_series_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "t" or any(h != f"var_{i}" for i, h in enumerate(header[1:])):
            raise ValueError(f"{path}: expected header t,var_0,...,var_(M-1)")
        rows = [[float(v) for v in r[1:]] for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return np.asarray(rows)


def structures_to_dict(structures: Sequence[WeightedLagStructure]) -> dict:
    adj = stack_adjacency(structures)
    return {
        "M": int(adj.shape[1]),
        "k": int(adj.shape[0]),
        "adjacency": adj.tolist(),
        "weights": stack_weights(structures).tolist(),
    }


def structures_from_dict(d: dict) -> list[WeightedLagStructure]:
    adj = np.asarray(d["adjacency"], dtype=int)
    w = np.asarray(d["weights"], dtype=float) if "weights" in d else adj.astype(float)
    if adj.shape != (d["k"], d["M"], d["M"]):
        raise ValueError("ground truth adjacency shape disagrees with M and k")
    return [WeightedLagStructure(j + 1, adj[j], w[j]) for j in range(adj.shape[0])]


def save_structures(path, structures: Sequence[WeightedLagStructure]) -> None:
    Path(path).write_text(json.dumps(structures_to_dict(structures), indent=1))


def load_structures(path) -> list[WeightedLagStructure]:
    return structures_from_dict(json.loads(Path(path).read_text()))
