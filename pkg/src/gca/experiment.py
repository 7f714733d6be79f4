"""Experiment plumbing: data sources, run directories, generation and evaluation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data
from .metrics import EvalReport, evaluate, export_structures
from .model import ModelParams
from .trainer import TrainConfig, TrainResult, train


class ConfigError(ValueError):
    """Bad flags, bad config values, or unreadable/missing input files."""


class DataError(ValueError):
    """Input data that exists but cannot be used."""


def read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{p}: no such file")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def parse_domain_pair(label: str) -> tuple[str, str]:
    for sep in ("->", "→"):
        if sep in label:
            src, tgt = (s.strip() for s in label.split(sep, 1))
            if src and tgt:
                return src, tgt
    raise ConfigError(f"domain pair {label!r} must look like '1->2'")


# -- generation ---------------------------------------------------------------------


def generate_dataset(out, M: int, k: int, density: float, length: int, domains, seed: int,
                     weight_scale: float = 1.0, burn_in: int = 200, perturb: bool = False,
                     overrides: dict | None = None) -> dict:
    """Simulate preset domains and write CSVs, ground truth and a manifest."""
    overrides = overrides or {}
    configs = [data.preset_domain(d, **overrides) for d in domains]
    structures, series = data.generate_domains(M, k, density, configs, length, seed,
                                               weight_scale=weight_scale, burn_in=burn_in,
                                               perturb=perturb)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "vars": M, "lag": k, "density": density, "length": length, "seed": seed,
        "weight_scale": weight_scale, "burn_in": burn_in, "perturb": perturb,
        "ground_truth": "ground_truth.json",
        "domains": {},
    }
    for cfg in configs:
        name = f"domain_{cfg.domain_id}.csv"
        data.write_series_csv(out / name, series[cfg.domain_id])
        manifest["domains"][cfg.domain_id] = {
            "file": name, "noise_std": cfg.noise_std, "sample_interval": cfg.sample_interval,
            "nonlinearity_c": cfg.nonlinearity_c, "noise_is_variance": cfg.noise_is_variance,
        }
    data.save_structures(out / "ground_truth.json", structures)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


# -- experiment config ---------------------------------------------------------------


@dataclass
class ExperimentConfig(TrainConfig):
    """Training options plus where the data comes from and where the run goes.

    Exactly one data source: ``data_dir`` (a generated directory with a
    manifest), ``source_csv`` with ``target_csv``, or ``synthetic`` (inline
    generation settings: vars, density, length, weight_scale, overrides).
    """

    out_dir: str | None = None
    domain_pair: str = "1->2"
    data_dir: str | None = None
    source_csv: str | None = None
    target_csv: str | None = None
    synthetic: dict | None = None
    split: list = field(default_factory=lambda: [0.6, 0.2, 0.2])
    stride: int = 1

    def __post_init__(self):
        super().__post_init__()
        kinds = [self.data_dir is not None,
                 self.source_csv is not None or self.target_csv is not None,
                 self.synthetic is not None]
        if sum(kinds) != 1:
            raise ConfigError("exactly one data source is required: data_dir, source_csv+target_csv "
                              "or synthetic")
        if kinds[1] and (self.source_csv is None or self.target_csv is None):
            raise ConfigError("source_csv and target_csv must be given together")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        parse_domain_pair(self.domain_pair)

    @property
    def source_domain(self) -> str:
        return parse_domain_pair(self.domain_pair)[0]

    @property
    def target_domain(self) -> str:
        return parse_domain_pair(self.domain_pair)[1]

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


# -- data loading ----------------------------------------------------------------------


@dataclass
class DomainData:
    domain_id: str
    series: np.ndarray
    ground_truth: list | None = None


def _read_csv(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{p}: no such file")
    try:
        return data.read_series_csv(p)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def load_manifest_dir(path) -> tuple[dict, Path]:
    d = Path(path)
    return read_json(d / "manifest.json"), d


def load_manifest_domain(path, domain_id: str) -> DomainData:
    manifest, root = load_manifest_dir(path)
    entry = manifest.get("domains", {}).get(str(domain_id))
    if entry is None:
        raise ConfigError(f"{root}: manifest has no domain {domain_id!r}")
    gt = None
    if manifest.get("ground_truth") and (root / manifest["ground_truth"]).is_file():
        gt = data.structures_from_dict(read_json(root / manifest["ground_truth"]))
    return DomainData(str(domain_id), _read_csv(root / entry["file"]), gt)


def load_domains(cfg: ExperimentConfig) -> tuple[DomainData, DomainData]:
    src, tgt = cfg.source_domain, cfg.target_domain
    if cfg.data_dir is not None:
        return load_manifest_domain(cfg.data_dir, src), load_manifest_domain(cfg.data_dir, tgt)
    if cfg.source_csv is not None:
        return DomainData(src, _read_csv(cfg.source_csv)), DomainData(tgt, _read_csv(cfg.target_csv))
    s = dict(cfg.synthetic)
    try:
        M = int(s.pop("vars"))
        density = float(s.pop("density"))
        length = int(s.pop("length"))
    except KeyError as exc:
        raise ConfigError(f"synthetic source needs {exc.args[0]!r}") from exc
    weight_scale = float(s.pop("weight_scale", 1.0))
    overrides = s.pop("overrides", {}) or {}
    if s:
        raise ConfigError(f"unknown synthetic keys: {sorted(s)}")
    configs = [data.preset_domain(d, **overrides) for d in (src, tgt)]
    structures, series = data.generate_domains(M, cfg.max_lag, density, configs, length, cfg.seed,
                                               weight_scale=weight_scale)
    return DomainData(src, series[src], structures), DomainData(tgt, series[tgt], structures)


def fit_stats(series: np.ndarray, train_fraction: float) -> data.NormStats:
    """Z-score statistics from the leading (training) span of a series."""
    n = max(2, int(len(series) * train_fraction))
    try:
        _, stats = data.zscore_normalize(series[:n])
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    return stats


def prepare_domain(dom: DomainData, T: int, tau: int, stride: int, split, stats=None):
    """Normalize, window and split chronologically: (train, val, test, stats)."""
    stats = stats if stats is not None else fit_stats(dom.series, split[0])
    if dom.series.shape[1] != len(stats.mean):
        raise DataError(f"domain {dom.domain_id}: {dom.series.shape[1]} variables, "
                        f"normalization expects {len(stats.mean)}")
    z = stats.normalize(dom.series)
    try:
        ds = data.window_dataset(z, T, tau, stride, dom.domain_id, stats, dom.ground_truth)
        parts = data.split_dataset(ds, tuple(split))
    except ValueError as exc:
        raise DataError(f"domain {dom.domain_id}: {exc}") from exc
    return (*parts, stats)


# -- runs ------------------------------------------------------------------------------------


@dataclass
class PreparedData:
    source_train: data.Dataset
    target_train: data.Dataset
    target_val: data.Dataset
    target_test: data.Dataset
    ground_truth: list | None
    meta: dict


def prepare_experiment(cfg: ExperimentConfig) -> PreparedData:
    """Load both domains, normalize with training-span stats, window and split."""
    src, tgt = load_domains(cfg)
    if src.series.shape[1] != tgt.series.shape[1]:
        raise DataError("source and target have different variable counts")
    if not 0 <= cfg.target_var < src.series.shape[1]:
        raise ConfigError(f"target_var {cfg.target_var} outside 0..{src.series.shape[1] - 1}")
    s_tr, _, _, s_stats = prepare_domain(src, cfg.window, cfg.horizon, cfg.stride, cfg.split)
    t_tr, t_va, t_te, t_stats = prepare_domain(tgt, cfg.window, cfg.horizon, cfg.stride, cfg.split)
    meta = {
        "domain_pair": cfg.domain_pair,
        "source_domain": src.domain_id,
        "target_domain": tgt.domain_id,
        "norm_stats": {src.domain_id: s_stats.to_dict(), tgt.domain_id: t_stats.to_dict()},
        "split": list(cfg.split),
        "stride": cfg.stride,
    }
    return PreparedData(s_tr, t_tr, t_va, t_te, tgt.ground_truth, meta)


def run_experiment(cfg: ExperimentConfig, prepared: PreparedData | None = None) -> TrainResult:
    """Train per ``cfg``; with ``out_dir`` set, write the full run directory."""
    prep = prepared if prepared is not None else prepare_experiment(cfg)
    out = Path(cfg.out_dir) if cfg.out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    result = train(prep.source_train, prep.target_train, cfg.train_config(), prep.target_val,
                   run_dir=out, meta=prep.meta)
    if out is not None and cfg.mode != "baseline":
        export_structures(result.best_params, prep.target_test, out / "structures", cfg.threshold)
    return result


@dataclass
class LoadedModel:
    params: ModelParams
    checkpoint: dict

    @property
    def train_config(self) -> dict:
        return self.checkpoint.get("train_config", {})

    def stats_for(self, domain_id: str) -> data.NormStats | None:
        st = self.checkpoint.get("norm_stats", {}).get(str(domain_id))
        return data.NormStats.from_dict(st) if st is not None else None


def load_model(path) -> LoadedModel:
    ckpt = read_json(path)
    try:
        return LoadedModel(ModelParams.from_dict(ckpt), ckpt)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: not a model checkpoint ({exc})") from exc


def resolve_eval_data(model: LoadedModel, data_path, domain_id: str | None = None,
                      split: str = "test"):
    """Windows to evaluate: a manifest directory or a single series CSV."""
    tc = model.train_config
    T, tau = int(tc.get("window", 30)), int(tc.get("horizon", 10))
    ratios = model.checkpoint.get("split", [0.6, 0.2, 0.2])
    stride = int(model.checkpoint.get("stride", 1))
    dom = str(domain_id if domain_id is not None else model.checkpoint.get("target_domain", "0"))
    p = Path(data_path)
    if p.is_dir():
        dd = load_manifest_domain(p, dom)
    elif p.is_file():
        dd = DomainData(dom, _read_csv(p))
    else:
        raise ConfigError(f"{p}: no such file or directory")
    if dom not in model.params.embeddings and model.params.config.structured:
        raise ConfigError(f"model has no embedding for domain {dom!r}")
    tr, va, te, _ = prepare_domain(dd, T, tau, stride, ratios, model.stats_for(dom))
    parts = {"train": tr, "val": va, "test": te}
    if split not in parts:
        raise ConfigError(f"split must be one of {sorted(parts)}")
    return parts[split]


def evaluate_model(model: LoadedModel, dataset: data.Dataset, ground_truth=None) -> EvalReport:
    return evaluate(model.params, dataset, ground_truth,
                    target_var=int(model.train_config.get("target_var", 0)),
                    domain_pair=model.checkpoint.get("domain_pair", ""),
                    seed=model.train_config.get("seed"))
