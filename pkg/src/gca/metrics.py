"""Forecast error, structure-recovery AUPRC, evaluation reports and structure export."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Dataset, WeightedLagStructure, stack_adjacency
from .model import ModelParams, encode_structures, forecast


def forecast_metrics(preds, truths, variables=None) -> tuple[float, float]:
    """MSE and MAE over the selected variables (last axis) of matching arrays."""
    p = np.asarray(preds, dtype=float)
    t = np.asarray(truths, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != truth shape {t.shape}")
    if variables is not None:
        variables = np.atleast_1d(np.asarray(variables, dtype=int))
        if variables.size == 0:
            raise ValueError("empty variable selection")
        if np.any(variables < 0) or np.any(variables >= p.shape[-1]):
            raise ValueError(f"variable index out of range 0..{p.shape[-1] - 1}")
        p, t = p[..., variables], t[..., variables]
    if p.size == 0:
        raise ValueError("empty selection")
    err = p - t
    return float(np.mean(err ** 2)), float(np.mean(np.abs(err)))


def auprc(edge_scores, ground_truth) -> float:
    """Average precision of ranked edge scores against binary ground truth.

    Entries are ranked by descending score; ties keep flattened (lag, row, col)
    order.
    """
    s = np.asarray(edge_scores, dtype=float).reshape(-1)
    y = np.asarray(ground_truth).reshape(-1).astype(int)
    if s.shape != y.shape:
        raise ValueError(f"score shape {np.shape(edge_scores)} != truth shape {np.shape(ground_truth)}")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("ground truth has no positive edges")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    tp = np.cumsum(hits)
    ranks = np.arange(1, len(hits) + 1)
    return float(np.sum((tp / ranks)[hits == 1]) / n_pos)


@dataclass
class EvalReport:
    mse: float
    mae: float
    mse_target: float
    mae_target: float
    n_windows: int
    domain_pair: str
    seed: int | None
    target_var: int
    auprc: float | None = None
    auprc_summary: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: v for k, v in d.items() if v is not None or k not in ("auprc", "auprc_summary")}

    def lines(self) -> list[str]:
        keys = ("mse", "mae", "mse_target", "mae_target", "auprc", "auprc_summary")
        return [f"{k}={getattr(self, k)!r}" for k in keys if getattr(self, k) is not None]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("GCA_THREADS", "1")))
    except ValueError:
        return 1


def _chunks(n: int, size: int) -> list[slice]:
    return [slice(s, min(s + size, n)) for s in range(0, n, size)]


def _forecast_chunk(params, dataset, sl):
    with ad.no_grad():
        return forecast(dataset.x[sl], dataset.horizon, dataset.domain_id, params, mode="hard").data


def _probs_chunk(params, dataset, sl):
    with ad.no_grad():
        g = encode_structures(dataset.x[sl], dataset.domain_id, params, hard=True)
        return np.stack([p.data for p in g.probabilities()], axis=1)  # (b, k, M, M)


def _parallel_map(fn, params, dataset, chunk=256) -> list[np.ndarray]:
    parts = _chunks(len(dataset), chunk)
    workers = min(_threads(), len(parts))
    if workers <= 1:
        return [fn(params, dataset, sl) for sl in parts]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(lambda sl: fn(params, dataset, sl), parts))  # map keeps index order


def edge_scores(params: ModelParams, dataset: Dataset) -> np.ndarray:
    """Posterior edge probabilities averaged over windows: (k, M, M)."""
    if not params.config.structured:
        raise ValueError("baseline models carry no structure")
    probs = np.concatenate(_parallel_map(_probs_chunk, params, dataset), axis=0)
    return probs.mean(axis=0)


def evaluate(params: ModelParams, test: Dataset,
             ground_truth: list[WeightedLagStructure] | np.ndarray | None = None,
             target_var: int = 0, domain_pair: str = "", seed: int | None = None) -> EvalReport:
    if test.M != params.config.M:
        raise ValueError(f"test data has {test.M} variables but the model expects {params.config.M}")
    preds = np.concatenate(_parallel_map(_forecast_chunk, params, test), axis=0)
    mse, mae = forecast_metrics(preds, test.y)
    mse_t, mae_t = forecast_metrics(preds, test.y, [target_var])
    report = EvalReport(mse, mae, mse_t, mae_t, len(test), domain_pair, seed, target_var)
    if ground_truth is not None and params.config.structured:
        gt = ground_truth if isinstance(ground_truth, np.ndarray) else stack_adjacency(ground_truth)
        if gt.shape[1:] != (params.config.M, params.config.M):
            raise ValueError("ground truth variable count differs from the model's")
        scores = edge_scores(params, test)
        if gt.shape[0] == scores.shape[0]:
            report.auprc = auprc(scores, gt)
        report.auprc_summary = auprc(scores.mean(axis=0), gt.max(axis=0))
    return report


# -- export ---------------------------------------------------------------------


def _write_matrix(path: Path, mat: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in mat:
            w.writerow([repr(float(v)) for v in row])


def export_structures(params: ModelParams, dataset: Dataset, path, threshold: float = 0.5) -> dict:
    """Write lag-resolved and summary structures as JSON plus CSV matrices."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        scores = edge_scores(params, dataset)
        summary = scores.mean(axis=0)
        payload = {
            "M": int(scores.shape[1]),
            "k": int(scores.shape[0]),
            "threshold": float(threshold),
            "probabilities": scores.tolist(),
            "adjacency": (scores >= threshold).astype(int).tolist(),
            "summary": summary.tolist(),
            "summary_adjacency": (summary >= threshold).astype(int).tolist(),
        }
        (out / "structures.json").write_text(json.dumps(payload))
        for j, mat in enumerate(scores, start=1):
            _write_matrix(out / f"lag_{j}.csv", mat)
        _write_matrix(out / "summary.csv", summary)
    except OSError as exc:
        raise OSError(f"cannot write structures to {out}: {exc}") from exc
    return payload


def load_structures_export(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "structures.json"
    d = json.loads(p.read_text())
    d["probabilities"] = np.asarray(d["probabilities"], dtype=float)
    d["adjacency"] = np.asarray(d["adjacency"], dtype=int)
    d["summary"] = np.asarray(d["summary"], dtype=float)
    return d
