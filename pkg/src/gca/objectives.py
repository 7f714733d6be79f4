"""Training objectives: recurrent ELBO, alignment, sparsity, strengthen, total."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .model import (FullTimeGraph, ModelParams, encode_structures, rollout, summary_graph,
                    teacher_forced_predict)

KL_CLAMP = 1e-6


def reconstruction_loglik(z_true, z_hat, sigma_dec: float = 1.0) -> Tensor:
    """Gaussian log-likelihood summed over the last axis."""
    if sigma_dec <= 0:
        raise ValueError("sigma_dec must be positive")
    zt, zh = ad.as_tensor(z_true), ad.as_tensor(z_hat)
    if zt.shape != zh.shape:
        raise ad.ShapeError(f"reconstruction_loglik: shapes {list(zt.shape)} and {list(zh.shape)} differ")
    sq = ad.square(ad.mul(ad.sub(zt, zh), 1.0 / sigma_dec))
    const = math.log(sigma_dec * math.sqrt(2.0 * math.pi))
    return ad.sub(ad.mul(ad.tsum(sq, axis=-1), -0.5), const * zt.shape[-1])


def bernoulli_kl(q, p0: float):
    """KL(Bernoulli(q) || Bernoulli(p0)), elementwise, inputs clamped to [1e-6, 1 - 1e-6]."""
    scalar = not isinstance(q, Tensor)
    p0 = min(max(float(p0), KL_CLAMP), 1.0 - KL_CLAMP)
    qc = ad.clip(ad.as_tensor(q), KL_CLAMP, 1.0 - KL_CLAMP)
    one_minus = ad.sub(1.0, qc)
    kl = ad.add(ad.mul(qc, ad.sub(ad.log(qc), math.log(p0))),
                ad.mul(one_minus, ad.sub(ad.log(one_minus), math.log(1.0 - p0))))
    return kl.item() if scalar else kl


def structure_kl(graph: FullTimeGraph, p0: float) -> Tensor:
    """Sum of edge KLs over all lags, per batch item: (B,)."""
    total = None
    for p in graph.probabilities():
        term = ad.tsum(ad.reshape(bernoulli_kl(p, p0), (p.shape[0], -1)), axis=1)
        total = term if total is None else ad.add(total, term)
    return total


def elbo(history: np.ndarray, domain_id, params: ModelParams, temperature: float,
         rng: np.random.Generator, n_predict_steps: int = 8):
    """Negative ELBO averaged over a batch of histories (B, T, M).

    Structures are encoded once per window from the history; the last
    ``n_predict_steps`` positions are predicted with teacher forcing.
    Returns ``(neg_elbo, graph, predictions)``.
    """
    c = params.config
    x = np.asarray(history, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    graph = encode_structures(x, domain_id, params, temperature, rng)
    preds, targets = teacher_forced_predict(x, graph, domain_id, params, n_predict_steps)
    nll = ad.neg(ad.tsum(reconstruction_loglik(Tensor(targets), preds, c.sigma_dec), axis=1))
    kl = structure_kl(graph, c.prior_p)
    return ad.mean(ad.add(nll, kl)), graph, preds


def alignment_loss(summary_s: Tensor, summary_t: Tensor) -> Tensor:
    """Mean absolute entrywise difference of two (M, M) summary graphs."""
    s, t = ad.as_tensor(summary_s), ad.as_tensor(summary_t)
    if s.shape != t.shape:
        raise ad.ShapeError(f"alignment_loss: shapes {list(s.shape)} and {list(t.shape)} differ")
    return ad.mean(ad.absolute(ad.sub(s, t)))


def sparsity_loss(summary_s: Tensor, summary_t: Tensor) -> Tensor:
    s, t = ad.as_tensor(summary_s), ad.as_tensor(summary_t)
    if s.shape != t.shape:
        raise ad.ShapeError(f"sparsity_loss: shapes {list(s.shape)} and {list(t.shape)} differ")
    return ad.add(ad.mean(ad.absolute(s)), ad.mean(ad.absolute(t)))


def strengthen_loss(pred_m, label_m) -> Tensor:
    p, y = ad.as_tensor(pred_m), ad.as_tensor(label_m)
    if p.shape != y.shape:
        raise ad.ShapeError(f"strengthen_loss: shapes {list(p.shape)} and {list(y.shape)} differ")
    return ad.mean(ad.square(ad.sub(p, y)))


@dataclass
class Hyper:
    gamma: float = 1.0
    delta: float = 0.01
    lam: float = 1.0

    def __post_init__(self):
        for name in ("gamma", "delta", "lam"):
            if getattr(self, name) < 0:
                raise ValueError(f"hyperparameter {name} must be >= 0")


@dataclass
class LossBreakdown:
    neg_elbo_source: Tensor
    neg_elbo_target: Tensor
    alignment: Tensor
    sparsity: Tensor
    strengthen: Tensor
    total: Tensor
    hyper: Hyper

    def as_dict(self) -> dict[str, float]:
        return {
            "neg_elbo_s": self.neg_elbo_source.item(),
            "neg_elbo_t": self.neg_elbo_target.item(),
            "l_r": self.alignment.item(),
            "l_d": self.sparsity.item(),
            "l_e": self.strengthen.item(),
            "total": self.total.item(),
        }


def combine(neg_elbo_s, neg_elbo_t, l_r, l_d, l_e, hyper: Hyper) -> LossBreakdown:
    parts = [ad.as_tensor(v) for v in (neg_elbo_s, neg_elbo_t, l_r, l_d, l_e)]
    total = ad.add(parts[0], parts[1])
    for coef, term in zip((hyper.gamma, hyper.delta, hyper.lam), parts[2:]):
        total = ad.add(total, ad.mul(term, coef))
    return LossBreakdown(*parts, total, hyper)


def _horizon_predictions(history: np.ndarray, graph, domain_id, params, horizon, var) -> Tensor:
    steps = rollout(history, graph, horizon, domain_id, params)
    return ad.stack([ad.take(s, (slice(None), var)) for s in steps], axis=1)


def total_loss(source: Dataset, labeled_target: Dataset | None, all_target: Dataset,
               params: ModelParams, hyper: Hyper, temperature: float, rng: np.random.Generator,
               target_var: int = 0, n_predict_steps: int = 8,
               unlabeled_target: Dataset | None = None) -> LossBreakdown:
    """Combined objective over one source batch and one target batch pair.

    ``labeled_target`` may be empty or None; then its ELBO and strengthen
    contributions vanish. ``unlabeled_target`` optionally adds a
    reconstruction ELBO on unlabeled target histories.
    """
    if len(source) == 0:
        raise ValueError("source batch is empty")
    if len(all_target) == 0:
        raise ValueError("all-target batch is empty")
    if not isinstance(hyper, Hyper):
        hyper = Hyper(*hyper)
    c = params.config
    horizon = source.horizon
    if not 0 <= target_var < c.M:
        raise ValueError(f"target variable {target_var} outside 0..{c.M - 1}")

    neg_s, graph_s, _ = elbo(source.x, source.domain_id, params, temperature, rng, n_predict_steps)
    pred_parts = [_horizon_predictions(source.x, graph_s, source.domain_id, params, horizon, target_var)]
    label_parts = [source.y[:, :, target_var]]

    has_lab = labeled_target is not None and len(labeled_target) > 0
    if has_lab:
        neg_t, graph_t, _ = elbo(labeled_target.x, labeled_target.domain_id, params, temperature,
                                    rng, n_predict_steps)
        pred_parts.append(_horizon_predictions(labeled_target.x, graph_t, labeled_target.domain_id,
                                               params, horizon, target_var))
        label_parts.append(labeled_target.y[:, :, target_var])
    else:
        neg_t = Tensor(0.0)
    if unlabeled_target is not None and len(unlabeled_target) > 0:
        extra, _, _ = elbo(unlabeled_target.x, unlabeled_target.domain_id, params, temperature,
                              rng, n_predict_steps)
        neg_t = ad.add(neg_t, extra)

    if _same_batch(all_target, source):
        graph_all = graph_s  # one-domain call: identical inputs share one encoding
    else:
        graph_all = encode_structures(all_target.x, all_target.domain_id, params, temperature, rng)
    summ_s = ad.mean(summary_graph(graph_s), axis=0)
    summ_t = ad.mean(summary_graph(graph_all), axis=0)
    l_r = alignment_loss(summ_s, summ_t)
    l_d = sparsity_loss(summ_s, summ_t)

    preds = pred_parts[0] if len(pred_parts) == 1 else _cat_rows(pred_parts)
    labels = np.concatenate(label_parts, axis=0)
    l_e = strengthen_loss(preds, labels)
    return combine(neg_s, neg_t, l_r, l_d, l_e, hyper)


def _same_batch(a: Dataset, b: Dataset) -> bool:
    return a is b or (a.domain_id == b.domain_id and a.x.shape == b.x.shape and np.array_equal(a.x, b.x))


def _cat_rows(parts: list[Tensor]) -> Tensor:
    flat = ad.concat([ad.reshape(p, (p.shape[0] * p.shape[1],)) for p in parts])
    return ad.reshape(flat, (-1, parts[0].shape[1]))


def baseline_loss(batches: list[Dataset], params: ModelParams, target_var: int = 0,
                  n_predict_steps: int = 8, lam: float = 1.0) -> Tensor:
    """Joint autoregressive loss of the structure-free network over pooled batches."""
    nlls, preds, labels = [], [], []
    c = params.config
    for b in batches:
        if len(b) == 0:
            continue
        p, tgt = teacher_forced_predict(b.x, None, b.domain_id, params, n_predict_steps)
        ll = reconstruction_loglik(Tensor(tgt), p, c.sigma_dec)
        nlls.append(ad.neg(ad.tsum(ll, axis=1)))
        preds.append(_horizon_predictions(b.x, None, b.domain_id, params, b.horizon, target_var))
        labels.append(b.y[:, :, target_var])
    if not nlls:
        raise ValueError("no non-empty batch")
    nll = ad.concat(nlls) if len(nlls) > 1 else nlls[0]
    pred = _cat_rows(preds) if len(preds) > 1 else preds[0]
    return ad.add(ad.mean(nll), ad.mul(strengthen_loss(pred, np.concatenate(labels)), lam))
