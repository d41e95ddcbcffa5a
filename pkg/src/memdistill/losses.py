"""Distillation objectives with analytic gradients w.r.t. the student rows.

Every loss takes ``(teacher, student)`` row-aligned feature matrices (or
FeatureSets) and returns a :class:`LossOutput`.  The teacher never receives a
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from memdistill.encoders import as_rows
from memdistill.errors import DegenerateInputError, InvalidInputError

DEFAULT_TAU = 0.07
DEFAULT_PAIRS = 4096


@dataclass
class LossOutput:
    value: float
    grad_student: np.ndarray
    grad_teacher: np.ndarray | None = None  # only for losses whose both sides are trainable


def _pair(teacher, student):
    t, s = as_rows(teacher), as_rows(student)
    if t.ndim != 2 or t.shape != s.shape:
        raise InvalidInputError(f"teacher {t.shape} and student {s.shape} must be equal N x C")
    if len(t) == 0:
        raise InvalidInputError("at least one row is required")
    return t, s


def _normalize(x):
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norm, 1e-12), np.maximum(norm, 1e-12)


def _normalize_backward(grad_unit, unit, norm):
    """Chain rule through x -> x / |x|."""
    return (grad_unit - np.sum(grad_unit * unit, axis=1, keepdims=True) * unit) / norm


def l2_distill(teacher, student) -> LossOutput:
    t, s = _pair(teacher, student)
    m = len(t)
    diff = s - t
    dist = np.linalg.norm(diff, axis=1)
    safe = np.where(dist > 0, dist, 1.0)
    grad = np.where(dist[:, None] > 0, diff / (m * safe[:, None]), 0.0)
    return LossOutput(float(dist.sum() / m), grad)


def _contrastive(anchor_side, other_side, tau):
    """-(1/M) sum_j log softmax_k(<a_k, b_j> / tau)[j], normalised rows.

    Returns value and gradients w.r.t. both raw inputs.
    """
    if tau <= 0:
        raise InvalidInputError("tau must be positive")
    a_hat, a_norm = _normalize(anchor_side)
    b_hat, b_norm = _normalize(other_side)
    m = len(a_hat)
    logits = a_hat @ b_hat.T / tau  # [k, j]
    logp = log_softmax(logits, axis=0)
    value = -np.trace(logp) / m
    p = np.exp(logp)
    dlogits = (p - np.eye(m)) / m  # d value / d logits[k, j]
    grad_b_hat = dlogits.T @ a_hat / tau
    grad_a_hat = dlogits @ b_hat / tau
    return (
        float(value),
        _normalize_backward(grad_a_hat, a_hat, a_norm),
        _normalize_backward(grad_b_hat, b_hat, b_norm),
    )


def infonce(teacher, student, tau: float = DEFAULT_TAU) -> LossOutput:
    """Point-pixel InfoNCE; for each student row the softmax runs over all
    teacher rows and the positive is the aligned one."""
    t, s = _pair(teacher, student)
    value, _, grad_s = _contrastive(t, s, tau)
    return LossOutput(value, grad_s)


def infonce_sampled(teacher, student, tau: float = DEFAULT_TAU, num_pairs: int = DEFAULT_PAIRS, rng=None) -> LossOutput:
    t, s = _pair(teacher, student)
    if num_pairs < 1:
        raise InvalidInputError("num_pairs must be >= 1")
    if num_pairs >= len(t):
        return infonce(t, s, tau)
    rng = rng if rng is not None else np.random.default_rng()
    idx = np.sort(rng.choice(len(t), size=num_pairs, replace=False))
    out = infonce(t[idx], s[idx], tau)
    grad = np.zeros_like(s)
    grad[idx] = out.grad_student
    return LossOutput(out.value, grad)


def temporal_contrastive(objects_t, objects_t1, tau: float = DEFAULT_TAU) -> LossOutput:
    """Object-level InfoNCE across two timestamps.

    ``grad_student`` is w.r.t. ``objects_t1`` and ``grad_teacher`` w.r.t.
    ``objects_t`` since both come from the point encoder.
    """
    a, b = as_rows(objects_t), as_rows(objects_t1)
    if a.ndim != 2 or len(a) == 0:
        raise InvalidInputError("need at least one object per frame")
    if a.shape != b.shape:
        raise InvalidInputError(f"object sets differ in shape: {a.shape} vs {b.shape}")
    value, grad_a, grad_b = _contrastive(a, b, tau)
    return LossOutput(value, grad_b, grad_a)


def pool_objects(features, object_ids) -> tuple[np.ndarray, np.ndarray]:
    """Mean feature per object id; returns ``(ids, pooled)`` sorted by id."""
    feats = as_rows(features)
    ids, inv = np.unique(np.asarray(object_ids), return_inverse=True)
    pooled = np.zeros((len(ids), feats.shape[1]))
    np.add.at(pooled, inv.reshape(-1), feats)
    pooled /= np.bincount(inv.reshape(-1), minlength=len(ids))[:, None]
    return ids, pooled


def cosine_distill(teacher, student) -> LossOutput:
    t, s = _pair(teacher, student)
    tn = np.linalg.norm(t, axis=1)
    sn = np.linalg.norm(s, axis=1)
    keep = (tn > 0) & (sn > 0)
    m = int(keep.sum())
    if m == 0:
        raise DegenerateInputError("every row pair has a zero-norm side")
    t_hat = t[keep] / tn[keep, None]
    s_hat = s[keep] / sn[keep, None]
    cos = np.sum(t_hat * s_hat, axis=1)
    grad = np.zeros_like(s)
    grad[keep] = _normalize_backward(-t_hat / m, s_hat, sn[keep, None])
    return LossOutput(float(np.sum(1.0 - cos) / m), grad)


def kl_distill(teacher, student, tau: float = DEFAULT_TAU) -> LossOutput:
    """Mean KL(softmax(teacher / tau) || softmax(student / tau)) over rows."""
    if tau <= 0:
        raise InvalidInputError("tau must be positive")
    t, s = _pair(teacher, student)
    m = len(t)
    log_pt = log_softmax(t / tau, axis=1)
    log_ps = log_softmax(s / tau, axis=1)
    pt = np.exp(log_pt)
    kl = np.sum(pt * (log_pt - log_ps), axis=1)
    grad = (softmax(s / tau, axis=1) - pt) / (tau * m)
    return LossOutput(float(max(kl.sum() / m, 0.0)), grad)


LOSSES = {
    "l2": l2_distill,
    "cosine": cosine_distill,
    "infonce": infonce,
    "infonce_sampled": infonce_sampled,
    "kl": kl_distill,
}

__all__ = [
    "LOSSES",
    "LossOutput",
    "cosine_distill",
    "infonce",
    "infonce_sampled",
    "kl_distill",
    "l2_distill",
    "pool_objects",
    "temporal_contrastive",
]
