"""Tempered softmax, cross-entropy, KL divergence and the per-domain composite loss.

The composite loss of one source domain is::

    alpha * CE(softmax(h), y) + (1 - alpha) * tau**2 * KL(softmax(t / tau) || softmax(h / tau))

where ``h`` are the hypothesis logits and ``t`` the (detached) diverse-target logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dtcs.nn import Node, Tape

PROB_FLOOR = 1e-12

KL_TARGET_FIRST = "target_first"
KL_PREDICTION_FIRST = "prediction_first"


@dataclass(frozen=True)
class SoftTarget:
    probabilities: np.ndarray
    tau: float

    def __post_init__(self) -> None:
        p = self.probabilities
        if np.any(p < 0) or abs(float(np.sum(p)) - 1.0) > 1e-9:
            raise ValueError("soft target must be a probability vector")
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    kl: float
    composite: float
    alpha: float
    tau: float

    def as_dict(self) -> dict[str, float]:
        return {"ce": self.ce, "kl": self.kl, "composite": self.composite}


def tempered_softmax(logits, tau: float = 1.0) -> np.ndarray:
    """``exp(z / tau) / sum(exp(z / tau))`` along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = z / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def soft_target(logits, tau: float) -> SoftTarget:
    return SoftTarget(tempered_softmax(logits, tau), tau)


def cross_entropy(probabilities, label: int) -> float:
    p = np.asarray(probabilities, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise ValueError(f"label {label} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(p[label], PROB_FLOOR)))


def kl_divergence(target, prediction) -> float:
    """``sum_m t_m ln(t_m / p_m)`` with ``0 ln 0 = 0`` and ``p`` floored at 1e-12."""
    t = np.asarray(target, dtype=np.float64)
    p = np.asarray(prediction, dtype=np.float64)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.shape} vs {p.shape}")
    # rounding can leave -1e-17 for equal inputs
    return max(0.0, float(np.sum(_xlogx(t) - t * np.log(np.maximum(p, PROB_FLOOR)))))


def _xlogx(t: np.ndarray) -> np.ndarray:
    return np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0)


def ce_node(tape: Tape, logits: Node, labels) -> Node:
    """Batch-mean cross-entropy of untempered ``logits`` against class indices."""
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"batch mismatch: {logits.shape[0]} logits rows vs {labels.shape} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label out of range")
    logp = tape.log_softmax(logits, 1.0, floor=PROB_FLOOR)
    return tape.scale(tape.mean(tape.pick(logp, labels)), -1.0)


def kl_node(tape: Tape, logits: Node, target_logits, tau: float, order: str = KL_TARGET_FIRST) -> Node:
    """Batch-mean KL between tempered target and tempered hypothesis distributions.

    ``target_logits`` is a plain array: nothing flows back into whatever produced it.
    """
    t = tempered_softmax(target_logits, tau)
    if t.shape != logits.shape:
        raise ValueError(f"batch mismatch: target {t.shape} vs hypothesis {logits.shape}")
    batch = logits.shape[0]
    if order == KL_TARGET_FIRST:
        logp = tape.log_softmax(logits, tau, floor=PROB_FLOOR)
        cross = tape.sum(tape.mul(logp, tape.const(t)))
        entropy_term = float(np.sum(_xlogx(t)))
        return tape.scale(tape.add(cross, tape.const(-entropy_term)), -1.0 / batch)
    if order == KL_PREDICTION_FIRST:
        logp = tape.log_softmax(logits, tau)
        p = tape.exp(logp)
        diff = tape.add(logp, tape.const(-np.log(np.maximum(t, PROB_FLOOR))))
        return tape.scale(tape.sum(tape.mul(p, diff)), 1.0 / batch)
    raise ValueError(f"unknown KL order {order!r}")


def domain_loss(tape: Tape, logits: Node, labels, target_logits=None, alpha: float = 1.0,
                tau: float = 1.0, kl_order: str = KL_TARGET_FIRST) -> tuple[Node, LossBreakdown]:
    """Composite loss node for one domain's batch and its scalar breakdown.

    With ``alpha == 1`` the node is the cross-entropy node itself, so the
    gradient is exactly that of plain ERM; the KL is still reported when
    targets are given.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    ce = ce_node(tape, logits, labels)
    if alpha == 1.0:
        kl = 0.0
        if target_logits is not None:
            kl = batch_kl(target_logits, logits.value, tau, kl_order)
        return ce, LossBreakdown(float(ce.value), kl, float(ce.value), alpha, tau)
    if target_logits is None:
        raise ValueError("alpha < 1 requires diverse-target logits")
    kl = kl_node(tape, logits, target_logits, tau, kl_order)
    total = tape.add(tape.scale(ce, alpha), tape.scale(kl, (1.0 - alpha) * tau * tau))
    return total, LossBreakdown(float(ce.value), max(0.0, float(kl.value)), float(total.value), alpha, tau)


def batch_kl(target_logits, logits, tau: float, order: str = KL_TARGET_FIRST) -> float:
    """Batch-mean KL computed without a tape."""
    t = tempered_softmax(target_logits, tau)
    p = tempered_softmax(logits, tau)
    if t.shape != p.shape:
        raise ValueError(f"batch mismatch: {t.shape} vs {p.shape}")
    if order == KL_PREDICTION_FIRST:
        t, p = p, t
    return float(np.mean([kl_divergence(a, b) for a, b in zip(t, p)]))
