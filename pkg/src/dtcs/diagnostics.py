"""Generalization stability, loss fluctuation, gradient conflict and MMD diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GS_EQ12 = "eq12"
GS_SAMPLE_STD = "sample_std"


@dataclass(frozen=True)
class StabilityReport:
    performances: tuple[float, ...]
    mean: float
    gs: float
    variant: str


def gs(performances, variant: str = GS_SAMPLE_STD) -> float:
    """Dispersion of per-target performances.

    ``eq12``: ``sqrt(sum (GP_i - mean)^2)``; ``sample_std``: the same divided by
    ``M - 1`` under the root, which is what the published table values match.
    """
    gp = np.asarray(performances, dtype=np.float64)
    if gp.ndim != 1 or gp.size < 2:
        raise ValueError(f"need at least 2 performances, got {gp.size}")
    ss = float(np.sum((gp - gp.mean()) ** 2))
    if variant == GS_EQ12:
        return float(np.sqrt(ss))
    if variant == GS_SAMPLE_STD:
        return float(np.sqrt(ss / (gp.size - 1)))
    raise ValueError(f"unknown GS variant {variant!r}")


def stability_report(performances, variant: str = GS_SAMPLE_STD) -> StabilityReport:
    gp = tuple(float(v) for v in performances)
    return StabilityReport(gp, float(np.mean(gp)), gs(gp, variant), variant)


def converged_loss_std(domain_losses, total_losses, start: int) -> tuple[np.ndarray, float]:
    """Sample std (ddof=1) of each domain's loss and of the total loss over rows ``start:``."""
    dl = np.asarray(domain_losses, dtype=np.float64)
    tl = np.asarray(total_losses, dtype=np.float64)
    if dl.ndim == 1:
        dl = dl[:, None]
    if dl.shape[0] != tl.shape[0]:
        raise ValueError("domain and total loss traces differ in length")
    if start < 0 or tl.shape[0] - start < 2:
        raise ValueError(f"need >= 2 iterations after index {start}, trace has {tl.shape[0]}")
    return dl[start:].std(axis=0, ddof=1), float(tl[start:].std(ddof=1))


@dataclass(frozen=True)
class ConflictStats:
    cosine: np.ndarray
    sign_agreement: np.ndarray
    negative_fraction: float
    iteration: int = -1
    zero_norm: tuple[bool, ...] = ()

    def summary(self) -> dict:
        m = self.cosine.shape[0]
        iu = np.triu_indices(m, 1)
        return {
            "neg_frac": self.negative_fraction,
            "mean_cos": float(self.cosine[iu].mean()) if m > 1 else 1.0,
            "sign_agree": float(self.sign_agreement[iu].mean()) if m > 1 else 1.0,
        }


def conflict_stats(grads, iteration: int = -1) -> ConflictStats:
    """Pairwise cosine and sign agreement of per-domain flattened gradients.

    A zero component agrees with any sign. A zero-norm gradient has cosine 0 with
    every other gradient and is flagged in ``zero_norm``.
    """
    g = np.asarray(grads, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("expected a [domains x parameters] matrix of equal-length gradients")
    m = g.shape[0]
    norms = np.linalg.norm(g, axis=1)
    zero = norms == 0
    safe = np.where(zero, 1.0, norms)
    unit = g / safe[:, None]
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    cos[zero, :] = 0.0
    cos[:, zero] = 0.0
    np.fill_diagonal(cos, 1.0)
    s = np.sign(g)
    agree = np.empty((m, m))
    for i in range(m):
        for j in range(m):
            agree[i, j] = np.mean((s[i] == s[j]) | (s[i] == 0) | (s[j] == 0))
    iu = np.triu_indices(m, 1)
    neg = float(np.mean(cos[iu] < 0)) if m > 1 else 0.0
    return ConflictStats(cos, agree, neg, iteration, tuple(bool(z) for z in zero))


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def median_heuristic_gamma(p, q) -> float:
    """``1 / median`` of the pooled nonzero pairwise squared distances."""
    z = np.concatenate([np.atleast_2d(p), np.atleast_2d(q)]).astype(np.float64)
    d = _sq_dists(z, z)[np.triu_indices(z.shape[0], 1)]
    d = d[d > 0]
    if d.size == 0:
        return 1.0
    return 1.0 / float(np.median(d))


def mmd_squared(p, q, gamma: float | None = None) -> float:
    """Biased (V-statistic) MMD^2 with ``k(x, y) = exp(-gamma |x - y|^2)``, clamped at 0."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    if p.shape[0] == 0 or q.shape[0] == 0:
        raise ValueError("sample sets must be nonempty")
    if p.shape[1] != q.shape[1]:
        raise ValueError(f"dimension mismatch: {p.shape[1]} vs {q.shape[1]}")
    if gamma is None:
        gamma = median_heuristic_gamma(p, q)
    if not gamma > 0:
        raise ValueError(f"kernel bandwidth gamma must be positive, got {gamma}")
    kpp = np.exp(-gamma * _sq_dists(p, p)).mean()
    kqq = np.exp(-gamma * _sq_dists(q, q)).mean()
    kpq = np.exp(-gamma * _sq_dists(p, q)).mean()
    return max(0.0, float(kpp + kqq - 2.0 * kpq))


def evaluate(model, domain) -> float:
    """Accuracy of ``argmax`` predictions (ties to the lowest class index)."""
    if len(domain) == 0:
        raise ValueError("cannot evaluate on an empty split")
    pred = np.argmax(model.predict(domain.x), axis=1)
    return float(np.mean(pred == domain.y))
