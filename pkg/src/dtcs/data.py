"""Multi-domain datasets: synthetic rotated Gaussian mixtures, CSV I/O, splits, sampling."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dtcs.rng import stream

UID_STRIDE = 10_000_000

# fig1-bench class layout (after the shift): ring radius and angle per class
RING_RADII = (0.9, 2.1, 3.3, 4.5)
RING_ANGLES = (0.0, 90.0, 180.0, 270.0)


@dataclass(frozen=True)
class Domain:
    """Samples of one domain. ``uids`` tag every sample globally (domain id * stride + row)."""

    id: int
    x: np.ndarray
    y: np.ndarray
    uids: np.ndarray
    name: str = ""

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def subset(self, index: np.ndarray) -> "Domain":
        return Domain(self.id, self.x[index], self.y[index], self.uids[index], self.name)


@dataclass(frozen=True)
class DomainBatch:
    x: np.ndarray
    y: np.ndarray
    domain: int  # position among the training (source) domains
    uids: np.ndarray


@dataclass
class MultiDomainDataset:
    domains: list[Domain]
    num_features: int
    num_classes: int

    def __post_init__(self) -> None:
        ids = [d.id for d in self.domains]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate domain ids {ids}")
        for d in self.domains:
            if d.x.ndim != 2 or d.x.shape[1] != self.num_features:
                raise ValueError(f"domain {d.id}: features have shape {d.x.shape}, expected d={self.num_features}")
            if d.y.shape != (d.x.shape[0],):
                raise ValueError(f"domain {d.id}: {d.y.shape[0]} labels for {d.x.shape[0]} samples")
            present = set(np.unique(d.y).tolist())
            missing = set(range(self.num_classes)) - present
            if missing:
                raise ValueError(f"domain {d.id}: classes {sorted(missing)} absent")
            if present - set(range(self.num_classes)):
                raise ValueError(f"domain {d.id}: labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.domains)

    def domain(self, domain_id: int) -> Domain:
        for d in self.domains:
            if d.id == domain_id:
                return d
        raise KeyError(f"no domain with id {domain_id}; available {[d.id for d in self.domains]}")

    def check_batch_size(self, batch_size: int) -> None:
        for d in self.domains:
            if len(d) < 2 * batch_size:
                raise ValueError(f"domain {d.id} has {len(d)} samples, fewer than 2 x batch size {batch_size}")


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Per-domain rotation + translation of a shared set of class-conditional Gaussians.

    Domain ``i``, class ``c`` draws from ``N(R_i mu_c + t_i, sigma^2 I)``; the
    rotation acts on the first two coordinates.
    """

    num_domains: int
    num_classes: int
    dim: int
    class_means: list[list[float]]
    sigma: float
    rotations_deg: list[float]
    translations: list[list[float]]
    samples_per_domain: int
    label_noise: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if not self.sigma > 0:
            raise ValueError(f"degenerate covariance: sigma must be positive, got {self.sigma}")
        if self.num_domains < 1 or self.num_classes < 2 or self.dim < 2:
            raise ValueError("need >= 1 domain, >= 2 classes and dim >= 2")
        if np.asarray(self.class_means).shape != (self.num_classes, self.dim):
            raise ValueError(f"class_means must be {self.num_classes} x {self.dim}")
        if len(self.rotations_deg) != self.num_domains:
            raise ValueError("one rotation per domain required")
        if np.asarray(self.translations).shape != (self.num_domains, self.dim):
            raise ValueError(f"translations must be {self.num_domains} x {self.dim}")
        if self.samples_per_domain < self.num_classes:
            raise ValueError("samples_per_domain must cover every class")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError(f"label noise must lie in [0, 1), got {self.label_noise}")

    @classmethod
    def fig1_bench(cls, seed: int = 0) -> "SyntheticSpec":
        """Four 2-D domains, four classes.

        Domain i is the base layout shifted by 1.5 along x and then rotated by
        40*i degrees about the origin, so class c sits on a ring of radius
        RING_RADII[c] in every domain, at a domain-dependent angle: each class is
        multi-modal across domains while the union of domains stays separable.
        """
        rotations = [0.0, 40.0, 80.0, 120.0]
        shift = 1.5
        means = []
        for radius, angle in zip(RING_RADII, RING_ANGLES):
            a = math.radians(angle)
            means.append([radius * math.cos(a) - shift, radius * math.sin(a)])
        shifts = [[shift * math.cos(math.radians(r)), shift * math.sin(math.radians(r))] for r in rotations]
        return cls(num_domains=4, num_classes=4, dim=2, class_means=means, sigma=0.35,
                   rotations_deg=rotations, translations=shifts, samples_per_domain=600,
                   label_noise=0.05, seed=seed)

    def to_dict(self) -> dict:
        return {
            "num_domains": self.num_domains, "num_classes": self.num_classes, "dim": self.dim,
            "class_means": [list(map(float, m)) for m in self.class_means], "sigma": self.sigma,
            "rotations_deg": list(map(float, self.rotations_deg)),
            "translations": [list(map(float, t)) for t in self.translations],
            "samples_per_domain": self.samples_per_domain, "label_noise": self.label_noise,
            "seed": self.seed,
        }


def rotation_matrix(dim: int, degrees: float) -> np.ndarray:
    r = np.eye(dim)
    a = math.radians(degrees)
    r[:2, :2] = [[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]]
    return r


def class_counts(n: int, num_classes: int) -> list[int]:
    """Stratified counts; the remainder goes to the lowest class indices."""
    return [n // num_classes + (1 if c < n % num_classes else 0) for c in range(num_classes)]


def generate_synthetic(spec: SyntheticSpec) -> MultiDomainDataset:
    spec.validate()
    means = np.asarray(spec.class_means, dtype=np.float64)
    domains = []
    for i in range(spec.num_domains):
        rot = rotation_matrix(spec.dim, spec.rotations_deg[i])
        shift = np.asarray(spec.translations[i], dtype=np.float64)
        xs, ys = [], []
        for c, n_c in enumerate(class_counts(spec.samples_per_domain, spec.num_classes)):
            rng = stream(spec.seed, "data", i, c)
            centre = rot @ means[c] + shift
            xs.append(centre + spec.sigma * rng.standard_normal((n_c, spec.dim)))
            ys.append(np.full(n_c, c, dtype=np.int64))
        y = np.concatenate(ys)
        if spec.label_noise > 0:
            rng = stream(spec.seed, "noise", i)
            flip = rng.random(y.shape[0]) < spec.label_noise
            offset = rng.integers(1, spec.num_classes, size=y.shape[0])
            y = np.where(flip, (y + offset) % spec.num_classes, y)
        n = y.shape[0]
        domains.append(Domain(i, np.concatenate(xs), y, i * UID_STRIDE + np.arange(n, dtype=np.int64),
                              name=f"rot{spec.rotations_deg[i]:g}"))
    return MultiDomainDataset(domains, spec.dim, spec.num_classes)


# ---------------------------------------------------------------------------
# splits and protocols
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train fraction must lie in (0, 1), got {self.train_fraction}")


@dataclass
class Split:
    train: list[Domain]
    val: list[Domain]

    def pooled_val(self) -> Domain:
        """All source validation parts together: the model-selection set."""
        return Domain(-1, np.concatenate([d.x for d in self.val]), np.concatenate([d.y for d in self.val]),
                      np.concatenate([d.uids for d in self.val]), name="pooled-val")


def stratified_counts(n: int, train_fraction: float) -> tuple[int, int]:
    n_val = math.floor(n * (1.0 - train_fraction) + 1e-9)
    return n - n_val, n_val


def split(dataset: MultiDomainDataset, plan: SplitPlan) -> Split:
    """Per-domain, per-class train/val split; remainders go to train."""
    train, val = [], []
    for d in dataset.domains:
        tr_idx, va_idx = [], []
        for c in range(dataset.num_classes):
            idx = np.flatnonzero(d.y == c)
            if idx.size < 2:
                raise ValueError(f"domain {d.id}: class {c} has {idx.size} samples, need >= 2 to split")
            idx = stream(plan.seed, "split", d.id, c).permutation(idx)
            n_tr, _ = stratified_counts(idx.size, plan.train_fraction)
            tr_idx.append(idx[:n_tr])
            va_idx.append(idx[n_tr:])
        train.append(d.subset(np.sort(np.concatenate(tr_idx))))
        val.append(d.subset(np.sort(np.concatenate(va_idx))))
    return Split(train, val)


def leave_one_out(dataset: MultiDomainDataset, target_id: int) -> tuple[MultiDomainDataset, Domain]:
    target = dataset.domain(target_id)
    sources = [d for d in dataset.domains if d.id != target_id]
    if len(sources) == 1:
        warnings.warn("leave-one-out with a single source domain (M = 1)", stacklevel=2)
    return MultiDomainDataset(sources, dataset.num_features, dataset.num_classes), target


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def export_csv(dataset: MultiDomainDataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["domain", "label"] + [f"f{k}" for k in range(dataset.num_features)])
        for d in dataset.domains:
            for xi, yi in zip(d.x, d.y):
                writer.writerow([d.id, int(yi)] + [repr(float(v)) for v in xi])


def ingest_csv(path: str | Path, num_features: int | None = None) -> MultiDomainDataset:
    """Read ``domain,label,f0,f1,...``; errors name the offending line."""
    rows: dict[str, list[tuple[int, list[float]]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if header[:2] != ["domain", "label"] or len(header) < 3:
            raise ValueError(f"{path}: header must start with domain,label followed by features")
        width = len(header) - 2
        if num_features is not None and width != num_features:
            raise ValueError(f"{path}: expected {num_features} features, header has {width}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                label = int(row[1])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: label {row[1]!r} is not an integer") from None
            if label < 0:
                raise ValueError(f"{path}:{lineno}: negative label {label}")
            try:
                feats = [float(v) for v in row[2:]]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric feature") from None
            if not all(math.isfinite(v) for v in feats):
                raise ValueError(f"{path}:{lineno}: non-finite feature")
            rows.setdefault(row[0].strip(), []).append((label, feats))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    names = list(rows)
    if all(n.lstrip("-").isdigit() for n in names):
        names.sort(key=int)
    num_classes = 1 + max(lab for samples in rows.values() for lab, _ in samples)
    domains = []
    for i, name in enumerate(names):
        samples = rows[name]
        did = int(name) if name.lstrip("-").isdigit() and int(name) >= 0 else i
        y = np.array([lab for lab, _ in samples], dtype=np.int64)
        x = np.array([f for _, f in samples], dtype=np.float64).reshape(len(samples), width)
        domains.append(Domain(did, x, y, did * UID_STRIDE + np.arange(len(samples), dtype=np.int64), name))
    return MultiDomainDataset(domains, width, num_classes)


# ---------------------------------------------------------------------------
# batch sampling
# ---------------------------------------------------------------------------


@dataclass
class DomainSampler:
    """Epoch-shuffled sampling without replacement from one training domain.

    A pass ends when fewer than ``batch_size`` unseen samples remain; the
    leftovers are dropped and a fresh permutation starts.
    """

    domain: Domain
    batch_size: int
    rng: np.random.Generator
    position: int  # index among the source domains
    _order: np.ndarray = field(default=None, repr=False)
    _cursor: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.batch_size > len(self.domain):
            raise ValueError(f"batch size {self.batch_size} exceeds domain size {len(self.domain)}")

    def sample_batch(self) -> DomainBatch:
        if self._order is None or self._cursor + self.batch_size > self._order.size:
            self._order = self.rng.permutation(len(self.domain))
            self._cursor = 0
        idx = self._order[self._cursor: self._cursor + self.batch_size]
        self._cursor += self.batch_size
        d = self.domain
        return DomainBatch(d.x[idx], d.y[idx], self.position, d.uids[idx])


def make_samplers(train: Sequence[Domain], batch_size: int, seed: int) -> list[DomainSampler]:
    return [DomainSampler(d, batch_size, stream(seed, "sample", d.id), i) for i, d in enumerate(train)]
