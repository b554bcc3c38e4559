"""Diverse-target prophets: the models that supply soft targets to the hypothesis.

* ``ME`` one frozen expert per source domain, routed by the batch's domain.
* ``SE`` one frozen expert trained on all source domains.
* ``MP`` the hypothesis itself as it was at the end of the previous epoch.
* ``MC`` one linear head per domain on top of the hypothesis' own features.

Soft targets are always returned as plain arrays, never as tape nodes.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dtcs.data import Domain, DomainBatch, DomainSampler
from dtcs.losses import ce_node
from dtcs.nn import (MlpModel, Node, SgdOptimizer, Tape, backward, forward, forward_with_features,
                     grads_for, load_checkpoint, save_checkpoint, sgd_step)
from dtcs.rng import stream

KINDS = ("ME", "SE", "MP", "MC")


@dataclass(frozen=True)
class ProphetSpec:
    kind: str
    experts: tuple[MlpModel, ...] = ()
    snapshot: MlpModel | None = None
    heads: tuple[MlpModel, ...] = ()
    mc_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown prophet kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "SE" and len(self.experts) != 1:
            raise ValueError("SE prophet holds exactly one expert")
        if self.kind == "ME" and not self.experts:
            raise ValueError("ME prophet needs one expert per source domain")
        if self.kind == "MC" and not self.heads:
            raise ValueError("MC prophet needs one head per source domain")

    @property
    def num_domains(self) -> int | None:
        if self.kind == "ME":
            return len(self.experts)
        if self.kind == "MC":
            return len(self.heads)
        return None

    def check_compatible(self, model: MlpModel, num_domains: int) -> None:
        """Raise if this prophet cannot serve ``model`` trained on ``num_domains`` sources."""
        if self.num_domains is not None and self.num_domains != num_domains:
            raise ValueError(f"{self.kind} prophet has {self.num_domains} members for {num_domains} source domains")
        for e in self.experts:
            if e.dims[0] != model.dims[0] or e.dims[-1] != model.dims[-1]:
                raise ValueError(f"expert dims {e.dims} incompatible with hypothesis dims {model.dims}")
        if self.snapshot is not None and self.snapshot.dims != model.dims:
            raise ValueError("MP snapshot shape differs from the hypothesis")
        feat = model.dims[-2]
        for h in self.heads:
            if h.dims != (feat, model.dims[-1]):
                raise ValueError(f"MC head dims {h.dims}, expected {(feat, model.dims[-1])}")


@dataclass(frozen=True)
class SoftTargetBatch:
    logits: np.ndarray = field(repr=False)
    kind: str
    domain: int


def mp_prophet() -> ProphetSpec:
    return ProphetSpec("MP")


def mc_prophet(model: MlpModel, num_domains: int, seed: int, mc_weight: float = 1.0,
               zero: bool = False) -> ProphetSpec:
    """One affine head per domain reading the hypothesis' last hidden layer."""
    dims = (model.dims[-2], model.dims[-1])
    heads = tuple(MlpModel.zeros(dims) if zero else MlpModel.init(dims, seed, key=f"mc-head-{i}")
                  for i in range(num_domains))
    return ProphetSpec("MC", heads=heads, mc_weight=mc_weight)


def _train_expert(model: MlpModel, domains: Sequence[Domain], optimizer: SgdOptimizer,
                  epochs: int, batch_size: int, seed: int, key: str) -> MlpModel:
    """Mini-batch SGD on the mean per-domain cross-entropy."""
    samplers = [DomainSampler(d, min(batch_size, len(d)), stream(seed, "expert-sample", key, d.id), i)
                for i, d in enumerate(domains)]
    steps_per_epoch = max(1, max(len(d) for d in domains) // batch_size)
    total = epochs * steps_per_epoch
    for step in range(total):
        tape = Tape()
        losses = []
        for s in samplers:
            batch = s.sample_batch()
            logits, _ = forward(model, batch.x, tape)
            losses.append(ce_node(tape, logits, batch.y))
        loss = losses[0]
        for extra in losses[1:]:
            loss = tape.add(loss, extra)
        if len(losses) > 1:
            loss = tape.scale(loss, 1.0 / len(losses))
        model = sgd_step(model, grads_for(model, backward(tape, loss)), optimizer, step, total)
    return model


def pretrain_experts(kind: str, domains: Sequence[Domain], dims: Sequence[int], optimizer: SgdOptimizer,
                     epochs: int = 200, batch_size: int = 32, seed: int = 0) -> ProphetSpec:
    """Train and freeze the ME (one per domain) or SE (one for all) experts."""
    kind = kind.upper()
    if kind not in ("ME", "SE"):
        raise ValueError(f"only ME and SE prophets are pretrained, got {kind!r}")
    if not domains:
        raise ValueError("at least one source domain required")
    for d in domains:
        if len(d) == 0:
            raise ValueError(f"domain {d.id} is empty")
    if kind == "ME":
        experts = tuple(
            _train_expert(MlpModel.init(dims, seed, key=f"expert-me-{d.id}"), [d], optimizer, epochs,
                          batch_size, seed, f"me-{d.id}")
            for d in domains)
    else:
        experts = (_train_expert(MlpModel.init(dims, seed, key="expert-se"), list(domains), optimizer,
                                 epochs, batch_size, seed, "se"),)
    return ProphetSpec(kind, experts=experts)


def soft_targets(spec: ProphetSpec, batch: DomainBatch, model: MlpModel | None = None) -> SoftTargetBatch | None:
    """Diverse-target logits for ``batch``; ``None`` for MP before its first snapshot."""
    if spec.kind == "ME":
        if not 0 <= batch.domain < len(spec.experts):
            raise ValueError(f"no expert for domain index {batch.domain}")
        logits = spec.experts[batch.domain].predict(batch.x)
    elif spec.kind == "SE":
        logits = spec.experts[0].predict(batch.x)
    elif spec.kind == "MP":
        if spec.snapshot is None:
            return None
        logits = spec.snapshot.predict(batch.x)
    else:
        if model is None:
            raise ValueError("MC prophet needs the hypothesis model for its features")
        if not 0 <= batch.domain < len(spec.heads):
            raise ValueError(f"no head for domain index {batch.domain}")
        logits = spec.heads[batch.domain].predict(model.features(batch.x))
    return SoftTargetBatch(logits, spec.kind, batch.domain)


def advance_epoch(spec: ProphetSpec, model: MlpModel, epoch: int) -> ProphetSpec:
    """Epoch boundary hook: MP keeps a copy of the current hypothesis, others are unchanged."""
    if spec.kind != "MP":
        return spec
    return dataclasses.replace(spec, snapshot=model.copy())


def mc_head_loss(tape: Tape, spec: ProphetSpec, features: Node, batch: DomainBatch) -> Node:
    """Cross-entropy of the batch domain's head on the (tape-tracked) shared features."""
    head = spec.heads[batch.domain]
    logits, _, _ = forward_with_features(head, features, tape)
    return ce_node(tape, logits, batch.y)


def train_mc_heads(spec: ProphetSpec, batch: DomainBatch, model: MlpModel, optimizer: SgdOptimizer,
                   step: int = 0, total: int = 1) -> tuple[ProphetSpec, list[np.ndarray]]:
    """One SGD step on the head of ``batch.domain``.

    Returns the updated prophet and the gradient of the head loss with respect to
    the hypothesis parameters (non-zero only for the feature extractor), so the
    caller can push it into the shared features.
    """
    if spec.kind != "MC":
        raise ValueError(f"train_mc_heads needs an MC prophet, got {spec.kind}")
    tape = Tape()
    _, features, _ = forward_with_features(model, batch.x, tape)
    loss = mc_head_loss(tape, spec, features, batch)
    grads = backward(tape, loss)
    heads = list(spec.heads)
    head = heads[batch.domain]
    heads[batch.domain] = sgd_step(head, grads_for(head, grads), optimizer, step, total)
    return dataclasses.replace(spec, heads=tuple(heads)), grads_for(model, grads)


def save_experts(spec: ProphetSpec, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    if spec.kind == "ME":
        named = [(str(i), e) for i, e in enumerate(spec.experts)]
    elif spec.kind == "SE":
        named = [("all", spec.experts[0])]
    else:
        named = []
    for domain, expert in named:
        path = directory / f"expert_{spec.kind.lower()}_{domain}.ckpt"
        save_checkpoint(expert, path)
        paths.append(path)
    return paths


def load_experts(kind: str, directory: str | Path, num_domains: int) -> ProphetSpec:
    directory = Path(directory)
    kind = kind.upper()
    if kind == "ME":
        experts = tuple(load_checkpoint(directory / f"expert_me_{i}.ckpt") for i in range(num_domains))
    elif kind == "SE":
        experts = (load_checkpoint(directory / "expert_se_all.ckpt"),)
    else:
        raise ValueError(f"{kind} prophets have no expert checkpoints")
    return ProphetSpec(kind, experts=experts)

