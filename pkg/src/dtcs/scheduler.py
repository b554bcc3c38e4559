"""Domain contribution balancing, the DTCS training loop and the ERM / Agr-sum baselines.

One iteration of :func:`run_training` visits the source domains in a fixed
order. For each domain it samples a batch, asks the prophet for soft targets
and builds the composite loss; the domain weights are then refreshed from the
new losses and the weighted sum is minimised with one SGD step.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from dtcs import diagnostics
from dtcs.data import Domain, DomainBatch, Split, make_samplers
from dtcs.losses import KL_TARGET_FIRST, LossBreakdown, ce_node, domain_loss
from dtcs.nn import (MlpModel, Node, SgdOptimizer, Tape, backward, forward_with_features, grads_for,
                     milestone_factor, sgd_step)
from dtcs.prophets import (ProphetSpec, advance_epoch, mc_head_loss, mc_prophet, mp_prophet,
                           pretrain_experts, soft_targets)

METHODS = ("dtcs", "erm", "agr_sum")

# SGD step size for from-scratch MLPs on the desk benchmarks
DESK_LR = 0.05

# grid searched by `sweep` unless overridden
SEARCH_SPACE = {
    "lr": [5e-3, 3e-3, 1e-3, 5e-4],
    "tau": [0.5, 1.0, 2.0, 5.0],
    "alpha": [0.1, 0.2, 0.5],
    "momentum": [0.9, 1.0],
}


# ---------------------------------------------------------------------------
# contribution balance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DomainWeights:
    weights: np.ndarray
    momentum: float = 0.9
    previous: np.ndarray | None = None

    @classmethod
    def uniform(cls, num_domains: int, momentum: float = 0.9) -> "DomainWeights":
        if num_domains < 1:
            raise ValueError("need at least one domain")
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
        return cls(np.full(num_domains, 1.0 / num_domains), momentum)


def dcb_update(state: DomainWeights, losses: Sequence[float], momentum: float | None = None) -> DomainWeights:
    """Momentum update of the domain weights from the relative inverse training rate.

    ``rate_i = L_i(n) / L_i(n-1)``; ``adj_i = rate_i / sum(rate)``;
    ``w_i = m * adj_i + (1 - m) * w_i``. On the first call there is no previous
    loss, so only the losses are recorded. ``momentum`` overrides ``state.momentum``
    (used for the decayed coefficient) without changing the stored one.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.shape != state.weights.shape:
        raise ValueError(f"expected {state.weights.size} losses, got {losses.shape}")
    if not np.all(losses > 0) or not np.all(np.isfinite(losses)):
        raise ValueError(f"domain losses must be positive and finite, got {losses.tolist()}")
    if state.previous is None:
        return dataclasses.replace(state, previous=losses)
    m = state.momentum if momentum is None else momentum
    rate = losses / state.previous
    adj = rate / rate.sum()
    return dataclasses.replace(state, weights=m * adj + (1.0 - m) * state.weights, previous=losses)


def weighted_total_loss(tape: Tape, losses: Sequence[Node], weights: Sequence[float]) -> Node:
    """``sum_i w_i L_i`` with the weights entering as constants."""
    weights = [float(w) for w in weights]
    if len(losses) != len(weights):
        raise ValueError(f"{len(losses)} losses for {len(weights)} weights")
    if not losses:
        raise ValueError("no losses to combine")
    total = tape.scale(losses[0], weights[0])
    for node, w in zip(losses[1:], weights[1:]):
        total = tape.add(total, tape.scale(node, w))
    return total


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def erm_step(batches: Sequence[DomainBatch], model: MlpModel, optimizer: SgdOptimizer,
             step: int = 0, total: int = 1) -> tuple[MlpModel, list[float]]:
    """One SGD step on the mean of the per-domain cross-entropies."""
    tape = Tape()
    nodes, ces = [], []
    for b in batches:
        logits, _, _ = forward_with_features(model, b.x, tape)
        node, br = domain_loss(tape, logits, b.y)
        nodes.append(node)
        ces.append(br.ce)
    loss = weighted_total_loss(tape, nodes, [1.0 / len(nodes)] * len(nodes))
    return sgd_step(model, grads_for(model, backward(tape, loss)), optimizer, step, total), ces


def agreement_mask(grads: np.ndarray) -> np.ndarray:
    """Components where every domain's gradient is strictly positive or every one strictly negative."""
    grads = np.asarray(grads, dtype=np.float64)
    return np.all(grads > 0, axis=0) | np.all(grads < 0, axis=0)


def agr_sum_combine(grads) -> np.ndarray:
    """Sum of per-domain gradients on sign-unanimous components, zero elsewhere."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.ndim != 2:
        raise ValueError("expected a [domains x parameters] gradient matrix")
    return np.where(agreement_mask(grads), grads.sum(axis=0), 0.0)


def agr_sum_step(domain_grads, model: MlpModel, optimizer: SgdOptimizer, step: int = 0,
                 total: int = 1) -> MlpModel:
    """SGD step along :func:`agr_sum_combine` of flattened per-domain gradients."""
    combined = agr_sum_combine(domain_grads)
    if combined.size != model.num_params:
        raise ValueError(f"gradient length {combined.size} != parameter count {model.num_params}")
    return sgd_step(model, model.unflatten(combined).params, optimizer, step, total)


# ---------------------------------------------------------------------------
# plan and record
# ---------------------------------------------------------------------------


@dataclass
class TrainPlan:
    method: str = "dtcs"
    prophet: str | None = "ME"
    alpha: float = 0.1
    tau: float = 2.0
    momentum: float = 0.9
    dcb: bool = True
    iterations: int = 3000
    epoch_length: int = 50
    batch_size: int = 32
    hidden: tuple[int, ...] = (64, 64)
    optimizer: SgdOptimizer = field(default_factory=lambda: SgdOptimizer(lr=DESK_LR))
    momentum_milestones: tuple[float, ...] = (0.6, 0.8)
    momentum_decay: float = 0.1
    kl_order: str = KL_TARGET_FIRST
    expert_epochs: int = 200
    expert_optimizer: SgdOptimizer | None = None
    mc_weight: float = 1.0
    conflict_every: int = 0  # 0 disables per-domain gradient diagnostics
    # gradients probed for conflict statistics: per-domain "ce" or the per-domain training "objective"
    conflict_loss: str = "ce"

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.method == "dtcs":
            if self.prophet is None or self.prophet.upper() not in ("ME", "SE", "MP", "MC"):
                raise ValueError(f"dtcs needs a prophet in ME/SE/MP/MC, got {self.prophet!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.epoch_length < 1 or self.batch_size < 1:
            raise ValueError("epoch length and batch size must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {self.momentum}")
        if self.conflict_every < 0:
            raise ValueError("conflict_every must be nonnegative")
        if self.conflict_loss not in ("ce", "objective"):
            raise ValueError(f"conflict_loss must be 'ce' or 'objective', got {self.conflict_loss!r}")

    @property
    def prophet_kind(self) -> str | None:
        return None if self.prophet is None else self.prophet.upper()

    def momentum_at(self, step: int) -> float:
        return self.momentum * milestone_factor(step, self.iterations, self.momentum_milestones,
                                                self.momentum_decay)


@dataclass
class RunRecord:
    iterations: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    def lines(self) -> list[dict]:
        """Iteration objects with the evaluation objects interleaved after their epoch's last iteration."""
        out, j = [], 0
        for row in self.iterations:
            out.append(row)
            while j < len(self.evals) and self.evals[j]["iter"] == row["iter"]:
                out.append(self.evals[j])
                j += 1
        out.extend(self.evals[j:])
        return out

    @classmethod
    def from_lines(cls, lines: Sequence[dict]) -> "RunRecord":
        rec = cls()
        for obj in lines:
            (rec.evals if "eval" in obj else rec.iterations).append(obj)
        return rec

    def domain_losses(self, key: str = "composite") -> np.ndarray:
        return np.array([[d[key] for d in row["domain_losses"]] for row in self.iterations])

    def total_losses(self) -> np.ndarray:
        return np.array([row["total_loss"] for row in self.iterations])

    def weights(self) -> np.ndarray:
        return np.array([row["weights"] for row in self.iterations])

    def conflict_rows(self) -> list[dict]:
        return [row for row in self.iterations if "conflict" in row]

    def final_eval(self) -> dict | None:
        return self.evals[-1]["eval"] if self.evals else None


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class TrainingFailure(RuntimeError):
    """Numeric failure mid-run; carries the record and model up to the failing iteration."""

    def __init__(self, message: str, iteration: int, record: "RunRecord", model: MlpModel) -> None:
        super().__init__(message)
        self.iteration = iteration
        self.record = record
        self.model = model


def build_prophet(plan: TrainPlan, model: MlpModel, train: Sequence[Domain], seed: int) -> ProphetSpec | None:
    kind = plan.prophet_kind
    if plan.method != "dtcs":
        return None
    if kind == "MP":
        return mp_prophet()
    if kind == "MC":
        return mc_prophet(model, len(train), seed, plan.mc_weight)
    if plan.alpha == 1.0:
        return None  # targets never enter the loss
    opt = plan.expert_optimizer or plan.optimizer
    return pretrain_experts(kind, train, model.dims, opt, plan.expert_epochs, plan.batch_size, seed)


def _flat(grads: dict[int, np.ndarray], model: MlpModel) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads_for(model, grads)])


def run_training(plan: TrainPlan, data: Split, seed: int, target: Domain | None = None,
                 prophet: ProphetSpec | None = None,
                 on_step: Callable[[int, MlpModel], None] | None = None) -> tuple[MlpModel, RunRecord]:
    """Train a hypothesis on ``data.train`` and evaluate on ``data.val`` / ``target`` every epoch.

    ``prophet`` may be supplied pre-built (e.g. experts shared across runs);
    otherwise it is constructed from the plan. ``on_step(n, model)`` sees the
    parameters after every update.
    """
    plan.validate()
    train = list(data.train)
    num_domains = len(train)
    if num_domains < 2:
        raise ValueError(f"training needs at least 2 source domains, got {num_domains}")
    for d in train:
        if len(d) < 2 * plan.batch_size:
            raise ValueError(f"domain {d.id}: {len(d)} training samples < 2 x batch size {plan.batch_size}")
    num_features = train[0].x.shape[1]
    num_classes = 1 + int(max(d.y.max() for d in train))
    model = MlpModel.init((num_features, *plan.hidden, num_classes), seed, key="hypothesis")

    if prophet is None:
        prophet = build_prophet(plan, model, train, seed)
    elif plan.method != "dtcs":
        raise ValueError(f"method {plan.method} does not take a prophet")
    elif prophet.kind != plan.prophet_kind:
        raise ValueError(f"plan asks for prophet {plan.prophet_kind}, got {prophet.kind}")
    if plan.method == "dtcs" and plan.alpha < 1.0 and prophet is None:
        raise ValueError("dtcs with alpha < 1 needs a prophet")
    if prophet is not None:
        prophet.check_compatible(model, num_domains)

    record = RunRecord()
    samplers = make_samplers(train, plan.batch_size, seed)
    state = DomainWeights.uniform(num_domains, plan.momentum)
    balance = plan.method == "dtcs" and plan.dcb
    total_steps = plan.iterations

    for n in range(total_steps):
        epoch = n // plan.epoch_length
        m_now = plan.momentum_at(n)
        tape = Tape()
        nodes: list[Node] = []
        breakdowns: list[LossBreakdown] = []
        aux: list[Node] = []
        domain_logits = []
        batches = [s.sample_batch() for s in samplers]
        # one pass over the stacked batches, then per-domain row blocks
        bounds = np.cumsum([0] + [b.y.shape[0] for b in batches])
        stacked_logits, stacked_features, _ = forward_with_features(
            model, np.concatenate([b.x for b in batches]), tape)
        for i, batch in enumerate(batches):
            logits = tape.rows(stacked_logits, bounds[i], bounds[i + 1])
            if plan.method == "dtcs":
                targets = soft_targets(prophet, batch, model) if prophet is not None else None
                # MP has no previous epoch during epoch 0: fall back to plain CE
                alpha = plan.alpha if targets is not None else 1.0
                node, br = domain_loss(tape, logits, batch.y, None if targets is None else targets.logits,
                                       alpha, plan.tau, plan.kl_order)
                if prophet is not None and prophet.kind == "MC":
                    features = tape.rows(stacked_features, bounds[i], bounds[i + 1])
                    aux.append(mc_head_loss(tape, prophet, features, batch))
            else:
                node, br = domain_loss(tape, logits, batch.y)
            nodes.append(node)
            breakdowns.append(br)
            domain_logits.append((logits, batch.y))

        composite = [b.composite for b in breakdowns]
        if not np.all(np.isfinite(composite)):
            raise TrainingFailure(f"iteration {n}: non-finite domain loss {composite}", n, record, model)
        if balance:
            try:
                state = dcb_update(state, composite, momentum=m_now)
            except ValueError as exc:
                raise TrainingFailure(f"iteration {n}: {exc}", n, record, model) from exc
        weights = state.weights
        total = weighted_total_loss(tape, nodes, weights)
        row = {
            "iter": n,
            "epoch": epoch,
            "domain_losses": [b.as_dict() for b in breakdowns],
            "weights": [float(w) for w in weights],
            "total_loss": float(total.value),
            "lr": plan.optimizer.lr_at(n, total_steps),
            "m": m_now,
        }

        domain_grads = None
        if plan.method == "agr_sum":
            domain_grads = np.stack([_flat(backward(tape, node), model) for node in nodes])
        if plan.conflict_every and n % plan.conflict_every == 0:
            if plan.conflict_loss == "ce" and plan.method == "dtcs":
                probe = [ce_node(tape, lg, y) for lg, y in domain_logits]
                conflict_grads = np.stack([_flat(backward(tape, c), model) for c in probe])
            elif domain_grads is not None:
                conflict_grads = domain_grads
            else:
                conflict_grads = np.stack([_flat(backward(tape, node), model) for node in nodes])
            row["conflict"] = diagnostics.conflict_stats(conflict_grads, iteration=n).summary()

        if plan.method == "agr_sum":
            model = agr_sum_step(domain_grads, model, plan.optimizer, n, total_steps)
        else:
            objective = total
            if aux:
                aux_sum = weighted_total_loss(tape, aux, [prophet.mc_weight] * len(aux))
                objective = tape.add(total, aux_sum)
                row["mc_head_loss"] = [float(a.value) for a in aux]
            grads = backward(tape, objective)
            if aux:
                heads = tuple(sgd_step(h, grads_for(h, grads), plan.optimizer, n, total_steps)
                              for h in prophet.heads)
                prophet = dataclasses.replace(prophet, heads=heads)
            model = sgd_step(model, grads_for(model, grads), plan.optimizer, n, total_steps)

        record.iterations.append(row)
        if on_step is not None:
            on_step(n, model)
        if (n + 1) % plan.epoch_length == 0 or n == total_steps - 1:
            record.evals.append({"iter": n, "epoch": epoch, "eval": evaluate_split(model, data, target)})
            if prophet is not None:
                prophet = advance_epoch(prophet, model, epoch)
    return model, record


def evaluate_split(model: MlpModel, data: Split, target: Domain | None) -> dict:
    out = {
        "val_acc": [diagnostics.evaluate(model, d) for d in data.val],
        "pooled_val_acc": diagnostics.evaluate(model, data.pooled_val()),
    }
    if target is not None:
        out["target_acc"] = diagnostics.evaluate(model, target)
    return out


def grid_points(grid: dict[str, Sequence[float]]) -> list[dict[str, float]]:
    """Cartesian product in lexicographic key order (the tie-break order for selection)."""
    keys = sorted(grid)
    points = [{}]
    for k in keys:
        points = [dict(p, **{k: v}) for p in points for v in grid[k]]
    return points

