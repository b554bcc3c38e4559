"""Acceptance checks, one PASS/FAIL line per criterion.

The training criteria share one set of full-budget fig1-bench runs (ERM, DTCS
without balancing, DTCS with balancing; 10 seeds x 4 held-out domains), built
once per module. Expect roughly ten minutes on a single core.
"""

import math
import time

import numpy as np
import pytest

from dtcs.data import DomainBatch, SyntheticSpec, generate_synthetic
from dtcs.diagnostics import GS_EQ12, converged_loss_std, gs, mmd_squared
from dtcs.experiment import build_experiment, build_experts, load_config, plan_info, prepare, summarize, with_label
from dtcs.losses import cross_entropy, domain_loss, kl_divergence, tempered_softmax
from dtcs.nn import MlpModel, SgdOptimizer, Tape, backward, forward, grads_for
from dtcs.prophets import ProphetSpec, advance_epoch, mc_prophet, mp_prophet, soft_targets, train_mc_heads
from dtcs.scheduler import DomainWeights, agr_sum_combine, agr_sum_step, dcb_update, run_training, weighted_total_loss
from oracles import FD_TOL, central_difference, mmd_bruteforce, relative_error, spearman
from test_diagnostics import GS_TABLE

SEEDS = range(10)
TARGETS = range(4)

pytestmark = pytest.mark.slow


def base_experiment():
    return build_experiment(load_config(None))


@pytest.fixture(scope="module")
def bench_runs():
    """Per-(label, seed, target) summary rows, per-domain loss stds and timings."""
    base = base_experiment()
    exps = {"A": with_label(base, "A", method="erm"),
            "C": with_label(base, "C", dcb=False),
            "D": with_label(base, "D")}
    rows, domain_std, records, elapsed = {}, {}, {}, {}
    start = time.perf_counter()
    for seed in SEEDS:
        for target in TARGETS:
            data, target_domain = prepare(base.raw, seed, target)
            t0 = time.perf_counter()
            experts = build_experts(exps["D"].plan, data, seed)
            pretrain = time.perf_counter() - t0
            for label, exp in exps.items():
                t0 = time.perf_counter()
                prophet = experts if exp.plan.method == "dtcs" else None
                _, record = run_training(exp.plan, data, seed, target_domain, prophet=prophet)
                cost = time.perf_counter() - t0 + (pretrain if label == "D" else 0.0)
                elapsed[label, seed, target] = cost
                row, _ = summarize(record, f"{label}-t{target}-s{seed}", plan_info(exp.plan, label), seed, target,
                                   exp.converged_fraction)
                rows[label, seed, target] = row
                n = len(record.iterations)
                per, _ = converged_loss_std(record.domain_losses(), record.total_losses(),
                                            int(round(exp.converged_fraction * n)))
                domain_std[label, seed, target] = per
                if seed == 0 and target == 0:
                    records[label] = record
    return {"rows": rows, "domain_std": domain_std, "records": records, "elapsed": elapsed,
            "total": time.perf_counter() - start}


def mean_over(bench, label, key, targets=TARGETS):
    return float(np.mean([bench["rows"][label, s, t][key] for s in SEEDS for t in targets]))


def test_c01_loss_oracles(verdict):
    t0 = time.perf_counter()
    checks = [
        np.allclose(tempered_softmax([1.0, 0.0], 1.0), [0.731059, 0.268941], atol=1e-6),
        np.allclose(tempered_softmax([1.0, 0.0], 2.0), [0.622459, 0.377541], atol=1e-6),
        np.allclose(tempered_softmax([0.0, 0.0], 3.0), [0.5, 0.5], atol=1e-6),
        abs(cross_entropy([0.5, 0.5], 0) - 0.693147) <= 1e-6,
        cross_entropy([0.0, 1.0, 0.0], 1) == 0.0,
        abs(kl_divergence([1.0, 0.0], [0.5, 0.5]) - 0.693147) <= 1e-6,
        abs(kl_divergence([0.75, 0.25], [0.5, 0.5]) - 0.130812) <= 1e-6,
    ]
    rng = np.random.default_rng(0)
    nonneg = shift = True
    for _ in range(1000):
        c = int(rng.integers(2, 10))
        nonneg &= kl_divergence(rng.dirichlet(np.full(c, 0.5)), rng.dirichlet(np.full(c, 0.5))) >= 0.0
        z, tau, k = rng.normal(size=c) * 10, float(rng.uniform(0.1, 10)), float(rng.uniform(-100, 100))
        shift &= np.max(np.abs(tempered_softmax(z, tau) - tempered_softmax(z + k, tau))) <= 1e-12
    dt = time.perf_counter() - t0
    ok = all(checks) and nonneg and shift and dt < 1.0
    verdict("C1 loss oracles", ok, f"examples {sum(checks)}/{len(checks)}, KL>=0 {nonneg}, shift {shift}, {dt:.2f}s")
    assert ok


def test_c02_gradient_correctness(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for run in range(10):
        rng = np.random.default_rng(500 + run)
        model = MlpModel.init((2, int(rng.integers(3, 7)), 4), seed=run)
        xs = [rng.normal(size=(4, 2)) for _ in range(3)]
        ys = [rng.integers(0, 4, size=4) for _ in range(3)]
        targets = [rng.normal(size=(4, 4)) * 2 for _ in range(3)]
        weights = rng.dirichlet(np.ones(3))
        alpha, tau = float(rng.uniform(0.05, 0.95)), float(rng.choice([0.5, 1.0, 2.0, 5.0]))

        def total(m, tape):
            losses = []
            for x, y, t in zip(xs, ys, targets):
                logits, _ = forward(m, x, tape)
                losses.append(domain_loss(tape, logits, y, t, alpha, tau)[0])
            return weighted_total_loss(tape, losses, weights)

        def f(vec):
            return float(total(model.unflatten(vec), Tape()).value)

        tape = Tape()
        node = total(model, tape)
        analytic = np.concatenate([g.ravel() for g in grads_for(model, backward(tape, node))])
        worst = max(worst, relative_error(analytic, central_difference(f, model.flat())))
    dt = time.perf_counter() - t0
    ok = worst < FD_TOL and dt < 10.0
    verdict("C2 gradient correctness", ok, f"max relative error {worst:.2e} over 10 MLPs, {dt:.2f}s")
    assert ok


def test_c03_dcb_simplex(bench_runs, verdict):
    w = bench_runs["records"]["D"].weights()
    simplex = bool(np.all(np.abs(w.sum(axis=1) - 1.0) <= 1e-9) and np.all(w > 0))
    s = DomainWeights(np.array([0.5, 0.5]), 1.0, previous=np.array([1.0, 1.0]))
    hand = dcb_update(s, [0.5, 1.0]).weights
    exact = hand[0] == 1.0 / 3.0 and hand[1] == 2.0 / 3.0
    cost = bench_runs["elapsed"]["D", 0, 0]
    ok = simplex and exact and cost < 60.0
    verdict("C3 DCB simplex", ok, f"{len(w)} iterations, max |sum-1| {np.max(np.abs(w.sum(1) - 1)):.1e}, "
                                  f"min weight {w.min():.3f}, hand example {hand.tolist()}, {cost:.1f}s")
    assert ok


def test_c04_erm_equivalence(verdict):
    base = base_experiment()
    data, target = prepare(base.raw, 0, 0)
    erm, dtcs = [], []
    erm_plan = with_label(base, "A", method="erm", iterations=500).plan
    dtcs_plan = with_label(base, "x", prophet="mp", alpha=1.0, dcb=False, iterations=500).plan
    run_training(erm_plan, data, 0, target, on_step=lambda n, m: erm.append(m.flat()))
    run_training(dtcs_plan, data, 0, target, on_step=lambda n, m: dtcs.append(m.flat()))
    ok = len(erm) == len(dtcs) == 500 and all(np.array_equal(a, b) for a, b in zip(erm, dtcs))
    verdict("C4 ERM equivalence", ok, f"{len(erm)} iterations compared bitwise")
    assert ok


def test_c05_gs_table(verdict):
    t0 = time.perf_counter()
    diffs = {name: abs(gs(perf) - printed) for name, (perf, printed) in GS_TABLE.items()}
    eq12 = gs(GS_TABLE["Ours (ME)"][0], GS_EQ12)
    dt = time.perf_counter() - t0
    ok = max(diffs.values()) <= 0.01 and abs(eq12 - 11.75) <= 0.01 and abs(eq12 - 6.78) > 0.01 and dt < 1.0
    verdict("C5 GS table", ok, f"9 rows max |diff| {max(diffs.values()):.4f}; unnormalized variant gives "
                               f"{eq12:.2f} vs printed 6.78")
    assert ok


def test_c06_loss_std_reduction(bench_runs, verdict):
    erm = mean_over(bench_runs, "A", "total_loss_std", [0])
    ours = mean_over(bench_runs, "D", "total_loss_std", [0])
    per_erm = np.mean([bench_runs["domain_std"]["A", s, 0] for s in SEEDS], axis=0)
    per_ours = np.mean([bench_runs["domain_std"]["D", s, 0] for s in SEEDS], axis=0)
    lower = int(np.sum(per_ours < per_erm))
    cost = sum(bench_runs["elapsed"][k, s, 0] for k in ("A", "D") for s in SEEDS)
    ok = ours <= 0.5 * erm and lower >= 2 and cost < 300.0
    verdict("C6 loss-std reduction", ok, f"total std ERM {erm:.2e} vs DTCS {ours:.2e} (ratio {erm / ours:.2f}x); "
                                         f"per-domain lower in {lower}/3; {cost:.0f}s")
    assert ok


def test_c07_generalization_direction(bench_runs, verdict):
    acc = {k: 100.0 * mean_over(bench_runs, k, "target_acc") for k in ("A", "C", "D")}
    cost = sum(v for (k, _, _), v in bench_runs["elapsed"].items() if k in ("A", "C", "D"))
    ok = acc["D"] >= acc["A"] and acc["D"] >= acc["C"] - 0.5 and cost < 900.0
    verdict("C7 generalization direction", ok, f"mean target acc ERM {acc['A']:.2f}, DTCS no-DCB {acc['C']:.2f}, "
                                               f"DTCS {acc['D']:.2f}; {cost:.0f}s")
    assert ok


def test_c08_conflict_direction(bench_runs, verdict):
    erm = mean_over(bench_runs, "A", "neg_frac", [0])
    ours = mean_over(bench_runs, "D", "neg_frac", [0])
    ok = ours < erm
    verdict("C8 conflict direction", ok, f"negative-cosine fraction ERM {erm:.3f} vs DTCS {ours:.3f}")
    assert ok


def test_c09_prophet_suite(bench_runs, verdict):
    base = base_experiment()
    data, target = prepare(base.raw, 0, 0)
    complete = {"ME": bench_runs["records"]["D"].final_eval() is not None}
    mp_traj, ref_traj = [], []
    epoch = base.plan.epoch_length
    for kind in ("SE", "MP", "MC"):
        plan = with_label(base, kind, prophet=kind.lower()).plan
        hook = (lambda n, m: mp_traj.append(m.flat()) if n < epoch else None) if kind == "MP" else None
        model, record = run_training(plan, data, 0, target, on_step=hook)
        complete[kind] = (len(record.iterations) == plan.iterations and record.final_eval() is not None
                          and bool(np.all(np.isfinite(model.flat()))))
        if kind == "MP":
            mp_record = record
    # epoch 0 of MP must be pure CE at every iteration, identical to a soft-target-free run
    ref_plan = with_label(base, "ref", prophet="mp", alpha=1.0).plan
    run_training(ref_plan, data, 0, target, on_step=lambda n, m: ref_traj.append(m.flat()) if n < epoch else None)
    epoch0 = mp_record.iterations[:epoch]
    fallback = (all(d["composite"] == d["ce"] for row in epoch0 for d in row["domain_losses"])
                and all(np.array_equal(a, b) for a, b in zip(mp_traj, ref_traj)) and len(mp_traj) == epoch
                and any(d["composite"] != d["ce"] for d in mp_record.iterations[epoch]["domain_losses"]))

    dims = (2, *base.plan.hidden, 4)
    model = MlpModel.init(dims, 7)
    batch = DomainBatch(data.train[1].x[:32], data.train[1].y[:32], 1, data.train[1].uids[:32])
    experts = build_experts(with_label(base, "me", expert_epochs=1).plan, data, 0)
    specs = {"ME": experts, "SE": ProphetSpec("SE", experts=(MlpModel.init(dims, 8),)),
             "MP": advance_epoch(mp_prophet(), MlpModel.init(dims, 9), 0), "MC": mc_prophet(model, 3, seed=0)}

    def grads(target_logits):
        tape = Tape()
        logits, _ = forward(model, batch.x, tape)
        node, _ = domain_loss(tape, logits, batch.y, target_logits, 0.1, 2.0)
        return grads_for(model, backward(tape, node))

    detached = all(
        all(np.array_equal(a, b) for a, b in zip(grads(soft_targets(spec, batch, model).logits),
                                                 grads(np.array(soft_targets(spec, batch, model).logits.tolist()))))
        for spec in specs.values())

    routing = True
    mc = mc_prophet(model, 3, seed=0)
    for k, dom in enumerate(data.train):
        b = DomainBatch(dom.x[:32], dom.y[:32], k, dom.uids[:32])
        new, _ = train_mc_heads(mc, b, model, SgdOptimizer(lr=0.1))
        routing &= all(new.heads[j].equals(mc.heads[j]) != (j == k) for j in range(3))

    ok = all(complete.values()) and fallback and detached and routing
    verdict("C9 prophet suite", ok, f"runs complete {complete}; MP epoch-0 fallback {fallback}; "
                                    f"detachment {detached}; MC routing {routing}")
    assert ok


def test_c10_mmd(verdict):
    x, y = np.array([[0.3, -1.0]]), np.array([[1.2, 0.4]])
    closed = abs(mmd_squared(x, y, 0.8) - (2 - 2 * math.exp(-0.8 * (0.81 + 1.96)))) <= 1e-12
    rng = np.random.default_rng(0)
    brute = all(abs(mmd_squared(p, q, 0.6) - mmd_bruteforce(p, q, 0.6)) <= 1e-12
                for p, q in ((rng.normal(size=(5, 2)), rng.normal(size=(5, 2)) + 0.5) for _ in range(5)))
    rhos = []
    for seed in SEEDS:
        spec = SyntheticSpec.fig1_bench(seed)
        ds = generate_synthetic(spec)
        gaps, values = [], []
        for i in range(4):
            for j in range(i + 1, 4):
                gaps.append(abs(spec.rotations_deg[i] - spec.rotations_deg[j]))
                values.append(mmd_squared(ds.domains[i].x, ds.domains[j].x))
        rhos.append(spearman(gaps, values))
    ok = closed and brute and min(rhos) >= 0.9
    verdict("C10 MMD oracle", ok, f"closed form {closed}, brute force {brute}, "
                                  f"rank correlation min {min(rhos):.3f} mean {np.mean(rhos):.3f} over 10 seeds")
    assert ok


def test_c11_agr_sum(verdict):
    g = np.array([1.0, -2.0, 0.5])
    examples = [
        np.array_equal(agr_sum_combine([g, g, g]), 3 * g),
        np.array_equal(agr_sum_combine([[1.0, 1.0], [1.0, -1.0]]), [2.0, 0.0]),
        np.array_equal(agr_sum_combine([g, -g]), np.zeros(3)),
    ]
    model = MlpModel.init((2, 3, 2), 0)
    h = np.random.default_rng(1).normal(size=model.num_params)
    zero_step = agr_sum_step([h, -h], model, SgdOptimizer(lr=0.1, weight_decay=0.0)).equals(model)
    ok = all(examples) and zero_step
    verdict("C11 Agr-sum", ok, f"examples {sum(examples)}/3, full-conflict zero step {zero_step}")
    assert ok


def test_runtime_summary(bench_runs):
    per_label = {k: sum(v for (lab, _, _), v in bench_runs["elapsed"].items() if lab == k) for k in ("A", "C", "D")}
    print(f"shared fig1-bench runs: {bench_runs['total']:.0f}s total; per method "
          + ", ".join(f"{k} {v:.0f}s" for k, v in per_label.items()))
