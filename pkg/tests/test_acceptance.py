"""Acceptance criteria 1-9. Each test records one PASS/FAIL line in the run summary.

Criteria 1, 7 and 8 train networks or wait out a benchmark budget and take
several minutes each; together the file runs for roughly 40 minutes on one core.
"""
import time
import warnings
from functools import lru_cache

import numpy as np

from pointseg.bench import run_decimation_benchmark
from pointseg.cloud import SceneSpec, generate_scene
from pointseg.experiments import ToyTask, ablation_config, run_toy, toy_config
from pointseg.metrics import SegmentationMetrics
from pointseg.network import NetworkConfig, build_network
from pointseg.samplers import DecimationPlan, crs_sample, farthest_point_sample, inverse_density_sample
from pointseg.tensor import Tensor
from pointseg.aggregation import dilated_residual_block

from _acceptance_log import report
from _gradcheck import check_gradients
from test_aggregation import hop_sets, kink_margin, setup_block
from test_network import recount
from test_samplers import idis_oracle, sq_dist_matrix
from test_tensor import _cases

# tolerances and sizes from the acceptance table
RS_TOTAL_MAX_S = 0.1
FPS_RS_RATIO_MIN = 50
FPS_BUDGET_S = 300.0
FPS_GROWTH_MIN = 50
ORACLE_CLOUDS = 100
ORACLE_MAX_N = 1000
CRS_TAUS = (1.0, 0.1, 0.01)
CRS_SUM_TOL = 1e-9
OP_GRAD_TOL = 1e-5
BLOCK_GRAD_TOL = 1e-4
RF_N, RF_K = 64, 4
TOY_EPOCHS = 50
TOY_SEEDS = range(5)
TOY_MIOU_MIN = 0.85
TOY_SEEDS_REQUIRED = 4
TOY_BUDGET_S = 15 * 60
ABLATION_SEEDS_REQUIRED = 3
METRIC_PAIRS = 1000


def test_criterion_1_sampling_efficiency():
    plan = DecimationPlan(5, 0.25)
    small = run_decimation_benchmark([10**5], plan, ["RS", "FPS"], time_budget=FPS_BUDGET_S)
    rs, fps = small.row("RS", 10**5), small.row("FPS", 10**5)
    big = run_decimation_benchmark([10**6], plan, ["FPS"], time_budget=FPS_BUDGET_S).row("FPS", 10**6)
    ratio = fps.elapsed_s / rs.elapsed_s
    scaled = big.status == "timeout" or big.elapsed_s > FPS_GROWTH_MIN * fps.elapsed_s
    ok = rs.status == fps.status == "ok" and rs.elapsed_s < RS_TOTAL_MAX_S and ratio > FPS_RS_RATIO_MIN and scaled
    big_desc = f"timeout after {FPS_BUDGET_S:.0f} s" if big.status == "timeout" else f"{big.elapsed_s:.1f} s"
    report(1, ok, f"RS(1e5) {rs.elapsed_s * 1e3:.2f} ms, FPS(1e5) {fps.elapsed_s:.2f} s, "
                  f"ratio {ratio:.0f}x (> {FPS_RS_RATIO_MIN}), FPS(1e6) {big_desc}")
    assert ok


def fps_greedy_oracle(p, k, start=0):
    """Greedy max-min over a precomputed all-pairs matrix."""
    d = sq_dist_matrix(p)
    sel = [start]
    mind = d[start].copy()
    taken = np.zeros(len(p), dtype=bool)
    taken[start] = True
    while len(sel) < k:
        cand = np.where(taken, -np.inf, mind)
        nxt = int(np.flatnonzero(cand == cand.max())[0])
        sel.append(nxt)
        taken[nxt] = True
        mind = np.minimum(mind, d[nxt])
    return np.array(sel)


def test_criterion_2_sampler_oracles():
    rng = np.random.default_rng(2024)
    fps_ok = idis_ok = 0
    t0 = time.perf_counter()
    for i in range(ORACLE_CLOUDS):
        n = int(rng.integers(20, ORACLE_MAX_N + 1))
        p = rng.random((n, 3))
        if i % 4 == 0:
            p = np.round(p * 6) / 6  # lattice clouds exercise the tie rules
        k = int(rng.integers(1, n + 1))
        start = int(rng.integers(0, n))
        fps_ok += np.array_equal(farthest_point_sample(p, k, start).selected, fps_greedy_oracle(p, k, start))
        t = int(rng.integers(1, min(n, 33)))
        idis_ok += np.array_equal(inverse_density_sample(p, k, t=t).selected, idis_oracle(p, k, t)[0])
    elapsed = time.perf_counter() - t0
    ok = fps_ok == idis_ok == ORACLE_CLOUDS
    report(2, ok, f"FPS {fps_ok}/{ORACLE_CLOUDS}, IDIS {idis_ok}/{ORACLE_CLOUDS} exact matches "
                  f"(N <= {ORACLE_MAX_N}), {elapsed:.1f} s")
    assert ok


def test_criterion_3_crs_fidelity():
    rng = np.random.default_rng(3)
    monotone = sums = 0
    worst_sum = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 60))
        f = rng.normal(size=(n, 4))
        s = rng.random(n) + 1e-3
        s /= s.sum()
        top = int(np.argmax(s))
        spread = np.linalg.norm(f - f[top], axis=1).max()
        off, dist = [], []
        for tau in CRS_TAUS:
            res = crs_sample(f, s, 1, tau, noise=False)
            off.append(1.0 - res.weights[0, top])
            dist.append(np.linalg.norm(res.selected[0] - f[top]))
        # off-argmax mass falls strictly with tau and bounds the distance to the argmax row
        monotone += off[0] > off[1] > off[2] and all(d <= m * spread + 1e-12 for d, m in zip(dist, off))
        w = crs_sample(f, s, 3, float(rng.uniform(0.01, 5)), seed=int(rng.integers(1 << 31))).weights
        err = float(np.abs(w.sum(axis=1) - 1).max())
        worst_sum = max(worst_sum, err)
        sums += err <= CRS_SUM_TOL and bool((w >= 0).all())
    ok = monotone == sums == 100
    report(3, ok, f"monotone convergence {monotone}/100, weight sums {sums}/100 "
                  f"(worst |sum-1| {worst_sum:.1e})")
    assert ok


def test_criterion_4_gradient_suite(monkeypatch):
    worst_op, failed = 0.0, []
    for name, make in sorted(_cases().items()):
        for i in range(20):
            build, inputs = make(np.random.default_rng(1000 + i))
            err = check_gradients(build, inputs, seed=i)
            worst_op = max(worst_op, err)
            if err >= OP_GRAD_TOL:
                failed.append(name)
    worst_block, blocks = 0.0, 0
    for pooling in ("attentive", "max", "mean", "sum"):
        for units in (1, 2):
            seed, done = 0, 0
            while done < 2:
                seed += 1
                pos, f, idx, cfg, params = setup_block(n=16, k=4, units=units, pooling=pooling, seed=seed)
                leaves = [Tensor(pos, requires_grad=True), Tensor(f, requires_grad=True),
                          *params.named("b").values()]

                def build(*_):
                    return dilated_residual_block(leaves[0], leaves[1], idx, cfg, params)

                if kink_margin(monkeypatch, build) < 1e-4:
                    continue
                worst_block = max(worst_block, check_gradients(build, leaves, seed=seed))
                done += 1
                blocks += 1
    ok = not failed and worst_block < BLOCK_GRAD_TOL
    report(4, ok, f"{len(_cases())} ops x 20 instances worst rel {worst_op:.1e} (< {OP_GRAD_TOL:g}); "
                  f"{blocks} block instances worst rel {worst_block:.1e} (< {BLOCK_GRAD_TOL:g})")
    assert ok, failed


def test_criterion_5_receptive_field():
    checked = violations = 0
    for units in (1, 2):
        pos, f, idx, cfg, params = setup_block(n=RF_N, k=RF_K, units=units)
        base = dilated_residual_block(pos, Tensor(f), idx, cfg, params).data
        reach = hop_sets(idx.indices, units)
        for j in range(RF_N):
            p2, f2 = pos.copy(), f.copy()
            p2[j] += 0.25
            f2[j] -= 2.0
            out = dilated_residual_block(p2, Tensor(f2), idx, cfg, params).data
            for q in range(RF_N):
                if j not in reach[q]:
                    checked += 1
                    violations += out[q].tobytes() != base[q].tobytes()
    ok = violations == 0 and checked > 0
    report(5, ok, f"{checked} (perturbed point, query) pairs outside the hop set, {violations} changed")
    assert ok


def test_criterion_6_architecture_cascade():
    net = build_network(NetworkConfig(n_class=4))
    cloud = generate_scene(SceneSpec(1024, 4, seed=0))
    logits = net.forward(cloud, "infer")
    shapes = dict(net.last_trace)
    counts = [shapes[f"sample{i}"][0] for i in range(4)]
    widths = [shapes["input"][1]] + [shapes[f"encoder{i}"][1] for i in range(4)]
    head = [shapes["head0"][1], shapes["head1"][1], shapes["logits"][1]]
    a = net.forward(cloud, "infer", seed=1).data
    b = net.forward(cloud, "infer", seed=1).data
    c = net.forward(cloud, "train", seed=1).data
    dropout_ok = a.tobytes() == b.tobytes() and not np.array_equal(a, c)
    ok = (counts == [256, 64, 16, 4] and widths == [8, 32, 128, 256, 512] and logits.shape == (1024, 4)
          and shapes["decoder3"][0] == 1024 and head == [64, 32, 4] and dropout_ok)
    report(6, ok, f"counts {counts}, widths {'->'.join(map(str, widths))}, decoder rows "
                  f"{shapes['decoder3'][0]}, head {head}, dropout train-only {dropout_ok}")
    assert ok


@lru_cache(maxsize=None)
def toy_run(variant: str, seed: int):
    t0 = time.perf_counter()
    cfg = ablation_config(variant, toy_config(seed))
    _, metrics = run_toy(cfg, TOY_EPOCHS, datasets=ToyTask().datasets())
    return metrics.miou, time.perf_counter() - t0


def test_criterion_7_toy_learning():
    results = [toy_run("full", s) for s in TOY_SEEDS]
    mious = [m for m, _ in results]
    elapsed = sum(t for _, t in results)
    good = sum(m >= TOY_MIOU_MIN for m in mious)
    ok = good >= TOY_SEEDS_REQUIRED and elapsed < TOY_BUDGET_S
    report(7, ok, f"held-out mIoU {[round(m, 3) for m in mious]}, {good}/5 >= {TOY_MIOU_MIN} "
                  f"(need {TOY_SEEDS_REQUIRED}), {elapsed / 60:.1f} min")
    assert ok


def test_criterion_8_ablation_direction():
    rows = []
    for seed in TOY_SEEDS:
        full = toy_run("full", seed)[0]
        rows.append((full, toy_run("no_locse", seed)[0], toy_run("one_unit", seed)[0]))
    wins = sum(f >= a and f >= b for f, a, b in rows)
    ok = wins >= ABLATION_SEEDS_REQUIRED
    detail = ", ".join(f"seed {s}: {f:.3f}/{a:.3f}/{b:.3f}" for s, (f, a, b) in zip(TOY_SEEDS, rows))
    report(8, ok, f"full >= no_locse and one_unit in {wins}/5 seeds (need {ABLATION_SEEDS_REQUIRED}; "
                  f"full/no_locse/one_unit {detail})", soft=True)
    if not ok:  # soft criterion: reported as a warning, never a failure
        warnings.warn(f"ablation ordering held in only {wins}/5 seeds")


def test_criterion_9_metrics():
    rng = np.random.default_rng(9)
    exact = 0
    for _ in range(METRIC_PAIRS):
        c = int(rng.integers(2, 10))
        n = int(rng.integers(1, 500))
        labels = rng.integers(0, c, size=n)
        pred = np.where(rng.random(n) < rng.random(), labels, rng.integers(0, c, size=n))
        m = SegmentationMetrics.from_predictions(pred, labels, c)
        iou, present, miou, oa, macc = recount(pred, labels, c)
        exact += (m.per_class_iou[present].tolist() == iou and (m.miou, m.oa, m.macc) == (miou, oa, macc)
                  and int(m.confusion.sum()) == n)
    ok = exact == METRIC_PAIRS
    report(9, ok, f"{exact}/{METRIC_PAIRS} random pairs equal the per-point recount exactly")
    assert ok
