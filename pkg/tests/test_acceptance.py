"""End-to-end gates.

Each test checks one shipping requirement at its stated tolerance and appends
a verdict line (with the measured values) to the summary printed after the
run.  Everything here uses only committed fixtures and the installed package.
"""

import time

import numpy as np
import pytest

import helpers
from levnet.cluster import ensemble_slice_cluster, kmeans, slice_cluster
from levnet.graph import (AvgPoolNode, BatchNormNode, ConvNode, InputNode,
                          ModelGraph, OutputNode, PolyActNode, PolySkipNode,
                          build_resnet_graph, eval_polyact, eval_polyskip,
                          reference_eval)
from levnet.levels import load_preset, plan_modulus_chain, walk_schedule
from levnet.polyfit import coeff_box, fit_relu_poly
from levnet.simulator import perturbed_chain, rescale_error_probe, run_model
from levnet.trainlab import (TrainConfig, _gradients, lemma1_check,
                             lemma2_check, penalty_loss)
from levnet.transforms import (apply_pipeline, check_equivalence,
                               fuse_bn_act, fuse_bn_conv, fuse_skip_bn_bn,
                               fuse_skip_identity, redistribute_backward,
                               redistribute_forward)

from levnet.cli import level_table_row, model_level_row
from test_cluster import exhaustive_optimum
from test_polyfit import exhaustive_best
from test_trainlab import random_sample, spicy_net
from test_transforms import act_conv_graph, conv_act_graph, random_bn, rel_err

EXPECTED_LEVELS = {
    "rn18": [87, 70, 53, 35, 35, 18],
    "rn20": [97, 78, 59, 39, 39, 20],
    "rn32": [157, 126, 95, 63, 63, 32],
}


def check(name: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    helpers.ACCEPTANCE_LINES.append(line)
    assert passed, line


def test_level_table_reproduction():
    t0 = time.perf_counter()
    rows = {v: level_table_row(v) for v in EXPECTED_LEVELS}
    elapsed = time.perf_counter() - t0
    exact = rows == EXPECTED_LEVELS
    check("level-table", exact and elapsed < 1.0,
          f"rn18/rn20/rn32 all six columns exact={exact}, {elapsed:.2f}s < 1s")


def test_transform_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_unit = 0.0

    bn = random_bn(rng, 3)
    act = PolyActNode("act", [rng.standard_normal(3) for _ in range(3)])
    x = rng.standard_normal((3, 1000))
    fused = fuse_bn_act(bn, act)
    worst_unit = max(worst_unit, rel_err(
        eval_polyact(fused, x),
        eval_polyact(act, bn.b1[:, None] * x + bn.b0[:, None])))

    conv = ConvNode("c", rng.standard_normal((4, 2, 3, 3)),
                    rng.standard_normal(4), 1, 1)
    bnc = random_bn(rng, 4)
    fc = fuse_bn_conv(conv, bnc)
    from levnet.graph import conv2d
    for _ in range(1000):
        xi = rng.standard_normal((2, 4, 4))
        raw = conv2d(xi, conv.weight, conv.bias, 1, 1)
        want = bnc.b1[:, None, None] * raw + bnc.b0[:, None, None]
        got = conv2d(xi, fc.weight, fc.bias, 1, 1)
        worst_unit = max(worst_unit, rel_err(got, want))

    bnx, bny = random_bn(rng, 3, "bnx"), random_bn(rng, 3, "bny")
    act2 = PolyActNode("act", [rng.standard_normal(3) for _ in range(3)])
    ps = fuse_skip_bn_bn(bnx, bny, act2)
    y = rng.standard_normal((3, 1000))
    s = (bnx.b1[:, None] * x + bnx.b0[:, None]
         + bny.b1[:, None] * y + bny.b0[:, None])
    worst_unit = max(worst_unit, rel_err(eval_polyskip(ps, x, y),
                                         eval_polyact(act2, s)))

    psi = fuse_skip_identity(bnx, act2)
    worst_unit = max(worst_unit, rel_err(
        eval_polyskip(psi, x, y),
        eval_polyact(act2, bnx.b1[:, None] * x + bnx.b0[:, None] + y)))

    pipeline_ok = True
    worst_pipe, worst_argmax = 0.0, 1.0
    for variant in EXPECTED_LEVELS:
        g = build_resnet_graph(variant, act="poly2", seed=0, input_hw=8)
        out, _ = apply_pipeline(g, "P2FR")
        rep = check_equivalence(g, out, n_inputs=100, rtol=1e-8, seed=0)
        pipeline_ok = pipeline_ok and rep.passed
        worst_pipe = max(worst_pipe, rep.max_rel_err)
        worst_argmax = min(worst_argmax, rep.argmax_match_rate)
    elapsed = time.perf_counter() - t0

    check("transform-equivalence",
          worst_unit <= 1e-10 and pipeline_ok and worst_pipe <= 1e-8
          and worst_argmax == 1.0 and elapsed < 30.0,
          f"unit rewrites max rel {worst_unit:.2e} <= 1e-10 over 1000 inputs, "
          f"pipeline max rel {worst_pipe:.2e} <= 1e-8, argmax rate "
          f"{worst_argmax:.3f}, {elapsed:.1f}s < 30s")


def test_redistribution_normal_forms_and_inverse():
    monic_ok, divisor_ok = True, True
    for variant in EXPECTED_LEVELS:
        for strategy in ("P2R", "P2FR"):
            g = build_resnet_graph(variant, act="poly2", seed=0, input_hw=8)
            out, _ = apply_pipeline(g, strategy)
            for node in out.nodes.values():
                if isinstance(node, PolyActNode):
                    monic_ok &= bool(np.all(np.asarray(node.coeffs[-1]) == 1.0))
                elif isinstance(node, PolySkipNode):
                    monic_ok &= bool(np.all(np.asarray(node.coeffs["x2"]) == 1.0))
                elif isinstance(node, AvgPoolNode):
                    divisor_ok &= bool(np.all(np.asarray(node.divisor) == 1.0))

    rng = np.random.default_rng(1)
    worst = 0.0
    fwd = act_conv_graph(rng, (9.0, 6.0, 3.0))
    restored = redistribute_forward(redistribute_forward(fwd, "act", 3.0),
                                    "act", 1.0 / 3.0)
    for a, b in zip(fwd.nodes["act"].coeffs, restored.nodes["act"].coeffs):
        worst = max(worst, rel_err(np.asarray(b), np.asarray(a)))
    bwd = conv_act_graph(rng, (1.0, 2.0, 4.0))
    restored = redistribute_backward(redistribute_backward(bwd, "act", 2.0),
                                     "act", 0.5)
    for a, b in zip(bwd.nodes["act"].coeffs, restored.nodes["act"].coeffs):
        worst = max(worst, rel_err(np.asarray(b), np.asarray(a)))

    check("redistribution-normalization",
          monic_ok and divisor_ok and worst <= 1e-10,
          f"leading coeffs=1 exact: {monic_ok}, pool divisors=1 exact: "
          f"{divisor_ok}, reciprocal-update restore max rel {worst:.2e} <= 1e-10")


def test_tower_reuse_trace():
    g = ModelGraph()
    g.add(InputNode("in", 1, 4, 4))
    g.add(PolyActNode("act", coeffs=[np.array(0.1), np.array(0.5),
                                     np.array(1.0)]))
    g.add(ConvNode("conv", weight=np.full((1, 1, 3, 3), 0.1),
                   bias=np.array([0.2]), stride=1, padding=1))
    g.add(OutputNode("out"))
    for s, d in (("in", "act"), ("act", "conv"), ("conv", "out")):
        g.connect(s, d)
    plan = plan_modulus_chain(g, delta_log2=40, ell=2)
    sim = run_model(g, plan, np.full((1, 4, 4), 0.3), trace=True)

    act_rows = [r for r in sim.trace if r.node == "act"]
    conv_rows = [r for r in sim.trace if r.node == "conv"]
    rescales = [r for r in conv_rows if r.op == "rescale"]
    lam_y = act_rows[-1].sublevel
    lam_z = max(r.sublevel for r in conv_rows if r.op != "rescale")
    ok = (lam_y == 2 and lam_z == 3 and len(rescales) == 1
          and rescales[0].sublevel == 1
          and rescales[0].level == act_rows[-1].level - 1)
    check("tower-reuse-trace", ok,
          f"lam(y)={lam_y} (want 2), lam(z)={lam_z} (want 3), rescale -> "
          f"lam={rescales[0].sublevel} at level {rescales[0].level} "
          f"(one level consumed)")


def test_planner_presets():
    want = {"rn18": 869, "rn20": 906, "rn32": 1745}
    got = {}
    for variant, total in want.items():
        g = build_resnet_graph(variant, act="poly2", seed=0)
        transformed, _ = apply_pipeline(g, "P2FR")
        plan = plan_modulus_chain(transformed, preset=variant)
        got[variant] = plan.log2_q_total
    check("planner-presets", got == want,
          f"log2Q {got} == {want} (exact integers)")


def test_polynomial_fitting():
    poly, report = fit_relu_poly(2, 2.0, 10)
    best, best_cost = exhaustive_best(2, 2.0, 10)
    oracle_ok = (poly.int_coeffs == best
                 and report.sum_sq_error == pytest.approx(best_cost, rel=1e-12))

    rng = np.random.default_rng(2)
    box_ok, done = True, 0
    while done < 100:
        d = int(rng.integers(1, 5))
        c = float(rng.uniform(0.25, 4.0))
        b = int(rng.integers(2, 13))
        if int(np.floor(c * 2 ** b)) * 2 + 1 < d + 1:
            continue
        cand, _ = fit_relu_poly(d, c, b)
        lo, hi = coeff_box(b)
        box_ok &= all(lo <= a <= hi for a in cand.int_coeffs)
        done += 1
    check("polynomial-fitting", oracle_ok and box_ok,
          f"d=2 c=2 b=10 coeffs {poly.int_coeffs} == exhaustive optimum "
          f"{best}, box held on {done} random (d<=4, c<=4, b<=12) configs")


def test_lemma_suite():
    t0 = time.perf_counter()
    cfg = TrainConfig()
    lemmas_ok, branches = True, 0
    for seed in range(50):
        net = spicy_net(seed)
        sample = random_sample(seed)
        r1 = lemma1_check(net, sample, cfg, tol=1e-8)
        r2 = lemma2_check(net, sample, cfg, tol=1e-8)
        lemmas_ok = lemmas_ok and r1.passed and r2.passed
        branches += sum(l.penalty_branch for l in r2.layers)

    net = spicy_net(3, sizes=(2, 4, 3, 2))
    rng = np.random.default_rng(3)
    batch = (rng.normal(0, 2, (4, 2)), np.array([0, 1, 1, 0]))
    _, _, _, grads = _gradients(net, batch, cfg, t=5)
    eps, worst = 1e-6, 0.0
    for l, w in enumerate(net.weights):
        fd = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            w[idx] += eps
            up, _, _ = penalty_loss(net, batch, cfg, t=5)
            w[idx] -= 2 * eps
            dn, _, _ = penalty_loss(net, batch, cfg, t=5)
            w[idx] += eps
            fd[idx] = (up - dn) / (2 * eps)
        denom = max(float(np.max(np.abs(grads[l]))), 1e-12)
        worst = max(worst, float(np.max(np.abs(fd - grads[l])) / denom))
    elapsed = time.perf_counter() - t0
    check("lemma-suite",
          lemmas_ok and branches > 0 and worst <= 1e-4 and elapsed < 10.0,
          f"decomposition + negativity identities on 50 states at 1e-8 "
          f"({branches} clipped layers seen), finite-difference gradient max "
          f"rel {worst:.2e} <= 1e-4, {elapsed:.1f}s < 10s")


def test_clustering_oracles(rn20_fixture):
    rng = np.random.default_rng(0)
    oracle_ok = True
    for trial in range(50):
        n = int(rng.integers(3, 8))
        k = int(rng.integers(1, 5))
        pts = (rng.standard_normal(n) if trial % 2 == 0
               else rng.standard_normal((n, 2)))
        cb = kmeans(pts, k, seed=trial)
        oracle_ok &= abs(cb.distortion - exhaustive_optimum(pts, k)) <= 1e-9

    k = 8
    clustered, _, _ = slice_cluster(rn20_fixture, k, seed=0)
    max_distinct = 0
    for node in clustered.nodes.values():
        if isinstance(node, ConvNode):
            for s in range(node.weight.shape[3]):
                max_distinct = max(max_distinct,
                                   np.unique(node.weight[:, :, :, s]).size)

    solo, _, solo_rep = slice_cluster(rn20_fixture, k, seed=4)
    ens, _, ens_rep = ensemble_slice_cluster([rn20_fixture], k, seed=4)
    identical = all(
        np.array_equal(ens[0].nodes[nid].weight, node.weight)
        for nid, node in solo.nodes.items() if isinstance(node, ConvNode))
    identical = identical and solo_rep.slice_sizes == ens_rep.slice_sizes

    check("clustering-oracles",
          oracle_ok and max_distinct <= k and identical,
          f"50 instances match exhaustive partitions, clustered rn20 max "
          f"distinct per slice {max_distinct} <= k={k}, M=1 ensemble "
          f"bit-identical to slice mode: {identical}")


def test_simulator_fidelity(rn20_fixture, rn20_p2fr, rn20_plan):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    img = rng.uniform(-1, 1, (3, 8, 8))
    solo_a = run_model(rn20_p2fr, rn20_plan, img)
    want = reference_eval(rn20_p2fr, img)
    rel = float(np.max(np.abs(solo_a.logits - want)) / np.max(np.abs(want)))

    second = build_resnet_graph("rn20", act="poly2", seed=13, input_hw=8)
    second_p2fr, _ = apply_pipeline(second, "P2FR")
    solo_b = run_model(second_p2fr, rn20_plan, img)
    packed = run_model([rn20_p2fr, second_p2fr], rn20_plan, img)
    mean_gap = float(np.max(np.abs(
        packed.logits - (solo_a.logits + solo_b.logits) / 2)))
    elapsed = time.perf_counter() - t0

    check("simulator-fidelity",
          rel <= 1e-6 and mean_gap <= 1e-10 and elapsed < 120.0,
          f"exact-mode rn20 vs reference max rel {rel:.2e} <= 1e-6, packed "
          f"M=2 vs mean of solos {mean_gap:.2e} <= 1e-10, {elapsed:.1f}s < 2min")


def test_error_probe_monotonicity():
    delta = 1 << 40
    errs = []
    for eps in (0.0, 1e-6, 1e-5, 1e-4, 1e-3):
        chain = perturbed_chain(delta, ell=2, depth=8, eps=eps)
        errs.append(rescale_error_probe(delta, chain, depth=8,
                                        ell=2).max_rel_err)
    monotone = all(a <= b + 1e-15 for a, b in zip(errs, errs[1:]))
    check("error-probe-monotonicity", monotone and errs[-1] > errs[0],
          f"5-point deviation sweep errors {['%.1e' % e for e in errs]} "
          f"nondecreasing")


def test_committed_fixture_stands_alone(rn20_fixture):
    """The committed model file carries everything the suite needs; no
    converter package is imported anywhere in this test tree."""
    row = model_level_row(str(helpers.FIXTURES / "rn20_8x8.json"))
    want = {"P2": 78, "P2F": 59, "P2R": 39, "P2FR": 39, "P2FRT": 20}
    finite = bool(np.all(np.isfinite(
        reference_eval(rn20_fixture, np.zeros((3, 8, 8))))))
    check("fixture-standalone", row == want and finite,
          f"committed rn20 fixture level row {row} == {want}, evaluates "
          f"finite logits")
