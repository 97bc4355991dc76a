"""Simulator: layouts, exact scale tracking, golden trace, fidelity, probe."""

import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from levnet.cluster import slice_cluster
from levnet.graph import (AvgPoolNode, ConvNode, InputNode, LinearNode,
                          ModelGraph, OutputNode, PolyActNode, reference_eval)
from levnet.levels import DepthExhausted, plan_modulus_chain
from levnet.simulator import (CircuitProgram, Instr, SimCiphertext, SimError,
                              SimMachine, SlotLayout, TrueScale, _round_div,
                              _round_half_away, decode_output, encode_input,
                              lower_model, perturbed_chain,
                              rescale_error_probe, run_circuit, run_model)

from helpers import tiny_model

DELTA = 1 << 40


class TestRounding:
    def test_round_div_frozen_cases(self):
        assert _round_div(5, 2) == 3        # 2.5 rounds up
        assert _round_div(-5, 2) == -2      # -2.5 rounds toward +inf
        assert _round_div(3, 2) == 2
        assert _round_div(-3, 2) == -1
        assert _round_div(7, 3) == 2
        assert _round_div(-7, 3) == -2
        assert _round_div(100, 10) == 10

    @given(st.integers(-10**12, 10**12), st.integers(1, 10**6))
    def test_round_div_is_nearest(self, v, q):
        r = _round_div(v, q)
        assert abs(r * q - v) * 2 <= q
        if 2 * abs(r * q - v) == q:
            assert r * q - v > 0      # exact ties resolve upward

    def test_round_half_away(self):
        assert _round_half_away(0.5) == 1
        assert _round_half_away(-0.5) == -1
        assert _round_half_away(2.5) == 3
        assert _round_half_away(-2.5) == -3
        assert _round_half_away(0.49) == 0


class TestTrueScale:
    def test_pow2_scales_stay_exact(self):
        s = TrueScale.from_pow2(DELTA)
        assert s.exact and s.pow2 == 40
        sq = s.times(s)
        assert sq.pow2 == 80 and sq.exact
        down = sq.div_modulus(DELTA ** 2)
        assert down.exact and down.pow2 == 0
        assert down.divide_into(7) == 7.0

    def test_nonpow2_modulus_tracked_symbolically(self):
        q = (1 << 80) + 13
        s = TrueScale(80).div_modulus(q).times_pow2(80)
        assert not s.exact
        assert s.log2() == pytest.approx(160 - np.log2(float(q)), abs=1e-9)
        v = 12345678901234
        assert s.divide_into(v) == pytest.approx(v / 2.0 ** s.log2(), rel=1e-12)

    def test_divide_into_huge_value(self):
        s = TrueScale(200)
        v = 3 << 210
        assert s.divide_into(v) == pytest.approx(3.0 * 1024, rel=1e-15)
        assert s.divide_into(-v) == pytest.approx(-3.0 * 1024, rel=1e-15)

    def test_base_must_be_power_of_two(self):
        with pytest.raises(SimError, match="power of two"):
            TrueScale.from_pow2(3 << 20)


class TestSlotLayout:
    GRID = SlotLayout(n_slots=1024, region_size=64, regions=2, grid_h=8,
                      grid_w=8, ring=2, stride=1, height=4, width=4)

    def test_anchor_map_is_injective(self):
        seen = set()
        for r in range(2):
            for i in range(4):
                for j in range(4):
                    seen.add(self.GRID.slot(r, i, j))
        assert len(seen) == 32
        assert sorted(seen) == sorted(self.GRID.all_anchors().tolist())

    def test_strided_layout_spreads_anchors(self):
        lay = SlotLayout(n_slots=1024, region_size=100, regions=1, grid_h=10,
                         grid_w=10, ring=1, stride=2, height=4, width=4)
        a = lay.anchors(0)
        assert len(set(a.tolist())) == 16
        assert lay.slot(0, 1, 1) - lay.slot(0, 0, 0) == 2 * 10 + 2

    def test_gap_mask_complements_anchors(self):
        mask = self.GRID.gap_mask()
        assert mask.sum() == 1024 - 32
        assert not mask[self.GRID.all_anchors()].any()

    def test_flat_layout(self):
        lay = SlotLayout(n_slots=256, region_size=64, regions=2, flat_len=5)
        np.testing.assert_array_equal(lay.anchors(1), 64 + np.arange(5))
        assert lay.slot(1, 3) == 67

    def test_capacity_and_grid_violations(self):
        with pytest.raises(SimError, match="capacity"):
            SlotLayout(n_slots=100, region_size=64, regions=2, flat_len=4)
        with pytest.raises(SimError, match="cannot hold"):
            SlotLayout(n_slots=1024, region_size=64, regions=1, grid_h=8,
                       grid_w=8, ring=0, stride=2, height=6, width=6)

    def test_json_round_trip(self):
        assert SlotLayout.from_json(self.GRID.to_json()) == self.GRID


class TestEncodeDecode:
    LAYOUT = SlotLayout(n_slots=512, region_size=36, regions=2, grid_h=6,
                        grid_w=6, ring=1, stride=1, height=4, width=4)

    @given(st.lists(st.floats(-16, 16, allow_nan=False, width=32),
                    min_size=16, max_size=16))
    @settings(max_examples=50, deadline=None)
    def test_round_trip_error_below_half_ulp(self, vals):
        img = np.array(vals, dtype=np.float64).reshape(1, 4, 4)
        ct = encode_input(img, DELTA, self.LAYOUT)[0]
        got = decode_output(ct)
        assert got.shape == (2, 4, 4)
        for r in range(2):
            assert np.max(np.abs(got[r] - img[0])) <= 0.5 / DELTA

    def test_regions_replicate(self, rng):
        img = rng.uniform(-1, 1, (3, 4, 4))
        cts = encode_input(img, DELTA, self.LAYOUT)
        assert len(cts) == 3
        got = decode_output(cts[1])
        np.testing.assert_array_equal(got[0], got[1])

    def test_gaps_hold_zero(self, rng):
        ct = encode_input(rng.uniform(-1, 1, (1, 4, 4)), DELTA, self.LAYOUT)[0]
        mask = self.LAYOUT.gap_mask()[:self.LAYOUT.used_span]
        assert all(int(v) == 0 for v in ct.slots[mask])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(SimError, match="does not match layout"):
            encode_input(np.zeros((1, 3, 3)), DELTA, self.LAYOUT)
        with pytest.raises(SimError, match="image"):
            encode_input(np.zeros((4, 4)), DELTA, self.LAYOUT)

    def test_rotation_permutes_slots(self):
        g = tiny_model(0)
        plan = plan_modulus_chain(g, delta_log2=40, ell=2)
        machine = SimMachine(plan, regions=1)
        solo = dataclasses.replace(self.LAYOUT, regions=1)
        ct = encode_input(np.arange(16, dtype=np.float64).reshape(1, 4, 4),
                          DELTA, solo, level=plan.levels)[0]
        machine.regs["x"] = ct
        machine.step(Instr(op="rotate", out="y", a="x", step=3), None, None)
        got = machine.regs["y"].slots
        np.testing.assert_array_equal(np.array([int(v) for v in got]),
                                      np.roll([int(v) for v in ct.slots], -3))


@pytest.fixture(scope="module")
def golden_run():
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
    return run_model(g, plan, np.full((1, 4, 4), 0.3), trace=True), plan


class TestGoldenTrace:
    """Quadratic activation into a convolution under an ell=2 chain."""

    def test_activation_output_reaches_sublevel_two(self, golden_run):
        sim, plan = golden_run
        act = [r for r in sim.trace if r.node == "act"]
        assert act[-1].sublevel == 2
        assert act[-1].level == plan.levels        # no level spent yet

    def test_conv_peaks_at_sublevel_three_then_rescales(self, golden_run):
        sim, plan = golden_run
        conv = [r for r in sim.trace if r.node == "conv"]
        before = [r for r in conv if r.op != "rescale"]
        rescales = [r for r in conv if r.op == "rescale"]
        assert before[-1].sublevel == 3
        assert len(rescales) == 1
        assert rescales[0].sublevel == 3 - 2       # lambda drops by ell
        assert rescales[0].level == plan.levels - 1

    def test_rescale_restores_nominal_scale(self, golden_run):
        sim, _ = golden_run
        final = [r for r in sim.trace if r.op == "rescale"][-1]
        assert final.log2_scale == pytest.approx(40.0, abs=1e-12)

    def test_trace_result_matches_reference(self, golden_run):
        sim, _ = golden_run
        x = np.full((1, 4, 4), 0.3)
        g_ref = (x ** 2 + 0.5 * x + 0.1)
        assert sim.logits.size == 16
        # interior anchor sums nine taps of 0.1 plus the bias
        want = float(9 * 0.1 * g_ref[0, 0, 0] + 0.2)
        inner = sim.logits.reshape(4, 4)[1, 1]
        assert inner == pytest.approx(want, rel=1e-9)


class TestEndToEnd:
    def test_matches_reference_eval(self, rng):
        g = tiny_model(3)
        plan = plan_modulus_chain(g, delta_log2=40, ell=2)
        program = lower_model(g, plan)
        for _ in range(3):
            img = rng.uniform(-1, 1, (2, 6, 6))
            want = reference_eval(g, img)
            got = run_circuit(program, img).logits
            rel = np.max(np.abs(got - want)) / max(np.max(np.abs(want)), 1e-12)
            assert rel <= 1e-8

    def test_all_planned_moduli_consumed(self, rng):
        g = tiny_model(3)
        plan = plan_modulus_chain(g, delta_log2=40, ell=2)
        sim = run_model(g, plan, rng.uniform(-1, 1, (2, 6, 6)))
        assert sim.rescales_used == plan.levels

    def test_program_json_round_trip_runs_bit_identically(self, rng):
        g = tiny_model(4)
        plan = plan_modulus_chain(g, delta_log2=40, ell=2)
        program = lower_model(g, plan)
        clone = CircuitProgram.from_json(
            json.loads(json.dumps(program.to_json())))
        assert len(clone.instructions) == len(program.instructions)
        img = rng.uniform(-1, 1, (2, 6, 6))
        a = run_circuit(program, img)
        b = run_circuit(clone, img)
        np.testing.assert_array_equal(a.member_logits, b.member_logits)
        assert a.rescales_used == b.rescales_used

    def test_packed_pair_is_bit_identical_to_solo_runs(self, rng):
        a, b = tiny_model(5), tiny_model(6)
        plan = plan_modulus_chain(a, delta_log2=40, ell=2)
        img = rng.uniform(-1, 1, (2, 6, 6))
        packed = run_model([a, b], plan, img)
        solo_a = run_model(a, plan, img)
        solo_b = run_model(b, plan, img)
        np.testing.assert_array_equal(packed.member_logits[0], solo_a.logits)
        np.testing.assert_array_equal(packed.member_logits[1], solo_b.logits)
        np.testing.assert_allclose(
            packed.logits, (solo_a.logits + solo_b.logits) / 2, atol=1e-12)

    def test_mismatched_topologies_rejected(self):
        a = tiny_model(0)
        b = tiny_model(1, classes=3)
        extra = tiny_model(2)
        bad = ModelGraph()
        for node in extra.nodes.values():
            bad.add(node)
        # same nodes, different wiring order is fine; different node set is not
        with pytest.raises(SimError, match="topology"):
            g2 = tiny_model(0)
            g3 = ModelGraph()
            for node in list(g2.nodes.values())[:-1]:
                g3.add(node)
            order = ["in", "conv1", "act1", "conv2", "act2", "pool", "fc"]
            for s, d in zip(order, order[1:]):
                g3.connect(s, d)
            lower_model([a, g3], plan_modulus_chain(a, delta_log2=40, ell=2))

    def test_depth_exhaustion_names_the_node(self, rng):
        g = tiny_model(7)
        plan = plan_modulus_chain(g, delta_log2=40, ell=2)
        rescales = plan.rescale_moduli()
        doctored = dataclasses.replace(
            plan, moduli=[m for m in plan.moduli if m.role != "rescale"]
            + rescales[:-1])
        with pytest.raises(DepthExhausted, match="rescale modulus"):
            run_model(g, doctored, rng.uniform(-1, 1, (2, 6, 6)))


class TestWeightCache:
    def test_clustered_model_materializes_at_most_k_per_slice(self, rng):
        k = 3
        clustered, _, report = slice_cluster(tiny_model(8), k, seed=0)
        plan = plan_modulus_chain(clustered, delta_log2=40, ell=2)
        sim = run_model(clustered, plan, rng.uniform(-1, 1, (2, 6, 6)))
        conv_counts = {key: n for key, n in sim.weight_encodings.items()
                       if key[1] >= 1}
        assert conv_counts, "no per-slice weight encodings recorded"
        assert all(n <= k for n in conv_counts.values())
        want = {}
        for key, n in report.slice_sizes.items():
            layer, s = key.rsplit(":", 1)
            want[layer, int(s)] = n
        assert conv_counts == want

    def test_unclustered_model_can_exceed_k(self, rng):
        g = tiny_model(8)
        plan = plan_modulus_chain(g, delta_log2=40, ell=2)
        sim = run_model(g, plan, rng.uniform(-1, 1, (2, 6, 6)))
        conv_counts = [n for key, n in sim.weight_encodings.items()
                       if key[1] >= 1]
        assert max(conv_counts) > 3


class TestProbe:
    def test_exact_chain_error_is_rounding_only(self):
        chain = perturbed_chain(DELTA, ell=2, depth=6, eps=0.0)
        rep = rescale_error_probe(DELTA, chain, depth=6, ell=2)
        assert rep.max_rel_err < 1e-12
        assert len(rep.per_round) == 6

    def test_error_grows_with_modulus_deviation(self):
        errs = []
        for eps in (0.0, 1e-5, 1e-4, 1e-3, 1e-2):
            chain = perturbed_chain(1 << 30, ell=2, depth=5, eps=eps)
            errs.append(rescale_error_probe(1 << 30, chain, depth=5,
                                            ell=2).max_rel_err)
        assert all(a <= b + 1e-15 for a, b in zip(errs, errs[1:]))
        assert errs[-1] > errs[0]

    def test_per_round_nondecreasing(self):
        chain = perturbed_chain(1 << 30, ell=2, depth=5, eps=1e-4)
        rep = rescale_error_probe(1 << 30, chain, depth=5, ell=2)
        assert all(a <= b for a, b in zip(rep.per_round, rep.per_round[1:]))

    def test_plan_can_feed_the_probe(self):
        g = tiny_model(0)
        plan = plan_modulus_chain(g, delta_log2=40, ell=2)
        rep = rescale_error_probe(plan.delta, plan, depth=plan.levels, ell=2)
        assert rep.max_rel_err < 1e-12

    def test_short_chain_rejected(self):
        with pytest.raises(SimError, match="probe needs"):
            rescale_error_probe(DELTA, [DELTA ** 2], depth=3)
