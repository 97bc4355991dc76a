"""Multiplicative-level analysis per strategy, sublevel arithmetic, and
modulus-chain planning via an emergent rescale walk over the graph.

The planner walks the graph once, simulating (scale sublevel, rescale) state
per branch with rescale moduli of capacity ell; the same schedule drives the
simulator lowering, so rescales execute exactly where they were planned.
Planning supports the node forms the compile strategies produce (degree <= 2
polynomials); degree-4 networks are analyzer-only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from typing import Dict, List, Optional, Tuple

import numpy as np

from .graph import (AddNode, AvgPoolNode, BatchNormNode, ConvNode, GraphError,
                    InputNode, LinearNode, ModelGraph, Node, OutputNode,
                    PolyActNode, PolySkipNode)
from .polyfit import mult_depth

STRATEGIES = ("P4", "P2", "P2F", "P2R", "P2FR", "P2FRT")


class PlanError(Exception):
    pass


class DepthExhausted(PlanError):
    """A rescale was required with no rescale modulus left."""


# ---------------------------------------------------------------------------
# per-node level costs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LevelCostTable:
    """Levels consumed per node, sensitive to the node's normalized form:
    unit BN slopes, unit pool divisors, and monic polynomials are cheaper."""

    conv: int = 1
    batchnorm: int = 1
    batchnorm_unit_slope: int = 0
    avgpool: int = 1
    avgpool_unit_divisor: int = 0
    linear: int = 1

    def cost(self, node: Node) -> int:
        if isinstance(node, (InputNode, OutputNode, AddNode)):
            return 0
        if isinstance(node, ConvNode):
            return self.conv
        if isinstance(node, LinearNode):
            return self.linear
        if isinstance(node, BatchNormNode):
            return self.batchnorm_unit_slope if np.all(node.b1 == 1.0) else self.batchnorm
        if isinstance(node, AvgPoolNode):
            unit = bool(np.all(np.asarray(node.divisor) == 1.0))
            return self.avgpool_unit_divisor if unit else self.avgpool
        if isinstance(node, PolyActNode):
            return mult_depth(node.degree, monic=node.is_monic())
        if isinstance(node, PolySkipNode):
            return mult_depth(2, monic=node.is_monic())
        raise PlanError(f"no level cost for node kind {node.kind!r}")


DEFAULT_COSTS = LevelCostTable()


def critical_path_levels(g: ModelGraph, table: LevelCostTable = DEFAULT_COSTS) -> int:
    """Longest input-to-output path by summed node costs (shortcut branches
    sit in parallel and do not add depth)."""
    dist: Dict[str, int] = {}
    for nid in g.topo_order():
        preds = g.inputs_of(nid)
        base = max((dist[p] for p in preds), default=0)
        dist[nid] = base + table.cost(g.nodes[nid])
    return dist[g.output_id()]


def _check_strategy_form(g: ModelGraph, strategy: str) -> None:
    acts = [n for n in g.nodes.values() if isinstance(n, PolyActNode)]
    skips = [n for n in g.nodes.values() if isinstance(n, PolySkipNode)]
    bns = [n for n in g.nodes.values() if isinstance(n, BatchNormNode)]
    pools = [n for n in g.nodes.values() if isinstance(n, AvgPoolNode)]

    def fail(msg: str) -> None:
        raise PlanError(f"graph form inconsistent with {strategy}: {msg}")

    want_degree = 4 if strategy == "P4" else 2
    for n in acts:
        if n.degree != want_degree:
            fail(f"activation {n.id!r} has degree {n.degree}, expected {want_degree}")
    if strategy == "P4" and skips:
        fail(f"polyskip {skips[0].id!r} present in a degree-4 graph")
    if strategy in ("P2F", "P2FR", "P2FRT") and bns:
        fail(f"batchnorm {bns[0].id!r} survived fusing")
    if strategy in ("P2R", "P2FR", "P2FRT"):
        for n in acts + skips:
            if not n.is_monic():
                fail(f"{n.id!r} is not monic after redistribution")
        for n in bns:
            if not np.all(n.b1 == 1.0):
                fail(f"batchnorm {n.id!r} slope not normalized")
        for n in pools:
            if not np.all(np.asarray(n.divisor) == 1.0):
                fail(f"pool {n.id!r} divisor not normalized")


def analyze_levels(g: ModelGraph, strategy: str,
                   table: LevelCostTable = DEFAULT_COSTS) -> int:
    """Critical-path level count under a named strategy; P2FRT halves the
    P2FR total (ceil) per the tower-reuse schedule."""
    if strategy not in STRATEGIES:
        raise PlanError(f"unknown strategy {strategy!r} (have {STRATEGIES})")
    _check_strategy_form(g, strategy)
    levels = critical_path_levels(g, table)
    if strategy == "P2FRT":
        return -(-levels // 2)
    return levels


# ---------------------------------------------------------------------------
# sublevel arithmetic
# ---------------------------------------------------------------------------

def _log_of(value) -> float:
    if isinstance(value, Fraction):
        return math.log(value.numerator) - math.log(value.denominator)
    if isinstance(value, int):
        return math.log(value)
    return math.log(float(value))


def sublevel(scale, delta) -> int:
    """lambda(x) = round(log_delta scale), round half away from zero."""
    if (isinstance(scale, (int, float)) and scale <= 0) or \
            (isinstance(scale, Fraction) and scale <= 0):
        raise PlanError(f"scale must be positive, got {scale}")
    x = _log_of(scale) / _log_of(delta)
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


@dataclass
class CiphertextMeta:
    scale: Fraction         # true scale Delta_x
    level: int              # rescale moduli remaining
    sublevel: int           # round(log_delta scale), tracked explicitly

    def copy(self) -> "CiphertextMeta":
        return CiphertextMeta(self.scale, self.level, self.sublevel)


def needs_rescale(meta: CiphertextMeta, lam_q: int) -> bool:
    if meta.sublevel > lam_q:
        if meta.level < 1:
            raise DepthExhausted(
                f"rescale needed at sublevel {meta.sublevel} but no modulus left")
        return True
    return False


def apply_rescale(meta: CiphertextMeta, q: int, delta: int) -> CiphertextMeta:
    if meta.level < 1:
        raise DepthExhausted("rescale with zero moduli remaining")
    lam_q = sublevel(q, delta)
    return CiphertextMeta(
        scale=meta.scale / q,
        level=meta.level - 1,
        sublevel=meta.sublevel - lam_q,
    )


# ---------------------------------------------------------------------------
# the walk: where rescales and plaintext sublevels go
# ---------------------------------------------------------------------------

@dataclass
class NodeStep:
    """Planned sublevel behavior of one node."""
    node_id: str
    in_lams: List[int]
    out_lam: int                 # after this node's trailing rescales
    rescales: int                # trailing rescales on the node's output
    # per-input alignment: (boost plaintext sublevel, rescales) or None
    align: List[Optional[Tuple[int, int]]] = field(default_factory=list)
    plain_lams: Dict[str, int] = field(default_factory=dict)
    consumed: int = 0            # worst-case rescales from input to here


@dataclass
class WalkSchedule:
    ell: int
    steps: Dict[str, NodeStep]
    total: int                   # rescale moduli consumed on the critical path


def _eager(lam: int, ell: int) -> Tuple[int, int]:
    n = 0
    while lam > ell:
        lam -= ell
        n += 1
    return lam, n


def _align_plan(lam_hi: int, lam_lo: int, ell: int) -> Tuple[int, int]:
    """Boost sublevel and rescale count bringing lam_hi down to lam_lo."""
    k = -(-(lam_hi + 1 - lam_lo) // ell)
    boost = lam_lo + k * ell - lam_hi
    if not 1 <= boost <= ell:
        raise PlanError(f"cannot align sublevels {lam_hi} -> {lam_lo} at ell={ell}")
    return boost, k


def walk_schedule(g: ModelGraph, ell: int) -> WalkSchedule:
    """Topological sublevel walk: inputs and weights at sublevel 1, constants
    at the consumer's current sublevel, eager rescale whenever the sublevel
    exceeds ell, one boost+rescale on the slack branch at misaligned joins."""
    if ell < 1:
        raise PlanError(f"sublevel capacity must be >= 1, got {ell}")
    g.validate()
    steps: Dict[str, NodeStep] = {}

    for nid in g.topo_order():
        node = g.nodes[nid]
        preds = g.inputs_of(nid)
        in_lams = [steps[p].out_lam for p in preds]
        in_used = [steps[p].consumed for p in preds]
        step = NodeStep(nid, in_lams, 0, 0, [None] * len(preds))

        if isinstance(node, InputNode):
            step.out_lam, step.consumed = 1, 0
        elif isinstance(node, (ConvNode, LinearNode)):
            pre = in_lams[0] + 1
            step.plain_lams = {"weight": 1, "bias": pre}
            step.out_lam, step.rescales = _eager(pre, ell)
            step.consumed = in_used[0] + step.rescales
        elif isinstance(node, BatchNormNode):
            if np.all(node.b1 == 1.0):
                step.plain_lams = {"b0": in_lams[0]}
                step.out_lam, step.consumed = in_lams[0], in_used[0]
            else:
                pre = in_lams[0] + 1
                step.plain_lams = {"b1": 1, "b0": pre}
                step.out_lam, step.rescales = _eager(pre, ell)
                step.consumed = in_used[0] + step.rescales
        elif isinstance(node, AvgPoolNode):
            if np.all(np.asarray(node.divisor) == 1.0):
                step.out_lam, step.consumed = in_lams[0], in_used[0]
            else:
                pre = in_lams[0] + 1
                step.plain_lams = {"divisor": 1}
                step.out_lam, step.rescales = _eager(pre, ell)
                step.consumed = in_used[0] + step.rescales
        elif isinstance(node, PolyActNode):
            step.out_lam, step.rescales, step.plain_lams = _plan_polyact(
                node, in_lams[0], ell)
            step.consumed = in_used[0] + step.rescales
        elif isinstance(node, (AddNode, PolySkipNode)):
            lam, used = _plan_join(step, in_lams, in_used, ell)
            if isinstance(node, AddNode):
                step.out_lam, step.consumed = lam, used
            else:
                step.out_lam, step.rescales, step.plain_lams = _plan_polyskip(
                    node, lam, ell)
                step.consumed = used + step.rescales
        elif isinstance(node, OutputNode):
            step.out_lam, step.consumed = in_lams[0], in_used[0]
        else:
            raise PlanError(f"cannot plan node kind {node.kind!r}")

        steps[nid] = step

    return WalkSchedule(ell=ell, steps=steps, total=steps[g.output_id()].consumed)


def _plan_polyact(node: PolyActNode, lam: int, ell: int):
    if node.degree > 2:
        raise PlanError(
            f"planning supports degree <= 2 polynomials, {node.id!r} has {node.degree}")
    if node.degree == 1:
        if node.is_monic():
            return lam, 0, {"c0": lam}
        pre = lam + 1
        out, n = _eager(pre, ell)
        return out, n, {"c1": 1, "c0": pre}
    if node.is_monic():
        pre = 2 * lam
        out, n = _eager(pre, ell)
        return out, n, {"c1": lam, "c0": pre}
    # non-monic quadratic: (c2 x) [eager] * x, linear terms aligned to the product
    t_lam, t_resc = _eager(lam + 1, ell)
    pre = t_lam + lam
    out, n = _eager(pre, ell)
    return out, t_resc + n, {"c2": 1, "c1": pre - lam, "c0": pre}


def _plan_polyskip(node: PolySkipNode, lam: int, ell: int):
    if node.is_monic():
        pre = 2 * lam
        out, n = _eager(pre, ell)
        return out, n, {"x": lam, "y": lam, "c": pre}
    # (dx2 x + dxy y) * x + dy2 y * y + linear terms aligned to the products
    pre = 2 * lam + 1
    out, n = _eager(pre, ell)
    return out, n, {"x2": 1, "y2": 1, "xy": 1, "x": lam + 1, "y": lam + 1, "c": pre}


def _plan_join(step: NodeStep, in_lams: List[int], in_used: List[int], ell: int):
    lams = list(in_lams)
    used = list(in_used)
    lo = min(lams)
    for i, lam in enumerate(lams):
        if lam > lo:
            boost, k = _align_plan(lam, lo, ell)
            step.align[i] = (boost, k)
            used[i] += k
    return lo, max(used)


# ---------------------------------------------------------------------------
# modulus chains
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Modulus:
    role: str          # "output" | "rescale" | "special"
    bits: int
    sublevel: int
    value: int         # exact synthesized value, or the preset prime


@dataclass
class ModulusChainPlan:
    name: str
    ring_degree_log2: int
    delta_log2: int
    ell: int
    moduli: List[Modulus]
    schedule: WalkSchedule
    levels: int

    @property
    def delta(self) -> int:
        return 1 << self.delta_log2

    @property
    def log2_q_total(self) -> int:
        return sum(m.bits for m in self.moduli)

    def rescale_moduli(self) -> List[Modulus]:
        return [m for m in self.moduli if m.role == "rescale"]

    def to_json(self) -> Dict:
        return {
            "name": self.name,
            "ring_degree_log2": self.ring_degree_log2,
            "delta_log2": self.delta_log2,
            "ell": self.ell,
            "levels": self.levels,
            "log2_q_total": self.log2_q_total,
            "moduli": [
                {"role": m.role, "bits": m.bits, "sublevel": m.sublevel,
                 "value": hex(m.value)}
                for m in self.moduli
            ],
            "rescale_schedule": {
                nid: {
                    "in_sublevels": s.in_lams,
                    "out_sublevel": s.out_lam,
                    "rescales": s.rescales,
                    "align": [list(a) if a else None for a in s.align],
                    "plaintext_sublevels": s.plain_lams,
                    "consumed": s.consumed,
                }
                for nid, s in self.schedule.steps.items()
            },
        }


def plan_from_json(d: Dict) -> ModulusChainPlan:
    """Rebuild a plan from its ``to_json`` form (the CLI artifact)."""
    steps = {}
    for nid, e in d["rescale_schedule"].items():
        steps[nid] = NodeStep(
            node_id=nid,
            in_lams=list(e["in_sublevels"]),
            out_lam=e["out_sublevel"],
            rescales=e["rescales"],
            align=[tuple(a) if a else None for a in e["align"]],
            plain_lams=dict(e["plaintext_sublevels"]),
            consumed=e["consumed"],
        )
    schedule = WalkSchedule(ell=d["ell"], steps=steps, total=d["levels"])
    moduli = [Modulus(m["role"], m["bits"], m["sublevel"], int(m["value"], 16))
              for m in d["moduli"]]
    return ModulusChainPlan(
        name=d["name"],
        ring_degree_log2=d["ring_degree_log2"],
        delta_log2=d["delta_log2"],
        ell=d["ell"],
        moduli=moduli,
        schedule=schedule,
        levels=d["levels"],
    )


def load_preset(name: str) -> Dict:
    ref = resources.files("levnet.presets").joinpath(f"{name}.json")
    try:
        return json.loads(ref.read_text())
    except FileNotFoundError:
        raise PlanError(f"no such preset {name!r}") from None


def plan_modulus_chain(g: ModelGraph, delta_log2: int = 40, ell: int = 2,
                       preset: Optional[str] = None,
                       ring_degree_log2: int = 11) -> ModulusChainPlan:
    """Walk the graph and emit the modulus chain realizing its schedule.

    Without a preset, moduli are synthesized exactly (q_i = Delta^ell), which
    is the simulator's error-free mode. With a preset, the chain carries the
    published bit sizes and prime values, and the walk must land on exactly
    the preset's rescale count.
    """
    cfg = None
    if preset is not None:
        cfg = load_preset(preset)
        delta_log2 = cfg["delta_log2"]
        ell = cfg["ell"]
        ring_degree_log2 = cfg["ring_degree_log2"]

    schedule = walk_schedule(g, ell)
    delta = 1 << delta_log2

    if cfg is None:
        q0 = Modulus("output", delta_log2, 1, 1 << delta_log2)
        qi = [Modulus("rescale", ell * delta_log2, ell, delta ** ell)
              for _ in range(schedule.total)]
        special = Modulus("special", ell * delta_log2, ell, delta ** ell)
        name = "exact"
    else:
        if schedule.total != cfg["rescale_count"]:
            raise PlanError(
                f"preset {preset!r} provides {cfg['rescale_count']} rescale moduli "
                f"but the schedule needs {schedule.total}")
        hexes = cfg["moduli_hex"]
        q0 = Modulus("output", cfg["output_bits"],
                     sublevel(int(hexes["output"], 16), delta),
                     int(hexes["output"], 16))
        qi = [Modulus("rescale", cfg["rescale_bits"], ell, int(h, 16))
              for h in hexes["rescale"]]
        special = Modulus("special", cfg["special_bits"],
                          sublevel(int(hexes["special"], 16), delta),
                          int(hexes["special"], 16))
        name = preset

    return ModulusChainPlan(
        name=name,
        ring_degree_log2=ring_degree_log2,
        delta_log2=delta_log2,
        ell=ell,
        moduli=[q0] + qi + [special],
        schedule=schedule,
        levels=schedule.total,
    )
