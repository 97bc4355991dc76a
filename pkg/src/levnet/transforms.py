"""Semantics-preserving graph rewrites.

Three families of rewrites, all verified against the reference evaluator:

- node fusing: fold batchnorms into neighboring convolutions or polynomial
  activations, and collapse skip-addition-plus-activation patterns into a
  single bivariate quadratic node;
- weight redistribution: move polynomial leading coefficients (and pool
  divisors) into adjacent kernels, either per donor with a scalar update
  term, or globally with per-channel output scales so that every polynomial
  in the graph becomes monic at once;
- the named compile pipelines that sequence these passes, plus a numeric
  equivalence checker.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .graph import (AddNode, AvgPoolNode, BatchNormNode, ConvNode, InputNode,
                    LinearNode, ModelGraph, Node, OutputNode, PolyActNode,
                    PolySkipNode, reference_eval)
from .levels import critical_path_levels

PIPELINES = ("P4", "P2", "P2F", "P2R", "P2FR")


class TransformError(Exception):
    pass


@dataclass(frozen=True)
class UpdateTerm:
    """Scalar factor moved between a donor node and its receivers."""
    upsilon: float
    direction: str          # "forward" | "backward"
    donor: str

    def __post_init__(self):
        if self.upsilon == 0:
            raise TransformError("update term must be nonzero")
        if self.direction not in ("forward", "backward"):
            raise TransformError(f"bad update direction {self.direction!r}")


@dataclass
class PassReport:
    rewrites: List[Tuple[str, Tuple[str, ...]]]
    nodes_removed: int
    depth_before: int
    depth_after: int


# ---------------------------------------------------------------------------
# single-pattern fusions
# ---------------------------------------------------------------------------

def fuse_bn_act(bn: BatchNormNode, act: PolyActNode) -> PolyActNode:
    """P(B(x)) as one quadratic: p2 = b1^2 c2, p1 = b1 (2 b0 c2 + c1),
    p0 = b0^2 c2 + b0 c1 + c0, per channel."""
    if act.degree != 2:
        raise TransformError(
            f"batchnorm folds into degree-2 activations only, got degree {act.degree}")
    b1, b0 = bn.b1, bn.b0
    c0, c1, c2 = (np.asarray(c, dtype=np.float64) for c in act.coeffs)
    p2 = b1 * b1 * c2
    p1 = b1 * (2.0 * b0 * c2 + c1)
    p0 = b0 * b0 * c2 + b0 * c1 + c0
    return PolyActNode(act.id, [p0, p1, p2])


def fuse_bn_conv(conv: ConvNode, bn: BatchNormNode) -> ConvNode:
    """B(C(x)) as one convolution: kernel scaled by b1 per output channel,
    bias b1 beta + b0."""
    if bn.gamma.shape[0] != conv.weight.shape[0]:
        raise TransformError(
            f"batchnorm width {bn.gamma.shape[0]} does not match "
            f"{conv.weight.shape[0]} conv output channels")
    b1, b0 = bn.b1, bn.b0
    weight = conv.weight * b1[:, None, None, None]
    bias = b1 * conv.bias + b0
    return ConvNode(conv.id, weight, bias, conv.stride, conv.padding)


def _skip_coeffs(act: PolyActNode, bx1, bx0, by1, by0) -> Dict[str, np.ndarray]:
    c0, c1, c2 = (np.asarray(c, dtype=np.float64) for c in act.coeffs)
    b_sum = np.asarray(bx0 + by0, dtype=np.float64)
    lin = 2.0 * c2 * b_sum + c1
    ones = np.ones_like(np.asarray(bx1, dtype=np.float64))
    return {
        "x2": c2 * bx1 * bx1 * ones,
        "y2": c2 * by1 * by1 * ones,
        "xy": 2.0 * c2 * bx1 * by1 * ones,
        "x": bx1 * lin,
        "y": by1 * lin,
        "c": c2 * b_sum * b_sum + c1 * b_sum + c0,
    }


def fuse_skip_bn_bn(bnX: BatchNormNode, bnY: BatchNormNode,
                    act: PolyActNode) -> PolySkipNode:
    """P(B_X(x) + B_Y(y)) as one bivariate quadratic over the two branches."""
    if act.degree != 2:
        raise TransformError(
            f"skip fusion needs a degree-2 activation, got degree {act.degree}")
    return PolySkipNode(act.id, _skip_coeffs(act, bnX.b1, bnX.b0, bnY.b1, bnY.b0))


def fuse_skip_identity(bnX: BatchNormNode, act: PolyActNode) -> PolySkipNode:
    """P(B_X(x) + y): the identity-shortcut special case of the skip fusion."""
    if act.degree != 2:
        raise TransformError(
            f"skip fusion needs a degree-2 activation, got degree {act.degree}")
    return PolySkipNode(act.id, _skip_coeffs(act, bnX.b1, bnX.b0, 1.0, 0.0))


# ---------------------------------------------------------------------------
# fusing pass
# ---------------------------------------------------------------------------

def _consumer_edges(g: ModelGraph, nid: str) -> List[Tuple[str, int]]:
    """Consumers of nid as (node id, fan-in position) per edge."""
    seen: Dict[str, int] = defaultdict(int)
    out = []
    for s, d in g.edges:
        pos = seen[d]
        seen[d] += 1
        if s == nid:
            out.append((d, pos))
    return out


def _collect_fusion_sites(g: ModelGraph) -> List[Tuple[str, Tuple[str, ...]]]:
    """Disjoint fusion sites. Batchnorms feeding a skip addition are claimed
    by the skip fusion; conv-fed batchnorms elsewhere by the conv fold; the
    remainder feeding an activation by the activation fold. The claims keep
    the rewrites order-independent."""
    sites: List[Tuple[str, Tuple[str, ...]]] = []
    reserved: set = set()
    order = g.topo_order()

    for nid in order:
        node = g.nodes[nid]
        if not isinstance(node, AddNode):
            continue
        cons = g.consumers_of(nid)
        if len(cons) != 1 or not isinstance(g.nodes[cons[0]], PolyActNode):
            continue
        if g.nodes[cons[0]].degree != 2:
            continue
        ins = g.inputs_of(nid)
        is_bn = [
            isinstance(g.nodes[p], BatchNormNode)
            and [c for c, _ in _consumer_edges(g, p)] == [nid]
            for p in ins
        ]
        if is_bn[0] and is_bn[1]:
            sites.append(("fuse_skip_bn_bn", (ins[0], ins[1], nid, cons[0])))
            reserved.update(ins)
        elif is_bn[0]:
            sites.append(("fuse_skip_identity", (ins[0], nid, cons[0])))
            reserved.add(ins[0])
        elif is_bn[1]:
            sites.append(("fuse_skip_identity_y", (ins[1], nid, cons[0])))
            reserved.add(ins[1])

    conv_fed: set = set()
    for nid in order:
        node = g.nodes[nid]
        if not isinstance(node, ConvNode):
            continue
        cons = g.consumers_of(nid)
        if len(cons) == 1 and isinstance(g.nodes[cons[0]], BatchNormNode) \
                and cons[0] not in reserved:
            sites.append(("fuse_bn_conv", (nid, cons[0])))
            conv_fed.add(cons[0])

    for nid in order:
        node = g.nodes[nid]
        if not isinstance(node, BatchNormNode) or nid in reserved or nid in conv_fed:
            continue
        cons = g.consumers_of(nid)
        if len(cons) == 1 and isinstance(g.nodes[cons[0]], PolyActNode) \
                and g.nodes[cons[0]].degree == 2:
            sites.append(("fuse_bn_act", (nid, cons[0])))

    return sites


def _drop_edges(g: ModelGraph, pairs: Sequence[Tuple[str, str]]) -> None:
    remaining = list(pairs)
    kept = []
    for e in g.edges:
        if e in remaining:
            remaining.remove(e)
        else:
            kept.append(e)
    g.edges = kept


def _apply_fusion_site(g: ModelGraph, rule: str, ids: Tuple[str, ...]) -> None:
    if rule == "fuse_bn_conv":
        conv_id, bn_id = ids
        fused = fuse_bn_conv(g.nodes[conv_id], g.nodes[bn_id])
        g.nodes[conv_id] = fused
        _drop_edges(g, [(conv_id, bn_id)])
        g.edges = [(conv_id if s == bn_id else s, d) for s, d in g.edges]
        del g.nodes[bn_id]
    elif rule == "fuse_bn_act":
        bn_id, act_id = ids
        pred = g.inputs_of(bn_id)[0]
        g.nodes[act_id] = fuse_bn_act(g.nodes[bn_id], g.nodes[act_id])
        _drop_edges(g, [(pred, bn_id), (bn_id, act_id)])
        del g.nodes[bn_id]
        g.connect(pred, act_id)
    elif rule in ("fuse_skip_bn_bn", "fuse_skip_identity", "fuse_skip_identity_y"):
        if rule == "fuse_skip_bn_bn":
            bnx_id, bny_id, add_id, act_id = ids
            bnx, bny = g.nodes[bnx_id], g.nodes[bny_id]
            ps = fuse_skip_bn_bn(bnx, bny, g.nodes[act_id])
            x_src = g.inputs_of(bnx_id)[0]
            y_src = g.inputs_of(bny_id)[0]
            dead = [bnx_id, bny_id]
        elif rule == "fuse_skip_identity":
            bnx_id, add_id, act_id = ids
            ps = fuse_skip_identity(g.nodes[bnx_id], g.nodes[act_id])
            x_src = g.inputs_of(bnx_id)[0]
            y_src = [p for p in g.inputs_of(add_id) if p != bnx_id][0]
            dead = [bnx_id]
        else:
            bny_id, add_id, act_id = ids
            bny = g.nodes[bny_id]
            act = g.nodes[act_id]
            coeffs = _skip_coeffs(act, 1.0, 0.0, bny.b1, bny.b0)
            ps = PolySkipNode(act.id, coeffs)
            x_src = [p for p in g.inputs_of(add_id) if p != bny_id][0]
            y_src = g.inputs_of(bny_id)[0]
            dead = [bny_id]
        g.nodes[act_id] = ps
        drop = [(add_id, act_id)]
        for b in dead:
            drop.append((g.inputs_of(b)[0], b))
            drop.append((b, add_id))
        for p in g.inputs_of(add_id):
            if p not in dead:
                drop.append((p, add_id))
        _drop_edges(g, drop)
        for b in dead:
            del g.nodes[b]
        del g.nodes[add_id]
        g.connect(x_src, act_id)
        g.connect(y_src, act_id)
    else:
        raise TransformError(f"unknown fusion rule {rule!r}")


def fuse_pass(g: ModelGraph, rng: Optional[np.random.Generator] = None
              ) -> Tuple[ModelGraph, List[Tuple[str, Tuple[str, ...]]]]:
    """Apply the fusion rules to fixpoint. Site claims make the result
    independent of application order; rng shuffles the order to let tests
    exercise exactly that."""
    g = g.copy()
    applied: List[Tuple[str, Tuple[str, ...]]] = []
    while True:
        sites = _collect_fusion_sites(g)
        if not sites:
            break
        if rng is not None:
            rng.shuffle(sites)
        for rule, ids in sites:
            _apply_fusion_site(g, rule, ids)
            applied.append((rule, ids))
    return g, applied


# ---------------------------------------------------------------------------
# per-donor redistribution
# ---------------------------------------------------------------------------

_RECEIVER_TYPES = (ConvNode, LinearNode, PolyActNode, PolySkipNode, BatchNormNode)


def _scalar_upsilon(value, donor: str) -> float:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim and arr.size > 1 and not np.all(arr == arr.flat[0]):
        raise TransformError(
            f"donor {donor!r} has per-channel leading coefficients; "
            "use the pipeline's channelwise scaling instead")
    return float(arr.flat[0])


def _default_upsilon(node: Node, direction: str) -> float:
    if isinstance(node, PolyActNode):
        c_d = _scalar_upsilon(node.coeffs[-1], node.id)
        if direction == "forward":
            return c_d
        d = node.degree
        if d % 2 == 0 and c_d < 0:
            raise TransformError(
                f"donor {node.id!r} has negative leading coefficient with even "
                "degree; no real root")
        return float(np.copysign(abs(c_d) ** (1.0 / d), c_d))
    if isinstance(node, PolySkipNode):
        c = _scalar_upsilon(node.coeffs["x2"], node.id)
        if direction == "forward":
            return c
        if c < 0:
            raise TransformError(
                f"donor {node.id!r} has negative x^2 coefficient; no real root")
        return float(np.sqrt(c))
    if isinstance(node, AvgPoolNode):
        return _scalar_upsilon(node.divisor, node.id)
    raise TransformError(
        f"donor must be a polynomial or pool node, got {node.kind!r}")


def _forward_targets(g: ModelGraph, donor: str) -> List[Tuple[str, int]]:
    targets: List[Tuple[str, int]] = []
    queue = list(_consumer_edges(g, donor))
    if not queue:
        raise TransformError(f"donor {donor!r} has no consumers")
    while queue:
        nid, pos = queue.pop(0)
        node = g.nodes[nid]
        if isinstance(node, _RECEIVER_TYPES):
            targets.append((nid, pos))
        elif isinstance(node, AvgPoolNode):
            nxt = _consumer_edges(g, nid)
            if not nxt:
                raise TransformError(
                    f"path through pool {nid!r} reaches no receiver")
            queue.extend(nxt)
        else:
            raise TransformError(
                f"no eligible receiver on the path through {nid!r} ({node.kind})")
    return targets


def _backward_targets(g: ModelGraph, donor: str,
                      branch: Optional[int]) -> List[str]:
    preds = g.inputs_of(donor)
    if branch is not None:
        if len(set(preds)) != len(preds):
            raise TransformError(
                f"donor {donor!r} takes the same node on both branches")
        preds = [preds[branch]]
    targets: List[str] = []
    through: List[str] = []
    queue = list(preds)
    while queue:
        nid = queue.pop(0)
        node = g.nodes[nid]
        if isinstance(node, _RECEIVER_TYPES):
            targets.append(nid)
        elif isinstance(node, AvgPoolNode):
            through.append(nid)
            queue.extend(g.inputs_of(nid))
        else:
            raise TransformError(
                f"no eligible receiver upstream through {nid!r} ({node.kind})")
    scope = set(targets) | set(through) | {donor}
    for nid in targets + through:
        for c, _ in _consumer_edges(g, nid):
            if c not in scope:
                raise TransformError(
                    f"{nid!r} also feeds {c!r}; scaling it would change that path")
    return targets


def _poly_scaled(coeffs: List[np.ndarray], factors) -> List[np.ndarray]:
    return [np.asarray(c, dtype=np.float64) * f for c, f in zip(coeffs, factors)]


def _absorb_forward(g: ModelGraph, nid: str, pos: int, u: float) -> None:
    node = g.nodes[nid]
    if isinstance(node, ConvNode):
        g.nodes[nid] = ConvNode(nid, node.weight * u, node.bias.copy(),
                                node.stride, node.padding)
    elif isinstance(node, LinearNode):
        g.nodes[nid] = LinearNode(nid, node.weight * u, node.bias.copy())
    elif isinstance(node, BatchNormNode):
        g.nodes[nid] = BatchNormNode(nid, node.gamma * u, node.beta.copy(),
                                     node.mean / u, node.std.copy())
    elif isinstance(node, PolyActNode):
        d = node.degree
        g.nodes[nid] = PolyActNode(
            nid, _poly_scaled(node.coeffs, [u ** i for i in range(d + 1)]))
    elif isinstance(node, PolySkipNode):
        powers = ({"x2": 2, "xy": 1, "x": 1} if pos == 0
                  else {"y2": 2, "xy": 1, "y": 1})
        coeffs = {k: np.asarray(v, dtype=np.float64) * u ** powers.get(k, 0)
                  for k, v in node.coeffs.items()}
        g.nodes[nid] = PolySkipNode(nid, coeffs)
    else:
        raise TransformError(f"{nid!r} cannot absorb a forward update")


def _absorb_backward(g: ModelGraph, nid: str, u: float) -> None:
    node = g.nodes[nid]
    if isinstance(node, ConvNode):
        g.nodes[nid] = ConvNode(nid, node.weight * u, node.bias * u,
                                node.stride, node.padding)
    elif isinstance(node, LinearNode):
        g.nodes[nid] = LinearNode(nid, node.weight * u, node.bias * u)
    elif isinstance(node, BatchNormNode):
        g.nodes[nid] = BatchNormNode(nid, node.gamma * u, node.beta * u,
                                     node.mean.copy(), node.std.copy())
    elif isinstance(node, PolyActNode):
        g.nodes[nid] = PolyActNode(
            nid, _poly_scaled(node.coeffs, [u] * len(node.coeffs)))
    elif isinstance(node, PolySkipNode):
        g.nodes[nid] = PolySkipNode(
            nid, {k: np.asarray(v, dtype=np.float64) * u
                  for k, v in node.coeffs.items()})
    else:
        raise TransformError(f"{nid!r} cannot absorb a backward update")


def redistribute_forward(g: ModelGraph, donor: str,
                         upsilon: Optional[float] = None) -> ModelGraph:
    """Divide the donor's coefficients (or pool divisor) by upsilon and
    multiply it back into every downstream receiver. The default upsilon is
    the donor's leading coefficient, leaving it monic."""
    if donor not in g.nodes:
        raise TransformError(f"no node {donor!r}")
    node = g.nodes[donor]
    u = float(upsilon) if upsilon is not None else _default_upsilon(node, "forward")
    term = UpdateTerm(u, "forward", donor)
    targets = _forward_targets(g, donor)
    g = g.copy()

    node = g.nodes[donor]
    if isinstance(node, PolyActNode):
        g.nodes[donor] = PolyActNode(
            donor, _poly_scaled(node.coeffs, [1.0 / u] * len(node.coeffs)))
    elif isinstance(node, PolySkipNode):
        g.nodes[donor] = PolySkipNode(
            donor, {k: np.asarray(v, dtype=np.float64) / u
                    for k, v in node.coeffs.items()})
    else:
        g.nodes[donor] = AvgPoolNode(donor, node.k, np.asarray(node.divisor) / u)

    for nid, pos in targets:
        _absorb_forward(g, nid, pos, term.upsilon)
    return g


def redistribute_backward(g: ModelGraph, donor: str,
                          upsilon: Optional[float] = None) -> ModelGraph:
    """Scale the donor's i-th coefficient by upsilon^-i (x-branch exponents
    for the bivariate form) and multiply upsilon into every upstream
    receiver. The default upsilon is the d-th root of the leading
    coefficient, leaving the donor monic."""
    if donor not in g.nodes:
        raise TransformError(f"no node {donor!r}")
    node = g.nodes[donor]
    u = float(upsilon) if upsilon is not None else _default_upsilon(node, "backward")
    term = UpdateTerm(u, "backward", donor)
    branch = 0 if isinstance(node, PolySkipNode) else None
    targets = _backward_targets(g, donor, branch)
    g = g.copy()

    node = g.nodes[donor]
    if isinstance(node, PolyActNode):
        d = node.degree
        g.nodes[donor] = PolyActNode(
            donor, _poly_scaled(node.coeffs, [u ** -i for i in range(d + 1)]))
    elif isinstance(node, PolySkipNode):
        powers = {"x2": -2, "xy": -1, "x": -1}
        g.nodes[donor] = PolySkipNode(
            donor, {k: np.asarray(v, dtype=np.float64) * u ** powers.get(k, 0)
                    for k, v in node.coeffs.items()})
    elif isinstance(node, AvgPoolNode):
        g.nodes[donor] = AvgPoolNode(donor, node.k, np.asarray(node.divisor) / u)
    else:
        raise TransformError(
            f"donor must be a polynomial or pool node, got {node.kind!r}")

    for nid in targets:
        _absorb_backward(g, nid, term.upsilon)
    return g


# ---------------------------------------------------------------------------
# channelwise scaling: the full redistribution pass
# ---------------------------------------------------------------------------

class _Pending(NamedTuple):
    """Scale known up to one convolution's free output scale s:
    t = coeff * s**power, channelwise."""
    conv: str
    coeff: np.ndarray
    power: int


_Scale = Union[np.ndarray, _Pending]


def _node_channels(g: ModelGraph, shapes, nid: str) -> int:
    return shapes[nid][0]


def _solve_power(coeff: np.ndarray, power: int, target: np.ndarray) -> np.ndarray:
    ratio = target / coeff
    if power % 2 == 0 and np.any(ratio < 0):
        raise TransformError(
            "channelwise scaling hit a sign conflict (even power, negative ratio)")
    return np.sign(ratio) * np.abs(ratio) ** (1.0 / power)


class _ScaleSolver:
    def __init__(self, g: ModelGraph):
        self.g = g
        self.shapes = g.validate()
        self.scale: Dict[str, _Scale] = {}
        self.free: Dict[str, Optional[np.ndarray]] = {}

    def resolve(self, nid: str) -> _Scale:
        t = self.scale[nid]
        if isinstance(t, _Pending) and self.free.get(t.conv) is not None:
            return t.coeff * self.free[t.conv] ** t.power
        return t

    def concrete(self, nid: str) -> np.ndarray:
        t = self.resolve(nid)
        if isinstance(t, _Pending):
            raise TransformError(f"scale of {nid!r} is unresolved")
        return t

    def pin_default(self, conv_id: str) -> None:
        """Choose a free conv output scale keeping its consumer's forced
        scale near one: sqrt-like root of the activation's leading
        coefficient, the batchnorm slope, or one."""
        if self.free.get(conv_id) is not None:
            return
        g = self.g
        width = g.nodes[conv_id].weight.shape[0]
        val = np.ones(width)
        cons = g.consumers_of(conv_id)
        if len(cons) == 1:
            node = g.nodes[cons[0]]
            if isinstance(node, PolyActNode):
                c_d = np.asarray(node.coeffs[-1], dtype=np.float64)
                val = val * np.abs(c_d) ** (1.0 / node.degree)
            elif isinstance(node, BatchNormNode):
                val = val * node.b1
        self.free[conv_id] = val

    def bind(self, x_id: str, y_id: str, ratio: np.ndarray) -> np.ndarray:
        """Enforce t_x == ratio * t_y, pinning or solving free scales as
        needed; returns the concrete t_x."""
        tx, ty = self.resolve(x_id), self.resolve(y_id)
        if isinstance(tx, _Pending) and isinstance(ty, _Pending):
            if tx.conv == ty.conv:
                raise TransformError(
                    "cannot bind two branches driven by the same free scale")
            self.pin_default(ty.conv)
            ty = self.resolve(y_id)
        if isinstance(tx, _Pending):
            self.free[tx.conv] = _solve_power(tx.coeff, tx.power, ratio * ty)
            return self.concrete(x_id)
        if isinstance(ty, _Pending):
            self.free[ty.conv] = _solve_power(ty.coeff * ratio, ty.power, tx)
            return tx
        if not np.allclose(tx, ratio * ty, rtol=1e-9, atol=1e-12):
            raise TransformError(
                "branch scales disagree at a join and no free scale remains")
        return tx


def redistribute_pass(g: ModelGraph) -> Tuple[ModelGraph, List[Tuple[str, Tuple[str, ...]]]]:
    """Make every polynomial monic, every batchnorm slope one, and every pool
    divisor one at once, by assigning each node a per-channel output scale
    and folding the scale changes into convolution and linear kernels.

    Convolutions are the flexible points: each one gets a free output scale,
    forced wherever a join or a monic form pins it, defaulted otherwise. The
    final linear layer pins the logits back to scale one, so the transformed
    graph computes exactly the original function.
    """
    g = g.copy()
    solver = _ScaleSolver(g)
    shapes = solver.shapes
    order = g.topo_order()

    for nid in order:
        node = g.nodes[nid]
        preds = g.inputs_of(nid)
        if isinstance(node, InputNode):
            solver.scale[nid] = np.ones(node.channels)
        elif isinstance(node, LinearNode):
            solver.scale[nid] = np.ones(node.weight.shape[0])
        elif isinstance(node, ConvNode):
            width = node.weight.shape[0]
            cons = g.consumers_of(nid)
            if len(cons) == 1 and isinstance(g.nodes[cons[0]], OutputNode):
                solver.scale[nid] = np.ones(width)
            else:
                solver.free[nid] = None
                solver.scale[nid] = _Pending(nid, np.ones(width), 1)
        elif isinstance(node, BatchNormNode):
            t = solver.resolve(preds[0])
            if isinstance(t, _Pending):
                solver.scale[nid] = _Pending(t.conv, t.coeff / node.b1, t.power)
            else:
                solver.scale[nid] = t / node.b1
        elif isinstance(node, AvgPoolNode):
            div = np.asarray(node.divisor, dtype=np.float64)
            t = solver.resolve(preds[0])
            if isinstance(t, _Pending):
                solver.scale[nid] = _Pending(t.conv, t.coeff / div, t.power)
            else:
                solver.scale[nid] = t / div
        elif isinstance(node, PolyActNode):
            d = node.degree
            c_d = np.asarray(node.coeffs[-1], dtype=np.float64)
            if np.any(c_d == 0):
                raise TransformError(
                    f"activation {nid!r} has a zero leading coefficient")
            t = solver.resolve(preds[0])
            if isinstance(t, _Pending):
                solver.scale[nid] = _Pending(t.conv, t.coeff ** d / c_d, t.power * d)
            else:
                solver.scale[nid] = t ** d / c_d
        elif isinstance(node, AddNode):
            width = _node_channels(g, shapes, nid)
            t = solver.bind(preds[0], preds[1], np.ones(width))
            solver.scale[nid] = t
        elif isinstance(node, PolySkipNode):
            dx2 = np.asarray(node.coeffs["x2"], dtype=np.float64)
            dy2 = np.asarray(node.coeffs["y2"], dtype=np.float64)
            dxy = np.asarray(node.coeffs["xy"], dtype=np.float64)
            if np.any(dx2 == 0) or np.any(dxy == 0):
                raise TransformError(
                    f"join {nid!r} has degenerate quadratic coefficients")
            if not np.allclose(dxy * dxy, 4.0 * dx2 * dy2, rtol=1e-8):
                raise TransformError(
                    f"join {nid!r} cannot be made monic: its quadratic form "
                    "is not a perfect square")
            tx = solver.bind(preds[0], preds[1], 2.0 * dx2 / dxy)
            solver.scale[nid] = tx * tx / dx2
        elif isinstance(node, OutputNode):
            t = solver.resolve(preds[0])
            if isinstance(t, _Pending):
                solver.pin_default(t.conv)
                t = solver.concrete(preds[0])
            if not np.allclose(t, 1.0):
                raise TransformError("output scale did not land on one")
            solver.scale[nid] = t
        else:
            raise TransformError(f"cannot scale node kind {node.kind!r}")

    for nid in order:
        if isinstance(g.nodes[nid], ConvNode) and solver.free.get(nid, 1) is None:
            solver.pin_default(nid)

    rewrites: List[Tuple[str, Tuple[str, ...]]] = []
    for nid in order:
        node = g.nodes[nid]
        preds = g.inputs_of(nid)
        if isinstance(node, (InputNode, OutputNode, AddNode)):
            continue
        t_v = solver.concrete(nid)
        t_u = [solver.concrete(p) for p in preds]
        if np.all(t_v == 1.0) and all(np.all(t == 1.0) for t in t_u):
            if not isinstance(node, (BatchNormNode, PolyActNode, PolySkipNode,
                                     AvgPoolNode)):
                continue
        if isinstance(node, ConvNode):
            w = node.weight * t_v[:, None, None, None] / t_u[0][None, :, None, None]
            g.nodes[nid] = ConvNode(nid, w, node.bias * t_v,
                                    node.stride, node.padding)
        elif isinstance(node, LinearNode):
            w = node.weight * t_v[:, None] / t_u[0][None, :]
            g.nodes[nid] = LinearNode(nid, w, node.bias * t_v)
        elif isinstance(node, BatchNormNode):
            width = node.gamma.shape[0]
            beta = np.broadcast_to(t_v * node.b0, (width,)).astype(np.float64)
            g.nodes[nid] = BatchNormNode(nid, np.ones(width), beta.copy(),
                                         np.zeros(width), np.ones(width))
        elif isinstance(node, PolyActNode):
            d = node.degree
            coeffs = [np.asarray(node.coeffs[i], dtype=np.float64) * t_v / t_u[0] ** i
                      for i in range(d)]
            coeffs.append(np.asarray(1.0))
            g.nodes[nid] = PolyActNode(nid, coeffs)
        elif isinstance(node, PolySkipNode):
            c = {k: np.asarray(v, dtype=np.float64) for k, v in node.coeffs.items()}
            tx, ty = t_u
            g.nodes[nid] = PolySkipNode(nid, {
                "x2": np.asarray(1.0),
                "y2": np.asarray(1.0),
                "xy": np.asarray(2.0),
                "x": t_v * c["x"] / tx,
                "y": t_v * c["y"] / ty,
                "c": t_v * c["c"],
            })
        elif isinstance(node, AvgPoolNode):
            g.nodes[nid] = AvgPoolNode(nid, node.k, np.asarray(1.0))
        rewrites.append(("channel_scale", (nid,)))
    return g, rewrites


# ---------------------------------------------------------------------------
# pipelines and equivalence
# ---------------------------------------------------------------------------

def apply_pipeline(g: ModelGraph, strategy: str) -> Tuple[ModelGraph, PassReport]:
    """Run the named pass sequence: P2F fuses to fixpoint, P2R normalizes all
    scales channelwise, P2FR does both; P4 and P2 only validate the form."""
    name = strategy.upper()
    if name not in PIPELINES:
        raise TransformError(f"unknown strategy {strategy!r} (have {PIPELINES})")
    g.validate()
    want = 4 if name == "P4" else 2
    for node in g.nodes.values():
        if isinstance(node, PolyActNode) and node.degree != want:
            raise TransformError(
                f"{name} expects degree-{want} activations, "
                f"{node.id!r} has degree {node.degree}")

    depth_before = critical_path_levels(g)
    out = g.copy()
    rewrites: List[Tuple[str, Tuple[str, ...]]] = []
    if name in ("P2F", "P2FR"):
        out, rw = fuse_pass(out)
        rewrites.extend(rw)
    if name in ("P2R", "P2FR"):
        out, rw = redistribute_pass(out)
        rewrites.extend(rw)
    out.validate()
    report = PassReport(
        rewrites=rewrites,
        nodes_removed=len(g.nodes) - len(out.nodes),
        depth_before=depth_before,
        depth_after=critical_path_levels(out),
    )
    return out, report


@dataclass
class EquivReport:
    n_inputs: int
    max_rel_err: float
    argmax_match_rate: float
    passed: bool


def check_equivalence(ref: ModelGraph, candidate: ModelGraph,
                      n_inputs: int = 100, rtol: float = 1e-8,
                      seed: int = 0) -> EquivReport:
    """Compare logits of two graphs on random inputs drawn uniform in
    [-1, 1] (the normalized-image range the generated models are bounded
    for): worst relative error against the reference's magnitude, and argmax
    agreement."""
    shapes = ref.validate()
    candidate.validate()
    in_shape = shapes[ref.input_id()]
    rng = np.random.default_rng(seed)
    worst = 0.0
    matches = 0
    for _ in range(n_inputs):
        x = rng.uniform(-1.0, 1.0, in_shape)
        a = reference_eval(ref, x)
        b = reference_eval(candidate, x)
        err = float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(a))), 1e-12))
        worst = max(worst, err)
        matches += int(np.argmax(a) == np.argmax(b))
    return EquivReport(
        n_inputs=n_inputs,
        max_rel_err=worst,
        argmax_match_rate=matches / n_inputs,
        passed=worst <= rtol,
    )
