"""Typed CNN computation graphs: node kinds, validation, JSON round trip,
a plaintext reference evaluator, and generators for ResNet-shaped test graphs.

The JSON model format keeps every float64 tensor in one little-endian blob
(base64) and references it by {offset, shape}, so load -> save -> load is
bit exact.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np


class GraphError(Exception):
    """Invariant violation in a model graph (names the offending node)."""


class ModelFormatError(Exception):
    """Model file does not parse as the neutral format."""


# ---------------------------------------------------------------------------
# node kinds
# ---------------------------------------------------------------------------

@dataclass
class Node:
    id: str

    @property
    def kind(self) -> str:
        return KIND_BY_TYPE[type(self)]


@dataclass
class InputNode(Node):
    channels: int = 1
    height: int = 1
    width: int = 1

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.channels, self.height, self.width)


@dataclass
class ConvNode(Node):
    weight: np.ndarray = None  # (O, I, kh, kw)
    bias: np.ndarray = None    # (O,)
    stride: int = 1
    padding: int = 0


@dataclass
class BatchNormNode(Node):
    gamma: np.ndarray = None
    beta: np.ndarray = None
    mean: np.ndarray = None
    std: np.ndarray = None

    @property
    def b1(self) -> np.ndarray:
        return self.gamma / self.std

    @property
    def b0(self) -> np.ndarray:
        return self.beta - self.b1 * self.mean


@dataclass
class PolyActNode(Node):
    # coeffs[k] is the coefficient of x^k, shape () or (channels,)
    coeffs: List[np.ndarray] = field(default_factory=list)

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def is_monic(self) -> bool:
        return bool(np.all(self.coeffs[-1] == 1.0))


# canonical monomial order for the bivariate quadratic S(x, y)
PS_KEYS = ("x2", "y2", "xy", "x", "y", "c")


@dataclass
class PolySkipNode(Node):
    # bivariate quadratic over the two fan-ins; values shape () or (channels,)
    coeffs: Dict[str, np.ndarray] = field(default_factory=dict)

    def is_monic(self) -> bool:
        return bool(
            np.all(self.coeffs["x2"] == 1.0)
            and np.all(self.coeffs["y2"] == 1.0)
            and np.all(self.coeffs["xy"] == 2.0)
        )


@dataclass
class AvgPoolNode(Node):
    k: int = 1              # number of pooled elements (global pool: h*w)
    divisor: np.ndarray = None  # shape (), normally 1/k; redistribution sets 1


@dataclass
class LinearNode(Node):
    weight: np.ndarray = None  # (K, n)
    bias: np.ndarray = None    # (K,)


@dataclass
class AddNode(Node):
    pass


@dataclass
class OutputNode(Node):
    pass


KIND_BY_TYPE = {
    InputNode: "input",
    ConvNode: "conv",
    BatchNormNode: "batchnorm",
    PolyActNode: "polyact",
    PolySkipNode: "polyskip",
    AvgPoolNode: "avgpool",
    LinearNode: "linear",
    AddNode: "add",
    OutputNode: "output",
}
TYPE_BY_KIND = {v: k for k, v in KIND_BY_TYPE.items()}

ARITY = {
    "input": 0, "conv": 1, "batchnorm": 1, "polyact": 1, "avgpool": 1,
    "linear": 1, "output": 1, "add": 2, "polyskip": 2,
}


def channel_view(coef: np.ndarray, ndim: int) -> np.ndarray:
    """Broadcast a () or (C,) coefficient against a (C, ...) value."""
    a = np.asarray(coef, dtype=np.float64)
    if a.ndim == 0:
        return a
    return a.reshape(a.shape + (1,) * (ndim - 1))


# ---------------------------------------------------------------------------
# the graph
# ---------------------------------------------------------------------------

class ModelGraph:
    """DAG of typed nodes. Edges are ordered; a node's fan-in order is the
    order its incoming edges were added (polyskip: x branch first)."""

    def __init__(self) -> None:
        self.nodes: Dict[str, Node] = {}
        self.edges: List[Tuple[str, str]] = []

    def add(self, node: Node) -> Node:
        if node.id in self.nodes:
            raise GraphError(f"duplicate node id {node.id!r}")
        self.nodes[node.id] = node
        return node

    def connect(self, src: str, dst: str) -> None:
        self.edges.append((src, dst))

    def inputs_of(self, nid: str) -> List[str]:
        return [s for s, d in self.edges if d == nid]

    def consumers_of(self, nid: str) -> List[str]:
        return [d for s, d in self.edges if s == nid]

    def copy(self) -> "ModelGraph":
        g = ModelGraph()
        for node in self.nodes.values():
            g.add(_copy_node(node))
        g.edges = list(self.edges)
        return g

    # -- structure ----------------------------------------------------------

    def topo_order(self) -> List[str]:
        indeg = {nid: 0 for nid in self.nodes}
        for _, d in self.edges:
            if d not in indeg:
                raise GraphError(f"edge references unknown node {d!r}")
            indeg[d] += 1
        for s, _ in self.edges:
            if s not in indeg:
                raise GraphError(f"edge references unknown node {s!r}")
        ready = [nid for nid in self.nodes if indeg[nid] == 0]
        order: List[str] = []
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            for d in self.consumers_of(nid):
                indeg[d] -= 1
                if indeg[d] == 0:
                    ready.append(d)
        if len(order) != len(self.nodes):
            stuck = sorted(set(self.nodes) - set(order))
            raise GraphError(f"graph has a cycle through {stuck[:3]}")
        return order

    def input_id(self) -> str:
        ids = [n.id for n in self.nodes.values() if isinstance(n, InputNode)]
        if len(ids) != 1:
            raise GraphError(f"expected exactly one input node, found {len(ids)}")
        return ids[0]

    def output_id(self) -> str:
        ids = [n.id for n in self.nodes.values() if isinstance(n, OutputNode)]
        if len(ids) != 1:
            raise GraphError(f"expected exactly one output node, found {len(ids)}")
        return ids[0]

    # -- validation ---------------------------------------------------------

    def validate(self) -> Dict[str, Tuple[int, ...]]:
        """Check all graph invariants; returns the per-node shape map."""
        order = self.topo_order()
        self.input_id(), self.output_id()
        for nid, node in self.nodes.items():
            got = len(self.inputs_of(nid))
            want = ARITY[node.kind]
            if got != want:
                raise GraphError(f"node {nid!r} ({node.kind}) has fan-in {got}, wants {want}")
        for node in self.nodes.values():
            _check_node_params(node)
        return self._infer_shapes(order)

    def _infer_shapes(self, order: Optional[List[str]] = None) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        for nid in order or self.topo_order():
            node = self.nodes[nid]
            ins = [shapes[i] for i in self.inputs_of(nid)]
            shapes[nid] = _node_out_shape(node, ins)
        return shapes

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return self._infer_shapes()


def _copy_node(node: Node) -> Node:
    if isinstance(node, InputNode):
        return InputNode(node.id, node.channels, node.height, node.width)
    if isinstance(node, ConvNode):
        return ConvNode(node.id, node.weight.copy(), node.bias.copy(), node.stride, node.padding)
    if isinstance(node, BatchNormNode):
        return BatchNormNode(node.id, node.gamma.copy(), node.beta.copy(),
                             node.mean.copy(), node.std.copy())
    if isinstance(node, PolyActNode):
        return PolyActNode(node.id, [np.array(c, dtype=np.float64) for c in node.coeffs])
    if isinstance(node, PolySkipNode):
        return PolySkipNode(node.id, {k: np.array(v, dtype=np.float64) for k, v in node.coeffs.items()})
    if isinstance(node, AvgPoolNode):
        return AvgPoolNode(node.id, node.k, np.array(node.divisor, dtype=np.float64))
    if isinstance(node, LinearNode):
        return LinearNode(node.id, node.weight.copy(), node.bias.copy())
    if isinstance(node, AddNode):
        return AddNode(node.id)
    if isinstance(node, OutputNode):
        return OutputNode(node.id)
    raise GraphError(f"unknown node type {type(node).__name__}")


def _check_node_params(node: Node) -> None:
    if isinstance(node, InputNode):
        if min(node.shape) < 1:
            raise GraphError(f"node {node.id!r}: all dimensions must be >= 1")
    elif isinstance(node, ConvNode):
        if node.weight.ndim != 4:
            raise GraphError(f"node {node.id!r}: conv weight must be 4-D")
        if node.weight.shape[2] < 1 or node.weight.shape[3] < 1:
            raise GraphError(f"node {node.id!r}: kernel dims must be >= 1")
        if node.bias.shape != (node.weight.shape[0],):
            raise GraphError(f"node {node.id!r}: bias length != out-channels")
    elif isinstance(node, BatchNormNode):
        if not np.all(node.std > 0):
            raise GraphError(f"node {node.id!r}: std must be > 0 elementwise")
        n = node.gamma.shape
        if not (node.beta.shape == n and node.mean.shape == n and node.std.shape == n):
            raise GraphError(f"node {node.id!r}: batchnorm channel vectors disagree")
    elif isinstance(node, PolyActNode):
        if node.degree < 1:
            raise GraphError(f"node {node.id!r}: polynomial degree must be >= 1")
    elif isinstance(node, PolySkipNode):
        if set(node.coeffs) != set(PS_KEYS):
            raise GraphError(f"node {node.id!r}: polyskip needs exactly monomials {PS_KEYS}")
    elif isinstance(node, AvgPoolNode):
        if node.k < 1:
            raise GraphError(f"node {node.id!r}: pool size must be >= 1")
        if not np.all(np.asarray(node.divisor) > 0):
            raise GraphError(f"node {node.id!r}: pool divisor must be > 0")
    elif isinstance(node, LinearNode):
        if node.weight.ndim != 2:
            raise GraphError(f"node {node.id!r}: linear weight must be 2-D")
        if node.bias.shape != (node.weight.shape[0],):
            raise GraphError(f"node {node.id!r}: bias length != class count")


def _node_out_shape(node: Node, ins: List[Tuple[int, ...]]) -> Tuple[int, ...]:
    if isinstance(node, InputNode):
        return node.shape
    if isinstance(node, ConvNode):
        c, h, w = ins[0]
        o, i, kh, kw = node.weight.shape
        if i != c:
            raise GraphError(f"node {node.id!r}: conv expects {i} channels, got {c}")
        ho = (h + 2 * node.padding - kh) // node.stride + 1
        wo = (w + 2 * node.padding - kw) // node.stride + 1
        if ho < 1 or wo < 1:
            raise GraphError(f"node {node.id!r}: kernel larger than padded input")
        return (o, ho, wo)
    if isinstance(node, (BatchNormNode, PolyActNode)):
        shp = ins[0]
        width = _param_width(node)
        if width not in (1, shp[0]):
            raise GraphError(f"node {node.id!r}: per-channel params sized {width}, input has {shp[0]}")
        return shp
    if isinstance(node, (AddNode, PolySkipNode)):
        if ins[0] != ins[1]:
            raise GraphError(f"node {node.id!r}: branch shapes differ {ins[0]} vs {ins[1]}")
        return ins[0]
    if isinstance(node, AvgPoolNode):
        c, h, w = ins[0]
        if node.k != h * w:
            raise GraphError(f"node {node.id!r}: pool size {node.k} != spatial {h}x{w}")
        return (c,)
    if isinstance(node, LinearNode):
        if len(ins[0]) != 1 or node.weight.shape[1] != ins[0][0]:
            raise GraphError(f"node {node.id!r}: linear expects vector of {node.weight.shape[1]}")
        return (node.weight.shape[0],)
    if isinstance(node, OutputNode):
        return ins[0]
    raise GraphError(f"unknown node type {type(node).__name__}")


def _param_width(node: Node) -> int:
    if isinstance(node, BatchNormNode):
        return node.gamma.shape[0]
    arrays = node.coeffs if isinstance(node, PolyActNode) else list(node.coeffs.values())
    widths = {np.asarray(a).shape[0] for a in arrays if np.asarray(a).ndim > 0}
    if len(widths) > 1:
        raise GraphError(f"node {node.id!r}: mixed per-channel widths {sorted(widths)}")
    return widths.pop() if widths else 1


# ---------------------------------------------------------------------------
# reference evaluation
# ---------------------------------------------------------------------------

def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
           stride: int, padding: int) -> np.ndarray:
    c, h, w = x.shape
    o, i, kh, kw = weight.shape
    xp = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.broadcast_to(bias[:, None, None], (o, ho, wo)).copy()
    for dh in range(kh):
        for dw in range(kw):
            patch = xp[:, dh:dh + stride * ho:stride, dw:dw + stride * wo:stride]
            out += np.tensordot(weight[:, :, dh, dw], patch, axes=(1, 0))
    return out


def eval_polyact(node: PolyActNode, x: np.ndarray) -> np.ndarray:
    acc = np.broadcast_to(channel_view(node.coeffs[-1], x.ndim), x.shape).copy()
    for k in range(node.degree - 1, -1, -1):
        acc = acc * x + channel_view(node.coeffs[k], x.ndim)
    return acc


def eval_polyskip(node: PolySkipNode, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    c = {k: channel_view(v, x.ndim) for k, v in node.coeffs.items()}
    return (c["x2"] * x * x + c["y2"] * y * y + c["xy"] * x * y
            + c["x"] * x + c["y"] * y + c["c"])


def eval_node(node: Node, ins: List[np.ndarray]) -> np.ndarray:
    if isinstance(node, InputNode):
        raise GraphError("input node is fed externally")
    if isinstance(node, ConvNode):
        return conv2d(ins[0], node.weight, node.bias, node.stride, node.padding)
    if isinstance(node, BatchNormNode):
        x = ins[0]
        return channel_view(node.b1, x.ndim) * x + channel_view(node.b0, x.ndim)
    if isinstance(node, PolyActNode):
        return eval_polyact(node, ins[0])
    if isinstance(node, PolySkipNode):
        return eval_polyskip(node, ins[0], ins[1])
    if isinstance(node, AddNode):
        return ins[0] + ins[1]
    if isinstance(node, AvgPoolNode):
        return float(node.divisor) * ins[0].sum(axis=(1, 2))
    if isinstance(node, LinearNode):
        return node.weight @ ins[0] + node.bias
    if isinstance(node, OutputNode):
        return ins[0]
    raise GraphError(f"unknown node type {type(node).__name__}")


def reference_eval(g: ModelGraph, image: np.ndarray) -> np.ndarray:
    """Plaintext forward pass; the oracle for every transform and the simulator."""
    shapes = g.validate()
    image = np.asarray(image, dtype=np.float64)
    in_id = g.input_id()
    if image.shape != shapes[in_id]:
        raise GraphError(f"input shape {image.shape} != graph input {shapes[in_id]}")
    values: Dict[str, np.ndarray] = {in_id: image}
    for nid in g.topo_order():
        if nid == in_id:
            continue
        node = g.nodes[nid]
        values[nid] = eval_node(node, [values[i] for i in g.inputs_of(nid)])
    return values[g.output_id()]


# ---------------------------------------------------------------------------
# neutral model format
# ---------------------------------------------------------------------------

FORMAT_VERSION = 1

# per-kind (tensor attribute names, plain param names)
_TENSOR_FIELDS = {
    "conv": ("weight", "bias"),
    "batchnorm": ("gamma", "beta", "mean", "std"),
    "linear": ("weight", "bias"),
    "avgpool": ("divisor",),
}
_PARAM_FIELDS = {
    "input": ("channels", "height", "width"),
    "conv": ("stride", "padding"),
    "avgpool": ("k",),
}


def save_model(g: ModelGraph, path: str) -> None:
    blob = bytearray()
    nodes_json = []

    def ref(arr: np.ndarray) -> Dict:
        # ascontiguousarray would promote 0-d scalars to 1-d; keep the shape.
        a = np.asarray(arr, dtype="<f8")
        offset = len(blob) // 8
        blob.extend(a.tobytes(order="C"))
        return {"offset": offset, "shape": list(a.shape)}

    for nid in g.topo_order():
        node = g.nodes[nid]
        entry: Dict = {"id": nid, "kind": node.kind}
        params = {p: getattr(node, p) for p in _PARAM_FIELDS.get(node.kind, ())}
        if params:
            entry["params"] = params
        if node.kind in _TENSOR_FIELDS:
            entry["tensors"] = {f: ref(getattr(node, f)) for f in _TENSOR_FIELDS[node.kind]}
        elif node.kind == "polyact":
            entry["tensors"] = {f"c{k}": ref(c) for k, c in enumerate(node.coeffs)}
        elif node.kind == "polyskip":
            entry["tensors"] = {k: ref(node.coeffs[k]) for k in PS_KEYS}
        nodes_json.append(entry)

    doc = {
        "version": FORMAT_VERSION,
        "nodes": nodes_json,
        "edges": [[s, d] for s, d in g.edges],
        "weights": base64.b64encode(bytes(blob)).decode("ascii"),
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def load_model(path: str) -> ModelGraph:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"cannot read model file {path!r}: {e}") from e
    if doc.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {doc.get('version')!r}")
    try:
        blob = np.frombuffer(base64.b64decode(doc["weights"]), dtype="<f8")
        g = ModelGraph()
        for entry in doc["nodes"]:
            g.add(_node_from_json(entry, blob))
        for s, d in doc["edges"]:
            g.connect(s, d)
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFormatError(f"malformed model file {path!r}: {e}") from e
    g.validate()
    return g


def _node_from_json(entry: Dict, blob: np.ndarray) -> Node:
    kind = entry["kind"]
    if kind not in TYPE_BY_KIND:
        raise ModelFormatError(f"unknown node kind {kind!r}")
    params = entry.get("params", {})

    def tensor(name: str) -> np.ndarray:
        spec = entry["tensors"][name]
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = blob[spec["offset"]:spec["offset"] + n].reshape(shape)
        return np.array(arr, dtype=np.float64)  # own the memory

    nid = entry["id"]
    if kind == "input":
        return InputNode(nid, params["channels"], params["height"], params["width"])
    if kind == "conv":
        return ConvNode(nid, tensor("weight"), tensor("bias"),
                        params["stride"], params["padding"])
    if kind == "batchnorm":
        return BatchNormNode(nid, tensor("gamma"), tensor("beta"),
                             tensor("mean"), tensor("std"))
    if kind == "polyact":
        degree = len(entry["tensors"]) - 1
        return PolyActNode(nid, [tensor(f"c{k}") for k in range(degree + 1)])
    if kind == "polyskip":
        return PolySkipNode(nid, {k: tensor(k) for k in PS_KEYS})
    if kind == "avgpool":
        return AvgPoolNode(nid, params["k"], tensor("divisor"))
    if kind == "linear":
        return LinearNode(nid, tensor("weight"), tensor("bias"))
    if kind == "add":
        return AddNode(nid)
    return OutputNode(nid)


# ---------------------------------------------------------------------------
# ResNet-shaped generators
# ---------------------------------------------------------------------------

# blocks per stage and default input resolution; widths double per stage
VARIANTS = {
    "rn18": {"stages": (2, 2, 2, 2), "hw": 16},
    "rn20": {"stages": (3, 3, 3), "hw": 8},
    "rn32": {"stages": (5, 5, 5), "hw": 8},
}


def default_activation(act: str) -> List[np.ndarray]:
    """Real coefficients (c0..cd) of the stock fitted ReLU replacements."""
    from .polyfit import fit_relu_poly

    if act == "poly2":
        poly, _ = fit_relu_poly(2, 2.0, 10)
    elif act == "poly4":
        poly, _ = fit_relu_poly(4, 2.0, 10)
    else:
        raise GraphError(f"unknown activation kind {act!r}")
    return [np.asarray(c, dtype=np.float64) for c in poly.real_coeffs()]


def build_resnet_graph(variant: str, act: str = "poly2", seed: int = 0,
                       base_width: int = 4, classes: int = 4,
                       input_hw: Optional[int] = None) -> ModelGraph:
    """Random-weight ResNet with the per-variant critical-path composition:
    rn18 17, rn20 19, rn32 31 conv/bn/act layers plus one pool and one linear."""
    if variant not in VARIANTS:
        raise GraphError(f"unknown variant {variant!r} (have {sorted(VARIANTS)})")
    spec = VARIANTS[variant]
    hw = input_hw or spec["hw"]
    rng = np.random.default_rng(seed)
    coeffs = default_activation(act)

    g = ModelGraph()
    g.add(InputNode("in", 3, hw, hw))

    # Kernel rows are L1-normalized to a fixed gain and the residual-branch
    # batchnorm gets a small slope. Together these keep every intermediate
    # value inside the polynomial activations' basin of attraction for any
    # input in [-1, 1], so deep variants cannot blow up under the squaring
    # nonlinearity no matter the seed.
    def conv(nid: str, cin: int, cout: int, k: int, stride: int, pad: int) -> str:
        w = rng.normal(0.0, 1.0, size=(cout, cin, k, k))
        w *= 0.65 / np.sum(np.abs(w), axis=(1, 2, 3), keepdims=True)
        b = rng.uniform(-0.01, 0.01, size=cout)
        g.add(ConvNode(nid, w, b, stride, pad))
        return nid

    def bn(nid: str, c: int, residual: bool = False) -> str:
        # The positive beta bias on residual branches nudges the trunk toward
        # the steeper part of the activation, keeping logits input-sensitive
        # without leaving the certified bounded region.
        g.add(BatchNormNode(
            nid,
            gamma=rng.uniform(0.04, 0.08, size=c) if residual
            else rng.uniform(0.9, 1.1, size=c),
            beta=rng.uniform(0.0, 0.02, size=c) if residual
            else rng.uniform(-0.02, 0.02, size=c),
            mean=rng.uniform(-0.01, 0.01, size=c) if residual
            else rng.uniform(-0.02, 0.02, size=c),
            std=rng.uniform(0.9, 1.15, size=c),
        ))
        return nid

    def actnode(nid: str) -> str:
        g.add(PolyActNode(nid, [np.array(c) for c in coeffs]))
        return nid

    def chain(*nids: str) -> None:
        for a, b in zip(nids, nids[1:]):
            g.connect(a, b)

    width = base_width
    chain("in", conv("conv1", 3, width, 3, 1, 1), bn("bn1", width), actnode("act1"))
    tail = "act1"

    for si, blocks in enumerate(spec["stages"]):
        cout = base_width * (2 ** si)
        for bi in range(blocks):
            name = f"s{si + 1}b{bi + 1}"
            first = bi == 0 and si > 0
            stride = 2 if first else 1
            ca = conv(f"{name}.conva", width, cout, 3, stride, 1)
            chain(tail, ca, bn(f"{name}.bna", cout), actnode(f"{name}.acta"),
                  conv(f"{name}.convb", cout, cout, 3, 1, 1),
                  bn(f"{name}.bnb", cout, residual=True))
            join = g.add(AddNode(f"{name}.join")).id
            g.connect(f"{name}.bnb", join)  # main branch first (x)
            if first:
                ds = conv(f"{name}.convd", width, cout, 1, 2, 0)
                chain(tail, ds, bn(f"{name}.bnd", cout))
                g.connect(f"{name}.bnd", join)
            else:
                g.connect(tail, join)
            chain(join, actnode(f"{name}.actj"))
            tail = f"{name}.actj"
            width = cout

    hw_out = hw // (2 ** (len(spec["stages"]) - 1))
    g.add(AvgPoolNode("pool", hw_out * hw_out, np.array(1.0 / (hw_out * hw_out))))
    g.add(LinearNode("fc",
                     rng.normal(0.0, 1.0 / np.sqrt(width), size=(classes, width)),
                     rng.uniform(-0.02, 0.02, size=classes)))
    g.add(OutputNode("out"))
    chain(tail, "pool", "fc", "out")
    g.validate()
    return g
