"""Static layout of the supported ResNet families.

For each variant this module produces the node list and edge list of the
neutral-format graph, plus the framework checkpoint key that feeds each
learned node. Checkpoint naming follows the usual ResNet state-dict
convention: a `conv1`/`bn1` stem, `layer<s>.<b>.` blocks with `conv1`,
`bn1`, `conv2`, `bn2` and a `downsample.0`/`downsample.1` projection on
the first block of every stage after the first, and a final `fc`.
Polynomial activations keep their coefficients under `<module>.coeffs`
(`act1` in the stem, `act1`/`act2` inside a block).
"""

from typing import Dict, List, Optional, Tuple

# blocks per stage and native input resolution; widths double per stage
VARIANTS = {
    "rn18": {"stages": (2, 2, 2, 2), "hw": 16},
    "rn20": {"stages": (3, 3, 3), "hw": 8},
    "rn32": {"stages": (5, 5, 5), "hw": 8},
}

# state-dict field names per node kind; optional fields get a default
# (conv bias defaults to zero, matching frameworks that drop it before BN)
CONV_FIELDS = ("weight", "bias")
CONV_REQUIRED = ("weight",)
BN_FIELDS = ("weight", "bias", "running_mean", "running_var")
ACT_FIELDS = ("coeffs",)
LINEAR_FIELDS = ("weight", "bias")
IGNORED_SUFFIX = ".num_batches_tracked"

PlanNode = Dict[str, object]


def graph_plan(variant: str, base_width: int, classes: int,
               input_hw: Optional[int] = None,
               in_channels: int = 3) -> Tuple[List[PlanNode], List[Tuple[str, str]]]:
    """Node and edge lists for one variant.

    Every learned node carries a `ckpt` entry: the state-dict module name
    its parameters come from. Structural nodes (add, pool, output) have
    none. Edge order is part of the format: a join's first incoming edge
    is the trunk branch, the second the skip.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r} (have {sorted(VARIANTS)})")
    spec = VARIANTS[variant]
    hw = input_hw or spec["hw"]

    nodes: List[PlanNode] = []
    edges: List[Tuple[str, str]] = []

    def conv(node_id: str, ckpt: str, cin: int, cout: int, ksize: int,
             stride: int, padding: int) -> str:
        nodes.append({"id": node_id, "kind": "conv", "ckpt": ckpt,
                      "cin": cin, "cout": cout, "ksize": ksize,
                      "stride": stride, "padding": padding})
        return node_id

    def bn(node_id: str, ckpt: str, channels: int, residual: bool = False) -> str:
        nodes.append({"id": node_id, "kind": "batchnorm", "ckpt": ckpt,
                      "channels": channels, "residual": residual})
        return node_id

    def act(node_id: str, ckpt: str, channels: int) -> str:
        nodes.append({"id": node_id, "kind": "polyact", "ckpt": ckpt,
                      "channels": channels})
        return node_id

    def chain(*ids: str) -> None:
        edges.extend(zip(ids, ids[1:]))

    nodes.append({"id": "in", "kind": "input", "channels": in_channels,
                  "height": hw, "width": hw})
    width = base_width
    chain("in", conv("conv1", "conv1", in_channels, width, 3, 1, 1),
          bn("bn1", "bn1", width), act("act1", "act1", width))
    tail = "act1"

    for si, blocks in enumerate(spec["stages"]):
        cout = base_width * (2 ** si)
        for bi in range(blocks):
            name = f"s{si + 1}b{bi + 1}"
            pre = f"layer{si + 1}.{bi}"
            first = bi == 0 and si > 0
            stride = 2 if first else 1
            ca = conv(f"{name}.conva", f"{pre}.conv1", width, cout, 3, stride, 1)
            chain(tail, ca, bn(f"{name}.bna", f"{pre}.bn1", cout),
                  act(f"{name}.acta", f"{pre}.act1", cout),
                  conv(f"{name}.convb", f"{pre}.conv2", cout, cout, 3, 1, 1),
                  bn(f"{name}.bnb", f"{pre}.bn2", cout, residual=True))
            join = f"{name}.join"
            nodes.append({"id": join, "kind": "add"})
            edges.append((f"{name}.bnb", join))  # trunk branch first
            if first:
                ds = conv(f"{name}.convd", f"{pre}.downsample.0", width, cout, 1, 2, 0)
                chain(tail, ds, bn(f"{name}.bnd", f"{pre}.downsample.1", cout))
                edges.append((f"{name}.bnd", join))
            else:
                edges.append((tail, join))
            chain(join, act(f"{name}.actj", f"{pre}.act2", cout))
            tail = f"{name}.actj"
            width = cout

    hw_out = hw // (2 ** (len(spec["stages"]) - 1))
    if hw_out < 1:
        raise ValueError(f"input size {hw} collapses below 1x1 for {variant}")
    nodes.append({"id": "pool", "kind": "avgpool", "k": hw_out * hw_out})
    nodes.append({"id": "fc", "kind": "linear", "ckpt": "fc",
                  "out_features": classes, "in_features": width})
    nodes.append({"id": "out", "kind": "output"})
    chain(tail, "pool", "fc", "out")
    return nodes, edges


def expected_tensors(node: PlanNode) -> Dict[str, Tuple[Optional[Tuple[int, ...]], bool]]:
    """State-dict keys feeding one plan node: key -> (shape, required).

    Activation coefficient vectors have no fixed length (the polynomial
    degree is the checkpoint's choice), reported as shape None.
    """
    ckpt = node.get("ckpt")
    if ckpt is None:
        return {}
    kind = node["kind"]
    if kind == "conv":
        cout, cin, k = node["cout"], node["cin"], node["ksize"]
        return {f"{ckpt}.weight": ((cout, cin, k, k), True),
                f"{ckpt}.bias": ((cout,), False)}
    if kind == "batchnorm":
        c = (node["channels"],)
        return {f"{ckpt}.{field}": (c, True) for field in BN_FIELDS}
    if kind == "polyact":
        return {f"{ckpt}.coeffs": (None, False)}
    if kind == "linear":
        return {f"{ckpt}.weight": ((node["out_features"], node["in_features"]), True),
                f"{ckpt}.bias": ((node["out_features"],), True)}
    raise ValueError(f"node kind {kind!r} takes no checkpoint tensors")


def infer_dims(state: Dict[str, object], missing: type = KeyError) -> Tuple[int, int, int]:
    """(base_width, in_channels, classes) read off the stem and head."""
    for key in ("conv1.weight", "fc.weight"):
        if key not in state:
            raise missing(f"checkpoint is missing required key {key!r}")
    conv1 = state["conv1.weight"]
    fc = state["fc.weight"]
    if getattr(conv1, "ndim", 0) != 4:
        raise missing(f"checkpoint key 'conv1.weight' must be 4-D, got shape "
                      f"{tuple(getattr(conv1, 'shape', ()))}")
    if getattr(fc, "ndim", 0) != 2:
        raise missing(f"checkpoint key 'fc.weight' must be 2-D, got shape "
                      f"{tuple(getattr(fc, 'shape', ()))}")
    return int(conv1.shape[0]), int(conv1.shape[1]), int(fc.shape[0])
