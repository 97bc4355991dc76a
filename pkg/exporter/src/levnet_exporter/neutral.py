"""Writer for the neutral model-JSON format.

The format keeps every float64 tensor in one little-endian blob (base64)
referenced by {offset, shape}, nodes listed in topological order, edges
as [src, dst] pairs, the whole document dumped with indent=1. The writer
reproduces that layout exactly, so a file written here and re-saved by
the consumer round-trips byte for byte.
"""

import base64
import hashlib
import json
from typing import Dict, List, Sequence, Tuple

import numpy as np

FORMAT_VERSION = 1

# field emission order per node kind; polyact coefficients are c0..cd
TENSOR_ORDER = {
    "conv": ("weight", "bias"),
    "batchnorm": ("gamma", "beta", "mean", "std"),
    "linear": ("weight", "bias"),
    "avgpool": ("divisor",),
}
PARAM_ORDER = {
    "input": ("channels", "height", "width"),
    "conv": ("stride", "padding"),
    "avgpool": ("k",),
}


def topo_sort(ids: Sequence[str], edges: Sequence[Tuple[str, str]]) -> List[str]:
    """Kahn's algorithm with a FIFO ready queue seeded in `ids` order and
    consumers visited in edge order, the same tie-breaking the consumer
    uses, so the node array we write is a fixed point of its re-save."""
    indeg = {nid: 0 for nid in ids}
    for src, dst in edges:
        if src not in indeg or dst not in indeg:
            raise ValueError(f"edge ({src!r}, {dst!r}) references an unknown node")
        indeg[dst] += 1
    ready = [nid for nid in ids if indeg[nid] == 0]
    order: List[str] = []
    while ready:
        nid = ready.pop(0)
        order.append(nid)
        for src, dst in edges:
            if src == nid:
                indeg[dst] -= 1
                if indeg[dst] == 0:
                    ready.append(dst)
    if len(order) != len(indeg):
        raise ValueError("graph has a cycle")
    return order


def write_model(nodes: Dict[str, Dict], edges: Sequence[Tuple[str, str]],
                path: str) -> str:
    """Serialize {id: {kind, params?, tensors?|coeffs?}} and return the
    sha256 hex digest of the raw weight blob."""
    blob = bytearray()
    nodes_json = []

    def ref(arr) -> Dict:
        a = np.asarray(arr, dtype="<f8")
        offset = len(blob) // 8
        blob.extend(a.tobytes(order="C"))
        return {"offset": offset, "shape": list(a.shape)}

    for nid in topo_sort(list(nodes), edges):
        node = nodes[nid]
        kind = node["kind"]
        entry: Dict = {"id": nid, "kind": kind}
        if kind in PARAM_ORDER:
            entry["params"] = {p: int(node["params"][p]) for p in PARAM_ORDER[kind]}
        if kind == "polyact":
            entry["tensors"] = {f"c{k}": ref(c) for k, c in enumerate(node["coeffs"])}
        elif kind in TENSOR_ORDER:
            entry["tensors"] = {f: ref(node["tensors"][f]) for f in TENSOR_ORDER[kind]}
        nodes_json.append(entry)

    doc = {
        "version": FORMAT_VERSION,
        "nodes": nodes_json,
        "edges": [[s, d] for s, d in edges],
        "weights": base64.b64encode(bytes(blob)).decode("ascii"),
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")
    return hashlib.sha256(bytes(blob)).hexdigest()


def weight_hash_of_file(path: str) -> str:
    """sha256 of a model file's decoded weight blob, for round-trip
    comparisons that should ignore incidental JSON formatting."""
    with open(path) as f:
        doc = json.load(f)
    return hashlib.sha256(base64.b64decode(doc["weights"])).hexdigest()
