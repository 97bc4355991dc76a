"""Checkpoint to neutral-format conversion.

The exporter maps state-dict keys onto the variant's expected layer
layout, checks every tensor shape against it, and writes the parameters
raw: batch-norm stays (gamma, beta, mean, sigma) with no folding into
the neighbouring conv, and no graph rewrites happen here. The only
derived quantity is sigma = sqrt(running_var + eps), since the neutral
format stores the standard deviation rather than the variance.
"""

import dataclasses
import json
import subprocess
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ExportError
from .neutral import write_model
from .topology import IGNORED_SUFFIX, expected_tensors, graph_plan, infer_dims

BN_EPS = 1e-5  # matches the framework default folded into running_var

ACT_DEGREE = {"poly2": 2, "poly4": 4}


@dataclass(frozen=True)
class ExportManifest:
    """Provenance record for one exported model."""
    ckpt: str         # checkpoint path, or a synthetic-source label
    variant: str
    act_source: str   # "embedded", "file:<path>" or "fitted:<act>"
    out: str
    weight_hash: str  # sha256 of the raw weight blob in `out`

    def to_json(self) -> Dict[str, str]:
        return dataclasses.asdict(self)


def _levnet(args: Sequence[str]) -> subprocess.CompletedProcess:
    try:
        return subprocess.run(["levnet", *args], capture_output=True, text=True)
    except FileNotFoundError as e:
        raise ExportError("the levnet CLI is not on PATH; install the "
                          "levnet package to fit and validate models") from e


def fitted_coeffs(act: str) -> List[float]:
    """Stock activation coefficients from `levnet fit-poly`."""
    if act not in ACT_DEGREE:
        raise ExportError(f"unknown activation kind {act!r} (have {sorted(ACT_DEGREE)})")
    res = _levnet(["fit-poly", "--degree", str(ACT_DEGREE[act])])
    if res.returncode != 0:
        raise ExportError(f"levnet fit-poly failed: {res.stderr.strip()}")
    return [float(v) for v in json.loads(res.stdout)["real_coeffs"]]


def coeffs_from_file(path: str) -> List[float]:
    """Real coefficients from a saved `levnet fit-poly --out` report."""
    try:
        with open(path) as f:
            doc = json.load(f)
        return [float(v) for v in doc["real_coeffs"]]
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ExportError(f"cannot read fitted coefficients from {path!r}: {e}") from e


def _validate_output(path: str) -> None:
    res = _levnet(["levels", "--model", path, "--json"])
    if res.returncode != 0:
        raise ExportError(
            f"exported model {path!r} failed levnet validation: "
            f"{(res.stderr or res.stdout).strip()}")


def export_state(state: Dict[str, np.ndarray], variant: str, out: str, *,
                 ckpt_label: str, coeffs_file: Optional[str] = None,
                 act: str = "poly2", input_hw: Optional[int] = None,
                 validate: bool = True) -> ExportManifest:
    """Write a loaded state dict as a neutral model file.

    Raises ExportError naming the first checkpoint key that is missing,
    has the wrong shape, or does not map to any layer of the variant.
    """
    base_width, in_channels, classes = infer_dims(state, missing=ExportError)
    plan_nodes, edges = graph_plan(variant, base_width, classes,
                                   input_hw=input_hw, in_channels=in_channels)

    consumed = set()
    for node in plan_nodes:
        for key, (shape, required) in expected_tensors(node).items():
            if key not in state:
                if required:
                    raise ExportError(f"checkpoint is missing required key {key!r}")
                continue
            got = state[key].shape
            if shape is None:
                if state[key].ndim != 1 or got[0] < 2:
                    raise ExportError(
                        f"checkpoint key {key!r} must be a coefficient vector "
                        f"(c0..cd), got shape {tuple(got)}")
            elif got != shape:
                raise ExportError(
                    f"checkpoint key {key!r} has shape {tuple(got)}, "
                    f"expected {shape}")
            consumed.add(key)
    for key in sorted(state):
        if key not in consumed and not key.endswith(IGNORED_SUFFIX):
            raise ExportError(
                f"checkpoint key {key!r} does not map to any {variant} layer")

    act_keys = [f"{n['ckpt']}.coeffs" for n in plan_nodes if n["kind"] == "polyact"]
    embedded = [k for k in act_keys if k in state]
    if embedded and len(embedded) != len(act_keys):
        missing = next(k for k in act_keys if k not in state)
        raise ExportError(
            f"checkpoint embeds activation coefficients for {len(embedded)} of "
            f"{len(act_keys)} activations; {missing!r} is missing")
    if embedded:
        lengths = {state[k].shape[0] for k in act_keys}
        if len(lengths) != 1:
            raise ExportError(
                f"embedded activation coefficient vectors disagree on length: "
                f"{sorted(lengths)}")
        act_source = "embedded"
        coeffs_of = {k: state[k] for k in act_keys}
    else:
        shared = (coeffs_from_file(coeffs_file) if coeffs_file
                  else fitted_coeffs(act))
        act_source = f"file:{coeffs_file}" if coeffs_file else f"fitted:{act}"
        coeffs_of = {k: np.asarray(shared) for k in act_keys}

    writer_nodes: Dict[str, Dict] = {}
    for node in plan_nodes:
        nid, kind = node["id"], node["kind"]
        if kind == "input":
            writer_nodes[nid] = {"kind": kind, "params": {
                "channels": node["channels"], "height": node["height"],
                "width": node["width"]}}
        elif kind == "conv":
            pre = node["ckpt"]
            writer_nodes[nid] = {"kind": kind,
                                 "params": {"stride": node["stride"],
                                            "padding": node["padding"]},
                                 "tensors": {
                                     "weight": state[f"{pre}.weight"],
                                     "bias": state.get(f"{pre}.bias",
                                                       np.zeros(node["cout"]))}}
        elif kind == "batchnorm":
            pre = node["ckpt"]
            var = state[f"{pre}.running_var"]
            if not np.all(var + BN_EPS > 0):
                raise ExportError(
                    f"checkpoint key '{pre}.running_var' has entries <= "
                    f"{-BN_EPS}; cannot form a positive sigma")
            writer_nodes[nid] = {"kind": kind, "tensors": {
                "gamma": state[f"{pre}.weight"],
                "beta": state[f"{pre}.bias"],
                "mean": state[f"{pre}.running_mean"],
                "std": np.sqrt(var + BN_EPS)}}
        elif kind == "polyact":
            vec = coeffs_of[f"{node['ckpt']}.coeffs"]
            writer_nodes[nid] = {"kind": kind,
                                 "coeffs": [np.asarray(float(c)) for c in vec]}
        elif kind == "avgpool":
            writer_nodes[nid] = {"kind": kind, "params": {"k": node["k"]},
                                 "tensors": {"divisor": np.asarray(1.0 / node["k"])}}
        elif kind == "linear":
            pre = node["ckpt"]
            writer_nodes[nid] = {"kind": kind, "tensors": {
                "weight": state[f"{pre}.weight"], "bias": state[f"{pre}.bias"]}}
        else:
            writer_nodes[nid] = {"kind": kind}

    weight_hash = write_model(writer_nodes, edges, out)
    if validate:
        _validate_output(out)
    return ExportManifest(ckpt=ckpt_label, variant=variant,
                          act_source=act_source, out=out,
                          weight_hash=weight_hash)


def export_checkpoint(ckpt: str, variant: str, out: str, *,
                      coeffs_file: Optional[str] = None, act: str = "poly2",
                      input_hw: Optional[int] = None,
                      validate: bool = True) -> ExportManifest:
    """Load a checkpoint file and export it; see export_state."""
    from .checkpoint import load_state_dict

    state = load_state_dict(ckpt)
    return export_state(state, variant, out, ckpt_label=str(ckpt),
                        coeffs_file=coeffs_file, act=act,
                        input_hw=input_hw, validate=validate)
