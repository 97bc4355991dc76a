"""Deterministic random-weight fixtures in the neutral model format.

A fixture is a synthetic checkpoint pushed through the normal export
path, so it exercises exactly what a trained checkpoint would. Weights
are drawn from a fixed-seed generator with two taming rules: every
conv kernel row is L1-normalized to a 0.65 gain, and the batch norm
closing each residual trunk gets a flat slope. That keeps intermediate
values of arbitrarily deep variants inside the interval where the
polynomial activations stay bounded for inputs in [-1, 1], so the
fixtures are simulable, not just loadable.
"""

from typing import Optional

import numpy as np

from .exporting import BN_EPS, ExportManifest, export_state, fitted_coeffs
from .topology import graph_plan


def make_fixture(variant: str, seed: int, out: str, *, act: str = "poly2",
                 input_hw: Optional[int] = None, base_width: int = 4,
                 classes: int = 4, validate: bool = True) -> ExportManifest:
    """Write a random-weight model for `variant`; same (variant, seed,
    act, sizes) always produces byte-identical output."""
    rng = np.random.default_rng(seed)
    coeffs = np.asarray(fitted_coeffs(act))
    plan_nodes, _ = graph_plan(variant, base_width, classes, input_hw=input_hw)

    state = {}
    for node in plan_nodes:
        kind, pre = node["kind"], node.get("ckpt")
        if kind == "conv":
            w = rng.normal(0.0, 1.0, size=(node["cout"], node["cin"],
                                           node["ksize"], node["ksize"]))
            w *= 0.65 / np.sum(np.abs(w), axis=(1, 2, 3), keepdims=True)
            state[f"{pre}.weight"] = w
            state[f"{pre}.bias"] = rng.uniform(-0.01, 0.01, size=node["cout"])
        elif kind == "batchnorm":
            c = node["channels"]
            if node["residual"]:
                gamma = rng.uniform(0.04, 0.08, size=c)
                beta = rng.uniform(0.0, 0.02, size=c)
                mean = rng.uniform(-0.01, 0.01, size=c)
            else:
                gamma = rng.uniform(0.9, 1.1, size=c)
                beta = rng.uniform(-0.02, 0.02, size=c)
                mean = rng.uniform(-0.02, 0.02, size=c)
            sigma = rng.uniform(0.9, 1.15, size=c)  # sigma stays positive
            state[f"{pre}.weight"] = gamma
            state[f"{pre}.bias"] = beta
            state[f"{pre}.running_mean"] = mean
            state[f"{pre}.running_var"] = sigma ** 2 - BN_EPS
        elif kind == "polyact":
            state[f"{pre}.coeffs"] = coeffs
        elif kind == "linear":
            n = node["in_features"]
            state[f"{pre}.weight"] = rng.normal(0.0, 1.0 / np.sqrt(n),
                                                size=(node["out_features"], n))
            state[f"{pre}.bias"] = rng.uniform(-0.02, 0.02, size=node["out_features"])

    return export_state(state, variant, out,
                        ckpt_label=f"synthetic:{variant}/seed={seed}",
                        act=act, input_hw=input_hw, validate=validate)
