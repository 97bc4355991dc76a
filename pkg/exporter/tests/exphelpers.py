"""Shared helpers for the exporter tests.

State dicts are built with explicit per-stage loops and hand-written key
names, independent of the package's own topology tables, so a mapping
bug cannot cancel out of both sides.
"""

import base64
import json
import subprocess
from pathlib import Path

import numpy as np

EXPORTER_DIR = Path(__file__).resolve().parents[1]
STAGES = {"rn18": (2, 2, 2, 2), "rn20": (3, 3, 3), "rn32": (5, 5, 5)}


def torch_style_state(variant="rn20", base_width=4, classes=4, seed=0,
                      conv_bias=False, coeffs=None, bookkeeping=True):
    """Random numpy state dict with torchvision ResNet naming. With
    `coeffs` set, every activation module gets an embedded `.coeffs`
    vector; `bookkeeping` adds the num_batches_tracked counters real
    checkpoints carry."""
    rng = np.random.default_rng(seed)
    sd = {}

    def bn(pre, c):
        sd[f"{pre}.weight"] = rng.uniform(0.5, 1.5, c)
        sd[f"{pre}.bias"] = rng.normal(0.0, 0.01, c)
        sd[f"{pre}.running_mean"] = rng.normal(0.0, 0.01, c)
        sd[f"{pre}.running_var"] = rng.uniform(0.5, 1.5, c)
        if bookkeeping:
            sd[f"{pre}.num_batches_tracked"] = np.asarray(1000)

    def conv(pre, cin, cout, k):
        sd[f"{pre}.weight"] = rng.normal(0.0, 0.1, (cout, cin, k, k))
        if conv_bias:
            sd[f"{pre}.bias"] = rng.normal(0.0, 0.01, cout)

    def act(pre):
        if coeffs is not None:
            sd[f"{pre}.coeffs"] = np.asarray(coeffs, dtype=np.float64)

    conv("conv1", 3, base_width, 3)
    bn("bn1", base_width)
    act("act1")
    width = base_width
    for si, blocks in enumerate(STAGES[variant]):
        cout = base_width * 2 ** si
        for bi in range(blocks):
            pre = f"layer{si + 1}.{bi}"
            conv(f"{pre}.conv1", width, cout, 3)
            bn(f"{pre}.bn1", cout)
            act(f"{pre}.act1")
            conv(f"{pre}.conv2", cout, cout, 3)
            bn(f"{pre}.bn2", cout)
            if bi == 0 and si > 0:
                conv(f"{pre}.downsample.0", width, cout, 1)
                bn(f"{pre}.downsample.1", cout)
            act(f"{pre}.act2")
            width = cout
    sd["fc.weight"] = rng.normal(0.0, 0.1, (classes, width))
    sd["fc.bias"] = rng.normal(0.0, 0.01, classes)
    return sd


def save_torch(sd, path):
    import torch

    torch.save({k: torch.as_tensor(v) for k, v in sd.items()}, path)


def levnet(*args):
    return subprocess.run(["levnet", *args], capture_output=True, text=True)


def read_model(path):
    """(document, weight blob) of a neutral model file."""
    with open(path) as f:
        doc = json.load(f)
    blob = np.frombuffer(base64.b64decode(doc["weights"]), dtype="<f8")
    return doc, blob


def model_tensor(doc, blob, node_id, name):
    """One named tensor of one node, decoded from the blob."""
    entry = next(n for n in doc["nodes"] if n["id"] == node_id)
    spec = entry["tensors"][name]
    n = int(np.prod(spec["shape"])) if spec["shape"] else 1
    return blob[spec["offset"]:spec["offset"] + n].reshape(spec["shape"])
