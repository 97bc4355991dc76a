"""Checkpoint readers: PyTorch state dicts and .npz archives with the
same key naming. Everything comes back as float64 numpy arrays."""

from typing import Dict

import numpy as np

from .errors import ExportError


def load_state_dict(path: str) -> Dict[str, np.ndarray]:
    """Read a checkpoint into {key: float64 array}.

    `.npz` archives load without any framework installed; anything else
    goes through torch.load and may be either a bare state dict or a
    trainer checkpoint wrapping one under "state_dict".
    """
    if str(path).endswith(".npz"):
        with np.load(path) as archive:
            raw = {k: archive[k] for k in archive.files}
    else:
        try:
            import torch
        except ImportError as e:
            raise ExportError(
                f"cannot read {path!r}: torch is not installed "
                "(use an .npz checkpoint instead)") from e
        try:
            obj = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as e:
            raise ExportError(f"cannot read checkpoint {path!r}: {e}") from e
        if isinstance(obj, dict) and "state_dict" in obj and all(
                not torch.is_tensor(v) for k, v in obj.items() if k != "state_dict"):
            obj = obj["state_dict"]
        if not isinstance(obj, dict):
            raise ExportError(
                f"checkpoint {path!r} is not a state dict (got {type(obj).__name__})")
        raw = {k: v.detach().cpu().numpy() if torch.is_tensor(v) else v
               for k, v in obj.items()}

    state: Dict[str, np.ndarray] = {}
    for key, value in raw.items():
        arr = np.asarray(value)
        if arr.dtype == object or not np.issubdtype(arr.dtype, np.number):
            raise ExportError(f"checkpoint key {key!r} is not numeric")
        state[str(key)] = arr.astype(np.float64)
    return state
