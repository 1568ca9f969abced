"""Single-file checkpoint container.

Layout: magic, 8-byte little-endian header length, canonical JSON header
(including a tensor manifest), raw tensor payload, and a trailing SHA-256
digest over everything before it. Writing the same state twice produces
identical bytes, and any tampering with the payload is detected on load.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, IntegrityError

MAGIC = b"SGCKPT1\n"

_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
    "int32": torch.int32,
    "uint8": torch.uint8,
    "bool": torch.bool,
}
_NP_DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
    "int64": np.int64,
    "int32": np.int32,
    "uint8": np.uint8,
    "bool": np.bool_,
}


def _dtype_name(t: torch.Tensor) -> str:
    name = str(t.dtype).removeprefix("torch.")
    if name not in _DTYPES:
        raise DataError(f"unsupported checkpoint dtype {name}")
    return name


def write_checkpoint(path: Path | str, header: dict, tensors: dict[str, torch.Tensor]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        blob = t.numpy().tobytes()
        manifest.append(
            {
                "name": name,
                "dtype": _dtype_name(t),
                "shape": list(t.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    head = json.dumps({"header": header, "manifest": manifest}, sort_keys=True).encode()
    body = MAGIC + len(head).to_bytes(8, "little") + head + b"".join(blobs)
    digest = hashlib.sha256(body).digest()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(digest)
    tmp.replace(path)
    return path


def read_checkpoint(path: Path | str) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint: {path}")
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 8 + 32 or not raw.startswith(MAGIC):
        raise DataError(f"not a checkpoint file: {path}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"checkpoint digest mismatch: {path}")
    head_len = int.from_bytes(body[len(MAGIC) : len(MAGIC) + 8], "little")
    head_start = len(MAGIC) + 8
    head = json.loads(body[head_start : head_start + head_len])
    payload = body[head_start + head_len :]
    tensors = {}
    for item in head["manifest"]:
        start, nbytes = item["offset"], item["nbytes"]
        arr = np.frombuffer(payload[start : start + nbytes], dtype=_NP_DTYPES[item["dtype"]])
        tensors[item["name"]] = torch.from_numpy(arr.copy()).reshape(item["shape"])
    return head["header"], tensors


def module_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    """Parameters and buffers of a module, keyed for the container."""
    out = {}
    for name, p in module.state_dict().items():
        out[f"{prefix}{name}"] = p
    return out


def load_module_tensors(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "") -> None:
    state = {}
    for name in module.state_dict():
        key = f"{prefix}{name}"
        if key not in tensors:
            raise DataError(f"checkpoint missing tensor {key}")
        state[name] = tensors[key]
    module.load_state_dict(state)


def config_hash(flat_config: dict) -> str:
    return hashlib.sha256(json.dumps(flat_config, sort_keys=True).encode()).hexdigest()
