"""Versioned JSON tensor files for denoiser checkpoints and LoRA adapters.

Values are written as decimal strings with 17 significant digits, which is
enough for every float64 to round-trip exactly.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .denoiser import Architecture, DenoiserParams, LoraAdapter

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_tensor(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise CheckpointError("refusing to serialise non-finite values")
    return {"shape": list(arr.shape), "values": [format(float(v), ".17g") for v in arr.ravel()]}


def decode_tensor(doc: dict, name: str = "?") -> np.ndarray:
    try:
        shape = tuple(int(s) for s in doc["shape"])
        values = np.array([float(v) for v in doc["values"]], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed tensor {name!r}: {exc}") from exc
    if values.size != int(np.prod(shape)):
        raise CheckpointError(f"tensor {name!r}: {values.size} values for shape {shape}")
    return values.reshape(shape)


def dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def params_to_doc(params: DenoiserParams) -> dict:
    return {
        "version": FORMAT_VERSION,
        "kind": "denoiser",
        "arch": params.arch.to_dict(),
        "tensors": {k: encode_tensor(v) for k, v in params.tensors.items()},
    }


def params_from_doc(doc: dict) -> DenoiserParams:
    _check_header(doc, "denoiser")
    try:
        arch = Architecture(**doc["arch"])
    except TypeError as exc:
        raise CheckpointError(f"bad architecture descriptor: {exc}") from exc
    try:
        tensors = {k: decode_tensor(v, k) for k, v in doc["tensors"].items()}
        return DenoiserParams(arch, tensors)
    except (KeyError, AttributeError, ValueError) as exc:
        raise CheckpointError(str(exc)) from exc


def adapter_to_doc(adapter: LoraAdapter) -> dict:
    return {
        "version": FORMAT_VERSION,
        "kind": "lora",
        "arch": {"rank": adapter.rank, "scale": adapter.scale, "targets": sorted(adapter.A)},
        "tensors": {k: encode_tensor(v) for k, v in adapter.tensors().items()},
    }


def adapter_from_doc(doc: dict) -> LoraAdapter:
    _check_header(doc, "lora")
    try:
        arch = doc["arch"]
        adapter = LoraAdapter(int(arch["rank"]), float(arch["scale"]))
        tensors = doc["tensors"]
        for target in arch["targets"]:
            adapter.A[target] = decode_tensor(tensors[f"{target}.A"], f"{target}.A")
            adapter.B[target] = decode_tensor(tensors[f"{target}.B"], f"{target}.B")
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed adapter file: {exc!r}") from None
    return adapter


def _check_header(doc, kind):
    if not isinstance(doc, dict) or doc.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version: {doc.get('version') if isinstance(doc, dict) else None!r}")
    if doc.get("kind") != kind:
        raise CheckpointError(f"expected a {kind!r} file, got {doc.get('kind')!r}")


def save_params(params: DenoiserParams, path) -> None:
    write_atomic(path, dumps(params_to_doc(params)))


def load_params(path) -> DenoiserParams:
    return params_from_doc(_read(path))


def save_adapter(adapter: LoraAdapter, path) -> None:
    write_atomic(path, dumps(adapter_to_doc(adapter)))


def load_adapter(path) -> LoraAdapter:
    return adapter_from_doc(_read(path))


def _read(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with path.open(encoding="utf-8") as fh:
            return json.load(fh)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} is not valid JSON: {exc}") from None
