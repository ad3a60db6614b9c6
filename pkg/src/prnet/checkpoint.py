"""Named-array checkpoint container.

File layout::

    PRNCKPT\\n
    <header byte length, 16 decimal digits>\\n
    <header: canonical JSON>
    <array blobs, concatenated, little-endian>

The header lists every array (name, shape, element type, byte order, offset,
byte length), a config snapshot, free-form metadata, a format version and
the SHA-256 of header-without-hash plus blobs.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch

MAGIC = b"PRNCKPT\n"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "int64": "<i8"}


class CheckpointError(RuntimeError):
    pass


class IntegrityError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def _as_storable(arr) -> Tuple[np.ndarray, str]:
    if isinstance(arr, torch.Tensor):
        arr = arr.detach().cpu().numpy()
    arr = np.asarray(arr)
    if np.issubdtype(arr.dtype, np.floating):
        return np.ascontiguousarray(arr, dtype="<f4"), "float32"
    if np.issubdtype(arr.dtype, np.integer):
        return np.ascontiguousarray(arr, dtype="<i8"), "int64"
    raise CheckpointError(f"unsupported array dtype {arr.dtype}")


def write_container(path, arrays: Dict[str, np.ndarray], config: Optional[dict] = None, meta: Optional[dict] = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in arrays:
        data, kind = _as_storable(arrays[name])
        raw = data.tobytes()
        entries.append(
            {"name": name, "shape": list(data.shape), "dtype": kind, "byte_order": "little",
             "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    body = b"".join(blobs)
    header = {"version": FORMAT_VERSION, "arrays": entries, "config": config or {}, "meta": meta or {}}
    digest = hashlib.sha256(canonical_json(header).encode() + body).hexdigest()
    header["sha256"] = digest
    head = canonical_json(header).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(head):016d}\n".encode())
        fh.write(head)
        fh.write(body)


def read_container(path) -> Tuple[Dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint container")
    pos = len(MAGIC)
    try:
        head_len = int(raw[pos:pos + 16])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header length") from exc
    pos += 17
    try:
        header = json.loads(raw[pos:pos + head_len])
    except ValueError as exc:
        raise IntegrityError(f"{path}: header is not valid JSON") from exc
    body = raw[pos + head_len:]
    version = header.get("version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: container version {version} needs migration to version {FORMAT_VERSION}"
        )
    expected = header.pop("sha256", None)
    actual = hashlib.sha256(canonical_json(header).encode() + body).hexdigest()
    if expected != actual:
        raise IntegrityError(f"{path}: content hash mismatch")
    arrays = {}
    for e in header["arrays"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    header["sha256"] = expected
    return arrays, header


def model_arrays(model) -> Dict[str, np.ndarray]:
    """Model state as named arrays; prototypes are stored as ``prototypes/scale{j}``."""
    out = {}
    for name, value in model.state_dict().items():
        if name.startswith("prototypes_"):
            out[f"prototypes/scale{name[-1]}"] = value
        else:
            out[name] = value
    return out


def save_checkpoint(model, path, extra_config: Optional[dict] = None, meta: Optional[dict] = None) -> str:
    """Persist model weights, prototype bank and config. Returns the config hash."""
    config = {"model": model.config.to_dict()}
    if extra_config:
        config.update(extra_config)
    meta = dict(meta or {})
    bank = model.bank
    if bank is not None:
        meta["prototype_bank"] = {
            "ratio": bank.ratio,
            "seed": bank.seed,
            "kmeans_max_iter": bank.kmeans_max_iter,
            "n_iter": list(bank.n_iter),
            "distance": bank.distance,
            "sizes": bank.sizes,
        }
    meta["config_hash"] = config_hash(config)
    write_container(path, model_arrays(model), config, meta)
    return meta["config_hash"]


def load_checkpoint(path):
    """Rebuild a model from a container. Returns ``(model, header)``."""
    from .model import ModelConfig, PrnModel
    from .prototypes import PrototypeBank

    arrays, header = read_container(path)
    cfg_dict = copy.deepcopy(header["config"]["model"])
    cfg_dict["encoder"]["pretrained_weights_path"] = None
    model = PrnModel(ModelConfig.from_dict(cfg_dict))
    state = {}
    for name, value in arrays.items():
        if name.startswith("prototypes/scale"):
            state[f"prototypes_{name[-1]}"] = torch.from_numpy(value)
        else:
            state[name] = torch.from_numpy(value)
    for j in (1, 2, 3):
        key = f"prototypes_{j}"
        if key in state:
            setattr(model, key, state[key].clone())
    model.load_state_dict(state, strict=True)
    info = header["meta"].get("prototype_bank")
    if info is not None:
        model.bank = PrototypeBank(
            prototypes=[state[f"prototypes_{j}"].numpy() for j in (1, 2, 3)],
            ratio=info["ratio"],
            kmeans_max_iter=info["kmeans_max_iter"],
            seed=info["seed"],
            n_iter=list(info["n_iter"]),
            distance=info["distance"],
        )
    # keep the snapshot exactly as saved, including any weight path
    model.config.encoder.pretrained_weights_path = header["config"]["model"]["encoder"]["pretrained_weights_path"]
    model.eval()
    return model, header
