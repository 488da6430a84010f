"""On-disk formats: binary trajectory files, dataset manifests, parameter checkpoints.

Trajectory file layout (little-endian)::

    magic   4s   b"EPNS"
    version u16
    dtype   u8   0 = float64, 1 = uint16
    ndim    u8   number of per-frame dims
    frames  u32
    dims    u32 * ndim
    body    frames * prod(dims) * itemsize bytes
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
import zipfile
from pathlib import Path

import numpy as np

MAGIC = b"EPNS"
FORMAT_VERSION = 1
CHECKPOINT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<u2")}
_CODES = {np.dtype("float64"): 0, np.dtype("uint16"): 1}


class FormatError(ValueError):
    """Malformed, truncated or incompatible file."""


class IntegrityError(ValueError):
    """Checksum mismatch between a manifest and the files it lists."""


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def encode_trajectory(array: np.ndarray) -> bytes:
    a = np.asarray(array)
    if a.dtype not in _CODES:
        raise FormatError(f"unsupported dtype {a.dtype}; use float64 or uint16")
    if a.ndim < 1:
        raise FormatError("trajectory needs a frame axis")
    dims = a.shape[1:]
    header = struct.pack(f"<4sHBBI{len(dims)}I", MAGIC, FORMAT_VERSION, _CODES[a.dtype], len(dims), a.shape[0], *dims)
    return header + np.ascontiguousarray(a, dtype=_DTYPES[_CODES[a.dtype]]).tobytes()


def decode_trajectory(blob: bytes) -> np.ndarray:
    if len(blob) < 12:
        raise FormatError("file too short for a trajectory header")
    magic, version, code, ndim, frames = struct.unpack_from("<4sHBBI", blob)
    if magic != MAGIC:
        raise FormatError("not a trajectory file (bad magic)")
    if version != FORMAT_VERSION:
        raise FormatError(f"trajectory format version {version}, this build reads {FORMAT_VERSION}; "
                          "regenerate the dataset with the matching release")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    head = 12 + 4 * ndim
    if len(blob) < head:
        raise FormatError("truncated header")
    dims = struct.unpack_from(f"<{ndim}I", blob, 12)
    dt = _DTYPES[code]
    want = head + frames * int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(blob) != want:
        raise FormatError(f"size mismatch: {len(blob)} bytes, header implies {want}")
    return np.frombuffer(blob, dtype=dt, offset=head).reshape(frames, *dims).astype(dt.newbyteorder("="))


def write_trajectory_file(path, array: np.ndarray) -> str:
    """Write atomically; returns the sha256 of the bytes written."""
    blob = encode_trajectory(array)
    atomic_write_bytes(path, blob)
    return hashlib.sha256(blob).hexdigest()


def read_trajectory_file(path, sha256: str | None = None) -> np.ndarray:
    blob = Path(path).read_bytes()
    if sha256 is not None and hashlib.sha256(blob).hexdigest() != sha256:
        raise IntegrityError(f"checksum mismatch for {path}")
    return decode_trajectory(blob)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        man = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise FormatError(f"cannot read manifest {path}: {err}") from err
    if man.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"manifest version {man.get('format_version')}, expected {FORMAT_VERSION}; "
                          "regenerate the dataset")
    return man


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: dict, optimizer: dict | None = None, meta: dict | None = None) -> None:
    """Parameters (and optimizer moments) as float arrays in an npz; ``meta`` as embedded JSON."""
    arrays = {f"param/{k}": np.asarray(v) for k, v in params.items()}
    for section, tree in (optimizer or {}).items():
        if isinstance(tree, dict):
            arrays.update({f"opt/{section}/{k}": np.asarray(v) for k, v in tree.items()})
    info = {"version": CHECKPOINT_VERSION, "meta": meta or {},
            "opt_scalars": {k: v for k, v in (optimizer or {}).items() if not isinstance(v, dict)}}
    arrays["__info__"] = np.frombuffer(json.dumps(info, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path):
    """Returns ``(params, optimizer, meta)``; ``optimizer`` is ``None`` when none was saved."""
    try:
        with np.load(path, allow_pickle=False) as z:
            files = {k: z[k] for k in z.files}
    except (OSError, ValueError, EOFError, zipfile.BadZipFile) as err:
        raise FormatError(f"cannot read checkpoint {path}: {err}") from err
    if "__info__" not in files:
        raise FormatError(f"{path} is not a checkpoint")
    info = json.loads(files.pop("__info__").tobytes().decode())
    if info.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint version {info.get('version')}, expected {CHECKPOINT_VERSION}; "
                          "retrain or load it with the release that wrote it")
    params = {k[len("param/"):]: v for k, v in files.items() if k.startswith("param/")}
    opt: dict = {}
    for k, v in files.items():
        if k.startswith("opt/"):
            _, section, name = k.split("/", 2)
            opt.setdefault(section, {})[name] = v
    opt.update(info.get("opt_scalars", {}))
    return params, (opt or None), info.get("meta", {})
