"""Binary checkpoints: a canonical config header with digest, named parameter
blobs, and optional optimizer state. Round-trips are byte-identical."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MOMLOC01"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _config_bytes(config: dict) -> bytes:
    return json.dumps(config, sort_keys=True).encode()


def _write_array(fh, name: str, arr: np.ndarray):
    encoded = name.encode()
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(arr.astype("<f8", copy=False).tobytes())


def _read_array(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", fh.read(2))
    name = fh.read(name_len).decode()
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape).copy()
    return name, data


def checkpoint_save(path, config: dict, named_params: dict,
                    optimizer_state=None):
    """named_params: name -> float64 array; stored in sorted-name order so
    save/load/save reproduces the file exactly."""
    cfg_bytes = _config_bytes(config)
    digest = hashlib.sha256(cfg_bytes).digest()
    names = sorted(named_params)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(digest)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            _write_array(fh, name, np.asarray(named_params[name], dtype=np.float64))
        if optimizer_state is None:
            fh.write(struct.pack("<B", 0))
        else:
            t, m_map, v_map = optimizer_state
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Q", t))
            for name in names:
                _write_array(fh, name, m_map[name])
            for name in names:
                _write_array(fh, name, v_map[name])
    return Path(path)


def checkpoint_load(path, expected_config: dict | None = None):
    """Returns (config dict, params dict, optimizer_state or None); refuses
    digest mismatches and, when given, a non-matching expected config."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        cfg_bytes = fh.read(cfg_len)
        stored_digest = fh.read(32)
        if hashlib.sha256(cfg_bytes).digest() != stored_digest:
            raise CheckpointError(
                f"{path}: config digest mismatch, checkpoint is corrupt")
        config = json.loads(cfg_bytes)
        if expected_config is not None:
            expected_bytes = _config_bytes(expected_config)
            if hashlib.sha256(expected_bytes).digest() != stored_digest:
                raise CheckpointError(
                    f"{path}: checkpoint was written with a different "
                    "configuration; refusing to load parameters into this model")
        (n_params,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(n_params):
            name, arr = _read_array(fh)
            params[name] = arr
        (has_opt,) = struct.unpack("<B", fh.read(1))
        optimizer_state = None
        if has_opt:
            (t,) = struct.unpack("<Q", fh.read(8))
            m_map = dict(_read_array(fh) for _ in range(n_params))
            v_map = dict(_read_array(fh) for _ in range(n_params))
            optimizer_state = (t, m_map, v_map)
    return config, params, optimizer_state
