"""Binary checkpoint format: named float64 tensors with a trailing CRC32.

Layout: magic "HNG1", format version u32, tensor count u32, then per entry
(name length u16, UTF-8 name, rank u8, dims u32 each, little-endian float64
payload), and finally the CRC32 of everything before it. The run
configuration rides along as one UTF-8 blob entry whose floats are byte
values, keeping every entry readable by the same generic parser.
"""

from __future__ import annotations

import json
import os
import struct
import zlib

import numpy as np
from filelock import FileLock

from .errors import CheckpointError

MAGIC = b"HNG1"
VERSION = 1
CONFIG_ENTRY = "__run_config__"


def write_tensor_file(path: str, tensors: dict[str, np.ndarray],
                      config_json: str | None = None) -> None:
    """Serialize named tensors (plus an optional config blob) atomically."""
    entries = dict(tensors)
    if config_json is not None:
        raw = config_json.encode("utf-8")
        entries[CONFIG_ENTRY] = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name!r}")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"tensor rank {arr.ndim} too large: {name!r}")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    body = b"".join(chunks)
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    tmp = path + ".tmp"
    with FileLock(path + ".lock"):
        with open(tmp, "wb") as fh:
            fh.write(body)
        os.replace(tmp, path)


def read_tensor_file(path: str) -> tuple[dict[str, np.ndarray], str | None]:
    """Parse and CRC-verify a tensor file; returns (tensors, config_json)."""
    if not os.path.exists(path):
        raise IOError(f"no such checkpoint: {path}")
    with open(path, "rb") as fh:
        body = fh.read()
    if len(body) < len(MAGIC) + 12:
        raise CheckpointError(f"{path}: truncated checkpoint")
    stored_crc = struct.unpack("<I", body[-4:])[0]
    if zlib.crc32(body[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupt")
    if body[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {body[:4]!r}")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    off = 12
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", body, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(body, dtype="<f8", count=n, offset=off).copy()
            off += 8 * n
            if name in tensors:
                raise CheckpointError(f"{path}: duplicate tensor {name!r}")
            tensors[name] = arr.reshape(dims)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed entry table: {exc}") from exc
    if off != len(body) - 4:
        raise CheckpointError(f"{path}: trailing bytes after entry table")
    config_json = None
    blob = tensors.pop(CONFIG_ENTRY, None)
    if blob is not None:
        config_json = bytes(int(v) for v in blob.reshape(-1)).decode("utf-8")
    return tensors, config_json


# -- training-state mapping ------------------------------------------------------


def _state_tensors(state) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {"step": np.array([float(state.step)])}
    for i, (w, b) in enumerate(zip(state.field_params.weights, state.field_params.biases)):
        out[f"field.w{i}"] = w.data
        out[f"field.b{i}"] = b.data
    gp = state.gen_params
    for i, (w, b) in enumerate(zip(gp.trunk_weights, gp.trunk_biases)):
        out[f"gen.trunk_w{i}"] = w.data
        out[f"gen.trunk_b{i}"] = b.data
    for i in range(len(gp.head_a_weights)):
        out[f"gen.head_a_w{i}"] = gp.head_a_weights[i].data
        out[f"gen.head_a_b{i}"] = gp.head_a_biases[i].data
        out[f"gen.head_b_w{i}"] = gp.head_b_weights[i].data
        out[f"gen.head_b_b{i}"] = gp.head_b_biases[i].data
    dp = state.disc_params
    for i, (k, b) in enumerate(zip(dp.kernels, dp.conv_biases)):
        out[f"disc.k{i}"] = k.data
        out[f"disc.cb{i}"] = b.data
    out["disc.head_w"] = dp.head_weight.data
    out["disc.head_b"] = dp.head_bias.data
    for tag, opt in (("opt_g", state.opt_g), ("opt_d", state.opt_d)):
        out[f"{tag}.step_count"] = np.array([float(opt.step_count)])
        for j, (m, v) in enumerate(zip(opt.first_moment, opt.second_moment)):
            out[f"{tag}.m{j}"] = m
            out[f"{tag}.v{j}"] = v
    out["avg.loss_d"] = np.array([state.loss_d_avg])
    out["avg.loss_g"] = np.array([state.loss_g_avg])
    out["warmup_done"] = np.array([1.0 if state.warmup_done else 0.0])
    return out


def save_checkpoint(state, path: str) -> None:
    """Write a TrainState with its run configuration embedded."""
    from .config import run_dict_from_train_config

    config_json = json.dumps(run_dict_from_train_config(state.cfg))
    write_tensor_file(path, _state_tensors(state), config_json)


def load_checkpoint(path: str):
    """Rebuild a TrainState; renders from it are bit-identical to the saved one."""
    from .config import parse_config_dict, to_train_config
    from .training import init_train_state

    tensors, config_json = read_tensor_file(path)
    if config_json is None:
        raise CheckpointError(f"{path}: missing embedded run configuration")
    try:
        run_cfg = parse_config_dict(json.loads(config_json))
    except (json.JSONDecodeError, KeyError) as exc:
        raise CheckpointError(f"{path}: bad embedded configuration: {exc}") from exc
    state = init_train_state(to_train_config(run_cfg))
    expected = _state_tensors(state)
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointError(
            f"{path}: tensor names disagree (missing {missing[:3]}, extra {extra[:3]})")
    for name, target in expected.items():
        src = tensors[name]
        if src.shape != target.shape:
            raise CheckpointError(
                f"{path}: {name} has shape {src.shape}, expected {target.shape}")
        target[...] = src
    state.step = int(tensors["step"][0])
    state.opt_g.step_count = int(tensors["opt_g.step_count"][0])
    state.opt_d.step_count = int(tensors["opt_d.step_count"][0])
    state.loss_d_avg = float(tensors["avg.loss_d"][0])
    state.loss_g_avg = float(tensors["avg.loss_g"][0])
    state.warmup_done = bool(tensors["warmup_done"][0])
    return state
