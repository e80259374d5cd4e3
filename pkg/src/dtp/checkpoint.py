"""Binary checkpoints: magic, version, JSON header, raw little-endian f32.

Layout: b"DTPCKPT" | uint32 version | uint64 header length | header JSON
(utf-8, sorted keys) | concatenated segments. The header lists every
segment's name and shape in order: model parameters first, then optimizer
first/second moments. Round trips are byte-identical.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .diffcore import AdamWState, Tensor
from .errors import CompatibilityError, DataError

MAGIC = b"DTPCKPT"
VERSION = 1


def save_checkpoint(path: Path, config: dict, named_params: list[tuple[str, Tensor]],
                    opt_state: AdamWState | None, iteration: int,
                    mode: str = "dtp") -> None:
    segments = []
    buffers = []
    for name, tensor in named_params:
        arr = np.ascontiguousarray(tensor.data, dtype="<f4")
        segments.append({"name": name, "shape": list(arr.shape)})
        buffers.append(arr.tobytes())
    opt_header = None
    if opt_state is not None:
        opt_header = {
            "lr": opt_state.lr, "beta1": opt_state.beta1, "beta2": opt_state.beta2,
            "eps": opt_state.eps, "weight_decay": opt_state.weight_decay,
            "t_opt": opt_state.t_opt,
        }
        for prefix, buf_list in (("m", opt_state.m), ("v", opt_state.v)):
            for (name, _), arr in zip(named_params, buf_list):
                arr = np.ascontiguousarray(arr, dtype="<f4")
                segments.append({"name": f"opt.{prefix}.{name}", "shape": list(arr.shape)})
                buffers.append(arr.tobytes())
    header = {
        "config": config,
        "iteration": int(iteration),
        "mode": mode,
        "optimizer": opt_header,
        "segments": segments,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for buf in buffers:
                fh.write(buf)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc


class Checkpoint:
    def __init__(self, config: dict, iteration: int, mode: str,
                 params: dict[str, np.ndarray], optimizer: dict | None):
        self.config = config
        self.iteration = iteration
        self.mode = mode
        self.params = params
        self.optimizer = optimizer  # {"lr": ..., "m": {name: arr}, "v": {...}}

    def restore_into(self, named_params: list[tuple[str, Tensor]]) -> None:
        missing = [n for n, _ in named_params if n not in self.params]
        if missing:
            raise CompatibilityError(f"checkpoint lacks parameters: {missing[:4]}")
        for name, tensor in named_params:
            arr = self.params[name]
            if tuple(arr.shape) != tensor.shape:
                raise CompatibilityError(
                    f"shape mismatch for {name}: checkpoint {arr.shape} vs model {tensor.shape}")
            tensor.data = arr.astype(np.float32).copy()

    def restore_optimizer(self, named_params: list[tuple[str, Tensor]]) -> AdamWState:
        if self.optimizer is None:
            raise CompatibilityError("checkpoint has no optimizer state")
        o = self.optimizer
        state = AdamWState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                           weight_decay=o["weight_decay"], t_opt=o["t_opt"])
        state.m = [o["m"][name].astype(np.float32).copy() for name, _ in named_params]
        state.v = [o["v"][name].astype(np.float32).copy() for name, _ in named_params]
        return state


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 12 or raw[:len(MAGIC)] != MAGIC:
        raise CompatibilityError(f"{path} is not a checkpoint (bad magic)")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != VERSION:
        raise CompatibilityError(f"checkpoint format version {version} unsupported "
                                 f"(expected {VERSION})")
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    try:
        header = json.loads(raw[off:off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint header in {path}: {exc}") from exc
    off += hlen
    params: dict[str, np.ndarray] = {}
    opt_m: dict[str, np.ndarray] = {}
    opt_v: dict[str, np.ndarray] = {}
    for seg in header["segments"]:
        shape = tuple(seg["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += count * 4
        name = seg["name"]
        if name.startswith("opt.m."):
            opt_m[name[6:]] = arr
        elif name.startswith("opt.v."):
            opt_v[name[6:]] = arr
        else:
            params[name] = arr
    optimizer = None
    if header.get("optimizer") is not None:
        optimizer = dict(header["optimizer"])
        optimizer["m"] = opt_m
        optimizer["v"] = opt_v
    return Checkpoint(config=header["config"], iteration=header["iteration"],
                      mode=header.get("mode", "dtp"), params=params, optimizer=optimizer)
