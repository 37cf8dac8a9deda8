"""Bit-exact model persistence: a text manifest plus a raw little-endian payload.

``<name>.manifest`` is line oriented::

    format = carnet-checkpoint 1
    kind = carnet
    config = {"input_size": 64, ...}
    param <name> <dtype> <d0,d1,...> <offset> <nbytes> <crc32>

``<name>.bin`` holds the arrays back to back in manifest order.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT = "carnet-checkpoint"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    kind: str = "carnet"
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".manifest", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".manifest"), p.with_name(p.name + ".bin")


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> tuple[Path, Path]:
    manifest_path, payload_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"format = {FORMAT} {VERSION}", f"kind = {ckpt.kind}", f"config = {_dump(ckpt.config)}",
             f"extra = {_dump(ckpt.extra)}"]
    chunks, offset = [], 0
    for name, arr in ckpt.arrays.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"parameter name {name!r} contains whitespace")
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        shape = ",".join(str(d) for d in a.shape) or "-"
        lines.append(f"param {name} {a.dtype.str} {shape} {offset} {len(raw)} {zlib.crc32(raw):08x}")
        chunks.append(raw)
        offset += len(raw)
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    payload_path.write_bytes(b"".join(chunks))
    return manifest_path, payload_path


def load_checkpoint(path: str | Path) -> Checkpoint:
    manifest_path, payload_path = _paths(path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    if not payload_path.exists():
        raise FileNotFoundError(f"checkpoint payload not found: {payload_path}")
    header, params = {}, []
    for line in manifest_path.read_text(encoding="utf-8").splitlines():
        if line.startswith("param "):
            params.append(line.split())
        elif " = " in line:
            k, v = line.split(" = ", 1)
            header[k] = v
    fmt = header.get("format", "").split()
    if len(fmt) != 2 or fmt[0] != FORMAT:
        raise CheckpointError(f"{manifest_path}: not a checkpoint manifest")
    if int(fmt[1]) != VERSION:
        raise VersionError(f"{manifest_path}: format version {fmt[1]}, this build reads version {VERSION}")
    payload = payload_path.read_bytes()
    arrays = {}
    for parts in params:
        if len(parts) != 7:
            raise CheckpointError(f"{manifest_path}: malformed entry {' '.join(parts)!r}")
        _, name, dtype, shape, offset, nbytes, crc = parts
        offset, nbytes = int(offset), int(nbytes)
        raw = payload[offset:offset + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"{payload_path}: truncated payload at parameter {name!r} "
                                  f"(need {nbytes} bytes at offset {offset}, file has {len(payload)})")
        if f"{zlib.crc32(raw):08x}" != crc:
            raise ChecksumError(f"{payload_path}: checksum mismatch for parameter {name!r}")
        dims = () if shape == "-" else tuple(int(d) for d in shape.split(","))
        arrays[name] = np.frombuffer(raw, dtype=np.dtype(dtype)).reshape(dims).copy()
    return Checkpoint(arrays, header.get("kind", ""), json.loads(header.get("config", "{}")),
                      json.loads(header.get("extra", "{}")))


def module_arrays(module) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in module.state().items()}


def load_into(module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy ``arrays`` into ``module``'s parameters and buffers; names and shapes must match."""
    state = module.state()
    wanted = {prefix + k for k in state}
    have = {k for k in arrays if k.startswith(prefix)}
    missing, unexpected = sorted(wanted - have), sorted(have - wanted)
    if missing or unexpected:
        raise CheckpointError(f"parameter names differ: missing {missing[:5]}, unexpected {unexpected[:5]}")
    for k, t in state.items():
        a = arrays[prefix + k]
        if a.shape != t.shape:
            raise CheckpointError(f"shape mismatch for {k!r}: checkpoint has {a.shape}, model expects {t.shape}")
    for k, t in state.items():
        t.data = arrays[prefix + k].astype(t.dtype, copy=True)


def save_model(path: str | Path, model, controller=None, extra: dict | None = None, kind: str = "carnet"):
    arrays = {"model." + k: v for k, v in module_arrays(model).items()}
    if controller is not None:
        arrays.update({"controller." + k: v for k, v in module_arrays(controller).items()})
        extra = dict(extra or {}, controller_dims=list(controller.dims))
    return save_checkpoint(path, Checkpoint(arrays, kind, model.cfg.to_dict(), extra or {}))


def load_model(path: str | Path, cfg=None):
    """Rebuild a CARNet (and its controller, if saved) from a checkpoint.

    ``cfg`` overrides the stored configuration; a mismatch then surfaces as a
    shape error naming both shapes.
    """
    from .model import CARNet, CarnetConfig, Controller

    ckpt = load_checkpoint(path)
    cfg = cfg or CarnetConfig.from_dict(ckpt.config)
    model = CARNet(cfg)
    load_into(model, ckpt.arrays, "model.")
    controller = None
    if any(k.startswith("controller.") for k in ckpt.arrays):
        dims = ckpt.extra.get("controller_dims")
        widths = tuple(dims[1:-1]) if dims else cfg.controller_widths
        n_out = dims[-1] if dims else 9
        controller = Controller(cfg.latent_size, widths, np.random.default_rng(0), n_out=n_out, dtype=model.dtype)
        load_into(controller, ckpt.arrays, "controller.")
    return model, controller, ckpt
