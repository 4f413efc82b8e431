"""MDQN1 checkpoint files.

Layout: ``MDQN1\\n`` magic, an 8-byte little-endian header length, a UTF-8
JSON header, then every parameter array as little-endian float32 in header
order, then (optionally) the RMSProp accumulators in the same order.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Network, RMSProp, build_network

MAGIC = b"MDQN1\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: dict
    params: list[np.ndarray]
    step: int = 0
    seed: int = 0
    optimizer: dict | None = None
    opt_state: list[np.ndarray] | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_network(cls, net: Network, step: int = 0, seed: int = 0, opt: RMSProp | None = None,
                     extra: dict | None = None) -> "Checkpoint":
        return cls(
            spec=net.spec(),
            params=[np.array(p, dtype=np.float32) for p in net.params()],
            step=step,
            seed=seed,
            optimizer=opt.state() if opt is not None else None,
            opt_state=[np.array(a, dtype=np.float32) for a in opt.acc] if opt is not None else None,
            extra=dict(extra or {}),
        )

    def network(self, dtype=np.float32) -> Network:
        net = build_network(self.spec, dtype=dtype)
        net.load_params(self.params)
        return net

    @property
    def output_arity(self) -> int:
        return self.params[-1].shape[-1]


def _encode(arrays) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)


def dumps_checkpoint(ckpt: Checkpoint) -> bytes:
    header = {
        "format": FORMAT_VERSION,
        "spec": ckpt.spec,
        "shapes": [list(p.shape) for p in ckpt.params],
        "dtype": "f32le",
        "step": int(ckpt.step),
        "seed": int(ckpt.seed),
        "optimizer": ckpt.optimizer,
        "has_opt_state": ckpt.opt_state is not None,
        "extra": ckpt.extra,
    }
    body = _encode(ckpt.params)
    if ckpt.opt_state is not None:
        body += _encode(ckpt.opt_state)
    header["body_crc32"] = zlib.crc32(body)
    blob = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(blob)) + blob + body


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps_checkpoint(ckpt))
    tmp.replace(path)


def loads_checkpoint(raw: bytes) -> Checkpoint:
    if not raw.startswith(MAGIC):
        raise CheckpointError("bad magic: not an MDQN1 checkpoint")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError("truncated checkpoint header length")
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if len(raw) < pos + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(raw[pos : pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    pos += hlen
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format')!r}")
    if header.get("dtype") != "f32le":
        raise CheckpointError(f"unsupported dtype {header.get('dtype')!r}")
    shapes = [tuple(s) for s in header["shapes"]]
    sizes = [int(np.prod(s)) for s in shapes]
    expected = 4 * sum(sizes) * (2 if header.get("has_opt_state") else 1)
    if len(raw) - pos != expected:
        raise CheckpointError(f"checkpoint body is {len(raw) - pos} bytes, expected {expected}")
    crc = header.get("body_crc32")
    if crc is not None and zlib.crc32(raw[pos:]) != crc:
        raise CheckpointError("checkpoint body checksum mismatch")

    def take(offset):
        out = []
        for shape, size in zip(shapes, sizes):
            out.append(np.frombuffer(raw, dtype="<f4", count=size, offset=offset).reshape(shape).astype(np.float32))
            offset += 4 * size
        return out, offset

    params, pos = take(pos)
    opt_state = take(pos)[0] if header.get("has_opt_state") else None
    return Checkpoint(
        spec=header["spec"],
        params=params,
        step=header["step"],
        seed=header["seed"],
        optimizer=header.get("optimizer"),
        opt_state=opt_state,
        extra=header.get("extra", {}),
    )


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return loads_checkpoint(raw)

