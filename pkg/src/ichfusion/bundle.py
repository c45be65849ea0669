"""Binary model bundles: magic, version, JSON config echo, named float64 blobs, SHA-256.

Layout (little-endian)::

    b"ICHW" | u32 version | u32 len | config JSON (utf-8)
    u32 n_params, then per parameter:
        u16 len | name (utf-8) | u32 ndim | u32 dims... | float64 data
    32-byte SHA-256 of everything above
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, init_backbone
from .errors import ValidationError
from .fusion import FusionConfig, init_fusion

MAGIC = b"ICHW"
VERSION = 1
KINDS = ("backbone", "fusion")


@dataclass
class ModelBundle:
    kind: str
    config: BackboneConfig | FusionConfig
    params: dict[str, np.ndarray]

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        rng = np.random.default_rng(0)
        init = init_backbone(self.config, rng) if self.kind == "backbone" else init_fusion(self.config, rng)
        return {k: v.shape for k, v in init.items()}


def to_bytes(bundle: ModelBundle) -> bytes:
    if bundle.kind not in KINDS:
        raise ValueError(f"unknown bundle kind {bundle.kind!r}")
    echo = json.dumps({"kind": bundle.kind, "config": bundle.config.to_dict()}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(echo)), echo, struct.pack("<I", len(bundle.params))]
    for name in sorted(bundle.params):
        arr = np.ascontiguousarray(bundle.params[name], dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def from_bytes(data: bytes, source="bundle") -> ModelBundle:
    if len(data) < 4 + 8 + 4 + 32 or data[:4] != MAGIC:
        raise ValidationError(f"{source}: not an ICHW model bundle")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValidationError(f"{source}: checksum mismatch, file is corrupt")
    version, n = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise ValidationError(f"{source}: bundle format version {version}, this code reads version {VERSION}")
    off = 12
    echo = json.loads(body[off : off + n])
    off += n
    kind = echo.get("kind")
    if kind not in KINDS:
        raise ValidationError(f"{source}: unknown bundle kind {kind!r}")
    try:
        cfg_cls = BackboneConfig if kind == "backbone" else FusionConfig
        config = cfg_cls.from_dict(echo["config"])
    except (TypeError, KeyError, ValueError) as exc:
        raise ValidationError(f"{source}: config echo does not match this version ({exc})") from exc
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + ln].decode()
        off += ln
        (ndim,) = struct.unpack_from("<I", body, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) * 8
        params[name] = np.frombuffer(body[off : off + size], dtype="<f8").reshape(shape).astype(np.float64)
        off += size
    if off != len(body):
        raise ValidationError(f"{source}: {len(body) - off} trailing bytes")
    bundle = ModelBundle(kind, config, params)
    expected = bundle.expected_shapes()
    got = {k: v.shape for k, v in params.items()}
    if got != expected:
        raise ValidationError(f"{source}: parameters {sorted(got)} do not fit the echoed {kind} config")
    return bundle


def save_bundle(path, bundle: ModelBundle) -> None:
    Path(path).write_bytes(to_bytes(bundle))


def load_bundle(path, kind: str | None = None) -> ModelBundle:
    bundle = from_bytes(Path(path).read_bytes(), str(path))
    if kind is not None and bundle.kind != kind:
        raise ValidationError(f"{path}: expected a {kind} bundle, found {bundle.kind}")
    return bundle
