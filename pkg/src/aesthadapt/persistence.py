"""Binary checkpoint/profile container and canonical JSON reports.

Container layout (all integers little-endian)::

    magic        8 bytes   b"AESCKPT\\0" (checkpoint) or b"AESPROF\\0" (profile)
    version      u32
    meta_len     u64
    meta         meta_len bytes of canonical JSON (sorted keys, no spaces)
    n_tensors    u32
    table        n_tensors entries:
                   name_len u16, name (utf-8), dtype u8 (1=f32, 2=f64),
                   rank u8, dims u64 * rank, offset u64, nbytes u64
    data         raw tensors; offsets are relative to the start of this section

Tensors are written in name order, so identical content gives identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import AugmentationConfig, NormalizationStats
from .model import AdapterConfig, AestheticsNet, BackboneConfig, ProfileMismatch, TrainMode, UserProfile, check_profile

CHECKPOINT_MAGIC = b"AESCKPT\0"
PROFILE_MAGIC = b"AESPROF\0"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class FormatError(ValueError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False).encode("ascii")


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write(path, (json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n").encode("utf-8"))


def encode_container(magic: bytes, meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    meta_bytes = canonical_json(meta)
    table, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        nb = name.encode("utf-8")
        table.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim))
        table.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) + struct.pack("<QQ", offset, len(raw)))
        blobs.append(raw)
        offset += len(raw)
    head = magic + struct.pack("<IQ", FORMAT_VERSION, len(meta_bytes)) + meta_bytes + struct.pack("<I", len(tensors))
    return head + b"".join(table) + b"".join(blobs)


def decode_container(buf: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if buf[:8] != magic:
        raise FormatError(f"bad magic {buf[:8]!r}, expected {magic!r}")
    try:
        version, meta_len = struct.unpack_from("<IQ", buf, 8)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version}")
        pos = 20
        meta = json.loads(buf[pos : pos + meta_len].decode("ascii"))
        pos += meta_len
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        entries = []
        for _ in range(n):
            (nl,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2 : pos + 2 + nl].decode("utf-8")
            pos += 2 + nl
            code, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            off, nbytes = struct.unpack_from("<QQ", buf, pos)
            pos += 16
            entries.append((name, code, dims, off, nbytes))
        tensors = {}
        for name, code, dims, off, nbytes in entries:
            dt = _DTYPES[code]
            if nbytes != int(np.prod(dims, dtype=np.int64)) * dt.itemsize or pos + off + nbytes > len(buf):
                raise FormatError(f"tensor {name!r} extends past the end of the file")
            arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos + off)
            tensors[name] = arr.reshape(dims).astype(dt.newbyteorder("="), copy=True)
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt container: {exc}") from exc
    return meta, tensors


@dataclass
class Checkpoint:
    model: AestheticsNet
    stats: NormalizationStats
    augmentation: AugmentationConfig
    extra: dict = field(default_factory=dict)

    def meta(self) -> dict:
        return {
            "format": "aesthadapt-checkpoint",
            "backbone": self.model.config.to_dict(),
            "adapters": self.model.adapter_config.to_dict(),
            "normalization": self.stats.to_dict(),
            "augmentation": self.augmentation.to_dict(),
            "dtype": self.model.dtype.name,
            "buffers": sorted(self.model.buffers),
            "extra": self.extra,
        }

    def tensors(self) -> dict[str, np.ndarray]:
        return {**self.model.params, **self.model.buffers}

    def to_bytes(self) -> bytes:
        return encode_container(CHECKPOINT_MAGIC, self.meta(), self.tensors())

    @property
    def config_hash(self) -> str:
        """Digest of the configs, normalization and every generic tensor."""
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(path, ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    meta, tensors = decode_container(Path(path).read_bytes(), CHECKPOINT_MAGIC)
    model = AestheticsNet(BackboneConfig.from_dict(meta["backbone"]), AdapterConfig.from_dict(meta["adapters"]), meta["dtype"])
    buffers = set(meta["buffers"])
    model.params = {k: v for k, v in tensors.items() if k not in buffers}
    model.buffers = {k: v for k, v in tensors.items() if k in buffers}
    return Checkpoint(
        model,
        NormalizationStats(**meta["normalization"]),
        AugmentationConfig.from_dict(meta["augmentation"]),
        meta.get("extra", {}),
    )


@dataclass
class ProfileFile:
    profile: UserProfile
    checkpoint_hash: str
    extra: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        meta = {
            "format": "aesthadapt-profile",
            "user_id": self.profile.user_id,
            "mode": self.profile.mode.value,
            "adapters": self.profile.adapter_config.to_dict(),
            "checkpoint_hash": self.checkpoint_hash,
            "extra": self.extra,
        }
        return encode_container(PROFILE_MAGIC, meta, self.profile.tensors)


def save_profile(path, pf: ProfileFile) -> None:
    atomic_write(path, pf.to_bytes())


def load_profile(path, ckpt: Checkpoint | None = None) -> ProfileFile:
    """Read a profile; with ``ckpt`` given, refuse one trained against different generic weights."""
    meta, tensors = decode_container(Path(path).read_bytes(), PROFILE_MAGIC)
    profile = UserProfile(meta["user_id"], TrainMode(meta["mode"]), AdapterConfig.from_dict(meta["adapters"]), tensors)
    pf = ProfileFile(profile, meta["checkpoint_hash"], meta.get("extra", {}))
    if ckpt is not None:
        if pf.checkpoint_hash != ckpt.config_hash:
            raise ProfileMismatch(
                f"profile {path} was trained against checkpoint {pf.checkpoint_hash}, "
                f"but the loaded checkpoint is {ckpt.config_hash}"
            )
    return pf


def profile_model(ckpt: Checkpoint, profile: UserProfile, adapter_rng=None) -> AestheticsNet:
    """The generic model with the profile's adapter layout attached (shapes checked)."""
    from .model import attach_adapters

    model = ckpt.model
    if profile.adapter_config != model.adapter_config:
        model = attach_adapters(model, profile.adapter_config, adapter_rng)
    check_profile(model, profile)
    return model
