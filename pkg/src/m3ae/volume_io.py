"""On-disk formats: volume files, checkpoints and dataset directories.

Volume file (all integers little-endian)::

    offset  size  field
    0       8     magic  b"M3VOL1\\0\\0"
    8       2     version (u16) = 1
    10      2     channels (u16)
    12      12    dims D, H, W (3 x u32)
    24      12    voxel spacing (3 x f32)
    36      1     dtype code (u8); 0 = f32 little-endian
    37      ...   payload, channels x D x H x W f32, W fastest

Checkpoint file::

    magic b"M3CKPT1\\0" | version u16
    | u32 len + model config (JSON) | u32 len + loss weights (JSON)
    | u64 seed | u64 step | u32 len + metadata (JSON)
    | body | u32 CRC32 of body

    body = u32 count, then per tensor (names sorted):
           u16 name length | name (UTF-8) | u8 ndim | ndim x u32 dims | f32 data
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError, DataError, VolumeFormatError

VOLUME_MAGIC = b"M3VOL1\0\0"
VOLUME_VERSION = 1
_VOL_HEADER = struct.Struct("<8sHH3I3fB")
DTYPE_F32 = 0

CKPT_MAGIC = b"M3CKPT1\0"
CKPT_VERSION = 1


def _atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- volumes -------------------------------------------------------------


def encode_volume(v: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> bytes:
    v = np.asarray(v)
    if v.ndim == 3:
        v = v[None]
    if v.ndim != 4:
        raise VolumeFormatError(f"volume must be [D,H,W] or [C,D,H,W], got shape {v.shape}")
    C, D, H, W = v.shape
    header = _VOL_HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, C, D, H, W, *map(float, spacing), DTYPE_F32)
    return header + np.ascontiguousarray(v, dtype="<f4").tobytes()


def decode_volume(buf: bytes, allow_nonfinite: bool = False, source: str = "<bytes>") -> tuple[np.ndarray, tuple]:
    if len(buf) < _VOL_HEADER.size:
        raise VolumeFormatError(f"{source}: header truncated: expected {_VOL_HEADER.size} bytes, got {len(buf)}")
    magic, version, C, D, H, W, sx, sy, sz, dtype = _VOL_HEADER.unpack_from(buf)
    if magic != VOLUME_MAGIC:
        raise VolumeFormatError(f"{source}: bad magic at offset 0: {magic!r}")
    if version != VOLUME_VERSION:
        raise VolumeFormatError(f"{source}: unsupported version {version} at offset 8")
    if dtype != DTYPE_F32:
        raise VolumeFormatError(f"{source}: unsupported dtype code {dtype} at offset 36")
    expected = C * D * H * W * 4
    actual = len(buf) - _VOL_HEADER.size
    if actual != expected:
        raise VolumeFormatError(
            f"{source}: payload at offset {_VOL_HEADER.size} has {actual} bytes, expected {expected}"
        )
    data = np.frombuffer(buf, dtype="<f4", offset=_VOL_HEADER.size).reshape(C, D, H, W).astype(np.float32)
    if not allow_nonfinite and not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.isfinite(data.reshape(-1)))[0])
        raise VolumeFormatError(f"{source}: non-finite value at byte offset {_VOL_HEADER.size + 4 * bad}")
    return data, (sx, sy, sz)


def write_volume(path: str | os.PathLike, v: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a [D,H,W] volume or a [C,D,H,W] multi-channel volume (3 channels = vector field)."""
    _atomic_write(path, encode_volume(v, spacing))


def read_volume(path: str | os.PathLike, allow_nonfinite: bool = False) -> np.ndarray:
    """Read a volume file; single-channel files come back as [D,H,W], others as [C,D,H,W]."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise VolumeFormatError(f"{path}: {exc.strerror or exc}") from exc
    data, _ = decode_volume(buf, allow_nonfinite, source=str(path))
    return data[0] if data.shape[0] == 1 else data


# -- checkpoints ---------------------------------------------------------


def _doc(d: dict) -> bytes:
    raw = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack("<I", len(raw)) + raw


def encode_tensor_table(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path, tensors: dict[str, np.ndarray], model_config: dict, loss_weights: dict,
                    seed: int, step: int, meta: dict | None = None) -> None:
    header = (CKPT_MAGIC + struct.pack("<H", CKPT_VERSION) + _doc(model_config) + _doc(loss_weights)
              + struct.pack("<QQ", seed, step) + _doc(meta or {}))
    body = encode_tensor_table(tensors)
    _atomic_write(path, header + body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"{self.source}: truncated reading {what} at offset {self.pos}: need {n} bytes, "
                f"{len(self.buf) - self.pos} left"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))

    def doc(self, what: str) -> dict:
        (n,) = self.unpack("I", f"{what} length")
        try:
            return json.loads(self.take(n, what))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{self.source}: malformed {what}: {exc}") from exc


def load_checkpoint(path) -> dict:
    """Parse a checkpoint; returns a dict with model_config, loss_weights, seed, step, meta, tensors."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror or exc}") from exc
    r = _Reader(buf, str(path))
    magic = r.take(8, "magic")
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0: {magic!r}")
    (version,) = r.unpack("H", "version")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} at offset 8")
    model_config = r.doc("model config")
    loss_weights = r.doc("loss weights")
    seed, step = r.unpack("QQ", "seed/step")
    meta = r.doc("metadata")
    body_start = r.pos
    if len(buf) - body_start < 4:
        raise CheckpointError(f"{path}: truncated before CRC at offset {body_start}")
    body = buf[body_start:-4]
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: CRC mismatch over body bytes [{body_start}, {len(buf) - 4})")
    br = _Reader(body, str(path))
    (count,) = br.unpack("I", "tensor count")
    tensors = {}
    for _ in range(count):
        (nlen,) = br.unpack("H", "name length")
        name = br.take(nlen, "tensor name").decode()
        (ndim,) = br.unpack("B", "ndim")
        shape = br.unpack(f"{ndim}I", f"shape of {name}") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(br.take(4 * n, f"data of {name}"), dtype="<f4").astype(np.float32)
        tensors[name] = data.reshape(shape)
    if br.pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - br.pos} trailing bytes in body")
    return {"model_config": model_config, "loss_weights": loss_weights, "seed": seed, "step": step,
            "meta": meta, "tensors": tensors}


# -- dataset directories -------------------------------------------------

MANIFEST = "manifest.json"


def write_dataset(directory, template: np.ndarray, volumes: np.ndarray, manifest: dict) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_volume(d / manifest["template"], template)
    for entry, vol in zip(manifest["samples"], volumes):
        write_volume(d / entry["file"], vol)
    _atomic_write(d / MANIFEST, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def read_manifest(directory) -> dict:
    d = Path(directory)
    try:
        manifest = json.loads((d / MANIFEST).read_text())
    except OSError as exc:
        raise DataError(f"{d / MANIFEST}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{d / MANIFEST}: malformed manifest: {exc}") from exc
    if "samples" not in manifest or not manifest["samples"]:
        raise DataError(f"{d / MANIFEST}: no samples listed")
    missing = [e["file"] for e in manifest["samples"] if not (d / e["file"]).is_file()]
    if manifest.get("template") and not (d / manifest["template"]).is_file():
        missing.insert(0, manifest["template"])
    if missing:
        raise DataError(f"{d}: {len(missing)} referenced file(s) missing, first: {missing[0]}")
    return manifest


def load_dataset(directory) -> tuple[np.ndarray | None, np.ndarray, dict]:
    """Validate every referenced file, then load template and samples ``[n, D, H, W]``."""
    d = Path(directory)
    manifest = read_manifest(d)
    template = read_volume(d / manifest["template"]) if manifest.get("template") else None
    vols = [read_volume(d / e["file"]) for e in manifest["samples"]]
    shapes = {v.shape for v in vols}
    if len(shapes) != 1 or len(next(iter(shapes))) != 3:
        raise DataError(f"{d}: samples must share one single-channel grid, found {sorted(shapes)}")
    return template, np.stack(vols), manifest
