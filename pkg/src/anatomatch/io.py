"""Binary volume formats.

Every file is ``magic(4) | u32 LE header length | UTF-8 JSON header | payload``.

* ``AEV1``: embedding volume, float32 LE payload in (z, y, x, channel) order.
* ``ALV1``: label volume, uint16 LE payload in (z, y, x) order.
* ``APH1``: projection-head weights, float32 LE (out, in) row-major.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .volume import EmbeddingVolume, LabelVolume

AEV_MAGIC = b"AEV1"
ALV_MAGIC = b"ALV1"
APH_MAGIC = b"APH1"
HEAD_NAMES = ("appearance", "semantic")

_F32 = np.dtype("<f4")
_U16 = np.dtype("<u2")


class VolumeFormatError(ValueError):
    """Bad magic bytes or an unreadable header."""


class HeaderError(VolumeFormatError):
    """Header JSON is present but missing or contradicting fields."""


class TruncatedError(VolumeFormatError):
    """File ends before the header or payload does."""


class PayloadLengthError(VolumeFormatError):
    """Payload size disagrees with the header dims."""


def _pack(magic: bytes, header: dict, payload: bytes) -> bytes:
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<I", len(hdr)) + hdr + payload


def _unpack(raw: bytes, magic: bytes) -> tuple[dict, bytes]:
    if len(raw) < 8:
        raise TruncatedError(f"file too short ({len(raw)} bytes) for a {magic.decode()} header")
    if raw[:4] != magic:
        raise VolumeFormatError(f"bad magic {raw[:4]!r}, expected {magic!r}")
    (n,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + n:
        raise TruncatedError(f"header declares {n} bytes but only {len(raw) - 8} remain")
    try:
        header = json.loads(raw[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise HeaderError("header must be a JSON object")
    return header, raw[8 + n :]


def _dims(header: dict) -> tuple[int, int, int]:
    dims = header.get("dims")
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(d, int) and d > 0 for d in dims)):
        raise HeaderError(f"dims must be three positive integers, got {dims!r}")
    return tuple(dims)


def _spacing(header: dict) -> tuple[float, float, float]:
    sp = header.get("spacing_mm")
    if not (isinstance(sp, list) and len(sp) == 3 and all(isinstance(s, (int, float)) and s > 0 for s in sp)):
        raise HeaderError(f"spacing_mm must be three positive numbers, got {sp!r}")
    return tuple(float(s) for s in sp)


def _payload(payload: bytes, dtype: np.dtype, count: int) -> np.ndarray:
    if len(payload) % dtype.itemsize:
        raise TruncatedError(f"payload of {len(payload)} bytes is not a whole number of {dtype} values")
    n = len(payload) // dtype.itemsize
    if n != count:
        raise PayloadLengthError(f"header implies {count} values, payload holds {n}")
    return np.frombuffer(payload, dtype=dtype)


def encode_embedding(vol: EmbeddingVolume) -> bytes:
    header = {
        "dims": list(vol.dims),
        "channels": vol.channels,
        "spacing_mm": list(vol.spacing),
        "normalized": bool(vol.normalized),
    }
    return _pack(AEV_MAGIC, header, vol.data.astype(_F32, copy=False).tobytes())


def decode_embedding(raw: bytes) -> EmbeddingVolume:
    header, payload = _unpack(raw, AEV_MAGIC)
    dims = _dims(header)
    channels = header.get("channels")
    if not (isinstance(channels, int) and channels > 0):
        raise HeaderError(f"channels must be a positive integer, got {channels!r}")
    normalized = header.get("normalized", False)
    if not isinstance(normalized, bool):
        raise HeaderError("normalized must be a boolean")
    data = _payload(payload, _F32, dims[0] * dims[1] * dims[2] * channels)
    return EmbeddingVolume(data.reshape(*dims, channels), _spacing(header), normalized=normalized)


def encode_labels(vol: LabelVolume) -> bytes:
    header = {"dims": list(vol.dims), "num_classes": vol.num_classes, "spacing_mm": list(vol.spacing)}
    return _pack(ALV_MAGIC, header, vol.data.astype(_U16, copy=False).tobytes())


def decode_labels(raw: bytes) -> LabelVolume:
    header, payload = _unpack(raw, ALV_MAGIC)
    dims = _dims(header)
    k = header.get("num_classes")
    if not (isinstance(k, int) and k > 0):
        raise HeaderError(f"num_classes must be a positive integer, got {k!r}")
    data = _payload(payload, _U16, dims[0] * dims[1] * dims[2])
    return LabelVolume(data.reshape(dims), k, _spacing(header))


def encode_head(weights: np.ndarray, head: str) -> bytes:
    w = np.asarray(weights)
    if w.ndim != 2:
        raise ValueError("head weights must be a 2-D (out, in) matrix")
    if head not in HEAD_NAMES:
        raise ValueError(f"head must be one of {HEAD_NAMES}, got {head!r}")
    header = {"in": int(w.shape[1]), "out": int(w.shape[0]), "head": head}
    return _pack(APH_MAGIC, header, w.astype(_F32).tobytes())


def decode_head(raw: bytes) -> tuple[np.ndarray, str]:
    header, payload = _unpack(raw, APH_MAGIC)
    n_in, n_out, head = header.get("in"), header.get("out"), header.get("head")
    if not (isinstance(n_in, int) and n_in > 0 and isinstance(n_out, int) and n_out > 0):
        raise HeaderError("in/out must be positive integers")
    if head not in HEAD_NAMES:
        raise HeaderError(f"head must be 'appearance' or 'semantic', got {head!r}")
    w = _payload(payload, _F32, n_in * n_out).reshape(n_out, n_in).astype(np.float64)
    return w, head


def write_volume(vol, path) -> None:
    if isinstance(vol, EmbeddingVolume):
        raw = encode_embedding(vol)
    elif isinstance(vol, LabelVolume):
        raw = encode_labels(vol)
    else:
        raise TypeError(f"cannot serialize {type(vol).__name__}")
    Path(path).write_bytes(raw)


def read_volume(path):
    """Read an AEV or ALV file, dispatching on its magic bytes."""
    raw = Path(path).read_bytes()
    if raw[:4] == ALV_MAGIC:
        return decode_labels(raw)
    return decode_embedding(raw)


def write_head(weights: np.ndarray, head: str, path) -> None:
    Path(path).write_bytes(encode_head(weights, head))


def read_head(path) -> tuple[np.ndarray, str]:
    return decode_head(Path(path).read_bytes())
