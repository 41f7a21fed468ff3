"""Model checkpoint serialization.

Binary layout (little-endian): magic "D2NN", format version u32, grid
(side u32, pitch f64), front-end spec as length-prefixed JSON, temperature
f64, class count u32, layer spacings (2 x f64), detector layout (width f64,
center count u32, centers f64 pairs), phase layer count u32, phase arrays as
row-major f32, a latent-presence flag with the optional trainable-filter
latent (side u32 + f32 data), and a trailing CRC32 of everything before it.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .frontend import FrontEndSpec
from .network import D2NNModel
from .optics import DetectorLayout, GridSpec

MAGIC = b"D2NN"
VERSION = 1


class CheckpointFormatError(ValueError):
    """Not a checkpoint file (bad magic or malformed structure)."""


class CheckpointVersionError(ValueError):
    """Checkpoint written by an unsupported format version."""


class CheckpointChecksumError(ValueError):
    """Trailing checksum does not match the payload (truncation/corruption)."""


def _pack_f32(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_model(model: D2NNModel, path: str | Path) -> None:
    """Serialize a model; parameters are stored as 32-bit floats."""
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    buf += struct.pack("<Id", model.grid.side, model.grid.pitch)
    spec_json = json.dumps(model.front_end.to_dict(), sort_keys=True).encode()
    buf += struct.pack("<I", len(spec_json)) + spec_json
    buf += struct.pack("<dI", model.temperature, model.class_count)
    buf += struct.pack("<dd", model.layer_spacing, model.layer_to_detector)
    buf += struct.pack("<dI", model.layout.detector_width, len(model.layout.centers))
    buf += np.ascontiguousarray(model.layout.centers, dtype="<f8").tobytes()
    buf += struct.pack("<I", len(model.phases))
    for p in model.phases:
        buf += _pack_f32(p)
    if model.filter_latent is not None:
        buf += struct.pack("<BI", 1, model.filter_latent.shape[0])
        buf += _pack_f32(model.filter_latent)
    else:
        buf += struct.pack("<BI", 0, 0)
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


def load_model(path: str | Path) -> D2NNModel:
    """Load and verify a checkpoint; raises distinct errors for bad magic,
    unsupported version, and checksum mismatch."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a model checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {version}")
    payload, (stored,) = raw[:-4], struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != stored:
        raise CheckpointChecksumError(f"{path}: checksum mismatch")
    off = 8
    try:
        side, pitch = struct.unpack_from("<Id", raw, off)
        off += 12
        (spec_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        spec = FrontEndSpec.from_dict(json.loads(raw[off : off + spec_len]))
        off += spec_len
        temperature, class_count = struct.unpack_from("<dI", raw, off)
        off += 12
        layer_spacing, layer_to_detector = struct.unpack_from("<dd", raw, off)
        off += 16
        det_width, n_centers = struct.unpack_from("<dI", raw, off)
        off += 12
        centers = np.frombuffer(raw, dtype="<f8", count=2 * n_centers, offset=off)
        off += 16 * n_centers
        (n_layers,) = struct.unpack_from("<I", raw, off)
        off += 4
        grid = GridSpec(side, pitch)
        phases = []
        for _ in range(n_layers):
            p = np.frombuffer(raw, dtype="<f4", count=side * side, offset=off)
            phases.append(p.astype(np.float64).reshape(side, side))
            off += 4 * side * side
        has_latent, latent_side = struct.unpack_from("<BI", raw, off)
        off += 5
        latent = None
        if has_latent:
            latent = np.frombuffer(raw, dtype="<f4", count=latent_side**2, offset=off)
            latent = latent.astype(np.float64).reshape(latent_side, latent_side)
            off += 4 * latent_side**2
    except (struct.error, ValueError, KeyError) as exc:
        raise CheckpointFormatError(f"{path}: malformed checkpoint ({exc})") from exc
    layout = DetectorLayout(grid, det_width, centers.reshape(-1, 2).copy(), n_centers // 2)
    return D2NNModel(
        grid=grid,
        front_end=spec,
        phases=phases,
        layout=layout,
        layer_spacing=layer_spacing,
        layer_to_detector=layer_to_detector,
        temperature=temperature,
        class_count=class_count,
        filter_latent=latent,
    )


def quantize_like_checkpoint(arr: np.ndarray) -> np.ndarray:
    """Round-trip an array through the checkpoint's f32 storage precision."""
    return arr.astype(np.float32).astype(np.float64)
