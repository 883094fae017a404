"""File formats: PPM images, the binary matrix container, movie manifests."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError, ShapeError, ValidationError

_MAGIC = b"SRMAT\x00\x00\x00"  # 8 bytes
_VERSION = 1


def write_ppm(path, image: np.ndarray):
    """Write an H×W×C image with intensities in [0,1] as binary PPM (P6).

    Grayscale (C=1) is replicated across the three PPM channels.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ShapeError(f"expected H×W×{{1,3}} image, got shape {image.shape}")
    if not np.all(np.isfinite(image)) or image.min() < 0 or image.max() > 1:
        raise ValidationError("image intensities must be finite and in [0, 1]")
    if image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    byte = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = byte.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(byte.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6) into an H×W×3 float array in [0,1]."""
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ParseError(f"{path}: not a P6 PPM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ParseError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    raw = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos)
    return raw.reshape(h, w, 3).astype(np.float64) / 255.0


def save_matrices(path, arrays: dict[str, np.ndarray], sidecar: dict | None = None):
    """Save named float64 matrices to the flat binary container.

    Layout: 16-byte header (8-byte magic, u32 version, u32 matrix count),
    then per matrix a u32 rows / u32 cols pair followed by row-major
    little-endian float64 data. Names and order go in the JSON sidecar.
    """
    names = list(arrays)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(names)))
        for name in names:
            a = np.ascontiguousarray(np.atleast_2d(np.asarray(arrays[name], dtype=np.float64)))
            if a.ndim != 2:
                raise ShapeError(f"{name}: only 1-D/2-D arrays are supported")
            f.write(struct.pack("<II", a.shape[0], a.shape[1]))
            f.write(a.astype("<f8").tobytes())
    meta = dict(sidecar or {})
    meta["matrices"] = [{"name": n, "shape": list(np.atleast_2d(arrays[n]).shape),
                         "ndim": np.asarray(arrays[n]).ndim} for n in names]
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_matrices(path) -> tuple[dict[str, np.ndarray], dict]:
    """Load a container written by save_matrices. Returns (arrays, sidecar)."""
    meta = json.loads(Path(str(path) + ".json").read_text())
    with open(path, "rb") as f:
        if f.read(8) != _MAGIC:
            raise ParseError(f"{path}: bad magic")
        version, count = struct.unpack("<II", f.read(8))
        if version != _VERSION:
            raise ParseError(f"{path}: unsupported version {version}")
        if count != len(meta["matrices"]):
            raise ParseError(f"{path}: matrix count mismatch with sidecar")
        arrays = {}
        for entry in meta["matrices"]:
            head = f.read(8)
            if len(head) != 8:
                raise ParseError(f"{path}: truncated matrix header")
            rows, cols = struct.unpack("<II", head)
            body = f.read(rows * cols * 8)
            if len(body) != rows * cols * 8:
                raise ParseError(f"{path}: truncated matrix data")
            a = np.frombuffer(body, dtype="<f8").reshape(rows, cols).copy()
            if entry["ndim"] == 1:
                a = a.ravel()
            arrays[entry["name"]] = a
    return arrays, meta


def write_movie(dirpath, frames: np.ndarray, onsets, labels=None):
    """Write a movie as frame_%06d.ppm files plus onsets.csv."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        write_ppm(d / f"frame_{i:06d}.ppm", frame)
    with open(d / "onsets.csv", "w") as f:
        f.write("frame_index,onset_s,label\n")
        for i, t in enumerate(onsets):
            lab = "" if labels is None else labels[i]
            f.write(f"{i},{t:.6f},{lab}\n")


def read_movie(dirpath):
    """Read a movie directory. Returns (frames, onsets, labels)."""
    d = Path(dirpath)
    rows = (d / "onsets.csv").read_text().strip().splitlines()
    if not rows or rows[0] != "frame_index,onset_s,label":
        raise ParseError(f"{d / 'onsets.csv'}: bad header")
    onsets, labels, frames = [], [], []
    for ln, row in enumerate(rows[1:], start=2):
        parts = row.split(",")
        if len(parts) != 3:
            raise ParseError(f"{d / 'onsets.csv'}: line {ln}: expected 3 fields")
        idx, onset, label = parts
        frames.append(read_ppm(d / f"frame_{int(idx):06d}.ppm"))
        onsets.append(float(onset))
        labels.append(int(label) if label != "" else None)
    if any(l is None for l in labels):
        labels = None
    onsets = np.asarray(onsets)
    if np.any(np.diff(onsets) <= 0):
        raise ValidationError("frame onsets must be strictly increasing")
    return np.stack(frames), onsets, labels
