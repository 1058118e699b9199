"""File formats: Middlebury .flo flows, binary PGM/PPM frames and masks."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .motion import FlowField, OcclusionMask

FLO_MAGIC = np.float32(202021.25)


def write_flo(path, flow: FlowField) -> None:
    """Middlebury .flo: magic float, int32 width/height, row-major (dx, dy) float32 LE."""
    _, h, w = flow.data.shape
    with open(path, "wb") as f:
        f.write(FLO_MAGIC.astype("<f4").tobytes())
        f.write(np.array([w, h], dtype="<i4").tobytes())
        interleaved = np.stack([flow.data[0], flow.data[1]], axis=-1).astype("<f4")
        f.write(interleaved.tobytes())


def read_flo(path) -> FlowField:
    raw = Path(path).read_bytes()
    magic = np.frombuffer(raw[:4], dtype="<f4")[0]
    if magic != FLO_MAGIC:
        raise ValueError(f"{path}: bad .flo magic {magic!r}")
    w, h = (int(x) for x in np.frombuffer(raw[4:12], dtype="<i4"))
    data = np.frombuffer(raw[12:], dtype="<f4")
    if data.size != 2 * h * w:
        raise ValueError(f"{path}: truncated .flo payload")
    grid = data.reshape(h, w, 2)
    return FlowField(np.stack([grid[..., 0], grid[..., 1]]).astype(np.float64))


def _read_pnm_header(raw: bytes, magic: bytes):
    if not raw.startswith(magic):
        raise ValueError(f"expected {magic!r} header")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    return fields, pos + 1


def write_pgm(path, img: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255) from a [H, W] or [1, H, W] array in [0, 1]."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ValueError("write_pgm: expected a single channel")
        arr = arr[0]
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (w, h, maxval), off = _read_pnm_header(raw, b"P5")
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(raw[off : off + h * w], dtype=np.uint8)
    if data.size != h * w:
        raise ValueError(f"{path}: truncated PGM payload")
    return data.reshape(h, w).astype(np.float64) / 255.0


def write_mask_pgm(path, mask: OcclusionMask) -> None:
    write_pgm(path, mask.data[0])


def read_mask_pgm(path) -> OcclusionMask:
    img = read_pgm(path)
    return OcclusionMask((img >= 0.5).astype(np.float64)[None])


def write_ppm(path, frame: np.ndarray) -> None:
    """Binary PPM (P6, maxval 255) from a [3, H, W] array in [0, 1]."""
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"write_ppm: expected [3, H, W], got {arr.shape}")
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    _, h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.moveaxis(data, 0, -1).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (w, h, maxval), off = _read_pnm_header(raw, b"P6")
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(raw[off : off + 3 * h * w], dtype=np.uint8)
    if data.size != 3 * h * w:
        raise ValueError(f"{path}: truncated PPM payload")
    return np.moveaxis(data.reshape(h, w, 3), -1, 0).astype(np.float64) / 255.0


def write_frame(path, frame: np.ndarray) -> None:
    """PPM for RGB frames, PGM for single-channel ones."""
    arr = np.asarray(frame)
    if arr.ndim == 3 and arr.shape[0] == 3:
        write_ppm(path, arr)
    else:
        write_pgm(path, arr)


def read_frame(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw.startswith(b"P6"):
        return read_ppm(path)
    return read_pgm(path)[None]
