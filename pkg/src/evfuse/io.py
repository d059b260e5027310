"""Files on disk: PGM frames, box/result text files, atomic writes."""
from __future__ import annotations

import math
import os
import re
import tempfile
from pathlib import Path

import numpy as np

from .boxes import BBox


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------- PGM

def _pgm_tokens(data: bytes):
    """Yield header tokens, skipping comments; returns offset of the raster."""
    pos, tokens = 0, []
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def parse_pgm(data: bytes) -> np.ndarray:
    tokens, offset = _pgm_tokens(data)
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ValueError("malformed PGM header") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise ValueError(f"bad PGM dimensions/maxval: {width}x{height}, {maxval}")
    if magic == b"P5":
        dtype = np.dtype(">u2" if maxval > 255 else np.uint8)
        n = width * height * dtype.itemsize
        raster = data[offset:offset + n]
        if len(raster) != n:
            raise ValueError("truncated PGM raster")
        return np.frombuffer(raster, dtype=dtype).reshape(height, width).astype(
            np.uint16 if maxval > 255 else np.uint8)
    if magic == b"P2":
        vals = data[offset - 1:].split()
        if len(vals) < width * height:
            raise ValueError("truncated PGM raster")
        return np.array([int(v) for v in vals[:width * height]]).reshape(height, width)
    raise ValueError(f"not a PGM file (magic {magic!r})")


def serialize_pgm(image: np.ndarray, maxval: int | None = None) -> bytes:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    if img.size and img.min() < 0:
        raise ValueError("PGM pixel values must be non-negative")
    maxval = int(maxval if maxval is not None else max(255, int(img.max(initial=0))))
    if maxval > 65535:
        raise ValueError("PGM values above 65535 are not representable")
    h, w = img.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else np.uint8
    return header + np.ascontiguousarray(img, dtype=dtype).tobytes()


def read_pgm(path) -> np.ndarray:
    return parse_pgm(Path(path).read_bytes())


def write_pgm(path, image: np.ndarray, maxval: int | None = None) -> None:
    atomic_write_bytes(path, serialize_pgm(image, maxval))


def _natural_key(p: Path):
    return [int(s) if s.isdigit() else s for s in re.split(r"(\d+)", p.name)]


def read_frames_dir(frames_dir) -> tuple[list[np.ndarray], list[int]]:
    """Load ``*.pgm`` frames (natural sort order) and ``timestamps.txt``."""
    frames_dir = Path(frames_dir)
    if not frames_dir.is_dir():
        raise FileNotFoundError(f"frames directory not found: {frames_dir}")
    paths = sorted(frames_dir.glob("*.pgm"), key=_natural_key)
    ts_path = frames_dir / "timestamps.txt"
    if not ts_path.exists():
        raise FileNotFoundError(f"missing {ts_path}")
    timestamps = []
    for lineno, line in enumerate(ts_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            timestamps.append(int(line.strip()))
        except ValueError:
            raise ValueError(f"{ts_path}:{lineno}: not an integer timestamp: {line!r}") from None
    if len(timestamps) != len(paths):
        raise ValueError(f"{len(paths)} PGM frames but {len(timestamps)} timestamps in {frames_dir}")
    return [read_pgm(p) for p in paths], timestamps


def write_frames_dir(frames_dir, frames, timestamps) -> None:
    frames_dir = Path(frames_dir)
    frames_dir.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        write_pgm(frames_dir / f"{i:05d}.pgm", np.asarray(f, dtype=np.uint8))
    atomic_write_text(frames_dir / "timestamps.txt", "".join(f"{int(t)}\n" for t in timestamps))


# ---------------------------------------------------------------- boxes / results

def read_box_file(path) -> tuple[list, list | None]:
    """Read ``x,y,w,h[,score]`` lines.

    A line of NaNs, or with non-positive width/height, marks an absent
    target and yields ``None``. Returns ``(boxes, scores)``; ``scores`` is
    None when the file has four columns.
    """
    boxes, scores = [], []
    ncols = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = re.split(r"[,\s]+", line)
        try:
            vals = [float(v) for v in parts]
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric box line {line!r}") from None
        if len(vals) not in (4, 5) or (ncols is not None and len(vals) != ncols):
            raise ValueError(f"{path}:{lineno}: expected 4 or 5 columns consistently, got {len(vals)}")
        ncols = len(vals)
        x, y, w, h = vals[:4]
        if any(math.isnan(v) for v in vals[:4]) or w <= 0 or h <= 0:
            boxes.append(None)
        else:
            boxes.append(BBox(x, y, w, h))
        if ncols == 5:
            scores.append(vals[4])
    return boxes, (scores if ncols == 5 else None)


def format_results(boxes, scores) -> str:
    lines = []
    for b, s in zip(boxes, scores):
        lines.append(f"{b.x:.4f},{b.y:.4f},{b.w:.4f},{b.h:.4f},{s:.4f}")
    return "\n".join(lines) + "\n"


def write_results(path, boxes, scores) -> None:
    atomic_write_text(path, format_results(boxes, scores))


def format_boxes(boxes) -> str:
    return "".join("nan,nan,nan,nan\n" if b is None else f"{b.x:g},{b.y:g},{b.w:g},{b.h:g}\n"
                   for b in boxes)
