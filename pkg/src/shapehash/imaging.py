"""Image ingestion, dataset manifests, and sigma-clipping preprocessing.

Images are 2-D float64 arrays indexed ``[row, column]`` (y, x).  Two storage
formats are supported:

* binary PGM (``P5``), 8- or 16-bit, intensities scaled to ``[0, 1]``;
* ``rawf32``, a minimal float32 container used for pipeline artifacts:
  a 16-byte header (magic ``RF32``, u32 little-endian width, u32 little-endian
  height, u32 reserved zero) followed by ``width * height`` float32
  little-endian samples in row-major order.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    MalformedHeaderError,
    ManifestError,
    TruncatedPayloadError,
    ZeroDimensionError,
)

RAWF32_MAGIC = b"RF32"
_RAWF32_HEADER = struct.Struct("<4sIII")

SPLITS = ("train", "valid", "test")

MANIFEST_COLUMNS = ("path", "label", "split")


def validate_image(img: np.ndarray) -> np.ndarray:
    """Return ``img`` as a float64 array, enforcing the image invariants."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"expected a 2-D image, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ZeroDimensionError(f"image has a zero dimension: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("image contains non-finite intensities")
    return arr


# ---------------------------------------------------------------------------
# PGM (P5)
# ---------------------------------------------------------------------------


def _parse_pgm(buf: bytes, origin: Path) -> np.ndarray:
    pos = 0

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(buf):
            ch = buf[pos : pos + 1]
            if ch.isspace():
                pos += 1
            elif ch == b"#":
                newline = buf.find(b"\n", pos)
                if newline < 0:
                    raise MalformedHeaderError(f"{origin}: unterminated header comment")
                pos = newline + 1
            else:
                break
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedHeaderError(f"{origin}: header ended unexpectedly")
        return buf[start:pos]

    if next_token() != b"P5":
        raise MalformedHeaderError(f"{origin}: not a binary PGM (P5) file")
    fields = []
    for name in ("width", "height", "maxval"):
        token = next_token()
        try:
            fields.append(int(token))
        except ValueError:
            raise MalformedHeaderError(
                f"{origin}: non-numeric {name} field {token!r}"
            ) from None
    width, height, maxval = fields
    if width == 0 or height == 0:
        raise ZeroDimensionError(f"{origin}: image has a zero dimension")
    if width < 0 or height < 0 or not 0 < maxval < 65536:
        raise MalformedHeaderError(f"{origin}: invalid PGM dimensions or maxval")
    if pos >= len(buf):
        raise TruncatedPayloadError(f"{origin}: missing pixel payload")
    pos += 1  # exactly one whitespace byte separates maxval from the payload
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    payload = buf[pos : pos + count * dtype.itemsize]
    if len(payload) < count * dtype.itemsize:
        raise TruncatedPayloadError(
            f"{origin}: payload holds {len(payload)} bytes, "
            f"expected {count * dtype.itemsize}"
        )
    pixels = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    return (pixels / maxval).reshape(height, width)


def write_pgm(path: Path, img: np.ndarray, maxval: int = 65535) -> None:
    """Write ``img`` (values in [0, 1]) as a binary PGM file."""
    arr = validate_image(img)
    if not 0 < maxval < 65536:
        raise ValueError("maxval must be in [1, 65535]")
    quantized = np.clip(np.rint(arr * maxval), 0, maxval)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    height, width = arr.shape
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + quantized.astype(dtype).tobytes())


# ---------------------------------------------------------------------------
# rawf32
# ---------------------------------------------------------------------------


def _parse_rawf32(buf: bytes, origin: Path) -> np.ndarray:
    if len(buf) < _RAWF32_HEADER.size:
        raise MalformedHeaderError(f"{origin}: file too short for a rawf32 header")
    magic, width, height, _reserved = _RAWF32_HEADER.unpack_from(buf)
    if magic != RAWF32_MAGIC:
        raise MalformedHeaderError(f"{origin}: bad magic {magic!r}, expected RF32")
    if width == 0 or height == 0:
        raise ZeroDimensionError(f"{origin}: image has a zero dimension")
    expected = _RAWF32_HEADER.size + 4 * width * height
    if len(buf) < expected:
        raise TruncatedPayloadError(
            f"{origin}: file holds {len(buf)} bytes, expected {expected}"
        )
    if len(buf) > expected:
        raise DataError(f"{origin}: {len(buf) - expected} trailing bytes after payload")
    pixels = np.frombuffer(buf, dtype="<f4", count=width * height, offset=_RAWF32_HEADER.size)
    arr = pixels.astype(np.float64).reshape(height, width)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{origin}: payload contains non-finite samples")
    return arr


def write_rawf32(path: Path, img: np.ndarray) -> None:
    """Write a 2-D float array in the rawf32 container format."""
    arr = validate_image(img)
    height, width = arr.shape
    header = _RAWF32_HEADER.pack(RAWF32_MAGIC, width, height, 0)
    Path(path).write_bytes(header + arr.astype("<f4").tobytes())


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def detect_format(path: Path) -> str:
    """Sniff ``pgm`` or ``rawf32`` from a file's magic bytes."""
    try:
        head = Path(path).open("rb").read(4)
    except OSError as exc:
        raise DataError(f"cannot read image file {path}: {exc}") from exc
    if head[:2] == b"P5":
        return "pgm"
    if head == RAWF32_MAGIC:
        return "rawf32"
    raise MalformedHeaderError(f"{path}: unrecognized image format")


def load_image(path: Path, fmt: str) -> np.ndarray:
    """Load an image file in the given format (``pgm`` or ``rawf32``)."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image file {path}: {exc}") from exc
    if fmt == "pgm":
        return _parse_pgm(buf, path)
    if fmt == "rawf32":
        return _parse_rawf32(buf, path)
    raise ValueError(f"unknown image format {fmt!r}")


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    """One dataset row: an image path with its class label and split tag."""

    path: Path
    label: str
    split: str


def read_manifest(path: Path) -> list[ManifestEntry]:
    """Read a ``path,label,split`` CSV; paths resolve relative to the CSV."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    reader = csv.reader(text.splitlines())
    rows = list(reader)
    if not rows or tuple(cell.strip() for cell in rows[0]) != MANIFEST_COLUMNS:
        raise ManifestError(f"{path}: manifest must start with header path,label,split")
    entries = []
    base = path.parent
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
        raw_path, label, split = (cell.strip() for cell in row)
        if not raw_path or not label:
            raise ManifestError(f"{path}:{lineno}: empty path or label")
        if split not in SPLITS:
            raise ManifestError(
                f"{path}:{lineno}: split must be one of {SPLITS}, got {split!r}"
            )
        entries.append(ManifestEntry(base / raw_path, label, split))
    if not entries:
        raise ManifestError(f"{path}: manifest has no entries")
    return entries


def write_manifest(path: Path, entries: list[ManifestEntry]) -> None:
    """Write manifest rows with paths stored relative to the CSV location."""
    path = Path(path)
    base = path.parent.resolve()
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for entry in entries:
            rel = Path(entry.path).resolve()
            try:
                stored = rel.relative_to(base)
            except ValueError:
                stored = rel
            writer.writerow([stored.as_posix(), entry.label, entry.split])


# ---------------------------------------------------------------------------
# Sigma clipping
# ---------------------------------------------------------------------------


def sigma_clip(img: np.ndarray, n_sigma: float = 3.0, max_iters: int = 100) -> np.ndarray:
    """Zero the background of an image by iterative global sigma clipping.

    Pixels at or below ``mean + n_sigma * std`` of the current background set
    are background; statistics are recomputed over that set until it is
    stable (or ``max_iters`` passes).  Background pixels become 0, all others
    keep their value.  A constant image is entirely background.
    """
    arr = validate_image(img)
    if n_sigma <= 0:
        raise ValueError("n_sigma must be positive")
    if max_iters < 1:
        raise ValueError("max_iters must be a positive integer")
    flat = arr.ravel()
    background = np.ones(flat.shape, dtype=bool)
    for _ in range(max_iters):
        values = flat[background]
        bound = values.mean() + n_sigma * values.std()
        refined = flat <= bound
        if np.array_equal(refined, background):
            break
        background = refined
    return np.where(background.reshape(arr.shape), 0.0, arr)
