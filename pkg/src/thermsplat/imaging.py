"""Core image containers, histogram/CDF machinery, LUT transforms and file IO.

Intensities are kept as double-precision values in [0, 1]; quantization to the
source bit depth happens only at file IO and when indexing a LUT.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


class ImagingError(Exception):
    """Raised for unreadable, malformed or mismatched image data."""


@dataclass(frozen=True)
class Frame:
    """Single-channel image with normalized intensities in [0, 1]."""

    pixels: np.ndarray          # (height, width) float64
    bit_depth: int = 8          # 8 or 16
    index: int = 0              # time position t

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ImagingError(f"frame pixels must be 2-D, got shape {px.shape}")
        if self.bit_depth not in (8, 16):
            raise ImagingError(f"unsupported bit depth {self.bit_depth}")
        if px.size == 0:
            raise ImagingError("empty frame")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ImagingError("pixel values outside [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def max_level(self) -> int:
        return (1 << self.bit_depth) - 1

    def levels(self) -> np.ndarray:
        """Quantized integer levels, shape (height, width)."""
        return quantize_levels(self.pixels, self.bit_depth)

    def mean(self) -> float:
        return float(self.pixels.mean())


@dataclass(frozen=True)
class Sequence:
    """Ordered frames with uniform geometry and bit depth, indexed 0..N-1."""

    frames: list[Frame]

    def __post_init__(self):
        if not self.frames:
            raise ImagingError("sequence must contain at least one frame")
        f0 = self.frames[0]
        for t, f in enumerate(self.frames):
            if (f.width, f.height, f.bit_depth) != (f0.width, f0.height, f0.bit_depth):
                raise ImagingError(f"frame {t} geometry/bit depth differs from frame 0")
        object.__setattr__(
            self,
            "frames",
            [Frame(f.pixels, f.bit_depth, t) for t, f in enumerate(self.frames)],
        )

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, t: int) -> Frame:
        return self.frames[t]

    @property
    def bit_depth(self) -> int:
        return self.frames[0].bit_depth


@dataclass(frozen=True)
class Cdf:
    """Cumulative distribution over quantized levels; values[last] == 1."""

    values: np.ndarray          # (bins,) cumulative probabilities

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size < 2:
            raise ImagingError("cdf values must be a 1-D array with >= 2 bins")
        if np.any(np.diff(v) < 0) or v[0] < 0 or abs(v[-1] - 1.0) > 1e-9:
            raise ImagingError("cdf must be non-decreasing with terminal value 1")
        object.__setattr__(self, "values", v)

    @property
    def bins(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class MonotoneLut:
    """Non-decreasing intensity transfer function over quantized levels."""

    map: np.ndarray             # (bins,) output intensities in [0, 1]

    def __post_init__(self):
        m = np.asarray(self.map, dtype=np.float64)
        if m.ndim != 1 or m.size < 2:
            raise ImagingError("lut map must be a 1-D array with >= 2 bins")
        if np.any(np.diff(m) < 0):
            raise ImagingError("lut map must be non-decreasing")
        if m[0] < 0.0 or m[-1] > 1.0:
            raise ImagingError("lut map values outside [0, 1]")
        object.__setattr__(self, "map", m)

    @property
    def bins(self) -> int:
        return self.map.size

    @classmethod
    def identity(cls, bins: int) -> "MonotoneLut":
        return cls(np.arange(bins, dtype=np.float64) / (bins - 1))


def quantize_levels(values: np.ndarray, bit_depth: int) -> np.ndarray:
    """Map normalized intensities to integer levels 0..2^bit_depth-1."""
    top = (1 << bit_depth) - 1
    return np.clip(np.rint(np.asarray(values) * top), 0, top).astype(np.int64)


def quantize(values: np.ndarray, bit_depth: int) -> np.ndarray:
    """Snap normalized intensities onto the bit-depth grid."""
    top = (1 << bit_depth) - 1
    return quantize_levels(values, bit_depth) / top


def compute_cdf(frame: Frame) -> Cdf:
    """CDF over 2^bit_depth levels: values[i] = P(quantized level <= i)."""
    bins = frame.max_level + 1
    counts = np.bincount(frame.levels().ravel(), minlength=bins)
    cum = np.cumsum(counts, dtype=np.float64)
    return Cdf(cum / cum[-1])


def apply_lut(frame: Frame, lut: MonotoneLut) -> Frame:
    """Replace each pixel's quantized level through the LUT, re-quantized."""
    bins = frame.max_level + 1
    if lut.bins != bins:
        raise ImagingError(f"lut has {lut.bins} bins, frame needs {bins}")
    out = quantize(lut.map[frame.levels()], frame.bit_depth)
    return Frame(out, frame.bit_depth, frame.index)


def invert_lut(lut: MonotoneLut) -> MonotoneLut:
    """Pseudo-inverse: inverse.map[y] = smallest level i with map[i] >= y/(bins-1).

    The comparison is made on the quantized output grid (the mapping that
    apply_lut actually realizes), so a level that apply_lut produced always
    recovers the left edge of its preimage. Flat regions map to their left
    edge (smallest-preimage tie-break); targets above map[-1] fall back to
    the top level.
    """
    bins = lut.bins
    bit_depth = int(round(np.log2(bins)))
    qmap = quantize_levels(lut.map, bit_depth)
    idx = np.searchsorted(qmap, np.arange(bins), side="left")
    idx = np.minimum(idx, bins - 1)
    return MonotoneLut(idx.astype(np.float64) / (bins - 1))


def compose_luts(first: MonotoneLut, second: MonotoneLut) -> MonotoneLut:
    """LUT equivalent to applying `first` then `second` (bit-exact)."""
    if first.bins != second.bins:
        raise ImagingError(f"lut bin mismatch: {first.bins} vs {second.bins}")
    bins = first.bins
    bit_depth = int(round(np.log2(bins)))
    idx = quantize_levels(first.map, bit_depth)
    return MonotoneLut(second.map[idx])


# ---------------------------------------------------------------------------
# File IO
# ---------------------------------------------------------------------------

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def _pgm_tokens(data: bytes, n: int, pos: int):
    """Read n whitespace/comment-separated header tokens starting at pos."""
    toks = []
    for _ in range(n):
        m = _PGM_TOKEN.match(data, pos)
        if not m:
            raise ImagingError("truncated PGM header")
        toks.append(m.group(1))
        pos = m.end()
    return toks, pos


def _load_pgm(path: Path, index: int) -> Frame:
    data = path.read_bytes()
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise ImagingError(f"{path}: not a PGM file")
    toks, pos = _pgm_tokens(data, 3, 2)
    width, height, maxval = (int(t) for t in toks)
    if maxval == 255:
        bit_depth = 8
    elif maxval == 65535:
        bit_depth = 16
    else:
        raise ImagingError(f"{path}: unsupported PGM maxval {maxval}")
    n = width * height
    if magic == b"P2":
        raw = np.array(data[pos:].split()[:n], dtype=np.float64)
    else:
        pos += 1  # single whitespace after maxval
        dtype = np.dtype(">u2") if bit_depth == 16 else np.uint8
        raw = np.frombuffer(data, dtype=dtype, count=n, offset=pos).astype(np.float64)
    if raw.size != n:
        raise ImagingError(f"{path}: expected {n} pixels, found {raw.size}")
    return Frame(raw.reshape(height, width) / maxval, bit_depth, index)


def _load_png(path: Path, index: int) -> Frame:
    with Image.open(path) as img:
        if img.mode in ("L", "P"):
            if img.mode == "P":
                raise ImagingError(f"{path}: multi-channel input (palette image)")
            arr = np.asarray(img, dtype=np.float64)
            bit_depth = 8
        elif img.mode in ("I", "I;16", "I;16B"):
            arr = np.asarray(img.convert("I"), dtype=np.float64)
            bit_depth = 16
        else:
            raise ImagingError(f"{path}: multi-channel input (mode {img.mode})")
    top = (1 << bit_depth) - 1
    if arr.max() > top:
        raise ImagingError(f"{path}: pixel values exceed {bit_depth}-bit range")
    return Frame(arr / top, bit_depth, index)


def load_frame(path, index: int = 0) -> Frame:
    """Load an 8/16-bit single-channel PGM (P2/P5) or grayscale PNG."""
    path = Path(path)
    if not path.is_file():
        raise ImagingError(f"{path}: file not found")
    suffix = path.suffix.lower()
    try:
        if suffix == ".pgm":
            return _load_pgm(path, index)
        if suffix == ".png":
            return _load_png(path, index)
    except ImagingError:
        raise
    except Exception as exc:  # PIL / parsing failures carry the path
        raise ImagingError(f"{path}: unreadable ({exc})") from exc
    raise ImagingError(f"{path}: unsupported file type '{suffix}'")


def save_frame(frame: Frame, path) -> None:
    """Write a frame as PGM (P5) or PNG at its native bit depth."""
    path = Path(path)
    top = frame.max_level
    levels = frame.levels()
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        header = f"P5\n{frame.width} {frame.height}\n{top}\n".encode()
        dtype = np.dtype(">u2") if frame.bit_depth == 16 else np.uint8
        path.write_bytes(header + levels.astype(dtype).tobytes())
    elif suffix == ".png":
        if frame.bit_depth == 8:
            Image.fromarray(levels.astype(np.uint8), mode="L").save(path)
        else:
            Image.fromarray(levels.astype(np.uint16)).save(path)
    else:
        raise ImagingError(f"{path}: unsupported output type '{suffix}'")


def load_sequence(directory, pattern: str = "*") -> Sequence:
    """Load all PGM/PNG frames in a directory, sorted by file name."""
    directory = Path(directory)
    paths = sorted(
        p for p in directory.glob(pattern) if p.suffix.lower() in (".pgm", ".png")
    )
    if not paths:
        raise ImagingError(f"{directory}: no PGM/PNG frames found")
    return Sequence([load_frame(p, t) for t, p in enumerate(paths)])


def save_sequence(seq: Sequence, directory, stem: str = "frame", suffix: str = ".png"):
    """Write frames as <stem>_<t>.<suffix>, zero-padded; returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(seq) - 1)))
    paths = []
    for f in seq:
        p = directory / f"{stem}_{f.index:0{width}d}{suffix}"
        save_frame(f, p)
        paths.append(p)
    return paths


def save_lut(lut: MonotoneLut, path) -> None:
    """Persist a LUT as CSV: `bins=<n>` header then one `index,value` per bin."""
    lines = [f"bins={lut.bins}"]
    lines += [f"{i},{v:.17g}" for i, v in enumerate(lut.map)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_lut(path) -> MonotoneLut:
    path = Path(path)
    lines = path.read_text().strip().splitlines()
    header = lines[0].strip()
    if not header.startswith("bins="):
        raise ImagingError(f"{path}: missing 'bins=' header")
    bins = int(header[len("bins="):])
    if len(lines) - 1 != bins:
        raise ImagingError(f"{path}: expected {bins} rows, found {len(lines) - 1}")
    values = np.empty(bins)
    for line in lines[1:]:
        idx, val = line.split(",")
        values[int(idx)] = float(val)
    return MonotoneLut(values)
