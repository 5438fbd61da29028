"""Binary target patterns: loading, downsampling, cell-set derivation and
random mask generation.

Conventions: a mask pixel value of 1 is *black* (target low loss), 0 is
*white* (target high loss).  Pixel (row, col) of the mask corresponds to
plane cell (alpha=col, beta=row).  Darkness of a grayscale value v in
[0, 1] is 1 - v, so ink on a white page becomes black mask pixels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, ParseError


@dataclass(frozen=True)
class Mask:
    """Binary pattern grid, row-major, uint8 entries in {0, 1}."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.size == 0:
            raise InputError("mask must be a nonempty 2D grid")
        if not np.isin(px, (0, 1)).all():
            raise InputError("mask pixels must be 0 or 1")
        object.__setattr__(self, "pixels", px.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def num_cells(self) -> int:
        return self.pixels.size


@dataclass(frozen=True)
class CellSets:
    """Black/white coordinate sets of a mask plus the trainable subset
    left after interior pruning.  Coordinates are (alpha, beta) pairs."""

    black: np.ndarray            # (nb, 2) int
    white: np.ndarray            # (nw, 2) int
    trainable_black: np.ndarray  # subset of black
    trainable_white: np.ndarray  # subset of white

    @property
    def p_minus(self) -> frozenset:
        return frozenset(map(tuple, self.black.tolist()))

    @property
    def p_plus(self) -> frozenset:
        return frozenset(map(tuple, self.white.tolist()))

    @property
    def trainable(self) -> frozenset:
        return frozenset(map(tuple, self.trainable_black.tolist())) \
            | frozenset(map(tuple, self.trainable_white.tolist()))

    @property
    def num_cells(self) -> int:
        return len(self.black) + len(self.white)

    def to_csv(self, path):
        trainable = self.trainable
        rows = [(a, b, "black") for a, b in map(tuple, self.black.tolist())] \
            + [(a, b, "white") for a, b in map(tuple, self.white.tolist())]
        rows.sort(key=lambda r: (r[1], r[0]))
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["alpha", "beta", "class", "trainable"])
            for a, b, cls in rows:
                writer.writerow([a, b, cls, int((a, b) in trainable)])


def area_average_resample(image: np.ndarray, out_h: int, out_w: int,
                          ) -> np.ndarray:
    """Exact box-filter resampling: output pixel (i, j) is the area-weighted
    mean of the source region [i*H/out_h, (i+1)*H/out_h) x [j*W/out_w, ...).

    Works for arbitrary (including non-integer) size ratios and leaves an
    image of the target size unchanged.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.size == 0:
        raise InputError("image must be a nonempty 2D grid")
    if out_h < 1 or out_w < 1:
        raise InputError("target size must be at least 1x1")
    return _overlap_weights(out_h, image.shape[0]) @ image \
        @ _overlap_weights(out_w, image.shape[1]).T


def _overlap_weights(out_n: int, in_n: int) -> np.ndarray:
    """(out_n, in_n) row-stochastic matrix of interval-overlap fractions."""
    step = in_n / out_n
    starts = np.arange(out_n) * step
    ends = starts + step
    lo = np.arange(in_n)
    overlap = np.minimum(ends[:, None], lo + 1.0) - np.maximum(starts[:, None], lo)
    return np.clip(overlap, 0.0, None) / step


def downsample_threshold(image: np.ndarray, target_w: int, target_h: int,
                         ) -> Mask:
    """Area-average a grayscale intensity grid (values in [0, 1], white=1)
    to target size, then threshold: mean darkness >= 0.5 becomes black."""
    darkness = 1.0 - np.asarray(image, dtype=np.float64)
    small = area_average_resample(darkness, target_h, target_w)
    return Mask((small >= 0.5).astype(np.uint8))


def derive_cell_sets(mask: Mask) -> CellSets:
    """Split a mask into black/white coordinate sets and prune interior
    pixels: a pixel whose full 8-neighborhood exists and shares its class
    is dropped from the trainable set (border pixels always train)."""
    px = mask.pixels
    h, w = px.shape
    interior_same = np.zeros((h, w), dtype=bool)
    if h > 2 and w > 2:
        center = px[1:-1, 1:-1]
        same = np.ones_like(center, dtype=bool)
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                same &= px[1 + dr:h - 1 + dr, 1 + dc:w - 1 + dc] == center
        interior_same[1:-1, 1:-1] = same
    trainable = ~interior_same

    def coords(sel: np.ndarray) -> np.ndarray:
        rows, cols = np.nonzero(sel)
        return np.column_stack([cols, rows]).astype(np.int64)  # (alpha, beta)

    black = px == 1
    return CellSets(black=coords(black), white=coords(~black),
                    trainable_black=coords(black & trainable),
                    trainable_white=coords(~black & trainable))


def gen_random_mask(width: int, height: int, fill_prob: float, seed: int,
                    ) -> Mask:
    """Pixels i.i.d. Bernoulli(fill_prob) black; deterministic per seed."""
    if not 0.0 <= fill_prob <= 1.0:
        raise InputError(f"fill_prob must be in [0, 1], got {fill_prob}")
    rng = np.random.default_rng(seed)
    return Mask((rng.random((height, width)) < fill_prob).astype(np.uint8))


def checkerboard_mask(width: int, height: int, block: int = 1,
                      border: int = 0) -> Mask:
    """Checkerboard of `block`-sized squares, optionally framed by a black
    border ring of the given thickness."""
    if block < 1 or border < 0:
        raise InputError("block must be >= 1 and border >= 0")
    rows = np.arange(height) // block
    cols = np.arange(width) // block
    px = ((rows[:, None] + cols[None, :]) % 2 == 0).astype(np.uint8)
    if border:
        edge = np.zeros((height, width), dtype=bool)
        edge[:border, :] = edge[-border:, :] = True
        edge[:, :border] = edge[:, -border:] = True
        px[edge] = 1
    return Mask(px)


# ---------------------------------------------------------------------------
# File I/O: PGM (P2/P5) and PNG grayscale in, PGM out
# ---------------------------------------------------------------------------

def read_pgm(path) -> np.ndarray:
    """Read a P2 or P5 PGM file into a float intensity grid in [0, 1]."""
    data = Path(path).read_bytes()
    if data[:2] not in (b"P2", b"P5"):
        raise ParseError(f"{path}: not a P2/P5 PGM file")
    binary = data[:2] == b"P5"
    # header: magic, width, height, maxval; '#' comments allowed
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3 and pos < len(data):
        if data[pos:pos + 1].isspace():
            pos += 1
        elif data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
        else:
            end = pos
            while end < len(data) and not data[end:end + 1].isspace():
                end += 1
            tokens.append(data[pos:end])
            pos = end
    if len(tokens) < 3:
        raise ParseError(f"{path}: truncated PGM header")
    width, height, maxval = (int(t) for t in tokens)
    if maxval < 1 or maxval > 255:
        raise ParseError(f"{path}: unsupported PGM maxval {maxval}")
    if binary:
        raw = data[pos + 1:pos + 1 + width * height]
        if len(raw) != width * height:
            raise ParseError(f"{path}: truncated PGM payload")
        values = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
    else:
        try:
            values = np.array(data[pos:].split()[:width * height], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(f"{path}: bad P2 sample token") from exc
        if values.size != width * height:
            raise ParseError(f"{path}: truncated PGM payload")
    return (values / maxval).reshape(height, width)


def write_pgm(path, gray: np.ndarray):
    """Write a float intensity grid in [0, 1] as a binary (P5) PGM file."""
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise InputError("PGM image must be 2D")
    px = np.clip(np.rint(gray * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + px.tobytes())


def load_gray_image(path) -> np.ndarray:
    """Load a PGM or PNG file as a float intensity grid in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    from PIL import Image, UnidentifiedImageError
    try:
        with Image.open(path) as img:
            gray = np.asarray(img.convert("L"), dtype=np.float64)
    except (UnidentifiedImageError, OSError) as exc:
        raise ParseError(f"{path}: cannot decode image: {exc}") from exc
    return gray / 255.0


def load_mask(path, target_w: int | None = None, target_h: int | None = None,
              ) -> Mask:
    """Load an image file as a binary mask, optionally downsampling first.
    Dark pixels (darkness >= 0.5) become black mask pixels."""
    gray = load_gray_image(path)
    if target_w is None:
        target_h, target_w = gray.shape
    elif target_h is None:
        target_h = target_w
    return downsample_threshold(gray, target_w, target_h)


def save_mask(path, mask: Mask):
    """Write a mask as a PGM image (black pixels at intensity 0)."""
    write_pgm(path, 1.0 - mask.pixels.astype(np.float64))
