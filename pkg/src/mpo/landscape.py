"""Grid evaluation of loss/accuracy over the plane, heatmap rendering and
black/white accuracy metrics.

Grid orientation matches masks: grid row r, column c sits at plane cell
(alpha = column coordinate, beta = row coordinate), and row 0 is the top
row of rendered images.  Loss heatmaps use a logarithmic scale,
log10(loss + 1e-8), min-max normalized over the grid and mapped through a
fixed 256-entry color table shipped with the package so images are
bit-reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .datasets import Dataset
from .errors import DiffUndefinedError, InputError, ParseError
from .nn import ModelSpec, evaluate_many
from .patterns import Mask
from .plane import PlaneParams, materialize_many

LOG_OFFSET = 1e-8


@dataclass(frozen=True)
class GridExtent:
    """Rectangular evaluation window: inclusive coordinate ranges sampled
    at `cols` x `rows` points."""

    alpha_min: float
    alpha_max: float
    beta_min: float
    beta_max: float
    cols: int
    rows: int

    def __post_init__(self):
        if self.cols < 1 or self.rows < 1:
            raise InputError("extent must contain at least one cell")
        if self.alpha_max < self.alpha_min or self.beta_max < self.beta_min:
            raise InputError("extent ranges must be nondecreasing")

    @classmethod
    def integer_grid(cls, mask: Mask) -> "GridExtent":
        """One grid point per mask pixel, at integer coordinates."""
        return cls(0, mask.width - 1, 0, mask.height - 1,
                   mask.width, mask.height)

    @classmethod
    def render_default(cls, mask: Mask, margin: float = 2.0,
                       oversample: int = 2) -> "GridExtent":
        """Mask bounding box plus a margin, sampled at `oversample` points
        per unit cell (non-integer coordinates probe interpolation)."""
        a0, a1 = -margin, mask.width - 1 + margin
        b0, b1 = -margin, mask.height - 1 + margin
        return cls(a0, a1, b0, b1,
                   int(round((a1 - a0) * oversample)) + 1,
                   int(round((b1 - b0) * oversample)) + 1)

    def coordinate_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        alphas = np.linspace(self.alpha_min, self.alpha_max, self.cols) \
            if self.cols > 1 else np.array([self.alpha_min])
        betas = np.linspace(self.beta_min, self.beta_max, self.rows) \
            if self.rows > 1 else np.array([self.beta_min])
        return alphas, betas


@dataclass
class GridResult:
    """Per-cell loss and accuracy over a dense row-major grid."""

    alpha: np.ndarray      # (rows, cols)
    beta: np.ndarray       # (rows, cols)
    loss: np.ndarray       # (rows, cols)
    accuracy: np.ndarray   # (rows, cols)
    dataset_split: str

    @property
    def rows(self) -> int:
        return self.loss.shape[0]

    @property
    def cols(self) -> int:
        return self.loss.shape[1]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row", "col", "alpha", "beta", "loss", "accuracy"])
            for r in range(self.rows):
                for c in range(self.cols):
                    writer.writerow([r, c, repr(float(self.alpha[r, c])),
                                     repr(float(self.beta[r, c])),
                                     repr(float(self.loss[r, c])),
                                     repr(float(self.accuracy[r, c]))])

    @classmethod
    def from_csv(cls, path, dataset_split: str = "unknown") -> "GridResult":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["row", "col", "alpha", "beta", "loss", "accuracy"]:
                raise ParseError(f"{path}: not a grid CSV")
            rows = [row for row in reader if row]
        if not rows:
            raise ParseError(f"{path}: empty grid CSV")
        nr = max(int(r[0]) for r in rows) + 1
        nc = max(int(r[1]) for r in rows) + 1
        if len(rows) != nr * nc:
            raise ParseError(f"{path}: grid CSV is not dense")
        arrays = [np.empty((nr, nc)) for _ in range(4)]
        for r in rows:
            i, j = int(r[0]), int(r[1])
            for k in range(4):
                arrays[k][i, j] = float(r[2 + k])
        return cls(*arrays, dataset_split=dataset_split)


def eval_grid(spec: ModelSpec, plane: PlaneParams, dataset: Dataset,
              extent: GridExtent, eval_batch_size: int = 256,
              subsample: int = 2048, subsample_seed: int = 0,
              cell_chunk: int = 16) -> GridResult:
    """Materialize every grid point and measure mean cross-entropy and
    accuracy over the dataset (or a fixed seeded subsample of it).

    Batch-norm models are evaluated with per-batch statistics, matching
    how cells are seen during training.
    """
    if len(dataset) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    data = dataset
    if subsample and len(dataset) > subsample:
        rng = np.random.default_rng(subsample_seed)
        data = dataset.subset(rng.choice(len(dataset), subsample, replace=False))

    alphas, betas = extent.coordinate_arrays()
    alpha_g, beta_g = np.meshgrid(alphas, betas)
    coords = np.column_stack([alpha_g.ravel(), beta_g.ravel()])
    m = coords.shape[0]

    w_right = plane.w_right()
    loss_sum = np.zeros(m)
    acc_sum = np.zeros(m)
    total = 0
    for start in range(0, len(data), eval_batch_size):
        batch = data.batch(np.arange(start, min(start + eval_batch_size,
                                                len(data))))
        b = len(batch)
        for cstart in range(0, m, cell_chunk):
            sl = slice(cstart, min(cstart + cell_chunk, m))
            W = materialize_many(plane, coords[sl], w_right=w_right)
            losses, accs = evaluate_many(spec, W, batch, mode="train")
            loss_sum[sl] += losses * b
            acc_sum[sl] += accs * b
        total += b
    shape = alpha_g.shape
    return GridResult(alpha=alpha_g, beta=beta_g,
                      loss=(loss_sum / total).reshape(shape),
                      accuracy=(acc_sum / total).reshape(shape),
                      dataset_split=data.split)


@lru_cache(maxsize=1)
def _colormap() -> np.ndarray:
    text = resources.files("mpo.data").joinpath("colormap_256.csv").read_text()
    rows = [line.split(",") for line in text.strip().splitlines()[1:]]
    table = np.array(rows, dtype=np.uint8)
    if table.shape != (256, 3):
        raise ParseError("packaged colormap table is malformed")
    return table


def _normalized_channel(grid: GridResult, channel: str) -> np.ndarray:
    if channel == "loss":
        v = np.log10(grid.loss + LOG_OFFSET)
        lo, hi = v.min(), v.max()
        if hi - lo < 1e-300:
            return np.full_like(v, 0.5)
        return (v - lo) / (hi - lo)
    if channel == "accuracy":
        return np.clip(grid.accuracy, 0.0, 1.0)
    raise InputError(f"channel must be 'loss' or 'accuracy', got {channel!r}")


def render_heatmap(grid: GridResult, channel: str, out_path,
                   upscale: int = 1) -> Path:
    """Write the grid as an image, one pixel per cell (times `upscale`).
    ``.png`` paths get the packaged colormap; ``.pgm`` a grayscale ramp."""
    if upscale < 1:
        raise InputError("upscale must be >= 1")
    idx = np.rint(_normalized_channel(grid, channel) * 255).astype(np.uint8)
    idx = np.kron(idx, np.ones((upscale, upscale), dtype=np.uint8))
    out_path = Path(out_path)
    if out_path.suffix.lower() == ".pgm":
        from .patterns import write_pgm
        write_pgm(out_path, idx.astype(np.float64) / 255.0)
        return out_path
    from PIL import Image
    rgb = _colormap()[idx]
    Image.fromarray(rgb, mode="RGB").save(out_path, format="PNG")
    return out_path


@dataclass(frozen=True)
class BlackWhiteMetrics:
    mean_acc_black: float
    mean_acc_white: float

    @property
    def diff(self) -> float:
        return self.mean_acc_black - self.mean_acc_white


def black_white_metrics(grid: GridResult, mask: Mask) -> BlackWhiteMetrics:
    """Mean accuracy over black and over white mask cells of an integer
    grid.  A single-class mask raises DiffUndefinedError carrying the
    means that are defined."""
    if (grid.rows, grid.cols) != (mask.height, mask.width):
        raise InputError(f"grid {grid.rows}x{grid.cols} does not cover mask "
                         f"{mask.height}x{mask.width}")
    black = mask.pixels.astype(bool)
    mean_black = float(grid.accuracy[black].mean()) if black.any() else float("nan")
    mean_white = float(grid.accuracy[~black].mean()) if (~black).any() else float("nan")
    if not black.any() or not (~black).any():
        raise DiffUndefinedError("mask has a single class; accuracy "
                                 "difference is undefined",
                                 mean_black, mean_white)
    return BlackWhiteMetrics(mean_black, mean_white)


def grid_correlation(a: GridResult, b: GridResult, channel: str = "accuracy",
                     ) -> float:
    """Pearson correlation between two grids of the same shape."""
    xa = getattr(a, channel).ravel()
    xb = getattr(b, channel).ravel()
    if xa.shape != xb.shape:
        raise InputError("grids must have identical shapes")
    if np.std(xa) == 0.0 or np.std(xb) == 0.0:
        raise InputError("correlation undefined for a constant grid")
    return float(np.corrcoef(xa, xb)[0, 1])
