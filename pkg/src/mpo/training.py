"""Pattern-fitting objective and training loop over plane parameters.

The objective drives cross-entropy down at black cells and up at white
cells, with the white-cell term capped so the optimizer cannot win by
inflating loss everywhere:

    objective = mean_black(CE) - mean_white(min(CE, clamp))

A capped white cell contributes exactly the clamp value and zero gradient.
Each iteration samples one data minibatch and a balanced subset of
trainable cells, evaluates all sampled cells on that same minibatch, and
takes one Adam step on the 3n+1 plane parameters.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from .datasets import Batches, Dataset
from .errors import ConfigError, DegenerateDirectionError, InputError
from .nn import Batch, ModelSpec, init_weights, loss_and_grad_many
from .patterns import CellSets, Mask, derive_cell_sets
from .plane import CellCoord, PlaneGrads, PlaneParams, materialize_many, \
    pullback_arrays


@dataclass(frozen=True)
class TrainConfig:
    iterations: int
    seed: int = 0
    lr: float = 3e-4
    batch_size: int = 512
    cells_per_update: int = 50
    white_ce_clamp: float = 2.5
    s_init: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    cell_chunk: int = 16
    log_every: int = 1

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.cells_per_update < 2:
            raise ConfigError("cells_per_update must be >= 2")
        if self.white_ce_clamp <= 0:
            raise ConfigError("white_ce_clamp must be positive")
        if self.cell_chunk < 1 or self.log_every < 1:
            raise ConfigError("cell_chunk and log_every must be >= 1")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        if "iterations" not in obj:
            raise ConfigError("train config requires 'iterations'")
        return cls(**obj)


@dataclass
class AdamState:
    """First/second moment estimates over the flat 3n+1 parameter vector."""

    step: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(0, np.zeros(3 * n + 1), np.zeros(3 * n + 1))


@dataclass(frozen=True)
class ObjectiveResult:
    objective: float
    grads: PlaneGrads
    black_ce: float          # mean CE over sampled black cells (NaN if none)
    white_ce_clamped: float  # mean clamped CE over sampled white cells
    num_clamped: int


def sample_cells(cells: CellSets, k: int, rng: np.random.Generator,
                 ) -> list[tuple[CellCoord, int]]:
    """Balanced sample of trainable cells: ceil(k/2) black and floor(k/2)
    white, uniform without replacement; a class smaller than its quota is
    taken whole.  Returns (coordinate, is_black) pairs, black first."""
    if k < 2:
        raise InputError("k must be >= 2")
    nb, nw = len(cells.trainable_black), len(cells.trainable_white)
    if nb + nw == 0:
        raise InputError("no trainable cells")
    want_black = min(-(-k // 2), nb)
    want_white = min(k // 2, nw)
    out: list[tuple[CellCoord, int]] = []
    for pool, want, is_black in ((cells.trainable_black, want_black, 1),
                                 (cells.trainable_white, want_white, 0)):
        if want:
            idx = rng.choice(len(pool), size=want, replace=False)
            out.extend((CellCoord(int(a), int(b)), is_black)
                       for a, b in pool[np.sort(idx)])
    return out


def mpo_objective(spec: ModelSpec, plane: PlaneParams,
                  sampled_cells: list[tuple[CellCoord, int]], batch: Batch,
                  clamp: float = 2.5, cell_chunk: int = 16) -> ObjectiveResult:
    """Evaluate the pattern objective and its exact plane gradient on one
    minibatch for the given sampled (cell, is_black) pairs."""
    if not sampled_cells:
        raise InputError("sampled_cells must be nonempty")
    coords = np.array([c for c, _ in sampled_cells], dtype=np.float64)
    is_black = np.array([b for _, b in sampled_cells], dtype=bool)
    m = len(sampled_cells)

    w_right = plane.w_right()
    losses = np.empty(m)
    grads = np.empty((m, plane.n))
    for start in range(0, m, cell_chunk):
        sl = slice(start, min(start + cell_chunk, m))
        W = materialize_many(plane, coords[sl], w_right=w_right)
        losses[sl], grads[sl] = loss_and_grad_many(spec, W, batch, mode="train")

    nb = int(is_black.sum())
    nw = m - nb
    clamped = (~is_black) & (losses >= clamp)
    weights = np.zeros(m)
    if nb:
        weights[is_black] = 1.0 / nb
    if nw:
        weights[~is_black & ~clamped] = -1.0 / nw

    black_ce = float(losses[is_black].mean()) if nb else float("nan")
    white_term = float(np.minimum(losses[~is_black], clamp).mean()) \
        if nw else float("nan")
    objective = (black_ce if nb else 0.0) - (white_term if nw else 0.0)

    plane_grads = pullback_arrays(plane, coords, weights[:, None] * grads)
    return ObjectiveResult(objective, plane_grads, black_ce, white_term,
                           int(clamped.sum()))


def adam_step(state: AdamState, plane: PlaneParams, grads: PlaneGrads,
              config: TrainConfig) -> tuple[AdamState, PlaneParams]:
    """One bias-corrected Adam update of the flat plane parameters."""
    theta = plane.to_flat()
    g = grads.to_flat()
    if g.shape != theta.shape:
        raise InputError("gradient/parameter shape mismatch")
    t = state.step + 1
    m = config.adam_beta1 * state.m + (1.0 - config.adam_beta1) * g
    v = config.adam_beta2 * state.v + (1.0 - config.adam_beta2) * g * g
    m_hat = m / (1.0 - config.adam_beta1 ** t)
    v_hat = v / (1.0 - config.adam_beta2 ** t)
    theta = theta - config.lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return AdamState(t, m, v), PlaneParams.from_flat(theta, plane.n)


def init_plane(spec: ModelSpec, seed: int, s_init: float) -> PlaneParams:
    """Independent layer-wise initializations for origin, up and phi_right
    (each drawn exactly like a standalone model) with the given scale."""
    child = np.random.SeedSequence(seed).generate_state(3)
    return PlaneParams(w_origin=init_weights(spec, int(child[0])),
                       w_up=init_weights(spec, int(child[1])),
                       phi_right=init_weights(spec, int(child[2])),
                       scale=s_init)


@dataclass
class ReportRow:
    iteration: int
    objective: float
    black_ce: float
    white_ce_clamped: float
    scale: float
    ortho_residual: float


@dataclass
class TrainReport:
    rows: list[ReportRow] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "objective", "black_ce",
                             "white_ce_clamped", "scale", "ortho_residual"])
            for r in self.rows:
                writer.writerow([r.iteration, repr(r.objective),
                                 repr(r.black_ce), repr(r.white_ce_clamped),
                                 repr(r.scale), repr(r.ortho_residual)])


def train(spec: ModelSpec, dataset: Dataset, mask: Mask, config: TrainConfig,
          callback=None) -> tuple[PlaneParams, TrainReport]:
    """Fit the plane so the mask pattern appears in the loss landscape.

    Fully deterministic per config: the seed fans out into independent
    streams for plane init, batch shuffling and cell sampling.  On a
    degenerate-direction failure the partial report is attached to the
    raised error as ``report``.
    """
    cells = derive_cell_sets(mask)
    if len(cells.trainable_black) + len(cells.trainable_white) == 0:
        raise InputError("mask has no trainable cells")
    ss = np.random.SeedSequence(config.seed)
    init_seed, batch_seed, cell_seed = (int(s) for s in ss.generate_state(3))
    plane = init_plane(spec, init_seed, config.s_init)
    batches = Batches(dataset, config.batch_size, seed=batch_seed)
    cell_rng = np.random.default_rng(cell_seed)
    state = AdamState.zeros(plane.n)
    report = TrainReport()
    warned_collapse = False

    for it in range(1, config.iterations + 1):
        batch = batches.next_batch()
        sampled = sample_cells(cells, config.cells_per_update, cell_rng)
        try:
            result = mpo_objective(spec, plane, sampled, batch,
                                   clamp=config.white_ce_clamp,
                                   cell_chunk=config.cell_chunk)
            state, plane = adam_step(state, plane, result.grads, config)
            residual = plane.ortho_residual()
        except DegenerateDirectionError as exc:
            err = DegenerateDirectionError(
                f"plane degenerated at iteration {it} "
                f"(scale={plane.scale!r}): {exc}")
            err.report = report
            raise err from exc
        if not warned_collapse and \
                plane.scale * np.linalg.norm(plane.w_up) == 0.0:
            warnings.warn("plane scale underflowed to zero: all cells now "
                          "collapse onto the origin")
            warned_collapse = True
        if it % config.log_every == 0 or it == config.iterations:
            report.rows.append(ReportRow(it, result.objective, result.black_ce,
                                         result.white_ce_clamped, plane.scale,
                                         residual))
        if callback is not None:
            callback(it, plane, result)
    return plane, report
