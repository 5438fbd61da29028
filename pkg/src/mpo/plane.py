"""Trainable 2D plane in weight space.

A plane is parametrized by an origin vector, an "up" direction, a free
vector phi_right, and a scalar grid scale.  The actual rightward direction
is never stored: it is recomputed from (w_up, phi_right) by a Gram-Schmidt
projection rescaled to match the norm of w_up, so orthogonality and equal
norms hold by construction after every optimizer step.

A lattice cell (alpha, beta) maps to the weight vector

    w = w_origin + scale * (alpha * w_right + beta * w_up)

with alpha counting columns (rightward) and beta counting rows.  The whole
map is differentiable in all plane parameters, including through the
projection and normalization, so per-cell weight gradients pull back to
exact gradients of the 3n+1 trainable scalars.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .errors import DegenerateDirectionError, InputError

DEGENERACY_RTOL = 1e-12


class CellCoord(NamedTuple):
    alpha: float
    beta: float


def orthogonalize(w_up: np.ndarray, phi_right: np.ndarray) -> np.ndarray:
    """Project phi_right against w_up and rescale so the result is
    orthogonal to w_up with equal norm."""
    w_up = np.asarray(w_up, dtype=np.float64)
    phi_right = np.asarray(phi_right, dtype=np.float64)
    nu = np.linalg.norm(w_up)
    if nu == 0.0:
        raise DegenerateDirectionError("w_up has zero norm")
    hat = phi_right - (phi_right @ w_up) / nu**2 * w_up
    mu = np.linalg.norm(hat)
    if mu < DEGENERACY_RTOL * np.linalg.norm(phi_right):
        raise DegenerateDirectionError(
            "phi_right is (numerically) parallel to w_up")
    return (nu / mu) * hat


def orthogonalize_vjp(w_up, phi_right, grad_right):
    """Pull a gradient w.r.t. the derived right direction back to
    (w_up, phi_right) through the projection and rescaling."""
    u = np.asarray(w_up, dtype=np.float64)
    p = np.asarray(phi_right, dtype=np.float64)
    g = np.asarray(grad_right, dtype=np.float64)
    nu = np.linalg.norm(u)
    if nu == 0.0:
        raise DegenerateDirectionError("w_up has zero norm")
    c = (p @ u) / nu**2
    hat = p - c * u
    mu = np.linalg.norm(hat)
    if mu < DEGENERACY_RTOL * np.linalg.norm(p):
        raise DegenerateDirectionError(
            "phi_right is (numerically) parallel to w_up")
    g_hat_dot = g @ hat
    # through w_right = (|u| / |hat|) * hat
    hat_bar = (nu / mu) * g - (nu / mu**3) * g_hat_dot * hat
    du = (g_hat_dot / (mu * nu)) * u
    # through hat = p - c*u and c = <p, u>/|u|^2
    c_bar = -(hat_bar @ u)
    dp = hat_bar + (c_bar / nu**2) * u
    du += -c * hat_bar + (c_bar / nu**2) * (p - 2.0 * c * u)
    return du, dp


@dataclass
class PlaneParams:
    """Trainable plane parameters: three n-vectors and a scalar scale."""

    w_origin: np.ndarray
    w_up: np.ndarray
    phi_right: np.ndarray
    scale: float

    def __post_init__(self):
        self.w_origin = np.asarray(self.w_origin, dtype=np.float64)
        self.w_up = np.asarray(self.w_up, dtype=np.float64)
        self.phi_right = np.asarray(self.phi_right, dtype=np.float64)
        self.scale = float(self.scale)
        n = self.w_origin.shape[0]
        if self.w_up.shape != (n,) or self.phi_right.shape != (n,):
            raise InputError("plane vectors must share one length")

    @property
    def n(self) -> int:
        return self.w_origin.shape[0]

    @property
    def num_trainable(self) -> int:
        """3n + 1, independent of how many cells the plane carries."""
        return 3 * self.n + 1

    def w_right(self) -> np.ndarray:
        return orthogonalize(self.w_up, self.phi_right)

    def ortho_residual(self) -> float:
        """|<w_up, w_right>| / (|w_up| |w_right|) for the derived right."""
        r = self.w_right()
        return float(abs(self.w_up @ r)
                     / (np.linalg.norm(self.w_up) * np.linalg.norm(r)))

    def to_flat(self) -> np.ndarray:
        return np.concatenate([self.w_origin, self.w_up, self.phi_right,
                               [self.scale]])

    @classmethod
    def from_flat(cls, flat: np.ndarray, n: int) -> "PlaneParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (3 * n + 1,):
            raise InputError(f"expected flat length {3 * n + 1}, got {flat.shape}")
        return cls(flat[:n].copy(), flat[n:2 * n].copy(),
                   flat[2 * n:3 * n].copy(), float(flat[-1]))


@dataclass
class PlaneGrads:
    """Gradient of a scalar objective w.r.t. PlaneParams."""

    w_origin: np.ndarray
    w_up: np.ndarray
    phi_right: np.ndarray
    scale: float

    def to_flat(self) -> np.ndarray:
        return np.concatenate([self.w_origin, self.w_up, self.phi_right,
                               [self.scale]])

    @classmethod
    def zeros(cls, n: int) -> "PlaneGrads":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n), 0.0)


def materialize(plane: PlaneParams, coord, w_right: np.ndarray | None = None,
                ) -> np.ndarray:
    """Weight vector at one cell: w_origin + scale*(alpha*right + beta*up)."""
    alpha, beta = coord
    if w_right is None:
        w_right = plane.w_right()
    return plane.w_origin + plane.scale * (alpha * w_right + beta * plane.w_up)


def materialize_many(plane: PlaneParams, coords: np.ndarray,
                     w_right: np.ndarray | None = None) -> np.ndarray:
    """Weight vectors for an (m, 2) array of (alpha, beta) coordinates."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if w_right is None:
        w_right = plane.w_right()
    alphas = coords[:, 0:1]
    betas = coords[:, 1:2]
    return plane.w_origin + plane.scale * (alphas * w_right + betas * plane.w_up)


def pullback(plane: PlaneParams,
             cell_grads: Iterable[tuple[tuple, np.ndarray]]) -> PlaneGrads:
    """Exact gradient of sum-of-cell losses w.r.t. the plane parameters,
    given per-cell gradients w.r.t. the materialized weight vectors.

    Accumulation is a single fixed-order sum over the given cells, so the
    result is reproducible bit for bit.
    """
    pairs = list(cell_grads)
    n = plane.n
    if not pairs:
        return PlaneGrads.zeros(n)
    coords = np.asarray([c for c, _ in pairs], dtype=np.float64)
    G = np.asarray([g for _, g in pairs], dtype=np.float64)
    if G.shape != (len(pairs), n):
        raise InputError("cell gradients must have the plane's length")
    return pullback_arrays(plane, coords, G)


def pullback_arrays(plane: PlaneParams, coords: np.ndarray, G: np.ndarray,
                    ) -> PlaneGrads:
    """Array form of pullback: coords (m, 2), G (m, n)."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    w_right = plane.w_right()
    g_origin = G.sum(axis=0)
    A = coords[:, 0] @ G          # sum of alpha_i * g_i
    Bv = coords[:, 1] @ G         # sum of beta_i * g_i
    g_scale = float(A @ w_right + Bv @ plane.w_up)
    # gradient w.r.t. the derived right direction, then back through the
    # projection to (w_up, phi_right)
    du, dp = orthogonalize_vjp(plane.w_up, plane.phi_right, plane.scale * A)
    g_up = plane.scale * Bv + du
    return PlaneGrads(g_origin, g_up, dp, g_scale)
