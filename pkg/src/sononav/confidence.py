"""Per-pixel ultrasound confidence via a random-walks harmonic solve.

The image is an 8-connected pixel lattice whose edge weights shrink with
the difference of depth-attenuated intensities; the transducer row is a
Dirichlet source (confidence 1), the bottom row a sink (0). The interior
solution of the weighted graph Laplacian is the confidence map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse


class ConfidenceSolveError(RuntimeError):
    """Conjugate-gradient solve did not converge; carries the residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class ConfidenceParams:
    alpha: float = 2.0       # depth attenuation exponent
    beta: float = 90.0       # intensity-difference sensitivity
    gamma: float = 0.05      # horizontal / diagonal walk penalty
    tol: float = 1e-6        # relative residual stopping criterion
    max_iter: int = 20000
    weight_floor: float = 1e-6  # keeps saturated images connected
    downsample: int = 1      # integer factor traded against per-step cost

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.tol) <= 0:
            raise ValueError("alpha, beta, gamma and tol must be positive")
        if self.max_iter < 1 or self.downsample < 1:
            raise ValueError("max_iter and downsample must be >= 1")


@dataclass(frozen=True)
class RoiRect:
    """Rectangular region of interest: top-left pixel plus size."""

    row: int
    col: int
    height: int
    width: int

    @classmethod
    def centered(cls, image_h: int, image_w: int, height: int, width: int) -> "RoiRect":
        return cls((image_h - height) // 2, (image_w - width) // 2, height, width)

    def validate(self, image_h: int, image_w: int) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError(f"ROI size must be positive: {self}")
        if (
            self.row < 0
            or self.col < 0
            or self.row + self.height > image_h
            or self.col + self.width > image_w
        ):
            raise ValueError(f"ROI {self} not inside a {image_h}x{image_w} image")


def attenuated_intensities(image: np.ndarray, alpha: float) -> np.ndarray:
    """Normalized intensities decayed with normalized depth:
    g' = (g/255) * exp(-alpha * row/(h-1))."""
    h = image.shape[0]
    depth = (np.arange(h) / (h - 1))[:, None]
    return (image.astype(np.float64) / 255.0) * np.exp(-alpha * depth)


# Neighbor offsets (dr, dc, gamma multiplier): vertical walks are free,
# horizontal ones pay gamma, diagonal ones sqrt(2)*gamma.
_NEIGHBORS = (
    (1, 0, 0.0),
    (0, 1, 1.0),
    (1, 1, np.sqrt(2.0)),
    (1, -1, np.sqrt(2.0)),
)


def _edge_list(h: int, w: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All undirected lattice edges as (i, j, gamma multiplier) arrays."""
    idx = np.arange(h * w).reshape(h, w)
    src, dst, gmul = [], [], []
    for dr, dc, mult in _NEIGHBORS:
        base_r = np.arange(0, h - dr)
        base_c = np.arange(max(0, -dc), w - max(0, dc))
        rr, cc = np.meshgrid(base_r, base_c, indexing="ij")
        src.append(idx[rr, cc].ravel())
        dst.append(idx[rr + dr, cc + dc].ravel())
        gmul.append(np.full(rr.size, mult))
    return np.concatenate(src), np.concatenate(dst), np.concatenate(gmul)


_EDGE_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _edges_for(h: int, w: int):
    key = (h, w)
    if key not in _EDGE_CACHE:
        _EDGE_CACHE[key] = _edge_list(h, w)
    return _EDGE_CACHE[key]


def edge_weights(image: np.ndarray, params: ConfidenceParams) -> tuple[np.ndarray, ...]:
    """(src, dst, weight) arrays for the image's lattice graph."""
    h, w = image.shape
    g = attenuated_intensities(image, params.alpha).ravel()
    src, dst, gmul = _edges_for(h, w)
    weights = (
        np.exp(-params.beta * (np.abs(g[src] - g[dst]) + params.gamma * gmul))
        + params.weight_floor
    )
    return src, dst, weights


def compute_confidence_map(
    image: np.ndarray, params: ConfidenceParams = ConfidenceParams()
) -> np.ndarray:
    """Solve the Dirichlet problem for one image; returns (h, w) in [0, 1]
    with the top row exactly 1 and the bottom row exactly 0."""
    image = np.asarray(image)
    if image.ndim != 2 or image.shape[0] < 2 or image.shape[1] < 2:
        raise ValueError(f"need a 2D image of at least 2x2 pixels, got {image.shape}")
    if params.downsample > 1:
        small = image[:: params.downsample, :: params.downsample]
        if small.shape[0] < 2 or small.shape[1] < 2:
            raise ValueError("downsample factor leaves fewer than 2 rows/cols")
        small_map = _solve_confidence(small, params)
        return _bilinear_resize(small_map, image.shape)
    return _solve_confidence(image, params)


def _solve_confidence(image: np.ndarray, params: ConfidenceParams) -> np.ndarray:
    h, w = image.shape
    n = h * w
    src, dst, weights = edge_weights(image, params)

    lap = sparse.coo_matrix(
        (
            np.concatenate([-weights, -weights]),
            (np.concatenate([src, dst]), np.concatenate([dst, src])),
        ),
        shape=(n, n),
    ).tocsr()
    degree = -np.asarray(lap.sum(axis=1)).ravel()
    lap = lap + sparse.diags(degree)

    top = np.arange(w)
    bottom = np.arange(n - w, n)
    boundary = np.concatenate([top, bottom])
    boundary_vals = np.concatenate([np.ones(w), np.zeros(w)])
    interior = np.arange(w, n - w)

    a = lap[interior][:, interior].tocsr()
    rhs = -lap[interior][:, boundary] @ boundary_vals

    # Depth ramp initial guess: exact for a disconnected graph, close for
    # smooth images, and consistent with the boundary rows.
    rows = np.arange(1, h - 1)
    x0 = np.repeat(1.0 - rows / (h - 1), w)

    x, residual = _pcg_jacobi(a, rhs, x0, params.tol, params.max_iter)
    if x is None:
        raise ConfidenceSolveError(
            f"confidence solve did not reach tol={params.tol} within "
            f"{params.max_iter} iterations (relative residual {residual:.3e})",
            residual,
        )
    out = np.empty(n)
    out[boundary] = boundary_vals
    out[interior] = np.clip(x, 0.0, 1.0)
    return out.reshape(h, w)


def _pcg_jacobi(a, b, x0, tol, max_iter):
    """Jacobi-preconditioned conjugate gradient on an SPD sparse system.

    Returns (solution, relative residual); solution is None when the
    iteration budget runs out.
    """
    inv_diag = 1.0 / a.diagonal()
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return np.zeros_like(b), 0.0
    x = x0.copy()
    r = b - a @ x
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    rel = float(np.linalg.norm(r)) / b_norm
    if rel <= tol:
        return x, rel
    for _ in range(max_iter):
        ap = a @ p
        alpha = rz / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        rel = float(np.linalg.norm(r)) / b_norm
        if rel <= tol:
            return x, rel
        z = inv_diag * r
        rz_next = float(r @ z)
        p = z + (rz_next / rz) * p
        rz = rz_next
    return None, rel


def _bilinear_resize(small: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear upsampling, so the Dirichlet rows stay
    exactly 1 and 0."""
    sh, sw = small.shape
    h, w = shape
    rows = np.linspace(0.0, sh - 1, h)
    cols = np.linspace(0.0, sw - 1, w)
    r0 = np.clip(np.floor(rows).astype(int), 0, sh - 2) if sh > 1 else np.zeros(h, int)
    c0 = np.clip(np.floor(cols).astype(int), 0, sw - 2) if sw > 1 else np.zeros(w, int)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    v00 = small[r0][:, c0]
    v01 = small[r0][:, np.minimum(c0 + 1, sw - 1)]
    v10 = small[np.minimum(r0 + 1, sh - 1)][:, c0]
    v11 = small[np.minimum(r0 + 1, sh - 1)][:, np.minimum(c0 + 1, sw - 1)]
    return (
        v00 * (1 - fr) * (1 - fc)
        + v01 * (1 - fr) * fc
        + v10 * fr * (1 - fc)
        + v11 * fr * fc
    )


def roi_confidence(conf_map: np.ndarray, roi: RoiRect) -> float:
    """Mean confidence over the region of interest."""
    h, w = conf_map.shape
    roi.validate(h, w)
    block = conf_map[roi.row : roi.row + roi.height, roi.col : roi.col + roi.width]
    return float(block.mean())


def confidence_improvement(c_prev: float, c_next: float) -> float:
    """One-step change of the ROI confidence, in [-1, 1]."""
    return c_next - c_prev
