"""Cloth-simulation ground filtering.

The cloud is turned upside down and a simulated cloth falls onto it: a
grid of particles at `cloth_resolution` spacing integrates gravity
(Verlet, damped), collides with the inverted surface (per-cell maximum
of inverted height, i.e. the formerly lowest returns: bare earth, also
under canopy), and is smoothed by `rigidness` constraint passes per
iteration that pull each free particle toward the mean of its grid
neighbors. Particles pin permanently on floor contact. Points whose
inverted height lies within class_threshold of the settled cloth are
ground.

Over building footprints the floor is the inverted roof, far below
ground level; pinned particles at the footprint edge hold the cloth up
so it bridges the "pit" with bounded sag, keeping roofs non-ground.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .cloud import PointCloud
from .errors import DataError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CsfParams:
    cloth_resolution: float = 1.0
    rigidness: int = 2
    iterations: int = 500
    class_threshold: float = 0.5
    time_step: float = 0.65
    gravity: float = 0.065
    # 1.0 = overdamped, quasi-static settling. Carrying momentum lets the
    # cloth overshoot its equilibrium over building footprints and pin on
    # the inverted roof, which silently flags roofs as ground.
    damping: float = 1.0
    convergence: float = 0.005   # stop once no particle moved further

    def __post_init__(self):
        if not self.cloth_resolution > 0:
            raise DataError("cloth_resolution must be positive")
        if self.rigidness not in (1, 2, 3):
            raise DataError("rigidness must be 1, 2 or 3")
        if self.iterations < 1:
            raise DataError("iterations must be >= 1")
        if not self.class_threshold > 0:
            raise DataError("class_threshold must be positive")


def _neighbor_mean(c: np.ndarray) -> np.ndarray:
    acc = np.zeros_like(c)
    cnt = np.zeros_like(c)
    acc[1:, :] += c[:-1, :]
    cnt[1:, :] += 1.0
    acc[:-1, :] += c[1:, :]
    cnt[:-1, :] += 1.0
    acc[:, 1:] += c[:, :-1]
    cnt[:, 1:] += 1.0
    acc[:, :-1] += c[:, 1:]
    cnt[:, :-1] += 1.0
    return acc / cnt


def _bilinear(grid: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Sample grid[i, j] at fractional (gy, gx), clamped to the borders."""
    h, w = grid.shape
    gx = np.clip(gx, 0.0, w - 1.0)
    gy = np.clip(gy, 0.0, h - 1.0)
    j0 = np.minimum(gx.astype(np.int64), w - 2) if w > 1 else np.zeros_like(gx, dtype=np.int64)
    i0 = np.minimum(gy.astype(np.int64), h - 2) if h > 1 else np.zeros_like(gy, dtype=np.int64)
    j1 = np.minimum(j0 + 1, w - 1)
    i1 = np.minimum(i0 + 1, h - 1)
    fx = gx - j0
    fy = gy - i0
    top = grid[i0, j0] * (1 - fx) + grid[i0, j1] * fx
    bot = grid[i1, j0] * (1 - fx) + grid[i1, j1] * fx
    return top * (1 - fy) + bot * fy


def simulate_cloth(cloud: PointCloud, params: CsfParams) -> tuple[np.ndarray, tuple]:
    """Settle the cloth; returns (cloth heights in inverted z, grid spec).

    grid spec is (x0, y0, resolution) with particle (i, j) at
    (x0 + j*res, y0 + i*res).
    """
    res = params.cloth_resolution
    x0, x1 = float(cloud.x.min()), float(cloud.x.max())
    y0, y1 = float(cloud.y.min()), float(cloud.y.max())
    if cloud.count < 4 or (x1 - x0) <= res or (y1 - y0) <= res:
        raise DataError(
            "CSF needs >= 4 points spanning more than one cloth cell in XY"
        )
    # one cell of margin so every point has four surrounding particles
    x0 -= res
    y0 -= res
    w = int(np.ceil((x1 - x0) / res)) + 2
    h = int(np.ceil((y1 - y0) / res)) + 2

    inv = -cloud.z
    j = np.clip(((cloud.x - x0) / res).astype(np.int64), 0, w - 1)
    i = np.clip(((cloud.y - y0) / res).astype(np.int64), 0, h - 1)
    flat = i * w + j
    floor = np.full(h * w, -np.inf)
    np.maximum.at(floor, flat, inv)
    floor = floor.reshape(h, w)
    empty = ~np.isfinite(floor)
    if empty.any():  # cells with no points inherit the nearest occupied floor
        _, (ni, nj) = ndimage.distance_transform_edt(empty, return_indices=True)
        floor = floor[ni, nj]

    # Start barely above the highest inverted point: cells with ground
    # beneath them pin within the first iterations, before free-falling
    # cells over buildings can build up momentum.
    c = np.full((h, w), floor.max() + 0.05)
    prev = c.copy()
    movable = np.ones((h, w), dtype=bool)
    g_disp = params.gravity * params.time_step**2

    for it in range(params.iterations):
        snapshot = c.copy()
        vel = (c - prev) * (1.0 - params.damping)
        prev = c.copy()
        c = np.where(movable, c + vel - g_disp, c)
        hit = movable & (c <= floor)
        c = np.where(hit, floor, c)
        movable &= ~hit
        for _ in range(params.rigidness):
            target = _neighbor_mean(c)
            c = np.where(movable, c + 0.5 * (target - c), c)
            hit = movable & (c <= floor)
            c = np.where(hit, floor, c)
            movable &= ~hit
        if np.max(np.abs(c - snapshot)) < params.convergence:
            logger.info("cloth converged after %d iterations", it + 1)
            break

    return c, (x0, y0, res)


def csf_ground(
    cloud: PointCloud, params: CsfParams = CsfParams()
) -> np.ndarray:
    """Boolean ground flag per point: within class_threshold of the cloth."""
    cloth, (x0, y0, res) = simulate_cloth(cloud, params)
    gx = (cloud.x - x0) / res
    gy = (cloud.y - y0) / res
    cloth_at = _bilinear(cloth, gx, gy)
    flag = np.abs(-cloud.z - cloth_at) <= params.class_threshold
    logger.info(
        "CSF flagged %d of %d points as ground", int(flag.sum()), cloud.count
    )
    return flag
