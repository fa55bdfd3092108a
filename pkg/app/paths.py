"""Seeded, refinable Brownian environments.

Every random number is addressed by (seed, depth, cell index): base increments
live at depth 0, Brownian-bridge midpoints of cells at depth d - 1 live at
depth d. Cell indices are counted from ``origin`` so that consecutive chunks of
a long path and any order of refinements see the same noise.
"""

import dataclasses
import logging
import math
import os
from functools import lru_cache
from typing import Any, Dict, Optional

import numpy as np

from app.errors import AlignmentError, OffGridError, PathCoverageError, PathSizeError, RangeError
from app.models import BrownianPath

logger = logging.getLogger(__name__)

PATH_MEMORY_CAP = int(os.environ.get("SAO_PATH_MEMORY_CAP", 50_000_000))
BLOCK = 1024
MAX_DEPTH = 52
_MASK64 = 2**64 - 1


@lru_cache(maxsize=4096)
def _block_normals(seed: int, depth: int, block: int) -> np.ndarray:
    bit_generator = np.random.Philox(
        key=np.array([seed & _MASK64, depth], dtype=np.uint64),
        counter=np.array([0, block, 0, 0], dtype=np.uint64),
    )
    normals = np.random.Generator(bit_generator).standard_normal(BLOCK)
    normals.setflags(write=False)
    return normals


def _keyed_normals(seed: int, depth: int, start: int, count: int) -> np.ndarray:
    """Standard normals for cells start, ..., start + count - 1 at a given depth."""
    if count <= 0:
        return np.empty(0)
    first, last = start // BLOCK, (start + count - 1) // BLOCK
    stacked = np.concatenate([_block_normals(seed, depth, block) for block in range(first, last + 1)])
    offset = start - first * BLOCK
    return stacked[offset : offset + count]


def _depth_of(path: BrownianPath, h: float) -> int:
    ratio = path.dt / h
    depth = round(math.log2(ratio)) if ratio > 0 else -1
    if depth < 0 or depth > MAX_DEPTH or abs(ratio - 2.0**depth) > 1e-9 * ratio:
        raise AlignmentError(f"step {h} is not a dyadic fraction of dt={path.dt}")
    return depth


def _lattice_index(path: BrownianPath, t: float, h: float) -> int:
    position = (t - path.origin) / h
    index = round(position)
    if index < 0 or abs(position - index) > 1e-6 + 1e-12 * abs(position):
        raise AlignmentError(f"t={t} is not on the lattice of step {h} from origin {path.origin}")
    return index


class PathService:
    """Service for generating and querying Brownian paths."""

    @staticmethod
    def generate(
        t0: float,
        t1: float,
        dt: float,
        seed: int,
        origin: Optional[float] = None,
        sigma: float = 1.0,
        cap: int = PATH_MEMORY_CAP,
    ) -> BrownianPath:
        """Equispaced path of step dt covering [t0, t1], deterministic in seed.

        t1 is rounded up to the next grid point; paths of more than cap grid points are refused.
        """
        if not t0 < t1 or dt <= 0:
            raise RangeError(f"need t0 < t1 and dt > 0, got t0={t0}, t1={t1}, dt={dt}")
        origin = t0 if origin is None else origin
        if t0 < origin:
            raise AlignmentError(f"t0={t0} precedes origin {origin}")
        n_cells = math.ceil((t1 - t0) / dt - 1e-9)
        if n_cells + 1 > cap:
            raise PathSizeError(f"{n_cells + 1} grid points exceed the cap of {cap}")
        bare = BrownianPath(t0, t1, dt, origin, seed, sigma, np.empty(0), np.empty(0))
        k0 = _lattice_index(bare, t0, dt)
        grid = origin + dt * np.arange(k0, k0 + n_cells + 1, dtype=float)
        values = np.zeros(n_cells + 1)
        if sigma != 0:
            increments = (sigma * math.sqrt(dt)) * _keyed_normals(seed, 0, k0, n_cells)
            values[1:] = np.cumsum(increments)
        grid.setflags(write=False)
        values.setflags(write=False)
        logger.debug(f"generated path seed={seed} on [{grid[0]}, {grid[-1]}] with {n_cells} cells")
        return BrownianPath(float(grid[0]), float(grid[-1]), dt, origin, seed, sigma, grid, values)

    @staticmethod
    def zero(t0: float, t1: float, dt: float) -> BrownianPath:
        """Noise-free path, B = 0."""
        return PathService.generate(t0, t1, dt, seed=0, sigma=0.0)

    @staticmethod
    def refine(path: BrownianPath, t_lo: float, t_hi: float, new_dt: float) -> BrownianPath:
        """Insert Brownian-bridge midpoints so that [t_lo, t_hi] has step new_dt."""
        if not t_lo < t_hi or not path.covers(t_lo, t_hi):
            raise PathCoverageError(f"[{t_lo}, {t_hi}] not inside [{path.t0}, {path.t1}]")
        depth = _depth_of(path, new_dt)
        h = path.dt / 2**depth
        k_lo, k_hi = _lattice_index(path, t_lo, h), _lattice_index(path, t_hi, h)

        slack = 1e-6 * h
        inside = (path.grid >= t_lo - slack) & (path.grid <= t_hi + slack)
        position = (path.grid[inside] - path.origin) / h
        if np.any(np.abs(position - np.round(position)) > 1e-6):
            raise AlignmentError(f"new_dt={new_dt} does not divide the local step on [{t_lo}, {t_hi}]")

        scale = 2**depth
        base_lo, base_hi = k_lo // scale, -(-k_hi // scale)
        base_times = path.origin + path.dt * np.arange(base_lo, base_hi + 1, dtype=float)
        values = PathService.values_on_grid(path, base_times)
        for level in range(1, depth + 1):
            h_parent = path.dt / 2 ** (level - 1)
            noise = _keyed_normals(path.seed, level, base_lo * 2 ** (level - 1), len(values) - 1)
            midpoints = 0.5 * (values[:-1] + values[1:]) + (path.sigma * math.sqrt(h_parent) * 0.5) * noise
            finer = np.empty(2 * len(values) - 1)
            finer[0::2] = values
            finer[1::2] = midpoints
            values = finer
        first = k_lo - base_lo * scale
        region_values = values[first : first + k_hi - k_lo + 1]
        region_times = path.origin + h * np.arange(k_lo, k_hi + 1, dtype=float)

        keep = ~inside
        grid = np.concatenate([path.grid[keep], region_times])
        merged = np.concatenate([path.values[keep], region_values])
        order = np.argsort(grid, kind="stable")
        if len(grid) > PATH_MEMORY_CAP:
            raise PathSizeError(f"refined path of {len(grid)} points exceeds the cap of {PATH_MEMORY_CAP}")
        grid, merged = grid[order], merged[order]
        grid.setflags(write=False)
        merged.setflags(write=False)
        return dataclasses.replace(
            path,
            grid=grid,
            values=merged,
            refinement_level=max(path.refinement_level, depth),
            refinements=path.refinements + ((t_lo, t_hi, new_dt),),
        )

    @staticmethod
    def midpoint(path: BrownianPath, t_left: float, t_right: float, b_left: float, b_right: float) -> float:
        """Bridge value at the middle of the dyadic cell [t_left, t_right].

        Equal, bit for bit, to the value ``refine`` inserts at that point.
        """
        depth = _depth_of(path, t_right - t_left)
        h = path.dt / 2**depth
        index = _lattice_index(path, t_left, h)
        noise = _block_normals(path.seed, depth + 1, index // BLOCK)[index % BLOCK]
        return 0.5 * (b_left + b_right) + (path.sigma * math.sqrt(h) * 0.5) * float(noise)

    @staticmethod
    def grid_index(path: BrownianPath, t: float) -> int:
        """Index of the grid point at time t."""
        grid = path.grid
        position = int(np.searchsorted(grid, t))
        candidates = [i for i in (position - 1, position) if 0 <= i < len(grid)]
        if not candidates:
            raise OffGridError(f"t={t} is not a grid point")
        index = min(candidates, key=lambda i: abs(grid[i] - t))
        neighbours = [abs(grid[j] - grid[index]) for j in (index - 1, index + 1) if 0 <= j < len(grid)]
        spacing = min(neighbours) if neighbours else path.dt
        if abs(grid[index] - t) > 1e-6 * spacing:
            raise OffGridError(f"t={t} is not a grid point")
        return index

    @staticmethod
    def values_on_grid(path: BrownianPath, times: np.ndarray) -> np.ndarray:
        return np.array([path.values[PathService.grid_index(path, float(t))] for t in times])

    @staticmethod
    def value_at(path: BrownianPath, t: float) -> float:
        return float(path.values[PathService.grid_index(path, t)])

    @staticmethod
    def values_at(path: BrownianPath, times) -> np.ndarray:
        """B at arbitrary times inside the path, linearly interpolated between grid points."""
        times = np.asarray(times, dtype=float)
        if times.size and not path.covers(float(times.min()), float(times.max())):
            raise PathCoverageError(f"query times outside [{path.t0}, {path.t1}]")
        return np.interp(times, path.grid, path.values)

    @staticmethod
    def increment(path: BrownianPath, s: float, t: float) -> float:
        """B(t) - B(s) for grid times s <= t."""
        if s > t:
            raise RangeError(f"increment needs s <= t, got s={s}, t={t}")
        i, j = PathService.grid_index(path, s), PathService.grid_index(path, t)
        return float(path.values[j] - path.values[i])

    @staticmethod
    def dump(path: BrownianPath) -> Dict[str, Any]:
        """Metadata from which the path is re-derived."""
        return {
            "seed": path.seed,
            "t0": path.t0,
            "t1": path.t1,
            "dt": path.dt,
            "origin": path.origin,
            "sigma": path.sigma,
            "refinements": [list(r) for r in path.refinements],
        }

    @staticmethod
    def restore(metadata: Dict[str, Any]) -> BrownianPath:
        path = PathService.generate(
            metadata["t0"],
            metadata["t1"],
            metadata["dt"],
            metadata["seed"],
            origin=metadata["origin"],
            sigma=metadata["sigma"],
        )
        for t_lo, t_hi, new_dt in metadata.get("refinements", []):
            path = PathService.refine(path, t_lo, t_hi, new_dt)
        return path
