"""Brownian path simulation with counter-based, worker-independent random streams.

Each path owns a Philox stream keyed by (seed, path index), so regenerating any
subset of paths, in any partitioning across workers, reproduces the same bits.
Gaussians come from the inverse normal CDF applied to the raw counter output;
no rejection sampling, so the draw count per path is fixed.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.random import Philox
from scipy.special import ndtri

from .coefficients import TimeGrid
from .errors import ResourceLimit

MEMORY_CAP_ELEMENTS = 200_000_000      # ~1.6 GB of float64 per bundle
_STREAM_SCHEME = "philox4x64:key=(seed,path)"


@dataclass(frozen=True)
class PathBundle:
    """Brownian increments and levels for M paths on a grid."""

    grid: TimeGrid
    dim: int
    n_paths: int
    increments: np.ndarray      # (M, N-1, d), Gaussian with variance = grid gap
    levels: np.ndarray          # (M, N, d), prefix sums with W_0 = 0
    seed: int
    stream_scheme: str = _STREAM_SCHEME

    @property
    def n_steps(self) -> int:
        return self.grid.n_points - 1

    def terminal_levels(self):
        w = self.levels[:, -1, :]
        return w[:, 0] if self.dim == 1 else w


def _path_uniforms(seed: int, path_index: int, count: int) -> np.ndarray:
    bg = Philox(key=np.array([seed & 0xFFFFFFFFFFFFFFFF, path_index], dtype=np.uint64))
    raw = bg.random_raw(count)
    # strictly inside (0, 1) so ndtri never hits an endpoint
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def simulate_paths(grid: TimeGrid, dim: int, n_paths: int, seed: int,
                   workers: int = 1,
                   memory_cap: int = MEMORY_CAP_ELEMENTS) -> PathBundle:
    """Simulate ``n_paths`` independent d-dimensional Brownian paths on the grid.

    Deterministic in ``seed`` and independent of ``workers``; the worker count
    only partitions the embarrassingly parallel per-path generation.
    """
    if n_paths < 1 or dim < 1:
        raise ValueError("n_paths and dim must be positive")
    n_steps = grid.n_points - 1
    if n_paths * grid.n_points * dim > memory_cap:
        raise ResourceLimit(
            f"bundle of {n_paths}x{grid.n_points}x{dim} exceeds the memory cap"
        )
    gaps = grid.gaps
    scale = np.sqrt(gaps)[None, :, None]
    increments = np.empty((n_paths, n_steps, dim), dtype=np.float64)

    def fill(block):
        lo, hi = block
        for m in range(lo, hi):
            u = _path_uniforms(seed, m, n_steps * dim)
            increments[m] = ndtri(u).reshape(n_steps, dim)

    if workers <= 1:
        fill((0, n_paths))
    else:
        chunk = -(-n_paths // workers)
        blocks = [(lo, min(lo + chunk, n_paths)) for lo in range(0, n_paths, chunk)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, blocks))

    increments *= scale
    levels = np.zeros((n_paths, grid.n_points, dim), dtype=np.float64)
    np.cumsum(increments, axis=1, out=levels[:, 1:, :])
    return PathBundle(grid=grid, dim=dim, n_paths=n_paths,
                      increments=increments, levels=levels, seed=int(seed))


def stochastic_integral(bundle: PathBundle, integrand) -> np.ndarray:
    """Left-point Ito sum: per path, sum_i beta(t_i) . dW_i over all coordinates.

    ``integrand`` holds the values at the left nodes: shape (N-1,) for a scalar
    integrand broadcast over coordinates, or (N-1, d) per coordinate.
    """
    beta = np.asarray(integrand, dtype=float)
    n_steps, d = bundle.n_steps, bundle.dim
    if beta.shape == (n_steps,):
        beta = beta[:, None]
    if beta.shape != (n_steps, d):
        raise ValueError(
            f"integrand shape {beta.shape} does not match ({n_steps},) or ({n_steps}, {d})"
        )
    return np.einsum("mid,id->m", bundle.increments, beta)


def dump_bundle(bundle: PathBundle, path) -> None:
    """Cross-implementation dump: little-endian int64 header (seed, M, N, d),
    then the increments row major as little-endian float64."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<qqqq", bundle.seed, bundle.n_paths,
                             bundle.grid.n_points, bundle.dim))
        fh.write(np.ascontiguousarray(bundle.increments, dtype="<f8").tobytes())


def load_bundle(path, grid: TimeGrid) -> PathBundle:
    """Rebuild a bundle from a dump; the grid is not part of the wire format."""
    with open(path, "rb") as fh:
        seed, m, n, d = struct.unpack("<qqqq", fh.read(32))
        inc = np.frombuffer(fh.read(8 * m * (n - 1) * d), dtype="<f8")
    if grid.n_points != n:
        raise ValueError(f"dump was written on a {n}-point grid, got {grid.n_points}")
    increments = inc.reshape(m, n - 1, d).copy()
    levels = np.zeros((m, n, d), dtype=np.float64)
    np.cumsum(increments, axis=1, out=levels[:, 1:, :])
    return PathBundle(grid=grid, dim=int(d), n_paths=int(m),
                      increments=increments, levels=levels, seed=int(seed))
