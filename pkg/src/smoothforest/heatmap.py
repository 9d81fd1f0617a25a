"""Grids of hard or smoothed forest output over a 1D or 2D box, and PGM export."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .exceptions import DimensionError
from .forest import Forest, evaluate_forest_batch
from .smoothing import SmoothedForest


def grid_points(resolution, bounds):
    """Cell centres along each axis of ``bounds = [(lo, hi), ...]``."""
    return [lo + (np.arange(resolution) + 0.5) * (hi - lo) / resolution for lo, hi in bounds]


def evaluate_grid(forest: Forest, sigma, resolution=200, bounds=None, output=0,
                  smoothed=None):
    """Forest output on a regular grid; ``sigma == 0`` means hard evaluation.

    For a 2D forest the result has shape (resolution, resolution) indexed
    ``[i2, i1]`` (row = second feature); for a 1D forest it is a vector.
    """
    d = forest.input_dim
    if d > 2:
        raise DimensionError(f"heatmaps need a forest with input_dim 1 or 2, got {d}")
    bounds = bounds or [(0.0, 1.0)] * d
    if len(bounds) != d:
        raise DimensionError(f"expected {d} (lo, hi) bounds, got {len(bounds)}")
    axes = grid_points(resolution, bounds)
    if d == 1:
        points = axes[0][:, None]
    else:
        g1, g2 = np.meshgrid(axes[0], axes[1])
        points = np.column_stack([g1.ravel(), g2.ravel()])
    if sigma == 0:
        values = evaluate_forest_batch(forest, points)
    else:
        values = (smoothed or SmoothedForest(forest)).predict(points, sigma)
    values = values[:, output]
    return axes, values.reshape((resolution,) * d)


def total_variation(grid) -> float:
    """Sum of absolute differences between neighbouring cells."""
    grid = np.asarray(grid, dtype=float)
    return float(sum(np.abs(np.diff(grid, axis=a)).sum() for a in range(grid.ndim)))


def to_gray(grid) -> np.ndarray:
    """Map values linearly onto 0..255 with the largest value black."""
    grid = np.asarray(grid, dtype=float)
    lo, hi = grid.min(), grid.max()
    if hi == lo:
        return np.full(grid.shape, 128, dtype=np.uint8)
    return np.rint(255.0 * (hi - grid) / (hi - lo)).astype(np.uint8)


def write_pgm(grid, path, binary=False):
    """Grayscale image of a 2D grid; row 0 of the image is the top (largest x2)."""
    gray = to_gray(grid)[::-1]
    h, w = gray.shape
    header = f"{'P5' if binary else 'P2'}\n{w} {h}\n255\n"
    path = Path(path)
    if binary:
        path.write_bytes(header.encode("ascii") + gray.tobytes())
    else:
        rows = "\n".join(" ".join(str(v) for v in row) for row in gray)
        path.write_text(header + rows + "\n", encoding="ascii")


def write_grid_csv(axes, grid, path):
    """Long-format table: one row per cell, coordinates then value."""
    grid = np.asarray(grid)
    lines = []
    if grid.ndim == 1:
        lines.append("x1,value")
        lines.extend(f"{x!r},{v!r}" for x, v in zip(axes[0].tolist(), grid.tolist()))
    else:
        lines.append("x1,x2,value")
        for i2, x2 in enumerate(axes[1].tolist()):
            for i1, x1 in enumerate(axes[0].tolist()):
                lines.append(f"{x1!r},{x2!r},{float(grid[i2, i1])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
