"""Wealth x price grid, fields on it, quadrature and interpolation.

Fields are stored wealth-major: ``values[i, j]`` is the value at wealth
``i * dx`` and price ``j * db``. Row ``i = 0`` is the zero-wealth line; in
quadrature it carries weight ``db`` only, because that is where the
singular (inactive-node) measure lives.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class Grid2D:
    nx: int = 200
    ny: int = 220
    dx: float = 5e13
    db: float = 4.6e13
    x_min: float = 0.0
    b_min: float = 0.0

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise DomainError("grid needs at least 3 points per axis")
        if not (self.dx > 0 and self.db > 0):
            raise DomainError("grid spacings must be positive")
        if self.x_min != 0 or self.b_min != 0:
            raise DomainError("grid must start at the origin")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def x_max(self) -> float:
        return (self.nx - 1) * self.dx

    @property
    def b_max(self) -> float:
        return (self.ny - 1) * self.db

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.nx) * self.dx

    @property
    def b(self) -> np.ndarray:
        return np.arange(self.ny) * self.db

    def weights(self) -> np.ndarray:
        """Quadrature weight of every node (db on the x = 0 row, dx*db elsewhere)."""
        w = np.full(self.shape, self.dx * self.db)
        w[0, :] = self.db
        return w

    def to_dict(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "dx": self.dx, "db": self.db}


@dataclass
class ScalarField:
    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise DomainError(f"field shape {self.values.shape} does not match grid {self.grid.shape}")

    @classmethod
    def zeros(cls, grid: Grid2D) -> "ScalarField":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_function(cls, grid: Grid2D, fn) -> "ScalarField":
        xx, bb = np.meshgrid(grid.x, grid.b, indexing="ij")
        return cls(grid, np.broadcast_to(fn(xx, bb), grid.shape).astype(float))

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy())


def interpolate(f: ScalarField, x: float, b: float) -> float:
    """Bilinear interpolation, clamping coordinates to the grid rectangle."""
    g = f.grid
    sx = min(max(x / g.dx, 0.0), g.nx - 1.0)
    sb = min(max(b / g.db, 0.0), g.ny - 1.0)
    i0 = min(int(math.floor(sx)), g.nx - 2)
    j0 = min(int(math.floor(sb)), g.ny - 2)
    fx, fb = sx - i0, sb - j0
    v = f.values
    return float(
        (1 - fx) * (1 - fb) * v[i0, j0]
        + fx * (1 - fb) * v[i0 + 1, j0]
        + (1 - fx) * fb * v[i0, j0 + 1]
        + fx * fb * v[i0 + 1, j0 + 1]
    )


def integrate(f: ScalarField) -> float:
    """Cell-sum quadrature; the x = 0 row is weighted by db only."""
    g = f.grid
    v = f.values
    return float(v[1:].sum() * g.dx * g.db + v[0].sum() * g.db)


def jump_source_index(i: int, j: int, k: float, g: Grid2D) -> list[tuple[int, float]]:
    """Wealth nodes (with weights) splitting the pre-jump wealth x_i - k*b_j.

    Returns an empty list when the pre-jump wealth would be negative.
    """
    if not (0 <= i < g.nx and 0 <= j < g.ny):
        raise DomainError("index out of range")
    src = (i * g.dx - k * j * g.db) / g.dx
    if src < 0:
        return []
    lo = int(math.floor(src))
    frac = src - lo
    if frac == 0.0 or lo >= g.nx - 1:
        return [(min(lo, g.nx - 1), 1.0)]
    return [(lo, 1.0 - frac), (lo + 1, frac)]


def jump_shift(k: float, g: Grid2D) -> tuple[np.ndarray, np.ndarray]:
    """Integer and fractional wealth-cell offsets of a jump k*b_j, per price column."""
    s = k * g.b / g.dx
    off = np.floor(s)
    return off.astype(np.int64), s - off


# --------------------------------------------------------------------------- I/O


def write_field_csv(path, f: ScalarField, unit: str = "") -> None:
    """One row per wealth index with ny values; header names price columns."""
    g = f.grid
    suffix = f" [{unit}]" if unit else ""
    header = [f"b={b:.9g} USD/token{suffix}" for b in g.b]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in f.values:
            w.writerow([repr(float(v)) for v in row])


def read_field_csv(path, grid: Grid2D) -> ScalarField:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return ScalarField(grid, data)


def write_vector_csv(path, columns: dict[str, np.ndarray]) -> None:
    names = list(columns)
    cols = [np.asarray(columns[n]) for n in names]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*cols):
            w.writerow([repr(float(v)) for v in row])


def field_envelope(f: ScalarField, name: str, **meta) -> dict:
    return {"name": name, "grid": f.grid.to_dict(), "values": f.values.tolist(), **meta}


def write_field_json(path, f: ScalarField, name: str, **meta) -> None:
    Path(path).write_text(json.dumps(field_envelope(f, name, **meta)))
