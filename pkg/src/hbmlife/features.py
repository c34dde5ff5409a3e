"""Group-level charging feature and early-cycle discharge features."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .dataset import CellRecord, ChargeProtocol, DataError, FeatureRow, FeatureTable

log = logging.getLogger(__name__)

DEFAULT_EPS = 1e-12


@dataclass(frozen=True)
class GridConfig:
    """Uniform descending voltage grid, ``vmax`` down to ``vmin``."""

    vmax: float = 3.5
    vmin: float = 2.0
    points: int = 1000

    def __post_init__(self):
        if not self.vmax > self.vmin:
            raise ValueError(f"vmax ({self.vmax}) must exceed vmin ({self.vmin})")
        if self.points < 2:
            raise ValueError("grid needs at least 2 points")

    def grid(self) -> np.ndarray:
        return np.linspace(self.vmax, self.vmin, self.points)


@dataclass(frozen=True)
class DeltaQCurve:
    voltage_grid: np.ndarray
    delta_q: np.ndarray

    def __post_init__(self):
        if self.voltage_grid.shape != self.delta_q.shape or self.voltage_grid.size < 2:
            raise ValueError("voltage_grid and delta_q must have equal length >= 2")
        if np.any(np.diff(self.voltage_grid) >= 0):
            raise ValueError("voltage_grid must be strictly descending")


@dataclass(frozen=True)
class FeatureVector:
    g: float
    f1: float
    f2: float
    f3: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.g, self.f1, self.f2, self.f3)):
            raise ValueError(f"non-finite feature vector {self}")

    def individual(self) -> np.ndarray:
        return np.array([self.f1, self.f2, self.f3])


def average_charge_crate(protocol: ChargeProtocol) -> float:
    """SOC-averaged charging C-rate.

    Integrating current over SOC rather than time weights each step by the
    fraction of SOC it covers, so this is ``sum(c_rate * soc_span)``. The sum
    is taken exactly over each input's shortest decimal form and rounded
    once, so decimal protocols give the correctly rounded result.
    """
    return float(sum(Fraction(repr(float(c))) * Fraction(repr(float(s))) for c, s in protocol.steps))


def _q_of_v(curve, grid: np.ndarray, cycle: int) -> np.ndarray:
    v = curve.voltage
    if grid.max() > v.max() or grid.min() < v.min():
        raise DataError(
            f"cycle {cycle}: grid [{grid.min()}, {grid.max()}] V lies outside the curve's "
            f"support [{v.min()}, {v.max()}] V"
        )
    # np.interp wants ascending abscissae
    return np.interp(grid, v[::-1], curve.capacity_ah[::-1])


def delta_q_curve(
    cell: CellRecord,
    cycle_a: int = 10,
    cycle_b: int = 100,
    grid_config: GridConfig = GridConfig(),
) -> DeltaQCurve:
    """``Q_b(V) - Q_a(V)`` on a common grid, by linear interpolation."""
    for c in (cycle_a, cycle_b):
        if c not in cell.cycles:
            raise DataError(f"cell {cell.cell_id!r} has no cycle {c}")
    grid = grid_config.grid()
    qa = _q_of_v(cell.cycles[cycle_a], grid, cycle_a)
    qb = _q_of_v(cell.cycles[cycle_b], grid, cycle_b)
    return DeltaQCurve(grid, qb - qa)


def extract_features(
    cell: CellRecord,
    grid_config: GridConfig = GridConfig(),
    eps: float = DEFAULT_EPS,
) -> FeatureVector:
    """F1-F3 plus g for one cell.

    f1 = log10 of the population variance of dQ(V) (cycles 100 vs 10),
    f2 = log10 of |min dQ(V)|, both clamped below at ``eps``;
    f3 = total discharge capacity at cycle 2.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    dq = delta_q_curve(cell, 10, 100, grid_config).delta_q
    if 2 not in cell.cycles:
        raise DataError(f"cell {cell.cell_id!r} has no cycle 2")
    f1 = math.log10(max(float(np.var(dq)), eps))
    f2 = math.log10(max(abs(float(dq.min())), eps))
    f3 = cell.cycles[2].total_capacity
    return FeatureVector(average_charge_crate(cell.protocol), f1, f2, f3)


def extract_table(
    cells: Sequence[CellRecord],
    grid_config: GridConfig = GridConfig(),
    eps: float = DEFAULT_EPS,
    label_transform: str = "log10",
) -> tuple[FeatureTable, list[str]]:
    """Feature rows for every complete cell; returns (table, skipped ids)."""
    rows, skipped = [], []
    for cell in cells:
        if cell.missing_cycles:
            skipped.append(cell.cell_id)
            log.warning("skipping %s: missing cycles %s", cell.cell_id, list(cell.missing_cycles))
            continue
        fv = extract_features(cell, grid_config, eps)
        rows.append(FeatureRow(cell.cell_id, fv.g, fv.f1, fv.f2, fv.f3, cell.eol_days))
    return FeatureTable(tuple(rows), label_transform), skipped
