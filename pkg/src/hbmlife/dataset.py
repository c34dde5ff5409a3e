"""Cell records, feature tables and the synthetic fleet generator.

Two on-disk layouts are supported:

* feature tables: a CSV with header ``cell_id,g,f1,f2,f3,label`` (extra
  numeric columns are carried through), empty ``label`` = unlabeled cell;
* cycle data: ``<cell_id>.meta.json`` (protocol steps, ``eol_days``) next to
  ``<cell_id>.cycles.csv`` with columns ``cycle,voltage,capacity_ah``.

Lines starting with ``#`` before the header are comments; the CLI uses them
to stamp the manifest hash into every artifact.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

FEATURE_COLUMNS = ("cell_id", "g", "f1", "f2", "f3", "label")
LABEL_TRANSFORMS = ("identity", "log10")
REQUIRED_CYCLES = (2, 10, 100)


class DataError(ValueError):
    """Raised for malformed or invariant-violating input data."""


def _check_transform(label_transform: str) -> None:
    if label_transform not in LABEL_TRANSFORMS:
        raise DataError(
            f"label_transform must be one of {LABEL_TRANSFORMS}, got {label_transform!r}"
        )


def forward_transform(values, label_transform: str):
    """Map EoL values (days) into the space the models regress on."""
    _check_transform(label_transform)
    values = np.asarray(values, dtype=float)
    return np.log10(values) if label_transform == "log10" else values


def inverse_transform(values, label_transform: str):
    _check_transform(label_transform)
    values = np.asarray(values, dtype=float)
    return np.power(10.0, values) if label_transform == "log10" else values


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class ChargeProtocol:
    """Multi-step fast-charge schedule.

    ``steps`` holds ``(c_rate, soc_span)`` pairs in charging order. Spans are
    fractions of full SOC and must sum to one. The datasets this targets end
    with a 1C step over the last 20 % SOC; that is not enforced.
    """

    steps: tuple[tuple[float, float], ...]
    cell_id: str = ""

    def __post_init__(self):
        steps = tuple((float(c), float(s)) for c, s in self.steps)
        object.__setattr__(self, "steps", steps)
        if not steps:
            raise DataError(f"protocol for {self.cell_id!r} has no steps")
        for c_rate, span in steps:
            if not (c_rate > 0 and math.isfinite(c_rate)):
                raise DataError(f"protocol for {self.cell_id!r}: c_rate must be > 0, got {c_rate}")
            if not (0 < span <= 1):
                raise DataError(f"protocol for {self.cell_id!r}: soc_span must be in (0, 1], got {span}")
        total = math.fsum(s for _, s in steps)
        if abs(total - 1.0) > 1e-9:
            raise DataError(
                f"protocol for {self.cell_id!r}: soc_span values sum to {total!r}, expected 1.0"
            )


@dataclass(frozen=True)
class DischargeCurve:
    """Voltage samples (non-increasing) against discharged capacity (non-decreasing)."""

    voltage: np.ndarray
    capacity_ah: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.voltage, dtype=float)
        q = np.asarray(self.capacity_ah, dtype=float)
        if v.ndim != 1 or v.shape != q.shape:
            raise DataError("voltage and capacity must be 1-D arrays of equal length")
        if v.size < 2:
            raise DataError("a discharge curve needs at least 2 points")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(q))):
            raise DataError("discharge curve contains non-finite values")
        if np.any(np.diff(v) > 0):
            raise DataError("voltage must be sorted descending within a discharge curve")
        if np.any(np.diff(q) < 0):
            raise DataError("discharged capacity must be non-decreasing within a discharge curve")
        v.flags.writeable = False
        q.flags.writeable = False
        object.__setattr__(self, "voltage", v)
        object.__setattr__(self, "capacity_ah", q)

    @property
    def total_capacity(self) -> float:
        return float(self.capacity_ah[-1])

    def __eq__(self, other):
        if not isinstance(other, DischargeCurve):
            return NotImplemented
        return np.array_equal(self.voltage, other.voltage) and np.array_equal(
            self.capacity_ah, other.capacity_ah
        )

    __hash__ = None


@dataclass(frozen=True)
class CellRecord:
    cell_id: str
    protocol: ChargeProtocol
    cycles: Mapping[int, DischargeCurve]
    eol_days: float | None = None

    def __post_init__(self):
        cycles = {}
        for idx, curve in self.cycles.items():
            if int(idx) != idx or idx < 1:
                raise DataError(f"cell {self.cell_id!r}: cycle index must be a positive integer, got {idx!r}")
            cycles[int(idx)] = curve
        object.__setattr__(self, "cycles", dict(sorted(cycles.items())))
        if self.eol_days is not None and not (self.eol_days > 0 and math.isfinite(self.eol_days)):
            raise DataError(f"cell {self.cell_id!r}: eol_days must be positive, got {self.eol_days}")

    @property
    def missing_cycles(self) -> tuple[int, ...]:
        """Cycles needed for feature extraction that this cell lacks."""
        return tuple(c for c in REQUIRED_CYCLES if c not in self.cycles)


@dataclass(frozen=True)
class FeatureRow:
    cell_id: str
    g: float
    f1: float
    f2: float
    f3: float
    label: float | None = None
    extras: Mapping[str, float] = field(default_factory=dict)

    def value(self, name: str) -> float:
        if name in ("g", "f1", "f2", "f3"):
            return getattr(self, name)
        try:
            return self.extras[name]
        except KeyError:
            raise KeyError(f"feature {name!r} not present for cell {self.cell_id!r}") from None


@dataclass(frozen=True)
class FeatureTable:
    """Per-cell feature rows; ``label`` holds EoL in days.

    ``label_transform`` records the space the models regress in; with
    ``log10`` every label must be strictly positive.
    """

    rows: tuple[FeatureRow, ...]
    label_transform: str = "log10"

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        _check_transform(self.label_transform)
        seen = set()
        for row in self.rows:
            if row.cell_id in seen:
                raise DataError(f"duplicate cell_id {row.cell_id!r}")
            seen.add(row.cell_id)
            nums = [row.g, row.f1, row.f2, row.f3, *row.extras.values()]
            if row.label is not None:
                nums.append(row.label)
            if not all(math.isfinite(v) for v in nums):
                raise DataError(f"non-finite value in row {row.cell_id!r}")
            if self.label_transform == "log10" and row.label is not None and row.label <= 0:
                raise DataError(
                    f"cell {row.cell_id!r}: label {row.label} must be > 0 under log10 transform"
                )

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def cell_ids(self) -> list[str]:
        return [r.cell_id for r in self.rows]

    @property
    def extra_columns(self) -> list[str]:
        names: list[str] = []
        for row in self.rows:
            for k in row.extras:
                if k not in names:
                    names.append(k)
        return names

    def column(self, name: str) -> np.ndarray:
        return np.array([r.value(name) for r in self.rows], dtype=float)

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        return np.array([[r.value(n) for n in names] for r in self.rows], dtype=float).reshape(
            len(self.rows), len(names)
        )

    def labels(self) -> np.ndarray:
        """Labels in days; raises if any row is unlabeled."""
        missing = [r.cell_id for r in self.rows if r.label is None]
        if missing:
            raise DataError(f"{len(missing)} unlabeled cells, e.g. {missing[0]!r}")
        return np.array([r.label for r in self.rows], dtype=float)

    def transformed_labels(self) -> np.ndarray:
        return forward_transform(self.labels(), self.label_transform)

    def labeled(self) -> "FeatureTable":
        return self.subset([i for i, r in enumerate(self.rows) if r.label is not None])

    def subset(self, indices: Iterable[int]) -> "FeatureTable":
        return FeatureTable(tuple(self.rows[i] for i in indices), self.label_transform)


@dataclass(frozen=True)
class SyntheticTruth:
    gamma: np.ndarray  # (p, 2): rows = coefficient dims, cols = (intercept, g)
    sigma: np.ndarray  # (p,)
    sigma_y: float
    theta_by_group: dict[int, np.ndarray]
    group_g_values: dict[int, float]
    membership: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if np.any(np.asarray(self.sigma) <= 0) or self.sigma_y <= 0:
            raise DataError("all scale entries must be > 0")

    def to_json(self) -> dict:
        return {
            "gamma": np.asarray(self.gamma).tolist(),
            "sigma": np.asarray(self.sigma).tolist(),
            "sigma_y": self.sigma_y,
            "theta_by_group": {str(k): v.tolist() for k, v in self.theta_by_group.items()},
            "group_g_values": {str(k): v for k, v in self.group_g_values.items()},
            "membership": dict(self.membership),
        }


# ---------------------------------------------------------------------------
# Feature tables on disk


def _skip_comments(lines: Iterable[str]):
    for lineno, line in enumerate(lines, start=1):
        if line.startswith("#"):
            continue
        yield lineno, line


def _parse_float(text: str, what: str, lineno: int, path) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"{path}:{lineno}: cannot parse {what}={text!r} as a number") from None
    if not math.isfinite(value):
        raise DataError(f"{path}:{lineno}: non-finite {what}={text!r}")
    return value


def load_feature_table(path, label_transform: str = "log10") -> FeatureTable:
    """Read a feature CSV into a :class:`FeatureTable`.

    Rows with an empty label are kept as unlabeled cells. Errors name the
    offending line.
    """
    _check_transform(label_transform)
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        numbered = list(_skip_comments(fh))
    if not numbered:
        raise DataError(f"{path}: empty file")
    reader = csv.reader(line for _, line in numbered)
    header = next(reader)
    if tuple(header[: len(FEATURE_COLUMNS)]) != FEATURE_COLUMNS:
        raise DataError(f"{path}:{numbered[0][0]}: header must start with {','.join(FEATURE_COLUMNS)}")
    extra_names = header[len(FEATURE_COLUMNS):]
    rows = []
    seen: set[str] = set()
    for (lineno, _), fields in zip(numbered[1:], reader):
        if not fields or all(not f.strip() for f in fields):
            continue
        if len(fields) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(fields)}")
        cell_id = fields[0].strip()
        if not cell_id:
            raise DataError(f"{path}:{lineno}: empty cell_id")
        if cell_id in seen:
            raise DataError(f"{path}:{lineno}: duplicate cell_id {cell_id!r}")
        seen.add(cell_id)
        g, f1, f2, f3 = (
            _parse_float(fields[i], FEATURE_COLUMNS[i], lineno, path) for i in range(1, 5)
        )
        label_text = fields[5].strip()
        label = None if label_text == "" else _parse_float(label_text, "label", lineno, path)
        if label is not None and label_transform == "log10" and label <= 0:
            raise DataError(f"{path}:{lineno}: label must be > 0 for log10 transform")
        extras = {
            name: _parse_float(fields[len(FEATURE_COLUMNS) + i], name, lineno, path)
            for i, name in enumerate(extra_names)
        }
        rows.append(FeatureRow(cell_id, g, f1, f2, f3, label, extras))
    return FeatureTable(tuple(rows), label_transform)


def write_feature_table(table: FeatureTable, path, comments: Sequence[str] = ()) -> None:
    """Write ``table`` as CSV using round-trip-exact float formatting."""
    extras = table.extra_columns
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*FEATURE_COLUMNS, *extras])
        for r in table.rows:
            w.writerow(
                [
                    r.cell_id,
                    repr(r.g),
                    repr(r.f1),
                    repr(r.f2),
                    repr(r.f3),
                    "" if r.label is None else repr(r.label),
                    *(repr(r.extras[k]) for k in extras),
                ]
            )


def read_comment_header(path) -> list[str]:
    """Return the ``#`` comment lines at the top of a text artifact."""
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            out.append(line[1:].strip())
    return out


# ---------------------------------------------------------------------------
# Cycle data on disk


def write_cycle_data(cells: Sequence[CellRecord], directory, comments: Sequence[str] = ()) -> None:
    """Write the ``<id>.meta.json`` / ``<id>.cycles.csv`` layout.

    ``comments`` become ``#`` lines atop each CSV and a ``provenance`` list in
    each meta file.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for cell in cells:
        meta = {
            "cell_id": cell.cell_id,
            "protocol": [[c, s] for c, s in cell.protocol.steps],
            "eol_days": cell.eol_days,
        }
        if comments:
            meta["provenance"] = list(comments)
        (directory / f"{cell.cell_id}.meta.json").write_text(
            json.dumps(meta, indent=2) + "\n", encoding="utf-8"
        )
        with (directory / f"{cell.cell_id}.cycles.csv").open("w", newline="", encoding="utf-8") as fh:
            for c in comments:
                fh.write(f"# {c}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cycle", "voltage", "capacity_ah"])
            for idx, curve in cell.cycles.items():
                for v, q in zip(curve.voltage, curve.capacity_ah):
                    w.writerow([idx, repr(float(v)), repr(float(q))])


def _load_cell(meta_path: Path) -> CellRecord:
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    cell_id = meta.get("cell_id") or meta_path.name[: -len(".meta.json")]
    try:
        protocol = ChargeProtocol(tuple(tuple(s) for s in meta["protocol"]), cell_id=cell_id)
    except KeyError:
        raise DataError(f"{meta_path}: missing 'protocol'") from None
    eol = meta.get("eol_days")
    cycles_path = meta_path.with_name(f"{cell_id}.cycles.csv")
    if not cycles_path.exists():
        raise DataError(f"{meta_path}: no matching cycles file {cycles_path.name}")
    points: dict[int, tuple[list[float], list[float]]] = {}
    with cycles_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(line for _, line in _skip_comments(fh))
        header = next(reader, None)
        if header != ["cycle", "voltage", "capacity_ah"]:
            raise DataError(f"{cycles_path}: header must be cycle,voltage,capacity_ah")
        for lineno, fields in enumerate(reader, start=2):
            if len(fields) != 3:
                raise DataError(f"{cycles_path}:{lineno}: expected 3 fields, got {len(fields)}")
            idx = int(_parse_float(fields[0], "cycle", lineno, cycles_path))
            v = _parse_float(fields[1], "voltage", lineno, cycles_path)
            q = _parse_float(fields[2], "capacity_ah", lineno, cycles_path)
            vs, qs = points.setdefault(idx, ([], []))
            vs.append(v)
            qs.append(q)
    cycles = {}
    for idx, (vs, qs) in points.items():
        try:
            cycles[idx] = DischargeCurve(np.array(vs), np.array(qs))
        except DataError as exc:
            raise DataError(f"{cycles_path}: cycle {idx}: {exc}") from None
    return CellRecord(cell_id, protocol, cycles, None if eol is None else float(eol))


def load_cycle_data(directory) -> list[CellRecord]:
    """Load every ``*.meta.json`` / ``*.cycles.csv`` pair in ``directory``.

    Cells lacking any of cycles 2, 10 or 100 are still returned; their
    :attr:`CellRecord.missing_cycles` is non-empty and a warning is logged.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    cells = [_load_cell(p) for p in sorted(directory.glob("*.meta.json"))]
    for cell in cells:
        if cell.missing_cycles:
            log.warning("cell %s lacks cycles %s", cell.cell_id, list(cell.missing_cycles))
    return cells


# ---------------------------------------------------------------------------
# Synthetic fleets

_DEFAULT_GAMMA = ((0.45, -0.05), (-0.30, 0.03), (0.10, 0.0), (0.50, 0.0))


@dataclass(frozen=True)
class FeatureDistribution:
    """Per-feature Gaussian whose mean moves linearly with the group's g."""

    intercept: tuple[float, ...] = (-4.0, -1.8, 1.07)
    slope: tuple[float, ...] = (-0.3, -0.1, 0.0)
    std: tuple[float, ...] = (0.3, 0.15, 0.01)

    def means(self, g: float) -> np.ndarray:
        return np.asarray(self.intercept) + np.asarray(self.slope) * g


@dataclass(frozen=True)
class SyntheticConfig:
    n_groups: int = 8
    cells_per_group: int = 15
    g_range: tuple[float, float] = (2.0, 6.0)
    gamma: tuple[tuple[float, float], ...] = _DEFAULT_GAMMA
    sigma: tuple[float, ...] = (0.05, 0.02, 0.02, 0.05)
    sigma_y: float = 0.03
    feature_distributions: FeatureDistribution = field(default_factory=FeatureDistribution)
    g_jitter: float = 0.0
    label_transform: str = "log10"

    def __post_init__(self):
        if self.n_groups < 1 or self.cells_per_group < 1:
            raise DataError("n_groups and cells_per_group must be >= 1")
        gamma = np.asarray(self.gamma, dtype=float)
        p = len(self.feature_distributions.intercept) + 1
        if gamma.shape != (p, 2):
            raise DataError(f"gamma must have shape ({p}, 2), got {gamma.shape}")
        if len(self.sigma) != p:
            raise DataError(f"sigma must have {p} entries")
        if any(s <= 0 for s in self.sigma) or self.sigma_y <= 0:
            raise DataError("all scales must be > 0")
        if any(s <= 0 for s in self.feature_distributions.std):
            raise DataError("feature std entries must be > 0")
        if self.g_jitter < 0:
            raise DataError("g_jitter must be >= 0")
        lo, hi = self.g_range
        if not lo <= hi:
            raise DataError("g_range must be (low, high) with low <= high")
        _check_transform(self.label_transform)

    @classmethod
    def from_json(cls, doc: Mapping) -> "SyntheticConfig":
        doc = dict(doc)
        fd = doc.pop("feature_distributions", None)
        kwargs = {}
        for key, value in doc.items():
            if key in ("gamma",):
                value = tuple(tuple(r) for r in value)
            elif key in ("sigma", "g_range"):
                value = tuple(value)
            kwargs[key] = value
        if fd is not None:
            kwargs["feature_distributions"] = FeatureDistribution(
                **{k: tuple(v) for k, v in fd.items()}
            )
        return cls(**kwargs)

    def to_json(self) -> dict:
        fd = self.feature_distributions
        return {
            "n_groups": self.n_groups,
            "cells_per_group": self.cells_per_group,
            "g_range": list(self.g_range),
            "gamma": [list(r) for r in self.gamma],
            "sigma": list(self.sigma),
            "sigma_y": self.sigma_y,
            "feature_distributions": {
                "intercept": list(fd.intercept),
                "slope": list(fd.slope),
                "std": list(fd.std),
            },
            "g_jitter": self.g_jitter,
            "label_transform": self.label_transform,
        }


def generate_synthetic(config: SyntheticConfig, seed: int) -> tuple[FeatureTable, SyntheticTruth]:
    """Draw a fleet forward through the two-level generative model.

    Per group ``j``: ``g_j ~ U(g_range)``, ``theta_j ~ N(gamma @ [1, g_j],
    diag(sigma**2))``. Per cell: features from the group-shifted Gaussians,
    label ``theta_j @ [1, x] + N(0, sigma_y**2)`` in transformed units, stored
    back-transformed to days.
    """
    rng = np.random.default_rng(seed)
    gamma = np.asarray(config.gamma, dtype=float)
    sigma = np.asarray(config.sigma, dtype=float)
    fd = config.feature_distributions
    std = np.asarray(fd.std, dtype=float)
    lo, hi = config.g_range

    rows = []
    thetas: dict[int, np.ndarray] = {}
    g_values: dict[int, float] = {}
    membership: dict[str, int] = {}
    for j in range(config.n_groups):
        g_j = float(rng.uniform(lo, hi))
        theta = gamma @ np.array([1.0, g_j]) + sigma * rng.standard_normal(sigma.size)
        thetas[j] = theta
        g_values[j] = g_j
        x = fd.means(g_j) + std * rng.standard_normal((config.cells_per_group, std.size))
        y = theta[0] + x @ theta[1:] + config.sigma_y * rng.standard_normal(config.cells_per_group)
        g_cells = g_j + config.g_jitter * rng.standard_normal(config.cells_per_group)
        days = inverse_transform(y, config.label_transform)
        for i in range(config.cells_per_group):
            cell_id = f"syn-{j:02d}-{i:03d}"
            membership[cell_id] = j
            rows.append(
                FeatureRow(
                    cell_id,
                    float(g_cells[i]),
                    float(x[i, 0]),
                    float(x[i, 1]),
                    float(x[i, 2]),
                    float(days[i]),
                )
            )
    truth = SyntheticTruth(gamma, sigma, float(config.sigma_y), thetas, g_values, membership)
    return FeatureTable(tuple(rows), config.label_transform), truth


def synthetic_cycle_fleet(
    n_cells: int,
    seed: int,
    *,
    vmax: float = 3.6,
    vmin: float = 1.9,
    n_points: int = 200,
) -> list[CellRecord]:
    """Toy cells with cycle 2/10/100 discharge curves.

    Each cell gets a random three-step protocol ending in 1C over the last
    20 % SOC. Fade between cycles 10 and 100 is a Gaussian dip in Q(V) whose
    depth grows with charging rate; deeper dips get shorter lifetimes.
    """
    rng = np.random.default_rng(seed)
    voltage = np.linspace(vmax, vmin, n_points)
    shape = 1.0 / (1.0 + np.exp((voltage - 3.2) / 0.08))
    shape = (shape - shape[0]) / (shape[-1] - shape[0])
    cells = []
    for k in range(n_cells):
        c1 = rng.uniform(3.0, 8.0)
        c2 = rng.uniform(2.0, c1)
        protocol = ChargeProtocol(((c1, 0.4), (c2, 0.4), (1.0, 0.2)), cell_id=f"cell{k:03d}")
        g = 0.4 * c1 + 0.4 * c2 + 0.2
        q_nominal = 1.07 + 0.01 * rng.standard_normal()
        log_depth = -2.4 + 0.12 * g + 0.15 * rng.standard_normal()
        depth = 10.0**log_depth
        dip = np.exp(-0.5 * ((voltage - 3.25) / 0.12) ** 2)
        q10 = q_nominal * shape
        q100 = q10 - depth * dip * shape  # keeps Q(vmax) = 0 and monotone
        q2 = (q_nominal + 0.002) * shape
        eol = 10.0 ** (1.0 - 0.9 * (log_depth + 2.4) + 0.03 * rng.standard_normal()) * 10
        cycles = {
            2: DischargeCurve(voltage, np.maximum.accumulate(q2)),
            10: DischargeCurve(voltage, np.maximum.accumulate(q10)),
            100: DischargeCurve(voltage, np.maximum.accumulate(q100)),
        }
        cells.append(CellRecord(protocol.cell_id, protocol, cycles, float(eol)))
    return cells
