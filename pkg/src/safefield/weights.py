"""BIP frequency, run consequence and shared-responsibility fields.

All three fields are evaluated on a fixed grid, separately for each of the
three velocity strata, and later multiplied together as integration weights.
"""

from __future__ import annotations

import csv
import gzip
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .bip_data import (
    DEFAULT_PARK, FAIR_ANGLE_MAX, FAIR_ANGLE_MIN, INFIELD, POSITIONS,
    BipRecord, Park, normalize_bip_type, positions_for, ray_angle, record_arrays,
)

log = logging.getLogger(__name__)

VELOCITIES = (1, 2, 3)
LINEAR_WEIGHTS = {"Single": 0.5, "Double": 0.8, "Triple": 1.1}
PLANAR_SPACING = 4.0
ANGULAR_SPACING = 0.5
PLANAR_BW_FLOOR = 10.0
ANGULAR_BW_FLOOR = 2.0
SPARSE_FAILURES = 25
DEFAULT_TEAMS = 30
_CHUNK = 20_000


@dataclass(frozen=True)
class Grid:
    """Midpoint grid over the park (planar) or the fair-territory fan (angular)."""

    kind: str
    spacing: float
    park: Park = DEFAULT_PARK

    def __post_init__(self):
        if self.kind not in ("planar", "angular"):
            raise ValueError(f"unknown grid kind {self.kind!r}")
        if not self.spacing > 0:
            raise ValueError("grid spacing must be positive")
        if self.kind == "planar":
            r = self.park.fence_radius
            n = int(math.ceil(r / self.spacing))
            xs = self.spacing * (np.arange(-n, n) + 0.5)
            ys = self.spacing * (np.arange(0, n) + 0.5)
            gx, gy = np.meshgrid(xs, ys, indexing="ij")
            inside = self.park.contains(gx, gy)
            ix, iy = np.nonzero(inside)
            object.__setattr__(self, "axes", (xs, ys))
            object.__setattr__(self, "lattice_index", (ix, iy))
            object.__setattr__(self, "points", np.column_stack([xs[ix], ys[iy]]))
        else:
            span = FAIR_ANGLE_MAX - FAIR_ANGLE_MIN
            n = int(round(span / self.spacing))
            if not math.isclose(n * self.spacing, span):
                raise ValueError("angular spacing must divide the fair span")
            pts = FAIR_ANGLE_MIN + self.spacing * (np.arange(n) + 0.5)
            object.__setattr__(self, "points", pts)
        if len(self.points) == 0:
            raise ValueError("grid has no points")

    @property
    def cell_measure(self) -> float:
        return self.spacing**2 if self.kind == "planar" else self.spacing

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def velocities(self) -> tuple[int, ...]:
        return VELOCITIES

    def xy(self):
        """Planar coordinates of the points (angular points on a unit ray)."""
        if self.kind == "planar":
            return self.points[:, 0], self.points[:, 1]
        rad = np.radians(self.points)
        return np.cos(rad), np.sin(rad)

    def matches(self, other: "Grid") -> bool:
        return (self.kind == other.kind and self.spacing == other.spacing
                and self.park == other.park)


def planar_grid(spacing: float = PLANAR_SPACING, park: Park = DEFAULT_PARK) -> Grid:
    return Grid("planar", spacing, park)


def angular_grid(spacing: float = ANGULAR_SPACING) -> Grid:
    return Grid("angular", spacing)


def grid_for(bip_type: str, spacing: float | None = None, park: Park = DEFAULT_PARK) -> Grid:
    if normalize_bip_type(bip_type) == "Grounder":
        return angular_grid(spacing or ANGULAR_SPACING)
    return planar_grid(spacing or PLANAR_SPACING, park)


# -- kernel density ---------------------------------------------------------

def scott_bandwidth(data: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """Per-axis Scott's rule ``sd * n^(-1/(d+4))``, floored at ``floor``."""
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    n, d = data.shape
    sd = data.std(axis=0, ddof=1) if n > 1 else np.zeros(d)
    return np.maximum(sd * n ** (-1.0 / (d + 4)), floor)


def _kernel_mass_planar(px, py, grid: Grid, bandwidth) -> np.ndarray:
    hx, hy = np.broadcast_to(np.asarray(bandwidth, dtype=float), (2,))
    xs, ys = grid.axes
    total = np.zeros((len(xs), len(ys)))
    for start in range(0, len(px), _CHUNK):
        sx = px[start:start + _CHUNK]
        sy = py[start:start + _CHUNK]
        kx = np.exp(-0.5 * ((xs[:, None] - sx[None, :]) / hx) ** 2)
        ky = np.exp(-0.5 * ((ys[:, None] - sy[None, :]) / hy) ** 2)
        total += kx @ ky.T
    ix, iy = grid.lattice_index
    return total[ix, iy] / (2 * np.pi * hx * hy)


def _kernel_mass_angular(angles, grid: Grid, bandwidth) -> np.ndarray:
    # angles cannot cross the foul lines: reflect kernels at both ends
    h = float(np.asarray(bandwidth).ravel()[0])
    total = np.zeros(grid.n_points)
    for start in range(0, len(angles), _CHUNK):
        a = angles[start:start + _CHUNK]
        for src in (a, 2 * FAIR_ANGLE_MIN - a, 2 * FAIR_ANGLE_MAX - a):
            total += np.exp(-0.5 * ((grid.points[:, None] - src[None, :]) / h) ** 2).sum(axis=1)
    return total / (math.sqrt(2 * np.pi) * h)


def kernel_mass(coords: np.ndarray, grid: Grid, bandwidth) -> np.ndarray:
    """Unnormalised Gaussian kernel sum at each grid point.

    ``coords`` is (n, 2) feet for a planar grid or (n,) degrees for an
    angular one.
    """
    coords = np.asarray(coords, dtype=float)
    if grid.kind == "planar":
        coords = coords.reshape(-1, 2)
        return _kernel_mass_planar(coords[:, 0], coords[:, 1], grid, bandwidth)
    return _kernel_mass_angular(coords.ravel(), grid, bandwidth)


def _normalize_density(mass: np.ndarray, grid: Grid) -> np.ndarray:
    total = mass.sum() * grid.cell_measure
    if not total > 0:
        raise ValueError("kernel mass vanishes on the grid")
    return mass / total


def kde_2d(points, grid: Grid, bandwidth) -> np.ndarray:
    """Gaussian product-kernel density renormalised to integrate to one on ``grid``."""
    if grid.kind != "planar":
        raise ValueError("kde_2d needs a planar grid")
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(points) < 2:
        raise ValueError("kde needs at least 2 points")
    if np.any(np.asarray(bandwidth) <= 0):
        raise ValueError("bandwidth must be positive")
    return _normalize_density(kernel_mass(points, grid, bandwidth), grid)


def kde_1d(angles, grid: Grid, bandwidth) -> np.ndarray:
    """Gaussian kernel density of angles renormalised to integrate to one on ``grid``."""
    if grid.kind != "angular":
        raise ValueError("kde_1d needs an angular grid")
    angles = np.asarray(angles, dtype=float).ravel()
    if len(angles) < 2:
        raise ValueError("kde needs at least 2 points")
    if np.any(np.asarray(bandwidth) <= 0):
        raise ValueError("bandwidth must be positive")
    return _normalize_density(kernel_mass(angles, grid, bandwidth), grid)


# -- field helpers ----------------------------------------------------------

def record_coords(records: Sequence[BipRecord], grid: Grid) -> np.ndarray:
    arr = record_arrays(records)
    if grid.kind == "planar":
        return np.column_stack([arr["x"], arr["y"]])
    if len(records) == 0:
        return np.zeros(0)
    return ray_angle(arr["x"], arr["y"])


def _bandwidth(coords: np.ndarray, grid: Grid, bandwidth):
    if bandwidth is not None:
        return bandwidth
    floor = PLANAR_BW_FLOOR if grid.kind == "planar" else ANGULAR_BW_FLOOR
    if len(coords) < 2:
        return floor
    return scott_bandwidth(coords, floor)


def _grid_coords(grid: Grid) -> np.ndarray:
    return grid.points if grid.kind == "planar" else grid.points[:, None]


def fill_from_nearest(values: np.ndarray, defined: np.ndarray, grid: Grid, what: str) -> np.ndarray:
    """Copy rows of ``values`` at undefined points from the nearest defined point."""
    if defined.all():
        return values
    if not defined.any():
        raise ValueError(f"{what}: no grid point has kernel mass")
    pts = _grid_coords(grid)
    tree = cKDTree(pts[defined])
    _, nearest = tree.query(pts[~defined])
    out = values.copy()
    out[~defined] = values[defined][nearest]
    log.info("%s: %d grid points filled from nearest point with mass", what, int((~defined).sum()))
    return out


def _velocity_of(records):
    return np.array([r.velocity for r in records], dtype=int)


# -- the three fields -------------------------------------------------------

def bip_frequency(records: Sequence[BipRecord], grid: Grid, bandwidth=None) -> np.ndarray:
    """Per-velocity BIP density on ``grid``, shape (points, 3)."""
    coords = record_coords(records, grid)
    vel = _velocity_of(records)
    out = np.empty((grid.n_points, len(VELOCITIES)))
    for j, v in enumerate(VELOCITIES):
        c = coords[vel == v]
        if len(c) < 2:
            log.warning("velocity %d has %d BIPs; using all velocities for its density", v, len(c))
            c = coords
        h = _bandwidth(c, grid, bandwidth)
        out[:, j] = kde_2d(c, grid, h) if grid.kind == "planar" else kde_1d(c, grid, h)
    return out


def run_consequence(failures: Sequence[BipRecord], grid: Grid, bandwidth=None) -> np.ndarray:
    """Expected runs of a missed play, shape (points, 3).

    At each point the single/double/triple kernel masses are turned into
    relative frequencies and combined with linear weights 0.5/0.8/1.1.
    Velocity strata with fewer than 25 failures borrow all failures.
    """
    failures = [r for r in failures if r.hit_result is not None]
    if not failures:
        raise ValueError("run consequence needs at least one failure")
    coords = record_coords(failures, grid)
    vel = _velocity_of(failures)
    hits = np.array([r.hit_result for r in failures])
    weights = np.array([LINEAR_WEIGHTS[h] for h in ("Single", "Double", "Triple")])
    out = np.empty((grid.n_points, len(VELOCITIES)))
    for j, v in enumerate(VELOCITIES):
        sel = vel == v
        if sel.sum() < SPARSE_FAILURES:
            log.info("velocity %d has %d failures; pooling velocities for run consequence",
                     v, int(sel.sum()))
            sel = np.ones_like(sel)
        h = _bandwidth(coords[sel], grid, bandwidth)
        mass = np.stack([kernel_mass(coords[sel & (hits == name)], grid, h)
                         for name in ("Single", "Double", "Triple")], axis=1)
        total = mass.sum(axis=1)
        defined = total > 0
        rel = np.zeros_like(mass)
        rel[defined] = mass[defined] / total[defined, None]
        rel = fill_from_nearest(rel, defined, grid, f"run consequence v={v}")
        out[:, j] = np.clip(rel @ weights, weights.min(), weights.max())
    return out


def shared_responsibility(
    successes: Sequence[BipRecord],
    grid: Grid,
    bandwidth=None,
    positions: Sequence[str] | None = None,
) -> np.ndarray:
    """Share of successful plays made by each position, shape (points, 3, positions)."""
    successes = [r for r in successes if r.success]
    if not successes:
        raise ValueError("shared responsibility needs at least one success")
    if positions is None:
        positions = INFIELD if grid.kind == "angular" else POSITIONS
    coords = record_coords(successes, grid)
    vel = _velocity_of(successes)
    pos = np.array([r.position for r in successes])
    out = np.empty((grid.n_points, len(VELOCITIES), len(positions)))
    for j, v in enumerate(VELOCITIES):
        sel = vel == v
        if not sel.any():
            log.info("velocity %d has no successes; pooling velocities for responsibility", v)
            sel = np.ones_like(sel)
        h = _bandwidth(coords[sel], grid, bandwidth)
        mass = np.stack([kernel_mass(coords[sel & (pos == p)], grid, h) for p in positions],
                        axis=1)
        total = mass.sum(axis=1)
        defined = total > 0
        share = np.zeros_like(mass)
        share[defined] = mass[defined] / total[defined, None]
        out[:, j, :] = fill_from_nearest(share, defined, grid, f"responsibility v={v}")
    return out


@dataclass(frozen=True)
class WeightField:
    """Gridded frequency, run value and responsibility for one BIP type.

    ``volume[v]`` is the number of BIPs of this type at velocity ``v`` a
    fielder faces over a season, so integrals come out in runs per season.
    """

    grid: Grid
    bip_type: str
    positions: tuple
    freq: np.ndarray            # (points, 3)
    run_value: np.ndarray       # (points, 3)
    responsibility: np.ndarray  # (points, 3, positions)
    volume: np.ndarray          # (3,)

    def position_index(self, position: str) -> int:
        try:
            return self.positions.index(position)
        except ValueError:
            raise ValueError(f"position {position} not modelled for {self.bip_type}") from None

    def integration_weights(self, position: str) -> np.ndarray:
        """Weights multiplying the probability gap, shape (points, 3)."""
        s = self.responsibility[:, :, self.position_index(position)]
        return self.volume[None, :] * self.freq * self.run_value * s * self.grid.cell_measure


def build_weight_field(
    records: Sequence[BipRecord],
    bip_type: str,
    grid: Grid | None = None,
    bandwidth=None,
    n_teams: int = DEFAULT_TEAMS,
    season_volume: float | None = None,
) -> WeightField:
    """Estimate all three fields for one BIP type from a season of records.

    ``season_volume`` (BIPs of this type per team-season) defaults to the
    record count divided by ``n_teams``; it is split across velocities by
    their observed shares.
    """
    bip_type = normalize_bip_type(bip_type)
    recs = [r for r in records if r.bip_type == bip_type]
    if not recs:
        raise ValueError(f"no {bip_type} records")
    grid = grid or grid_for(bip_type)
    vel = _velocity_of(recs)
    share = np.array([(vel == v).mean() for v in VELOCITIES])
    total = season_volume if season_volume is not None else len(recs) / n_teams
    return WeightField(
        grid=grid,
        bip_type=bip_type,
        positions=tuple(positions_for(bip_type)),
        freq=bip_frequency(recs, grid, bandwidth),
        run_value=run_consequence([r for r in recs if not r.success], grid, bandwidth),
        responsibility=shared_responsibility([r for r in recs if r.success], grid, bandwidth,
                                             positions_for(bip_type)),
        volume=total * share,
    )


# -- serialization ----------------------------------------------------------

def save_weight_field(wf: WeightField, path: str | Path) -> None:
    """Write a gzipped CSV, one row per (grid point, velocity)."""
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["bip_type", "grid_kind", "spacing", "fence_radius", "x", "y", "theta",
                  "velocity", "volume", "freq", "run_value"]
                 + [f"s_{p}" for p in wf.positions])
    g = wf.grid
    for i in range(g.n_points):
        if g.kind == "planar":
            coord = [repr(float(g.points[i, 0])), repr(float(g.points[i, 1])), ""]
        else:
            coord = ["", "", repr(float(g.points[i]))]
        for j, v in enumerate(VELOCITIES):
            out.writerow([wf.bip_type, g.kind, repr(g.spacing), repr(g.park.fence_radius),
                          *coord, v, repr(float(wf.volume[j])), repr(float(wf.freq[i, j])),
                          repr(float(wf.run_value[i, j]))]
                         + [repr(float(s)) for s in wf.responsibility[i, j]])
    with Path(path).open("wb") as raw:
        with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as gz:
            gz.write(buf.getvalue().encode("utf-8"))


def load_weight_field(path: str | Path) -> WeightField:
    with gzip.open(path, "rt", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    positions = tuple(h[2:] for h in header[11:])
    first = body[0]
    kind, spacing, radius = first[1], float(first[2]), float(first[3])
    grid = Grid(kind, spacing, Park(radius))
    n = grid.n_points
    if len(body) != 3 * n:
        raise ValueError("weight file does not match its grid")
    data = np.array([[float(c) for c in r[8:]] for r in body]).reshape(n, 3, -1)
    return WeightField(
        grid=grid,
        bip_type=first[0],
        positions=positions,
        freq=data[:, :, 1].copy(),
        run_value=data[:, :, 2].copy(),
        responsibility=data[:, :, 3:].copy(),
        volume=data[0, :, 0].copy(),
    )
