"""Ball-in-play records, field geometry, centroids and model covariates.

Coordinates are in feet with home plate at the origin, ``x`` positive toward
the right-field (first-base) line and ``y`` positive into the field.  Fair
territory is the quarter-plane ``|x| <= y``; the angle of a point is measured
counter-clockwise from the ``+x`` axis, so the first-base line sits at 45
degrees and the third-base line at 135 degrees.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BIP_TYPES = ("Flyball", "Liner", "Grounder")
POSITIONS = ("1B", "2B", "3B", "SS", "LF", "CF", "RF")
INFIELD = ("1B", "2B", "3B", "SS")
OUTFIELD = ("LF", "CF", "RF")
HIT_RESULTS = ("Single", "Double", "Triple")
CSV_COLUMNS = (
    "year", "bip_type", "x", "y", "velocity",
    "fielder_id", "position", "outcome", "hit_result",
)
SCHEMA_VERSIONS = ("v1",)

FAIR_ANGLE_MIN = 45.0
FAIR_ANGLE_MAX = 135.0
DEFAULT_FENCE_RADIUS = 420.0
FLY_MAX_DISTANCE = 250.0

CENTROID_SPACING = 5.0
CENTROID_BANDWIDTH = 15.0
# low-support cells are excluded from the argmax; a pseudo-count pulls the
# proportion toward the overall rate so one isolated catch cannot win
CENTROID_MIN_SUPPORT = 0.05
CENTROID_PSEUDO_COUNT = 1.0


class BipDataError(ValueError):
    """Raised when BIP input fails validation.

    ``errors`` holds one message per offending line.
    """

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        shown = "; ".join(self.errors[:5])
        more = f" (+{len(self.errors) - 5} more)" if len(self.errors) > 5 else ""
        super().__init__(shown + more)


def normalize_bip_type(value: str) -> str:
    for name in BIP_TYPES:
        if value.strip().lower() == name.lower():
            return name
    raise ValueError(f"unknown bip_type {value!r}")


def positions_for(bip_type: str) -> tuple[str, ...]:
    """Positions modeled for a BIP type (7 for flies/liners, 4 for grounders)."""
    return INFIELD if normalize_bip_type(bip_type) == "Grounder" else POSITIONS


@dataclass(frozen=True)
class Park:
    """Maximal park polygon: fair territory inside a circular fence."""

    fence_radius: float = DEFAULT_FENCE_RADIUS

    def contains(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        tol = 1e-9
        return (np.abs(x) <= y + tol) & (np.hypot(x, y) <= self.fence_radius + tol)


DEFAULT_PARK = Park()


@dataclass(frozen=True)
class BipRecord:
    year: int
    bip_type: str
    x: float
    y: float
    velocity: int
    fielder_id: str
    position: str
    outcome: str
    hit_result: str | None = None

    @property
    def success(self) -> bool:
        return self.outcome == "Success"


def validate_record(rec: BipRecord, park: Park = DEFAULT_PARK) -> list[str]:
    """Return the list of invariant violations for one record (empty if valid)."""
    problems = []
    if rec.bip_type not in BIP_TYPES:
        problems.append(f"unknown bip_type {rec.bip_type!r}")
    if rec.velocity not in (1, 2, 3):
        problems.append("velocity out of range")
    if rec.position not in POSITIONS:
        problems.append(f"unknown position {rec.position!r}")
    if rec.outcome not in ("Success", "Failure"):
        problems.append(f"unknown outcome {rec.outcome!r}")
    elif rec.outcome == "Success" and rec.hit_result is not None:
        problems.append("successful play with a hit result")
    elif rec.outcome == "Failure" and rec.hit_result not in HIT_RESULTS:
        problems.append("failed play without a hit result")
    if rec.bip_type == "Grounder" and rec.position not in INFIELD:
        problems.append("grounder assigned to an outfield position")
    if not (math.isfinite(rec.x) and math.isfinite(rec.y)):
        problems.append("non-finite location")
    elif not bool(park.contains(rec.x, rec.y)):
        problems.append("location outside park")
    return problems


def _parse_row(row: list[str]) -> BipRecord:
    if len(row) != len(CSV_COLUMNS):
        raise ValueError(f"expected {len(CSV_COLUMNS)} fields, got {len(row)}")
    year, bip_type, x, y, velocity, fielder_id, position, outcome, hit = (
        field.strip() for field in row
    )
    return BipRecord(
        year=int(year),
        bip_type=normalize_bip_type(bip_type),
        x=float(x),
        y=float(y),
        velocity=int(velocity),
        fielder_id=fielder_id,
        position=position.upper(),
        outcome=outcome.capitalize(),
        hit_result=(hit.capitalize() if hit and hit.lower() != "none" else None),
    )


def load_bip_records(
    path: str | Path, schema_version: str = "v1", park: Park = DEFAULT_PARK
) -> list[BipRecord]:
    """Read a BIP CSV file.

    Every row is checked; if any row is malformed or violates a record
    invariant a :class:`BipDataError` listing each failure with its line
    number is raised and nothing is returned.
    """
    if schema_version not in SCHEMA_VERSIONS:
        raise BipDataError([f"unsupported schema version {schema_version!r}"])
    path = Path(path)
    if not path.exists():
        raise BipDataError([f"no such file: {path}"])
    records: list[BipRecord] = []
    errors: list[str] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_COLUMNS:
            raise BipDataError([f"header does not match schema {schema_version}, line 1"])
        for row in reader:
            line = reader.line_num
            if not row or all(not f.strip() for f in row):
                continue
            try:
                rec = _parse_row(row)
            except ValueError as exc:
                errors.append(f"malformed row ({exc}), line {line}")
                continue
            problems = validate_record(rec, park)
            if problems:
                errors.extend(f"{p}, line {line}" for p in problems)
            else:
                records.append(rec)
    if errors:
        raise BipDataError(errors)
    return records


def write_bip_records(records: Iterable[BipRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([
                r.year, r.bip_type, repr(float(r.x)), repr(float(r.y)), r.velocity,
                r.fielder_id, r.position, r.outcome, r.hit_result or "",
            ])


def record_arrays(records: Sequence[BipRecord]) -> dict[str, np.ndarray]:
    """Columnar view of a record list."""
    return {
        "x": np.array([r.x for r in records], dtype=float),
        "y": np.array([r.y for r in records], dtype=float),
        "velocity": np.array([r.velocity for r in records], dtype=float),
        "success": np.array([r.success for r in records], dtype=bool),
        "position": np.array([r.position for r in records], dtype=object),
    }


# -- geometry ---------------------------------------------------------------

def ray_angle(x, y):
    """Angle in degrees of the home-plate ray through ``(x, y)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any((x == 0.0) & (y == 0.0)):
        raise ValueError("undefined angle: location at home plate")
    return np.degrees(np.arctan2(y, x))


@dataclass(frozen=True)
class Centroid:
    """Estimated starting location of a position for one BIP type."""

    position: str
    bip_type: str
    x0: float
    y0: float
    phi0: float

    @classmethod
    def at(cls, position: str, bip_type: str, x0: float, y0: float) -> "Centroid":
        return cls(position, normalize_bip_type(bip_type), float(x0), float(y0),
                   float(ray_angle(x0, y0)))

    @property
    def radius(self) -> float:
        return math.hypot(self.x0, self.y0)

    def to_dict(self) -> dict:
        return asdict(self)


def save_centroids(centroids: Iterable[Centroid], path: str | Path) -> None:
    payload = [c.to_dict() for c in centroids]
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_centroids(path: str | Path) -> list[Centroid]:
    return [Centroid(**d) for d in json.loads(Path(path).read_text())]


def field_grid(spacing: float, park: Park = DEFAULT_PARK):
    """Axis vectors and in-park mask of a square lattice through home plate."""
    r = park.fence_radius
    n = int(math.floor(r / spacing + 1e-9))
    xs = spacing * np.arange(-n, n + 1)
    ys = spacing * np.arange(0, n + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return xs, ys, park.contains(gx, gy)


def _kernel_sums(xs, ys, px, py, bandwidth):
    # separable Gaussian product kernel, unnormalised (each point weighs <= 1)
    if len(px) == 0:
        return np.zeros((len(xs), len(ys)))
    kx = np.exp(-0.5 * ((xs[:, None] - px[None, :]) / bandwidth) ** 2)
    ky = np.exp(-0.5 * ((ys[:, None] - py[None, :]) / bandwidth) ** 2)
    return kx @ ky.T


def _centroid_pool(records, position, bip_type):
    bip_type = normalize_bip_type(bip_type)
    # same rows the model sees: plays made by, or misses charged to, the position
    return [r for r in records if r.bip_type == bip_type and r.position == position]


def smoothed_success_proportion(
    records: Sequence[BipRecord],
    position: str,
    bip_type: str,
    spacing: float = CENTROID_SPACING,
    bandwidth: float = CENTROID_BANDWIDTH,
    park: Park = DEFAULT_PARK,
):
    """Kernel-smoothed success proportion of ``position`` on the centroid grid.

    Returns ``(xs, ys, proportion, support)`` where ``support`` is the
    kernel-weighted count of eligible plays and ``proportion`` is NaN on
    cells outside the park or below the support threshold.
    """
    pool = _centroid_pool(records, position, bip_type)
    arr = record_arrays(pool)
    xs, ys, inside = field_grid(spacing, park)
    succ = arr["success"]
    made = _kernel_sums(xs, ys, arr["x"][succ], arr["y"][succ], bandwidth)
    support = _kernel_sums(xs, ys, arr["x"], arr["y"], bandwidth)
    overall = succ.mean() if len(succ) else 0.0
    a = CENTROID_PSEUDO_COUNT
    prop = (made + a * overall) / (support + a)
    support_in = np.where(inside, support, 0.0)
    keep = inside & (support >= CENTROID_MIN_SUPPORT * support_in.max())
    prop = np.where(keep, prop, np.nan)
    return xs, ys, prop, support


def estimate_centroid(
    records: Sequence[BipRecord],
    position: str,
    bip_type: str,
    spacing: float = CENTROID_SPACING,
    bandwidth: float = CENTROID_BANDWIDTH,
    park: Park = DEFAULT_PARK,
) -> Centroid:
    """Grid argmax of the smoothed success proportion at a position.

    Ties (within 1e-12) go to the cell nearest home plate, then to the
    smaller ``x``.
    """
    bip_type = normalize_bip_type(bip_type)
    if not any(r.success and r.position == position and r.bip_type == bip_type
               for r in records):
        raise ValueError("no successes for centroid")
    xs, ys, prop, _ = smoothed_success_proportion(
        records, position, bip_type, spacing, bandwidth, park)
    best = np.nanmax(prop)
    ii, jj = np.nonzero(prop >= best - 1e-12 * max(1.0, abs(best)))
    cx, cy = xs[ii], ys[jj]
    k = np.lexsort((cx, np.hypot(cx, cy)))[0]
    return Centroid.at(position, bip_type, cx[k], cy[k])


# -- eligibility ------------------------------------------------------------

def partition_eligible(
    records: Sequence[BipRecord],
    position: str,
    bip_type: str,
    centroid: Centroid,
    max_distance: float = FLY_MAX_DISTANCE,
) -> dict[str, list[BipRecord]]:
    """Split records of one BIP type into eligibility classes.

    Keys: ``retained``, ``other_position`` (play made by, or charged to,
    another position), ``too_far`` (fly/liner beyond ``max_distance`` of the
    centroid) and ``other_type``.
    """
    bip_type = normalize_bip_type(bip_type)
    out: dict[str, list[BipRecord]] = {
        "retained": [], "other_position": [], "too_far": [], "other_type": []}
    for r in records:
        if r.bip_type != bip_type:
            out["other_type"].append(r)
        elif r.position != position:
            out["other_position"].append(r)
        elif bip_type != "Grounder" and math.hypot(
                r.x - centroid.x0, r.y - centroid.y0) > max_distance:
            out["too_far"].append(r)
        else:
            out["retained"].append(r)
    return out


def filter_eligible(
    records: Sequence[BipRecord],
    position: str,
    bip_type: str,
    centroid: Centroid,
    max_distance: float = FLY_MAX_DISTANCE,
) -> list[BipRecord]:
    """Records usable for the ``position`` model.

    A row counts when the studied position made the play or when nobody did
    and the miss is charged to the studied position's fielder.  Plays made
    by other positions are missing data, and flies/liners landing more than
    ``max_distance`` feet from the centroid are dropped.
    """
    return partition_eligible(records, position, bip_type, centroid, max_distance)["retained"]


# -- covariates -------------------------------------------------------------

@dataclass(frozen=True)
class CovariateRow:
    """Model-ready row.

    ``distance`` is feet to the centroid for flies/liners and the absolute
    angle in degrees for grounders; ``direction`` is the forward indicator
    for flies/liners and the left indicator for grounders.
    """

    outcome: int
    distance: float
    velocity: float
    direction: int


def fly_features(x, y, centroid: Centroid):
    """Distance to the centroid and forward indicator, vectorised."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dist = np.hypot(x - centroid.x0, y - centroid.y0)
    forward = (np.hypot(x, y) < centroid.radius).astype(float)
    return dist, forward


def ground_features(x, y, centroid: Centroid):
    """Angle from the centroid ray and left indicator, vectorised."""
    return angle_features(ray_angle(x, y), centroid)


def angle_features(phi, centroid: Centroid):
    phi = np.asarray(phi, dtype=float)
    theta = np.abs(phi - centroid.phi0)
    # fielder faces home plate: his left is the first-base (smaller-angle) side
    left = (phi < centroid.phi0).astype(float)
    return theta, left


def build_fly_covariates(record: BipRecord, centroid: Centroid) -> CovariateRow:
    d, f = fly_features(record.x, record.y, centroid)
    return CovariateRow(int(record.success), float(d), float(record.velocity), int(f))


def build_ground_covariates(record: BipRecord, centroid: Centroid) -> CovariateRow:
    theta, left = ground_features(record.x, record.y, centroid)
    return CovariateRow(int(record.success), float(theta), float(record.velocity), int(left))


def build_covariates(records: Sequence[BipRecord], centroid: Centroid) -> list[CovariateRow]:
    build = build_ground_covariates if centroid.bip_type == "Grounder" else build_fly_covariates
    return [build(r, centroid) for r in records]


def covariate_arrays(records: Sequence[BipRecord], centroid: Centroid) -> dict[str, np.ndarray]:
    """Vectorised covariates for a record list, keyed like :class:`CovariateRow`."""
    arr = record_arrays(records)
    if centroid.bip_type == "Grounder":
        dist, direction = ground_features(arr["x"], arr["y"], centroid)
    else:
        dist, direction = fly_features(arr["x"], arr["y"], centroid)
    return {
        "outcome": arr["success"].astype(float),
        "distance": dist,
        "velocity": arr["velocity"],
        "direction": direction,
    }
