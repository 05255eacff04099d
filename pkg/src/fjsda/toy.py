"""The wealth/health hexagon benchmark.

Target: uniform on a hexagon in [-1, 1]^2. Source: a fixed number of
points drawn uniformly inside each quadrant of the hexagon, which makes
the joint importance piecewise constant over quadrants.

Quadrants are always ordered (++, +-, -+, --) in (x, y) sign, with
x = 0 or y = 0 counted as nonnegative.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate
from shapely.geometry import Polygon, box

from . import theory

QUADRANTS = ("++", "+-", "-+", "--")
QUADRANT_BOXES = ((0.0, 0.0, 1.0, 1.0), (0.0, -1.0, 1.0, 0.0), (-1.0, 0.0, 0.0, 1.0), (-1.0, -1.0, 0.0, 0.0))
DEFAULT_VERTICES = ((-1.0, 0.0), (-1.0, -1.0), (0.0, -1.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0))
DEFAULT_COUNTS = (1000, 1000, 125, 500)
# the other rank-one assignment of {125, 500, 1000, 1000} that oversamples rich and unhealthy
STRONG_SHIFT_COUNTS = (500, 1000, 125, 1000)
SQRT3 = math.sqrt(3.0)


class FormatError(ValueError):
    def __init__(self, msg, line=None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


@dataclass(frozen=True)
class HexagonSpec:
    vertices: tuple = DEFAULT_VERTICES

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.shape != (6, 2):
            raise ValueError(f"hexagon needs 6 vertices, got shape {v.shape}")
        if np.any(np.abs(v) > 1.0):
            raise ValueError("vertices must lie in [-1, 1]^2")
        edges = np.roll(v, -1, axis=0) - v
        turn = edges[:, 0] * np.roll(edges, -1, axis=0)[:, 1] - edges[:, 1] * np.roll(edges, -1, axis=0)[:, 0]
        if np.any(turn <= 0):
            raise ValueError("vertices must be strictly convex and counterclockwise")
        if not all(np.any(np.all(np.isclose(v, -p), axis=1)) for p in v):
            raise ValueError("hexagon must be symmetric under (x, y) -> (-x, -y)")
        object.__setattr__(self, "vertices", tuple(map(tuple, v.tolist())))

    @classmethod
    def cut_square(cls, c: float) -> "HexagonSpec":
        """[-1, 1]^2 with the corners (1, -1) and (-1, 1) cut by y = x -/+ c, 1 <= c < 2."""
        return cls(((-1.0, c - 1.0), (-1.0, -1.0), (c - 1.0, -1.0), (1.0, 1.0 - c), (1.0, 1.0), (1.0 - c, 1.0)))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.vertices)

    @property
    def polygon(self) -> Polygon:
        return Polygon(self.vertices)

    @property
    def area(self) -> float:
        return self.polygon.area

    def quadrant_areas(self) -> np.ndarray:
        poly = self.polygon
        return np.array([poly.intersection(box(*b)).area for b in QUADRANT_BOXES])

    def to_dict(self) -> dict:
        return {"vertices": [list(p) for p in self.vertices]}


@dataclass(frozen=True)
class SourceSpec:
    quadrant_counts: tuple = DEFAULT_COUNTS

    def __post_init__(self):
        c = tuple(int(k) for k in self.quadrant_counts)
        if len(c) != 4 or min(c) < 1:
            raise ValueError(f"need four positive quadrant counts, got {self.quadrant_counts}")
        object.__setattr__(self, "quadrant_counts", c)

    @property
    def total(self) -> int:
        return sum(self.quadrant_counts)

    def to_dict(self) -> dict:
        return {"counts": list(self.quadrant_counts)}


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    domain: str
    seed: int | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.shape != self.y.shape or self.x.ndim != 1:
            raise ValueError("x and y must be 1-d arrays of equal length")
        if self.domain not in ("source", "target"):
            raise ValueError(f"domain must be 'source' or 'target', got {self.domain!r}")

    def __len__(self):
        return self.x.size

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.domain == other.domain
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
        )

    def quadrant(self) -> np.ndarray:
        return quadrant_index(self.x, self.y)


@dataclass(frozen=True)
class GroundTruthFactors:
    u_rich: float
    u_poor: float
    v_healthy: float
    v_unhealthy: float
    w_per_quadrant: tuple

    def u(self, x):
        return np.where(np.asarray(x) >= 0, self.u_rich, self.u_poor)

    def v(self, y):
        return np.where(np.asarray(y) >= 0, self.v_healthy, self.v_unhealthy)

    def w(self, x, y):
        return np.asarray(self.w_per_quadrant)[quadrant_index(x, y)]


def quadrant_index(x, y) -> np.ndarray:
    return 2 * (np.asarray(x) < 0).astype(int) + (np.asarray(y) < 0).astype(int)


def contains(spec: HexagonSpec, point, tol: float = 1e-12) -> np.ndarray | bool:
    """Boundary-inclusive membership; vectorised over an (n, 2) array."""
    p = np.asarray(point, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    v = spec.array
    e = np.roll(v, -1, axis=0) - v
    d = p[:, None, :] - v[None, :, :]
    cross = e[None, :, 0] * d[:, :, 1] - e[None, :, 1] * d[:, :, 0]
    inside = np.all(cross >= -tol, axis=1)
    return bool(inside[0]) if single else inside


def _rejection(spec, n, rng, lo, hi, chunk=4096):
    out = []
    have = 0
    while have < n:
        cand = rng.uniform(lo, hi, size=(chunk, 2))
        keep = cand[contains(spec, cand)]
        out.append(keep)
        have += len(keep)
    return np.concatenate(out)[:n]


def sample_target(spec: HexagonSpec = HexagonSpec(), n: int = 3000, seed: int = 0) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    pts = _rejection(spec, n, rng, (-1.0, -1.0), (1.0, 1.0))
    return Dataset(pts[:, 0], pts[:, 1], "target", seed)


def sample_source(spec: HexagonSpec = HexagonSpec(), counts: SourceSpec = SourceSpec(),
                  seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    parts = []
    for (x0, y0, x1, y1), k in zip(QUADRANT_BOXES, counts.quadrant_counts):
        # half-open boxes keep x = 0 / y = 0 in the nonnegative quadrants
        parts.append(_rejection(spec, k, rng, (x0, y0), (x1, y1), chunk=max(256, 2 * k)))
    pts = np.concatenate(parts)
    pts = pts[rng.permutation(len(pts))]
    return Dataset(pts[:, 0], pts[:, 1], "source", seed)


def ground_truth_importance(spec: HexagonSpec = HexagonSpec(),
                            counts: SourceSpec = SourceSpec()) -> GroundTruthFactors:
    """Exact quadrant-wise joint importance and its (U, V) factors.

    Factors are reported with u_rich * u_poor = 1.
    """
    areas = spec.quadrant_areas()
    n = np.asarray(counts.quadrant_counts, dtype=float)
    w = (n.sum() / areas.sum()) * areas / n
    table = theory.ImportanceTable(w.reshape(2, 2), np.ones((2, 2), bool))
    pair = theory.factorize(table)
    k = math.sqrt(pair.u[0] * pair.u[1])
    u, v = pair.u / k, pair.v * k
    return GroundTruthFactors(float(u[0]), float(u[1]), float(v[0]), float(v[1]), tuple(w.tolist()))


def quadrant_tables(spec: HexagonSpec = HexagonSpec(), counts: SourceSpec = SourceSpec()):
    """2x2 (source, target) joints over (rich, poor) x (healthy, unhealthy)."""
    areas = spec.quadrant_areas()
    source = theory.DiscreteJoint.from_weights(np.asarray(counts.quadrant_counts, float).reshape(2, 2))
    target = theory.DiscreteJoint.from_weights(areas.reshape(2, 2))
    return source, target


def conditional_slice(spec: HexagonSpec, x: float) -> tuple[float, float]:
    """The y-interval [a, b] of the hexagon at abscissa x."""
    v = spec.array
    w = np.roll(v, -1, axis=0)
    ys = []
    for (x0, y0), (x1, y1) in zip(v, w):
        lo, hi = min(x0, x1), max(x0, x1)
        if lo - 1e-15 <= x <= hi + 1e-15:
            if x0 == x1:
                ys.extend((y0, y1))
            else:
                ys.append(y0 + (y1 - y0) * (x - x0) / (x1 - x0))
    if not ys:
        raise ValueError(f"x = {x} is outside the hexagon")
    return float(min(ys)), float(max(ys))


def optimal_gaussian(spec: HexagonSpec, x: float) -> tuple[float, float]:
    a, b = conditional_slice(spec, x)
    return (a + b) / 2.0, (b - a) / (2.0 * SQRT3)


def _breakpoints(spec):
    xs = sorted(set(round(p[0], 15) for p in spec.vertices) | {0.0})
    return xs


def analytic_target_nll(spec: HexagonSpec = HexagonSpec()) -> float:
    """Target NLL of the per-x optimal Gaussian, by quadrature over x."""
    area = spec.area

    def integrand(x):
        a, b = conditional_slice(spec, x)
        L = b - a
        return L / area * (0.5 + math.log(math.sqrt(2 * math.pi) * L / (2 * SQRT3)))

    xs = _breakpoints(spec)
    return float(sum(integrate.quad(integrand, lo, hi, epsabs=1e-12)[0] for lo, hi in zip(xs[:-1], xs[1:])))


def quadrant_stats(spec: HexagonSpec, counts: SourceSpec) -> list[dict]:
    areas = spec.quadrant_areas()
    n = np.asarray(counts.quadrant_counts, float)
    gt = ground_truth_importance(spec, counts)
    rows = []
    for i, q in enumerate(QUADRANTS):
        rows.append({
            "quadrant": q,
            "source_count": int(n[i]),
            "area": float(areas[i]),
            "source_density": float(n[i] / (n.sum() * areas[i])),
            "target_density": float(1.0 / areas.sum()),
            "w": gt.w_per_quadrant[i],
        })
    return rows


# -------------------------------------------------------------------- csv


def write_csv(ds: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"# domain={ds.domain} seed={'' if ds.seed is None else ds.seed}\n")
        w = csv.writer(fh)
        w.writerow(["x", "y", "domain"])
        for a, b in zip(ds.x, ds.y):
            w.writerow([f"{a:.17g}", f"{b:.17g}", ds.domain])


def read_csv(path) -> Dataset:
    domain, seed = None, None
    xs, ys = [], []
    with Path(path).open(newline="") as fh:
        header_seen = False
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    k, _, val = tok.partition("=")
                    if k == "domain":
                        domain = val
                    elif k == "seed" and val:
                        seed = int(val)
                continue
            fields = next(csv.reader([line]))
            if not header_seen:
                if fields[:2] != ["x", "y"]:
                    raise FormatError(f"expected header 'x,y,domain', got {line!r}", lineno)
                header_seen = True
                continue
            if len(fields) not in (2, 3):
                raise FormatError(f"expected 3 fields, got {len(fields)}", lineno)
            try:
                xs.append(float(fields[0]))
                ys.append(float(fields[1]))
            except ValueError as e:
                raise FormatError(str(e), lineno) from None
            if len(fields) == 3:
                if domain is None:
                    domain = fields[2]
                elif fields[2] != domain:
                    raise FormatError(f"mixed domains {domain!r} and {fields[2]!r}", lineno)
    if not header_seen:
        raise FormatError("missing header")
    if domain is None:
        raise FormatError("no domain tag in file")
    return Dataset(np.array(xs), np.array(ys), domain, seed)
