"""Terrain, imperviousness and drainage feature rasters.

Neighbour offsets are (d_row, d_col) with rows increasing southwards. All
routing is D8 over unmasked cells; masked cells are never neighbours.
"""

from __future__ import annotations

import csv
import heapq
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .raster import (FEATURE_IDS, SIGNED_FEATURES, FeatureStack, GeometryError, Grid,
                     normalize_signed, normalize_unit, stack)

HECTARE = 10_000.0
TWI_EPS = 1e-6

# Row-major order, so the first hit is also the lowest (row, col) neighbour.
NEIGHBOURS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


class DrainageError(ValueError):
    """The DEM has no unmasked cell through which water can leave."""


@dataclass(frozen=True)
class TerrainParams:
    focal_radius: float = 100.0   # m
    flacc_cutoff: float = 1.0     # ha
    flimp_cutoff: float = 35.0    # ha
    flslo_cutoff: float = 10.0    # ha

    def __post_init__(self):
        for name in ("focal_radius", "flacc_cutoff", "flimp_cutoff", "flslo_cutoff"):
            if not getattr(self, name) > 0:
                raise ValueError(f"TerrainParams.{name} must be positive")


@dataclass(frozen=True, eq=False)
class LandUse:
    impervious_fraction: Grid
    subcatchment_id: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.subcatchment_id, dtype=np.int64)
        if ids.shape != self.impervious_fraction.shape:
            raise GeometryError("subcatchment_id shape differs from impervious_fraction")
        imp = self.impervious_fraction
        v = imp.values[imp.valid]
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ValueError("impervious_fraction must lie in [0, 1]")
        if np.any(ids[imp.valid] < 0):
            raise ValueError("every unmasked cell needs a non-negative subcatchment id")
        ids = ids.copy()
        ids.setflags(write=False)
        object.__setattr__(self, "subcatchment_id", ids)


@dataclass(frozen=True)
class PipeSegment:
    x1: float
    y1: float
    x2: float
    y2: float
    diameter: float

    @property
    def length(self) -> float:
        return math.hypot(self.x2 - self.x1, self.y2 - self.y1)


@dataclass(frozen=True)
class PipeNetwork:
    segments: tuple[PipeSegment, ...] = ()

    def __post_init__(self):
        segs = tuple(s if isinstance(s, PipeSegment) else PipeSegment(*s) for s in self.segments)
        for s in segs:
            if not s.diameter > 0:
                raise ValueError(f"pipe diameter must be positive: {s}")
            if not s.length > 0:
                raise ValueError(f"pipe segment has zero length: {s}")
        object.__setattr__(self, "segments", segs)


# --------------------------------------------------------------------------
# Neighbourhood statistics and derivatives
# --------------------------------------------------------------------------

def disk_footprint(radius: float, cell_size: float) -> np.ndarray:
    n = int(math.floor(radius / cell_size + 1e-9))
    off = np.arange(-n, n + 1) * cell_size
    d2 = off[:, None] ** 2 + off[None, :] ** 2
    return d2 <= radius * radius * (1 + 1e-12)


def focal_mean(g: Grid, radius: float) -> Grid:
    """Mean of unmasked cells whose centres lie within ``radius`` metres (inclusive)."""
    if radius < g.cell_size:
        raise ValueError(f"radius {radius} is smaller than the cell size {g.cell_size}")
    fp = disk_footprint(radius, g.cell_size).astype(np.float64)
    valid = g.valid.astype(np.float64)
    total = ndimage.correlate(g.values * valid, fp, mode="constant", cval=0.0)
    count = ndimage.correlate(valid, fp, mode="constant", cval=0.0)
    out = np.zeros(g.shape)
    out[g.valid] = total[g.valid] / count[g.valid]
    return g.with_values(out)


def _shift(a: np.ndarray, dr: int, dc: int, fill):
    """out[r, c] = a[r + dr, c + dc], ``fill`` outside the array."""
    out = np.full_like(a, fill)
    rows, cols = a.shape
    r0, r1 = max(0, -dr), min(rows, rows - dr)
    c0, c1 = max(0, -dc), min(cols, cols - dc)
    if r0 < r1 and c0 < c1:
        out[r0:r1, c0:c1] = a[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
    return out


def _first_derivative(z, valid, dr, dc, spacing):
    """Derivative towards offset (dr, dc): central where possible, else one-sided."""
    fwd, fwd_ok = _shift(z, dr, dc, 0.0), _shift(valid, dr, dc, False)
    bwd, bwd_ok = _shift(z, -dr, -dc, 0.0), _shift(valid, -dr, -dc, False)
    out = np.zeros_like(z)
    both = valid & fwd_ok & bwd_ok
    only_f = valid & fwd_ok & ~bwd_ok
    only_b = valid & bwd_ok & ~fwd_ok
    out[both] = (fwd[both] - bwd[both]) / (2 * spacing)
    out[only_f] = (fwd[only_f] - z[only_f]) / spacing
    out[only_b] = (z[only_b] - bwd[only_b]) / spacing
    return out


def gradient(g: Grid) -> tuple[np.ndarray, np.ndarray]:
    """(dz/d_east, dz/d_north) by central differences, one-sided at edges and nodata."""
    z, ok, h = g.values, g.valid, g.cell_size
    return _first_derivative(z, ok, 0, 1, h), _first_derivative(z, ok, -1, 0, h)


def slope_aspect(dem: Grid, params: TerrainParams = TerrainParams()) -> tuple[Grid, Grid]:
    """Slope (rise/run of the focal-mean DEM) and aspect of the raw DEM.

    Aspect is the steepest-descent direction in degrees clockwise from north,
    in [0, 360); cells with zero gradient get -1.
    """
    if dem.rows < 2 or dem.cols < 2:
        raise ValueError("slope_aspect needs at least a 2x2 DEM")
    radius = max(params.focal_radius, dem.cell_size)
    gx, gy = gradient(focal_mean(dem, radius))
    slope = np.hypot(gx, gy)

    ax, ay = gradient(dem)
    aspect = np.degrees(np.arctan2(-ax, -ay)) % 360.0
    aspect[aspect >= 360.0] -= 360.0
    aspect[(ax == 0) & (ay == 0)] = -1.0
    slope[dem.nodata] = 0.0
    aspect[dem.nodata] = 0.0
    return dem.with_values(slope), dem.with_values(aspect)


def _second_difference(z, valid, dr, dc):
    f1, f1_ok = _shift(z, dr, dc, 0.0), _shift(valid, dr, dc, False)
    b1, b1_ok = _shift(z, -dr, -dc, 0.0), _shift(valid, -dr, -dc, False)
    f2, f2_ok = _shift(z, 2 * dr, 2 * dc, 0.0), _shift(valid, 2 * dr, 2 * dc, False)
    b2, b2_ok = _shift(z, -2 * dr, -2 * dc, 0.0), _shift(valid, -2 * dr, -2 * dc, False)
    out = np.zeros_like(z)
    central = valid & f1_ok & b1_ok
    fwd = valid & ~central & f1_ok & f2_ok
    bwd = valid & ~central & ~fwd & b1_ok & b2_ok
    out[central] = b1[central] - 2 * z[central] + f1[central]
    out[fwd] = z[fwd] - 2 * f1[fwd] + f2[fwd]
    out[bwd] = z[bwd] - 2 * b1[bwd] + b2[bwd]
    return out


def curvature(dem: Grid) -> Grid:
    """Signed cube root of the 4-neighbour Laplacian (per squared cell size)."""
    if dem.rows < 3 or dem.cols < 3:
        raise ValueError("curvature needs at least a 3x3 DEM")
    z, ok = dem.values, dem.valid
    lap = (_second_difference(z, ok, 0, 1) + _second_difference(z, ok, 1, 0)) / dem.cell_area
    out = np.cbrt(lap)
    out[dem.nodata] = 0.0
    return dem.with_values(out)


# --------------------------------------------------------------------------
# Depressions and D8 routing
# --------------------------------------------------------------------------

def _outlet_cells(valid: np.ndarray) -> np.ndarray:
    """Unmasked cells on the grid edge or touching a masked cell."""
    rows, cols = valid.shape
    edge = np.zeros_like(valid)
    edge[0, :] = edge[-1, :] = True
    edge[:, 0] = edge[:, -1] = True
    touches_mask = np.zeros_like(valid)
    for dr, dc in NEIGHBOURS:
        touches_mask |= ~_shift(valid, dr, dc, True)
    return valid & (edge | touches_mask)


def fill_sinks_sdepth(dem: Grid) -> tuple[Grid, Grid]:
    """Priority-flood depression filling (8-connected) draining to the boundary.

    Returns the filled DEM and the sink depth ``filled - dem``.
    """
    z = dem.values
    valid = dem.valid
    outlets = _outlet_cells(valid)
    if not outlets.any():
        raise DrainageError("DEM has no unmasked boundary cell to drain to")
    rows, cols = z.shape
    filled = z.copy()
    done = ~valid.copy()
    heap = []
    for r, c in zip(*np.nonzero(outlets)):
        heapq.heappush(heap, (z[r, c], r, c))
        done[r, c] = True
    while heap:
        level, r, c = heapq.heappop(heap)
        for dr, dc in NEIGHBOURS:
            rr, cc = r + dr, c + dc
            if 0 <= rr < rows and 0 <= cc < cols and not done[rr, cc]:
                done[rr, cc] = True
                filled[rr, cc] = max(z[rr, cc], level)
                heapq.heappush(heap, (filled[rr, cc], rr, cc))
    sdepth = filled - z
    sdepth[~valid] = 0.0
    return dem.with_values(filled), dem.with_values(sdepth)


def d8_receivers(dem_filled: Grid) -> np.ndarray:
    """Flat index of each cell's D8 receiver; -1 for outlets and masked cells.

    A cell drains to its steepest strictly-lower neighbour (ties to the lowest
    (row, col)). Cells without a lower neighbour on the grid edge (or touching
    nodata) leave the grid. Remaining flat cells drain towards the closest
    draining cell of their equal-elevation region by breadth-first distance,
    ties again to the lowest (row, col).
    """
    z = dem_filled.values
    valid = dem_filled.valid
    rows, cols = z.shape
    h = dem_filled.cell_size
    outlets = _outlet_cells(valid)
    recv = np.full(rows * cols, -1, dtype=np.int64)
    has_exit = np.zeros((rows, cols), dtype=bool)

    for r in range(rows):
        for c in range(cols):
            if not valid[r, c]:
                continue
            best, best_slope = -1, 0.0
            for dr, dc in NEIGHBOURS:
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols and valid[rr, cc]:
                    drop = z[r, c] - z[rr, cc]
                    if drop > 0:
                        s = drop / (h * math.sqrt(2.0) if dr and dc else h)
                        if s > best_slope:
                            best, best_slope = rr * cols + cc, s
            if best >= 0:
                recv[r * cols + c] = best
                has_exit[r, c] = True
            elif outlets[r, c]:
                has_exit[r, c] = True

    # Breadth-first distances across flats from cells that can already drain.
    dist = np.full((rows, cols), -1, dtype=np.int64)
    queue = deque()
    for r, c in zip(*np.nonzero(has_exit)):
        dist[r, c] = 0
        queue.append((r, c))
    while queue:
        r, c = queue.popleft()
        for dr, dc in NEIGHBOURS:
            rr, cc = r + dr, c + dc
            if (0 <= rr < rows and 0 <= cc < cols and valid[rr, cc] and dist[rr, cc] < 0
                    and z[rr, cc] == z[r, c]):
                dist[rr, cc] = dist[r, c] + 1
                queue.append((rr, cc))
    for r in range(rows):
        for c in range(cols):
            if not valid[r, c] or has_exit[r, c] or dist[r, c] < 0:
                continue
            for dr, dc in NEIGHBOURS:
                rr, cc = r + dr, c + dc
                if (0 <= rr < rows and 0 <= cc < cols and valid[rr, cc]
                        and z[rr, cc] == z[r, c] and dist[rr, cc] == dist[r, c] - 1):
                    recv[r * cols + c] = rr * cols + cc
                    break
    return recv


def topological_order(recv: np.ndarray) -> list[int]:
    """Cells ordered so every cell precedes its receiver."""
    n = recv.size
    indeg = np.zeros(n, dtype=np.int64)
    for t in recv[recv >= 0]:
        indeg[t] += 1
    order = [i for i in range(n) if indeg[i] == 0]
    head = 0
    while head < len(order):
        i = order[head]
        head += 1
        t = recv[i]
        if t >= 0:
            indeg[t] -= 1
            if indeg[t] == 0:
                order.append(int(t))
    if len(order) != n:
        raise RuntimeError("D8 receiver graph contains a cycle")
    return order


def contributing_area(dem_filled: Grid, weights: Grid | np.ndarray | None = None,
                      recv: np.ndarray | None = None) -> Grid:
    """Sum of upstream weights draining into each cell, excluding the cell itself.

    ``weights`` are per-cell areas in m^2; ``None`` means the full cell area.
    """
    if recv is None:
        recv = d8_receivers(dem_filled)
    if weights is None:
        w = np.full(dem_filled.shape, dem_filled.cell_area)
    else:
        w = np.asarray(weights.values if isinstance(weights, Grid) else weights, dtype=np.float64)
        if w.shape != dem_filled.shape:
            raise GeometryError("weights shape differs from DEM")
    w = np.where(dem_filled.valid, w, 0.0).ravel()
    acc = np.zeros(recv.size)
    for i in topological_order(recv):
        t = recv[i]
        if t >= 0:
            acc[t] += acc[i] + w[i]
    return dem_filled.with_values(acc.reshape(dem_filled.shape))


def flow_accumulation(dem_filled: Grid, weights: Grid | np.ndarray | None = None,
                      cutoff: float = 1.0, recv: np.ndarray | None = None) -> Grid:
    """D8 upstream area (m^2), clamped at ``cutoff`` hectares, then cube-rooted."""
    area = contributing_area(dem_filled, weights, recv)
    out = np.cbrt(np.minimum(area.values, cutoff * HECTARE))
    return dem_filled.with_values(out)


def twi(slope: Grid, flacc_area: Grid) -> Grid:
    """sqrt(max(ln((a + cell_area) / (tan_beta + eps)), 0)) with unclamped area ``a``."""
    if not slope.same_geometry(flacc_area):
        raise GeometryError("slope and flow-accumulation grids differ in geometry")
    raw = np.log((flacc_area.values + slope.cell_area) / (slope.values + TWI_EPS))
    out = np.sqrt(np.maximum(raw, 0.0))
    return slope.with_values(out, slope.nodata | flacc_area.nodata)


def imperviousness(land: LandUse, cell_area: float) -> tuple[Grid, Grid, Grid]:
    imp_c = land.impervious_fraction
    valid = imp_c.valid
    ids = land.subcatchment_id
    imp_s = np.zeros(imp_c.shape)
    area = np.zeros(imp_c.shape)
    for sid in np.unique(ids[valid]):
        cells = valid & (ids == sid)
        imp_s[cells] = imp_c.values[cells].mean()
        area[cells] = cells.sum() * cell_area
    imp_sa = imp_s * (area / area.max()) if area.max() > 0 else imp_s
    return imp_c, imp_c.with_values(imp_s), imp_c.with_values(imp_sa)


def flimp_flslo(dem_filled: Grid, imp_c: Grid, slope: Grid,
                params: TerrainParams = TerrainParams(),
                recv: np.ndarray | None = None) -> tuple[Grid, Grid]:
    if recv is None:
        recv = d8_receivers(dem_filled)
    a = dem_filled.cell_area
    flimp = flow_accumulation(dem_filled, imp_c.values * a, params.flimp_cutoff, recv)
    flslo = flow_accumulation(dem_filled, slope.values * a, params.flslo_cutoff, recv)
    return flimp, flslo


# --------------------------------------------------------------------------
# Pipes
# --------------------------------------------------------------------------

def _clip_segment(x1, y1, x2, y2, xmin, xmax, ymin, ymax):
    """Liang-Barsky parameter interval of the segment inside the rectangle."""
    dx, dy = x2 - x1, y2 - y1
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, x1 - xmin), (dx, xmax - x1), (-dy, y1 - ymin), (dy, ymax - y1)):
        if p == 0:
            if q < 0:
                return None
        else:
            t = q / p
            if p < 0:
                t0 = max(t0, t)
            else:
                t1 = min(t1, t)
    return (t0, t1) if t1 > t0 else None


def pipe_raster(pipes: PipeNetwork, geometry: Grid) -> Grid:
    """In-cell pipe volume (m^3): clipped length times cross-section area.

    Cells are half-open ``[x0, x1) x [y0, y1)`` so a segment lying on a cell
    edge is counted once.
    """
    h, ox, oy = geometry.cell_size, geometry.origin_x, geometry.origin_y
    rows, cols = geometry.shape
    out = np.zeros(geometry.shape)
    for s in pipes.segments:
        section = math.pi * (s.diameter / 2) ** 2
        c_lo = max(0, int(math.floor((min(s.x1, s.x2) - ox) / h)) - 1)
        c_hi = min(cols - 1, int(math.floor((max(s.x1, s.x2) - ox) / h)) + 1)
        # row index counts from the north edge
        top = oy + rows * h
        r_lo = max(0, int(math.floor((top - max(s.y1, s.y2)) / h)) - 1)
        r_hi = min(rows - 1, int(math.floor((top - min(s.y1, s.y2)) / h)) + 1)
        for r in range(r_lo, r_hi + 1):
            ymin = oy + (rows - 1 - r) * h
            ymax = ymin + h
            for c in range(c_lo, c_hi + 1):
                xmin = ox + c * h
                xmax = xmin + h
                span = _clip_segment(s.x1, s.y1, s.x2, s.y2, xmin, xmax, ymin, ymax)
                if span is None:
                    continue
                tm = 0.5 * (span[0] + span[1])
                mx, my = s.x1 + tm * (s.x2 - s.x1), s.y1 + tm * (s.y2 - s.y1)
                if not (xmin <= mx < xmax and ymin <= my < ymax):
                    continue
                out[r, c] += (span[1] - span[0]) * s.length * section
    out[geometry.nodata] = 0.0
    return geometry.with_values(out)


# --------------------------------------------------------------------------
# Everything at once
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RawFeatures:
    """Untransformed-by-normalization intermediate rasters of ``derive_all``."""
    filled: Grid
    sdepth: Grid
    slope: Grid
    contributing_area: Grid
    receivers: np.ndarray
    channels: dict


def derive_raw(dem: Grid, land: LandUse, pipes: PipeNetwork,
               params: TerrainParams = TerrainParams()) -> RawFeatures:
    if not dem.same_geometry(land.impervious_fraction):
        raise GeometryError("land-use grid does not match DEM geometry")
    filled, sdepth = fill_sinks_sdepth(dem)
    recv = d8_receivers(filled)
    slope, aspect = slope_aspect(dem, params)
    area = contributing_area(filled, None, recv)
    flacc = filled.with_values(np.cbrt(np.minimum(area.values, params.flacc_cutoff * HECTARE)))
    imp_c, imp_s, imp_sa = imperviousness(land, dem.cell_area)
    flimp, flslo = flimp_flslo(filled, imp_c, slope, params, recv)
    radius = max(params.focal_radius, dem.cell_size)
    dem_l = dem.with_values(dem.values - focal_mean(dem, radius).values)
    channels = {
        "DEM": dem,
        "ASP": aspect,
        "CURV": curvature(dem),
        "DEM_L": dem_l,
        "SDEPTH": sdepth,
        "SLOPE": slope,
        "FLACC": flacc,
        "TWI": twi(slope, area),
        "IMP_C": imp_c,
        "IMP_S": imp_s,
        "IMP_SA": imp_sa,
        "FLIMP": flimp,
        "FLSLO": flslo,
        "PIPE": pipe_raster(pipes, dem),
    }
    return RawFeatures(filled, sdepth, slope, area, recv, channels)


def derive_all(dem: Grid, land: LandUse, pipes: PipeNetwork,
               params: TerrainParams = TerrainParams()) -> FeatureStack:
    """All 14 normalized feature channels in canonical order.

    CURV and DEM_L are scaled into [-1, 1]; every other channel into [0, 1].
    """
    raw = derive_raw(dem, land, pipes, params)
    out = []
    for fid in FEATURE_IDS:
        g = raw.channels[fid]
        g = g.with_values(g.values, dem.nodata | g.nodata)
        out.append((fid, normalize_signed(g) if fid in SIGNED_FEATURES else normalize_unit(g)))
    return stack(out)


# --------------------------------------------------------------------------
# CSV ingestion
# --------------------------------------------------------------------------

LANDUSE_COLUMNS = ("row", "col", "impervious_fraction", "subcatchment_id")
PIPE_COLUMNS = ("x1", "y1", "x2", "y2", "diameter")


def read_landuse_csv(path, geometry: Grid) -> LandUse:
    """Cell-wise land use. Cells absent from the file are masked."""
    imp = np.zeros(geometry.shape)
    ids = np.full(geometry.shape, -1, dtype=np.int64)
    seen = np.zeros(geometry.shape, dtype=bool)
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(LANDUSE_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing land-use columns {sorted(missing)}")
        for rec in reader:
            r, c = int(rec["row"]), int(rec["col"])
            imp[r, c] = float(rec["impervious_fraction"])
            ids[r, c] = int(rec["subcatchment_id"])
            seen[r, c] = True
    mask = geometry.nodata | ~seen
    ids[mask] = np.where(ids[mask] < 0, 0, ids[mask])
    return LandUse(geometry.with_values(imp, mask), ids)


def write_landuse_csv(land: LandUse, path) -> None:
    imp = land.impervious_fraction
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LANDUSE_COLUMNS)
        for r in range(imp.rows):
            for c in range(imp.cols):
                if imp.valid[r, c]:
                    w.writerow([r, c, repr(float(imp.values[r, c])), int(land.subcatchment_id[r, c])])


def read_pipes_csv(path) -> PipeNetwork:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(PIPE_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing pipe columns {sorted(missing)}")
        segs = [PipeSegment(*(float(rec[k]) for k in PIPE_COLUMNS)) for rec in reader]
    return PipeNetwork(tuple(segs))


def write_pipes_csv(pipes: PipeNetwork, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PIPE_COLUMNS)
        for s in pipes.segments:
            w.writerow([repr(float(getattr(s, k))) for k in PIPE_COLUMNS])
