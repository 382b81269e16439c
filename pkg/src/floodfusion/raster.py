"""Raster data model, ESRI ASCII grid I/O, masking, normalization and stacking.

Grids are row-major and north-up: row 0 is the northern edge, column 0 the
western edge. ``origin_x``/``origin_y`` are the coordinates of the lower-left
(south-west) corner, as in the ``xllcorner``/``yllcorner`` header keys.

Nodata is held as an explicit boolean mask; masked cells always carry 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

NODATA_VALUE = -9999

FEATURE_IDS: tuple[str, ...] = (
    "DEM", "ASP", "CURV", "DEM_L", "SDEPTH", "SLOPE", "FLACC",
    "TWI", "IMP_C", "IMP_S", "IMP_SA", "FLIMP", "FLSLO", "PIPE",
)
SIGNED_FEATURES = frozenset({"CURV", "DEM_L"})

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


class RasterFormatError(ValueError):
    """Malformed ESRI ASCII grid."""


class EmptyDomainError(ValueError):
    """Operation needs at least one unmasked cell."""


class GeometryError(ValueError):
    """Grids that must share a geometry do not."""


@dataclass(frozen=True, eq=False)
class Grid:
    values: np.ndarray
    cell_size: float = 1.0
    origin_x: float = 0.0
    origin_y: float = 0.0
    nodata: np.ndarray | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise GeometryError(f"grid values must be a non-empty 2-D array, got shape {values.shape}")
        if not self.cell_size > 0:
            raise GeometryError(f"cell_size must be positive, got {self.cell_size}")
        if self.nodata is None:
            mask = np.zeros(values.shape, dtype=bool)
        else:
            mask = np.array(self.nodata, dtype=bool)
            if mask.shape != values.shape:
                raise GeometryError("nodata mask shape differs from values shape")
        values[mask] = 0.0
        if not np.all(np.isfinite(values[~mask])):
            raise ValueError("grid values must be finite at unmasked cells")
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "nodata", mask)
        object.__setattr__(self, "cell_size", float(self.cell_size))
        object.__setattr__(self, "origin_x", float(self.origin_x))
        object.__setattr__(self, "origin_y", float(self.origin_y))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def valid(self) -> np.ndarray:
        return ~self.nodata

    @property
    def cell_area(self) -> float:
        return self.cell_size * self.cell_size

    def with_values(self, values, nodata=None) -> "Grid":
        """Same geometry, new values (and optionally a new mask)."""
        return Grid(values, self.cell_size, self.origin_x, self.origin_y,
                    self.nodata if nodata is None else nodata)

    def same_geometry(self, other: "Grid") -> bool:
        return (self.shape == other.shape and self.cell_size == other.cell_size
                and self.origin_x == other.origin_x and self.origin_y == other.origin_y)

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return (self.same_geometry(other) and np.array_equal(self.nodata, other.nodata)
                and np.array_equal(self.values, other.values))

    __hash__ = None


@dataclass(frozen=True)
class FeatureStack:
    channels: tuple[tuple[str, Grid], ...]
    shared_mask: np.ndarray = field(repr=False)

    @property
    def feature_ids(self) -> tuple[str, ...]:
        return tuple(fid for fid, _ in self.channels)

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels[0][1].shape

    def __len__(self):
        return len(self.channels)

    def __getitem__(self, feature_id: str) -> Grid:
        for fid, grid in self.channels:
            if fid == feature_id:
                return grid
        raise KeyError(feature_id)

    def array(self, feature_ids: Sequence[str] | None = None) -> np.ndarray:
        """Channel-first ``(C, rows, cols)`` float64 array of the selected channels."""
        ids = self.feature_ids if feature_ids is None else tuple(feature_ids)
        return np.stack([self[fid].values for fid in ids])

    def select(self, feature_ids: Sequence[str]) -> "FeatureStack":
        return stack([(fid, self[fid]) for fid in feature_ids])


def read_grid(path) -> Grid:
    """Read an ESRI ASCII grid.

    Cells equal to the header's ``nodata_value`` become masked and carry 0.
    """
    path = Path(path)
    with path.open("r") as fh:
        lines = fh.read().splitlines()

    header = {}
    pos = 0
    for key in _HEADER_KEYS:
        while pos < len(lines) and not lines[pos].strip():
            pos += 1
        if pos >= len(lines):
            raise RasterFormatError(f"{path}: header ended before key '{key}'")
        parts = lines[pos].split()
        if len(parts) != 2 or parts[0].lower() != key:
            raise RasterFormatError(f"{path}: expected header key '{key}', found {lines[pos]!r}")
        try:
            header[key] = float(parts[1])
        except ValueError:
            raise RasterFormatError(f"{path}: non-numeric value for header key '{key}'") from None
        pos += 1

    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    if ncols < 1 or nrows < 1 or ncols != header["ncols"] or nrows != header["nrows"]:
        raise RasterFormatError(f"{path}: invalid grid size {header['nrows']} x {header['ncols']}")

    body = [ln for ln in lines[pos:] if ln.strip()]
    if len(body) != nrows:
        raise RasterFormatError(f"{path}: expected {nrows} data rows, found {len(body)}")
    values = np.empty((nrows, ncols))
    for r, line in enumerate(body):
        tokens = line.split()
        if len(tokens) != ncols:
            raise RasterFormatError(f"{path}: row {r} has {len(tokens)} values, expected {ncols}")
        for c, tok in enumerate(tokens):
            try:
                values[r, c] = float(tok)
            except ValueError:
                raise RasterFormatError(f"{path}: non-numeric cell {tok!r} at row {r}, col {c}") from None

    nodata = values == header["nodata_value"]
    return Grid(values, header["cellsize"], header["xllcorner"], header["yllcorner"], nodata)


def _fmt(v: float) -> str:
    s = f"{v:.17g}"
    return "0" if s == "-0" else s


def write_grid(g: Grid, path) -> None:
    """Write ``g`` as an ESRI ASCII grid (17 significant digits, nodata -9999)."""
    path = Path(path)
    out = [
        f"ncols {g.cols}",
        f"nrows {g.rows}",
        f"xllcorner {_fmt(g.origin_x)}",
        f"yllcorner {_fmt(g.origin_y)}",
        f"cellsize {_fmt(g.cell_size)}",
        f"nodata_value {NODATA_VALUE}",
    ]
    for r in range(g.rows):
        out.append(" ".join(str(NODATA_VALUE) if g.nodata[r, c] else _fmt(g.values[r, c])
                            for c in range(g.cols)))
    path.write_text("\n".join(out) + "\n")


def normalize_unit(g: Grid) -> Grid:
    """Min-max scale unmasked cells into [0, 1]; a constant grid maps to 0."""
    valid = g.valid
    if not valid.any():
        raise EmptyDomainError("normalize_unit: every cell is masked")
    v = g.values[valid]
    lo, hi = v.min(), v.max()
    out = np.zeros(g.shape)
    if hi > lo:
        out[valid] = (v - lo) / (hi - lo)
    return g.with_values(out)


def normalize_signed(g: Grid) -> Grid:
    """Scale unmasked cells by their largest magnitude into [-1, 1].

    Zero stays zero and signs are kept, so concave and convex cells stay apart.
    """
    valid = g.valid
    if not valid.any():
        raise EmptyDomainError("normalize_signed: every cell is masked")
    v = g.values[valid]
    scale = max(abs(v.min()), abs(v.max()))
    out = np.zeros(g.shape)
    if scale > 0:
        q = v / scale
        # a subnormal quotient can round to zero; keep its sign at the smallest magnitude
        lost = (q == 0) & (v != 0)
        q[lost] = np.copysign(np.finfo(np.float64).smallest_subnormal, v[lost])
        out[valid] = q
    return g.with_values(out)


def stack(channels: Sequence[tuple[str, Grid]]) -> FeatureStack:
    channels = tuple((str(fid), g) for fid, g in channels)
    if not channels:
        raise ValueError("stack needs at least one channel")
    seen = set()
    for fid, _ in channels:
        if fid not in FEATURE_IDS:
            raise ValueError(f"unknown feature id {fid!r}")
        if fid in seen:
            raise ValueError(f"duplicate feature id {fid!r}")
        seen.add(fid)
    first_id, first = channels[0]
    mask = first.nodata.copy()
    for fid, g in channels[1:]:
        if not g.same_geometry(first):
            raise GeometryError(
                f"channel {fid!r} {g.shape}@{g.cell_size} does not match "
                f"channel {first_id!r} {first.shape}@{first.cell_size}")
        mask |= g.nodata
    mask.setflags(write=False)
    return FeatureStack(channels, mask)
