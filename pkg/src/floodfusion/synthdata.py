"""Seeded synthetic catchments, design storms and a fill-spill flood oracle.

The oracle is a volume-routing model: every step, rain turns into runoff,
pipes under each cell take up to a fixed fraction of their volume, the rest
flows along D8 paths, and closed depressions store water up to their
capacity before passing the excess downstream. Ponded water is spread over a
depression as a level pool. Nothing is lost: rainfall = retained + drained +
ponded + water leaving the domain, per event.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .raster import FeatureStack, Grid, read_grid, write_grid
from .terrain import (LandUse, PipeNetwork, PipeSegment, TerrainParams, d8_receivers, derive_all, fill_sinks_sdepth,
                      pipe_raster, read_landuse_csv, read_pipes_csv, write_landuse_csv, write_pipes_csv)

IMPERVIOUS_LEVELS = (0.0, 0.3, 0.6, 0.9)
INFILTRATION_RETENTION = 0.2
DRAIN_RATE = 0.05
DURATIONS = (120, 240, 360)
N_RETURN_PERIODS = 30


@dataclass(frozen=True)
class StormParams:
    """IDF coefficients (intensity in mm/min) and the peak position of the Chicago storm."""

    A1: float = 10.0
    C: float = 0.8
    b: float = 10.0
    n: float = 0.7
    r: float = 0.4
    step: int = 10

    def __post_init__(self):
        if not self.A1 > 0 or self.b < 0 or not 0 < self.n < 2:
            raise ValueError("StormParams need A1 > 0, b >= 0 and 0 < n < 2")
        if not 0 < self.r < 1:
            raise ValueError("peak ratio r must lie in (0, 1)")
        if self.step < 1:
            raise ValueError("step must be a positive number of minutes")

    def scale(self, T: float) -> float:
        return self.A1 * (1.0 + self.C * math.log10(T))

    def intensity(self, t: float, T: float) -> float:
        """Average IDF intensity (mm/min) over a window of ``t`` minutes."""
        return self.scale(T) / (t + self.b) ** self.n

    def depth(self, t: float, T: float) -> float:
        """IDF depth (mm) of the most intense ``t``-minute window."""
        return self.intensity(t, T) * t


@dataclass(frozen=True, eq=False)
class Hyetograph:
    return_period: float
    duration: int
    step: int
    intensities: np.ndarray  # mm per step

    def __post_init__(self):
        v = np.asarray(self.intensities, dtype=np.float64)
        if self.duration % self.step or v.shape != (self.duration // self.step,):
            raise ValueError("hyetograph length must equal duration / step")
        if np.any(v < 0):
            raise ValueError("negative rainfall")
        object.__setattr__(self, "intensities", v)

    @property
    def steps(self) -> int:
        return self.intensities.size

    @property
    def total(self) -> float:
        return float(self.intensities.sum())


def _chicago_mass(s: np.ndarray, tp: float, duration: float, T: float, p: StormParams) -> np.ndarray:
    """Cumulative Chicago-storm depth from the storm start to time ``s`` (peak at ``tp``)."""
    r = p.r

    def P(t):
        return p.scale(T) * t / (t + p.b) ** p.n

    before = r * (P(tp / r) - P(np.maximum(tp - s, 0.0) / r))
    after = (1 - r) * P(np.maximum(s - tp, 0.0) / (1 - r))
    return before + after


def design_storm(T: float, duration: int, p: StormParams = StormParams()) -> Hyetograph:
    """Chicago-method hyetograph.

    The peak sits at the centre of step ``round(r * (steps - 1))``; step depths
    integrate the instantaneous Chicago intensity over each step, and the whole
    storm is rescaled so its total equals the IDF depth for ``duration``.
    """
    if T < 1:
        raise ValueError("return period must be >= 1 year")
    if duration <= 0 or duration % p.step:
        raise ValueError(f"duration must be a positive multiple of {p.step} min")
    steps = duration // p.step
    k = int(round(p.r * (steps - 1)))
    tp = (k + 0.5) * p.step
    edges = np.arange(steps + 1, dtype=np.float64) * p.step
    depth = np.diff(_chicago_mass(edges, tp, duration, T, p))
    depth *= p.depth(duration, T) / depth.sum()
    return Hyetograph(float(T), int(duration), p.step, depth)


def return_periods(n: int = N_RETURN_PERIODS, lo: float = 2.0, hi: float = 100.0) -> np.ndarray:
    t = np.geomspace(lo, hi, n)
    t[0], t[-1] = lo, hi
    return t


def event_set(p: StormParams = StormParams()) -> list[Hyetograph]:
    """30 log-spaced return periods x 3 durations, grouped by duration."""
    return [design_storm(T, d, p) for d in DURATIONS for T in return_periods()]


# --------------------------------------------------------------------------
# World generation
# --------------------------------------------------------------------------

def _gaussian_bump(rows, cols, r0, c0, sigma):
    rr, cc = np.mgrid[0:rows, 0:cols]
    return np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2 * sigma * sigma))


def _count_depressions(sdepth: Grid) -> int:
    _, n = ndimage.label(sdepth.values > 0, structure=np.ones((3, 3)))
    return n


def _gen_dem(rng, rows, cols, cell_size) -> Grid:
    tilt = 0.1 * (rows - 1 - np.arange(rows))[:, None] * np.ones((1, cols))
    z = 20.0 + tilt
    for _ in range(max(3, rows * cols // 256)):
        z += rng.choice((-1.0, 1.0)) * rng.uniform(0.3, 1.5) * _gaussian_bump(
            rows, cols, rng.uniform(0, rows), rng.uniform(0, cols), rng.uniform(2.0, 6.0))
    for _ in range(3 + rows * cols // 1024):
        z -= rng.uniform(1.5, 3.0) * _gaussian_bump(
            rows, cols, rng.uniform(4, rows - 5), rng.uniform(4, cols - 5), rng.uniform(1.2, 2.5))
    return Grid(z, cell_size)


def _gen_land(rng, dem: Grid) -> LandUse:
    rows, cols = dem.shape
    block = 4
    imp = rng.choice(IMPERVIOUS_LEVELS, size=(-(-rows // block), -(-cols // block)))
    imp = np.kron(imp, np.ones((block, block)))[:rows, :cols]
    sub = 16
    ids = (np.arange(rows)[:, None] // sub) * (-(-cols // sub)) + np.arange(cols)[None, :] // sub
    return LandUse(dem.with_values(imp), ids)


def _gen_pipes(rng, dem: Grid) -> PipeNetwork:
    """A north-to-south trunk (down the macro-slope) with east/west branches."""
    rows, cols = dem.shape
    cs = dem.cell_size

    def xy(r, c):
        return dem.origin_x + (c + 0.5) * cs, dem.origin_y + (rows - r - 0.5) * cs

    segs = []
    col = int(rng.integers(cols // 4, 3 * cols // 4))
    r = 0
    trunk = []
    while r < rows - 1:
        nr = min(rows - 1, r + int(rng.integers(3, 7)))
        nc = int(np.clip(col + rng.integers(-1, 2), 1, cols - 2))
        trunk.append((r, col))
        segs.append(PipeSegment(*xy(r, col), *xy(nr, nc), 1.0))
        r, col = nr, nc
    for r0, c0 in trunk[1:]:
        if rng.random() < 0.5:
            continue
        direction = rng.choice((-1, 1))
        length = int(rng.integers(cols // 8 + 1, cols // 3 + 2))
        c1 = int(np.clip(c0 + direction * length, 0, cols - 1))
        r1 = max(0, r0 - int(rng.integers(0, 3)))  # branches start uphill of the trunk
        if c1 != c0:
            segs.append(PipeSegment(*xy(r1, c1), *xy(r0, c0), 0.5))
    return PipeNetwork(tuple(segs))


def gen_world(seed: int, rows: int = 64, cols: int = 64,
              cell_size: float = 10.0) -> tuple[Grid, LandUse, PipeNetwork]:
    if rows < 16 or cols < 16 or rows % 16 or cols % 16:
        raise ValueError("rows and cols must be multiples of 16 and at least 16")
    rng = np.random.default_rng([seed, 0x5EED])
    while True:
        dem = _gen_dem(rng, rows, cols, cell_size)
        _, sdepth = fill_sinks_sdepth(dem)
        if _count_depressions(sdepth) >= 3:
            break
    return dem, _gen_land(rng, dem), _gen_pipes(rng, dem)


# --------------------------------------------------------------------------
# Flood oracle
# --------------------------------------------------------------------------

@dataclass
class Routing:
    """Static drainage structure of one world."""

    dem: Grid
    filled: Grid
    sdepth: Grid
    recv: np.ndarray
    levels: list[np.ndarray]
    component: np.ndarray   # flat, -1 outside depressions
    capacity: np.ndarray    # m^3 per component
    exits: np.ndarray       # bool per cell: flow leaves its depression here
    comp_cells: list[np.ndarray]


def build_routing(dem: Grid) -> Routing:
    filled, sdepth = fill_sinks_sdepth(dem)
    recv = d8_receivers(filled)
    valid = ~dem.nodata.ravel()
    n = recv.size
    # longest-path level from the sources; cells on one level are independent
    indeg = np.bincount(recv[recv >= 0], minlength=n)
    frontier = np.flatnonzero((indeg == 0) & valid)
    levels = []
    remaining = indeg.copy()
    while frontier.size:
        levels.append(frontier)
        t = recv[frontier]
        t = t[t >= 0]
        np.subtract.at(remaining, t, 1)
        cand = np.unique(t)
        frontier = cand[remaining[cand] == 0]
    lab, ncomp = ndimage.label(sdepth.values > 0, structure=np.ones((3, 3)))
    component = lab.ravel().astype(np.int64) - 1
    area = dem.cell_area
    capacity = np.zeros(ncomp)
    np.add.at(capacity, component[component >= 0], sdepth.values.ravel()[component >= 0] * area)
    exits = np.zeros(n, dtype=bool)
    inside = component >= 0
    tgt = np.where(recv >= 0, recv, 0)
    exits[inside] = (recv[inside] < 0) | (component[tgt[inside]] != component[inside])
    comp_cells = [np.flatnonzero(component == k) for k in range(ncomp)]
    return Routing(dem, filled, sdepth, recv, levels, component, capacity, exits, comp_cells)


def level_pool(z: np.ndarray, volume: float, area: float) -> np.ndarray:
    """Depths over cells of bed elevation ``z`` holding ``volume`` m^3 as one flat pool."""
    if volume <= 0:
        return np.zeros_like(z)
    order = np.argsort(z, kind="stable")
    zs = z[order]
    prefix = np.cumsum(zs)
    target = volume / area
    k = zs.size
    for j in range(1, zs.size):
        # volume needed to raise the pool to the next bed elevation
        if j * zs[j] - prefix[j - 1] >= target:
            k = j
            break
    level = (target + prefix[k - 1]) / k
    return np.maximum(level - z, 0.0)


@dataclass
class FloodTruth:
    depth_series: np.ndarray  # (steps, H, W) metres
    geometry: Grid
    budget: dict = field(default_factory=dict)

    @property
    def max_depth(self) -> np.ndarray:
        return self.depth_series.max(axis=0)

    @property
    def maxH(self) -> Grid:
        return self.geometry.with_values(self.max_depth)

    def depth_grid(self, t: int) -> Grid:
        return self.geometry.with_values(self.depth_series[t])


def flood_oracle(dem: Grid, land: LandUse, pipes: PipeNetwork | np.ndarray | Grid, rain: Hyetograph,
                 routing: Routing | None = None, drain_rate: float = DRAIN_RATE,
                 retention: float = INFILTRATION_RETENTION) -> FloodTruth:
    """Route one storm over a world.

    Args:
        dem: terrain.
        land: impervious fractions.
        pipes: network, or a precomputed pipe-volume raster (m^3 per cell).
        rain: hyetograph in mm per step.
        routing: cached :func:`build_routing` result for ``dem``.
        drain_rate: fraction of the pipe volume under a cell drained per step.
        retention: fraction of pervious-area rain retained by infiltration.

    Returns:
        Per-step depths plus the event's volume budget (m^3).
    """
    if not dem.same_geometry(land.impervious_fraction):
        raise ValueError("land-use grid does not match DEM geometry")
    routing = routing or build_routing(dem)
    if isinstance(pipes, PipeNetwork):
        pipe_vol = pipe_raster(pipes, dem).values.ravel()
    else:
        pipe_vol = np.asarray(getattr(pipes, "values", pipes), dtype=np.float64).ravel()
    area = dem.cell_area
    valid = ~dem.nodata.ravel()
    imp = land.impervious_fraction.values.ravel()
    runoff_coef = np.where(valid, imp + retention * (1.0 - imp), 0.0)
    retain_coef = np.where(valid, (1.0 - retention) * (1.0 - imp), 0.0)
    cap = drain_rate * pipe_vol
    recv, comp, exits = routing.recv, routing.component, routing.exits
    free = routing.capacity.copy()
    stored = np.zeros_like(free)
    z = dem.values.ravel()
    rows, cols = dem.shape
    series = np.zeros((rain.steps, rows, cols))
    totals = dict(rain=0.0, retained=0.0, drained=0.0, outflow=0.0)
    depth = np.zeros(rows * cols)
    for s, mm in enumerate(rain.intensities):
        vol = mm / 1000.0 * area
        totals["rain"] += vol * valid.sum()
        totals["retained"] += vol * retain_coef.sum()
        inflow = vol * runoff_coef
        touched = set()
        for cells in routing.levels:
            flow = inflow[cells]
            drained = np.minimum(flow, cap[cells])
            totals["drained"] += drained.sum()
            out = flow - drained
            for j in np.flatnonzero(exits[cells]):
                k = comp[cells[j]]
                take = min(out[j], free[k])
                if take > 0:
                    free[k] -= take
                    stored[k] += take
                    touched.add(k)
                    out[j] -= take
            t = recv[cells]
            down = t >= 0
            np.add.at(inflow, t[down], out[down])
            totals["outflow"] += out[~down].sum()
        for k in touched:
            cells = routing.comp_cells[k]
            depth[cells] = level_pool(z[cells], stored[k], area)
        series[s] = depth.reshape(rows, cols)
    totals["ponded"] = float(stored.sum())
    return FloodTruth(series, dem, totals)


def mass_balance_error(truth: FloodTruth) -> float:
    """Relative gap between rainfall and its sinks; ponded volume from the final depths."""
    b = truth.budget
    ponded = truth.depth_series[-1].sum() * truth.geometry.cell_area
    sinks = b["retained"] + b["drained"] + b["outflow"] + ponded
    return abs(b["rain"] - sinks) / max(b["rain"], 1e-300)


# --------------------------------------------------------------------------
# Datasets
# --------------------------------------------------------------------------

@dataclass
class Event:
    index: int
    rain: Hyetograph
    truth: FloodTruth


@dataclass
class Dataset:
    seed: int
    dem: Grid
    land: LandUse
    pipes: PipeNetwork
    features: FeatureStack
    events: list[Event]
    storm: StormParams = field(default_factory=StormParams)
    terrain: TerrainParams = field(default_factory=TerrainParams)

    def __len__(self):
        return len(self.events)

    @property
    def shape(self) -> tuple[int, int]:
        return self.dem.shape


def build_dataset(seed: int, p: StormParams = StormParams(), rows: int = 64, cols: int = 64,
                  cell_size: float = 10.0, events: list[Hyetograph] | None = None,
                  terrain: TerrainParams = TerrainParams()) -> Dataset:
    dem, land, pipes = gen_world(seed, rows, cols, cell_size)
    features = derive_all(dem, land, pipes, terrain)
    routing = build_routing(dem)
    pipe_vol = pipe_raster(pipes, dem)
    storms = event_set(p) if events is None else events
    out = [Event(i, h, flood_oracle(dem, land, pipe_vol, h, routing)) for i, h in enumerate(storms)]
    return Dataset(seed, dem, land, pipes, features, out, p, terrain)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_dataset(ds: Dataset, root) -> Path:
    """Write the world, hyetographs, per-step truth rasters and a hashed manifest."""
    root = Path(root)
    (root / "world").mkdir(parents=True, exist_ok=True)
    write_grid(ds.dem, root / "world" / "dem.asc")
    write_landuse_csv(ds.land, root / "world" / "landuse.csv")
    write_pipes_csv(ds.pipes, root / "world" / "pipes.csv")
    files = ["world/dem.asc", "world/landuse.csv", "world/pipes.csv"]
    events = []
    for ev in ds.events:
        d = root / "events" / f"{ev.index:03d}"
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "hyetograph.csv", "w") as fh:
            fh.write("step_minutes,mm\n")
            for k, v in enumerate(ev.rain.intensities):
                fh.write(f"{(k + 1) * ev.rain.step},{float(v)!r}\n")
        files.append(f"events/{ev.index:03d}/hyetograph.csv")
        for t in range(ev.rain.steps):
            name = f"events/{ev.index:03d}/depth_{t:03d}.asc"
            write_grid(ev.truth.depth_grid(t), root / name)
            files.append(name)
        write_grid(ev.truth.maxH, d / "maxH.asc")
        files.append(f"events/{ev.index:03d}/maxH.asc")
        events.append({"index": ev.index, "return_period": ev.rain.return_period,
                       "duration": ev.rain.duration, "step": ev.rain.step,
                       "budget": ev.truth.budget})
    manifest = {
        "format": "floodfusion-dataset-1",
        "seed": ds.seed,
        "storm": dataclasses.asdict(ds.storm),
        "terrain": dataclasses.asdict(ds.terrain),
        "shape": list(ds.shape),
        "cell_size": ds.dem.cell_size,
        "events": events,
        "sha256": {f: _sha256(root / f) for f in files},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


class DatasetError(ValueError):
    pass


def load_dataset(root, verify: bool = True) -> Dataset:
    """Read a dataset written by ``save_dataset``; hashes are checked when ``verify``."""
    root = Path(root)
    try:
        return _load_dataset(root, verify)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DatasetError):
            raise
        raise DatasetError(f"{root}: unreadable dataset ({type(exc).__name__}: {exc})") from None


def _load_dataset(root: Path, verify: bool) -> Dataset:
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise DatasetError(f"{root}: no manifest.json") from None
    if verify:
        for name, digest in manifest["sha256"].items():
            path = root / name
            if not path.exists():
                raise DatasetError(f"{path}: missing")
            if _sha256(path) != digest:
                raise DatasetError(f"{path}: hash mismatch")
    dem = read_grid(root / "world" / "dem.asc")
    land = read_landuse_csv(root / "world" / "landuse.csv", dem)
    pipes = read_pipes_csv(root / "world" / "pipes.csv")
    storm = StormParams(**manifest["storm"])
    terrain = TerrainParams(**manifest.get("terrain", {}))
    events = []
    for e in manifest["events"]:
        d = root / "events" / f"{e['index']:03d}"
        mm = np.loadtxt(d / "hyetograph.csv", delimiter=",", skiprows=1, ndmin=2)[:, 1]
        rain = Hyetograph(e["return_period"], e["duration"], e["step"], mm)
        series = np.stack([read_grid(d / f"depth_{t:03d}.asc").values for t in range(rain.steps)])
        events.append(Event(e["index"], rain, FloodTruth(series, dem, e.get("budget", {}))))
    return Dataset(manifest["seed"], dem, land, pipes, derive_all(dem, land, pipes, terrain),
                   events, storm, terrain)
