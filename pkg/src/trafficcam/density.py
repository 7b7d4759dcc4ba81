"""Lane densities from per-frame counts, time aggregation and spatio-temporal grids."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import LengthMismatch, ZeroLaneLength

DEFAULT_INTERVAL_S = 15 * 60.0
SECONDS_PER_DAY = 86400.0


def density_from_counts(counts: Dict[int, int], lanes) -> Dict[int, float]:
    """Vehicles per kilometre per lane, ``k = N / (L / 1000)``."""
    lengths = {l.lane_id: l.length_m for l in lanes}
    out = {}
    for lane_id, n in counts.items():
        length = lengths[lane_id]
        if not length > 0:
            raise ZeroLaneLength(f"lane {lane_id} has non-positive length")
        out[lane_id] = n / (length / 1000.0)
    return out


@dataclass(frozen=True)
class FrameDensity:
    camera_id: str
    lane_id: int
    timestamp: float
    k: float


@dataclass(frozen=True)
class DensityRecord:
    camera_id: str
    lane_id: int
    interval_start: float  # UTC seconds
    interval_length: float  # seconds
    k: Optional[float]  # veh/km/lane; None marks an interval with no frames
    n_frames: int

    @property
    def is_gap(self) -> bool:
        return self.n_frames == 0


def aggregate(frames: Iterable[FrameDensity], interval: float = DEFAULT_INTERVAL_S) -> List[DensityRecord]:
    """Mean of the per-frame densities inside each epoch-aligned interval.

    Intervals between a lane's first and last frame that received no frames
    are emitted as gap records (``k=None``, ``n_frames=0``).
    """
    if not interval > 0:
        raise ValueError("interval must be positive")
    bins: Dict[Tuple[str, int], Dict[int, List[float]]] = defaultdict(lambda: defaultdict(list))
    for fr in frames:
        bins[(fr.camera_id, fr.lane_id)][math.floor(fr.timestamp / interval)].append(fr.k)
    out = []
    for (cam, lane) in sorted(bins):
        per = bins[(cam, lane)]
        for b in range(min(per), max(per) + 1):
            ks = per.get(b)
            if ks:
                out.append(DensityRecord(cam, lane, b * interval, interval, float(np.mean(ks)), len(ks)))
            else:
                out.append(DensityRecord(cam, lane, b * interval, interval, None, 0))
    return out


class DensityErrors(NamedTuple):
    rmse: float
    mae: float
    mape: float  # percent, over points with non-zero truth
    n_skipped: int  # points left out of the MAPE because truth was zero


def error_metrics(estimated: Sequence[float], truth: Sequence[float]) -> DensityErrors:
    est = np.asarray(estimated, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise LengthMismatch(f"series lengths differ: {est.size} vs {tru.size}")
    if est.size == 0:
        raise LengthMismatch("empty series")
    err = est - tru
    nz = tru != 0
    mape = float(100.0 * np.mean(np.abs(err[nz]) / np.abs(tru[nz]))) if nz.any() else float("nan")
    return DensityErrors(float(np.sqrt(np.mean(err**2))), float(np.mean(np.abs(err))), mape, int((~nz).sum()))


# ------------------------------------------------------------ spatio-temporal


@dataclass(frozen=True)
class VehicleFrame:
    """Positions (metres along the lane) of the vehicles seen in one frame."""

    timestamp: float
    positions_m: Tuple[float, ...]


@dataclass(frozen=True)
class SpatioTemporalCell:
    time_start: float  # seconds (time of day when folded)
    space_start_m: float
    time_bin: float
    space_bin_m: float
    density: float  # veh/km, mean over frames in the time bin
    n_vehicles: int
    n_frames: int


def st_grid(
    frames: Sequence[VehicleFrame],
    time_bin: float,
    space_bin_m: float,
    length_m: float,
    fold_days: bool = False,
    t_origin: float = 0.0,
) -> List[SpatioTemporalCell]:
    """Mean density per (time bin, location bin) along a lane of ``length_m``.

    With ``fold_days`` the time axis is time of day, so several days collapse
    onto one averaged day. Vehicles outside ``[0, length_m)`` are ignored.
    """
    if not (time_bin > 0 and space_bin_m > 0 and length_m > 0):
        raise ValueError("bins and length must be positive")
    n_space = int(math.ceil(length_m / space_bin_m - 1e-12))
    edges = np.minimum(np.arange(n_space + 1) * space_bin_m, length_m)
    widths_km = np.diff(edges) / 1000.0

    def tkey(ts):
        t = (ts - t_origin) % SECONDS_PER_DAY if fold_days else ts - t_origin
        return math.floor(t / time_bin + 1e-12)

    counts: Dict[int, np.ndarray] = {}
    n_frames: Dict[int, int] = defaultdict(int)
    for fr in frames:
        b = tkey(fr.timestamp)
        n_frames[b] += 1
        row = counts.setdefault(b, np.zeros(n_space, dtype=np.int64))
        pos = np.asarray(fr.positions_m, dtype=float)
        pos = pos[(pos >= 0) & (pos < length_m)]
        idx = np.minimum((pos // space_bin_m).astype(int), n_space - 1)
        np.add.at(row, idx, 1)
    cells = []
    for b in sorted(counts):
        for s in range(n_space):
            n = int(counts[b][s])
            dens = n / n_frames[b] / widths_km[s]
            cells.append(SpatioTemporalCell(b * time_bin + t_origin, float(edges[s]), time_bin,
                                            float(widths_km[s] * 1000.0), float(dens), n, n_frames[b]))
    return cells


def day_of_week_pivot(records: Sequence[DensityRecord], time_bin: float = 3600.0) -> np.ndarray:
    """``(7, bins_per_day)`` mean density, Monday first; empty cells are NaN."""
    n_bins = int(round(SECONDS_PER_DAY / time_bin))
    sums = np.zeros((7, n_bins))
    n = np.zeros((7, n_bins))
    for r in records:
        if r.k is None:
            continue
        dt = datetime.fromtimestamp(r.interval_start, tz=timezone.utc)
        t = dt.hour * 3600 + dt.minute * 60 + dt.second
        col = min(int(t // time_bin), n_bins - 1)
        sums[dt.weekday(), col] += r.k
        n[dt.weekday(), col] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, sums / np.where(n > 0, n, 1), np.nan)


# ------------------------------------------------------------------- CSV output


def utc_iso(ts: float) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_utc_iso(text: str) -> float:
    return datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc).timestamp()


DENSITY_CSV_HEADER = ["camera", "lane", "interval_start", "interval_s", "k_veh_per_km", "n_frames"]


def records_to_csv(records: Sequence[DensityRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DENSITY_CSV_HEADER)
    for r in records:
        w.writerow([r.camera_id, r.lane_id, utc_iso(r.interval_start), repr(float(r.interval_length)),
                    "" if r.k is None else repr(float(r.k)), r.n_frames])
    return buf.getvalue()


def records_from_csv(text: str) -> List[DensityRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [
        DensityRecord(r["camera"], int(r["lane"]), parse_utc_iso(r["interval_start"]), float(r["interval_s"]),
                      None if r["k_veh_per_km"] == "" else float(r["k_veh_per_km"]), int(r["n_frames"]))
        for r in rows
    ]


def grid_to_csv(cells: Sequence[SpatioTemporalCell]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time_start_s", "space_start_m", "time_bin_s", "space_bin_m", "k_veh_per_km", "n_vehicles", "n_frames"])
    for c in cells:
        w.writerow([c.time_start, c.space_start_m, c.time_bin, c.space_bin_m, c.density, c.n_vehicles, c.n_frames])
    return buf.getvalue()
