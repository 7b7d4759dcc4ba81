import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trafficcam.density import (
    DensityRecord,
    FrameDensity,
    VehicleFrame,
    aggregate,
    day_of_week_pivot,
    density_from_counts,
    error_metrics,
    grid_to_csv,
    parse_utc_iso,
    records_from_csv,
    records_to_csv,
    st_grid,
    utc_iso,
)
from trafficcam.detection import LaneGeometry
from trafficcam.errors import LengthMismatch

MONDAY = parse_utc_iso("2024-01-01T00:00:00Z")


def lane(lane_id, length):
    return LaneGeometry(lane_id, [[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 0], [0, 1]], length)


def test_density_is_count_per_kilometre():
    k = density_from_counts({1: 3, 2: 0}, [lane(1, 60.0), lane(2, 250.0)])
    assert k == {1: pytest.approx(50.0), 2: 0.0}


# ----------------------------------------------------------------- errors


def test_error_metrics_hand_example():
    e = error_metrics([1.5, 1.0], [1.0, 2.0])
    assert e.mape == pytest.approx(50.0)
    assert e.mae == pytest.approx(0.75)
    assert e.rmse == pytest.approx(np.sqrt((0.25 + 1.0) / 2))
    assert e.n_skipped == 0


def test_zero_truth_skipped_in_mape_only():
    e = error_metrics([1.0, 3.0], [0.0, 2.0])
    assert e.mape == pytest.approx(50.0)
    assert e.n_skipped == 1
    assert e.mae == pytest.approx(1.0)


def test_length_mismatch():
    with pytest.raises(LengthMismatch):
        error_metrics([1.0], [1.0, 2.0])
    with pytest.raises(LengthMismatch):
        error_metrics([], [])


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(0, 500), st.floats(0.1, 500)), min_size=1, max_size=30))
def test_rmse_bounds_mae(pairs):
    est, tru = zip(*pairs)
    e = error_metrics(est, tru)
    assert e.rmse >= e.mae - 1e-9
    assert e.mae >= 0 and e.mape >= 0
    assert e.rmse <= e.mae * np.sqrt(len(pairs)) + 1e-9


# ----------------------------------------------------------------- aggregation


def test_two_minute_frames_give_seven_or_eight_per_interval():
    frames = [FrameDensity("cam", 1, MONDAY + 30.0 + 120.0 * i, 10.0 + i) for i in range(60)]
    recs = aggregate(frames)
    assert all(r.interval_length == 900.0 for r in recs)
    assert {r.n_frames for r in recs[:-1]} <= {7, 8}
    assert sum(r.n_frames for r in recs) == 60
    first = [f.k for f in frames if f.timestamp < MONDAY + 900.0]
    assert recs[0].k == pytest.approx(np.mean(first))
    assert recs[0].interval_start == MONDAY


def test_gaps_are_reported():
    frames = [FrameDensity("cam", 1, MONDAY + t, 5.0) for t in (0.0, 100.0, 2800.0)]
    recs = aggregate(frames)
    assert [r.is_gap for r in recs] == [False, True, True, False]
    assert recs[1].k is None and recs[1].n_frames == 0


def test_lanes_and_cameras_are_kept_apart():
    frames = [FrameDensity(c, l, MONDAY + 10.0, float(l)) for c in ("a", "b") for l in (1, 2)]
    recs = aggregate(frames)
    assert [(r.camera_id, r.lane_id, r.k) for r in recs] == [("a", 1, 1.0), ("a", 2, 2.0), ("b", 1, 1.0), ("b", 2, 2.0)]


def test_records_csv_round_trip():
    frames = [FrameDensity("cam", 1, MONDAY + t, 5.0 + t / 1000) for t in (0.0, 2000.0)]
    recs = aggregate(frames)
    text = records_to_csv(recs)
    assert text.splitlines()[0] == "camera,lane,interval_start,interval_s,k_veh_per_km,n_frames"
    assert text.splitlines()[1].startswith("cam,1,2024-01-01T00:00:00Z,900.0,")
    assert records_from_csv(text) == recs
    assert utc_iso(MONDAY) == "2024-01-01T00:00:00Z"


# ----------------------------------------------------------------- spatio-temporal


def test_st_grid_hand_example():
    frames = [VehicleFrame(0.0, (5.0, 15.0, 15.5)), VehicleFrame(30.0, (5.0,)), VehicleFrame(70.0, (25.0,))]
    cells = st_grid(frames, time_bin=60.0, space_bin_m=10.0, length_m=30.0)
    grid = {(c.time_start, c.space_start_m): c for c in cells}
    # first minute: two frames, bins hold 2, 2, 0 vehicles over 10 m each
    assert grid[(0.0, 0.0)].density == pytest.approx(2 / 2 / 0.01)
    assert grid[(0.0, 10.0)].density == pytest.approx(2 / 2 / 0.01)
    assert grid[(0.0, 20.0)].density == 0.0
    assert grid[(60.0, 20.0)].n_vehicles == 1 and grid[(60.0, 20.0)].n_frames == 1


def test_st_grid_conserves_vehicles():
    rng = np.random.default_rng(0)
    frames = [VehicleFrame(float(t), tuple(rng.uniform(0, 95, rng.integers(0, 12)))) for t in range(0, 600, 7)]
    cells = st_grid(frames, time_bin=60.0, space_bin_m=30.0, length_m=95.0)
    assert sum(c.n_vehicles for c in cells) == sum(len(f.positions_m) for f in frames)
    # the short last bin is 5 m wide and density uses its true width
    assert {c.space_bin_m for c in cells} == {30.0, 5.0}
    for t in {c.time_start for c in cells}:
        row = [c for c in cells if c.time_start == t]
        in_bin = [f for f in frames if t <= f.timestamp < t + 60]
        mean_count = np.mean([len(f.positions_m) for f in in_bin])
        assert sum(c.density * c.space_bin_m / 1000 for c in row) == pytest.approx(mean_count)


def test_st_grid_folds_days():
    frames = [VehicleFrame(MONDAY + d * 86400 + 3600.0, (1.0,) * (d + 1)) for d in range(3)]
    cells = st_grid(frames, 3600.0, 10.0, 10.0, fold_days=True, t_origin=MONDAY)
    assert len(cells) == 1
    assert cells[0].time_start == MONDAY + 3600.0
    assert cells[0].density == pytest.approx(2.0 / 0.01)
    assert grid_to_csv(cells).splitlines()[0].startswith("time_start_s,space_start_m")


def test_day_of_week_pivot():
    recs = [
        DensityRecord("c", 1, MONDAY + 8 * 3600, 900, 10.0, 7),
        DensityRecord("c", 1, MONDAY + 8 * 3600 + 900, 900, 20.0, 7),
        DensityRecord("c", 1, MONDAY + 86400 * 2 + 60, 900, 4.0, 7),
        DensityRecord("c", 1, MONDAY + 9 * 3600, 900, None, 0),
    ]
    grid = day_of_week_pivot(recs)
    assert grid.shape == (7, 24)
    assert grid[0, 8] == 15.0
    assert grid[2, 0] == 4.0
    assert np.isnan(grid[0, 9])
    assert np.isfinite(grid).sum() == 2
