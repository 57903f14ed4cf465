import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geoleak import evaluation as ev
from geoleak import neural
from geoleak.errors import EmptyReportError, InvalidInputError
from geoleak.geosn import (
    SnapshotSequence,
    Split,
    SplitAssignment,
    build_examples,
    normalization_bounds,
)
from geoleak.graph import SocialGraph

R = 6371.0088

lat_st = st.floats(-90, 90, allow_nan=False)
lon_st = st.floats(-180, 180, allow_nan=False)


# -- haversine -----------------------------------------------------------------

def test_same_point_is_zero():
    assert ev.haversine_km((40.7, -74.0), (40.7, -74.0)) == 0.0


def test_antipodal():
    assert ev.haversine_km((0, 0), (0, 180)) == pytest.approx(math.pi * R, abs=1e-9)
    assert ev.haversine_km((0, 0), (0, 180)) == pytest.approx(20015.11, abs=0.01)


def test_one_degree_of_longitude_on_equator():
    assert ev.haversine_km((0, 0), (0, 1)) == pytest.approx(R * math.pi / 180, abs=1e-9)
    assert ev.haversine_km((0, 0), (0, 1)) == pytest.approx(111.1950, abs=1e-3)


@pytest.mark.parametrize("a", [(91, 0), (0, 181), (float("nan"), 0)])
def test_out_of_range(a):
    with pytest.raises(InvalidInputError):
        ev.haversine_km(a, (0, 0))


@settings(max_examples=300, deadline=None)
@given(a=st.tuples(lat_st, lon_st), b=st.tuples(lat_st, lon_st))
def test_symmetric_and_non_negative(a, b):
    d = ev.haversine_km(a, b)
    assert d >= 0
    assert d == pytest.approx(ev.haversine_km(b, a), abs=1e-9)
    assert d <= math.pi * R + 1e-6


def test_triangle_inequality():
    r = np.random.default_rng(0)
    pts = [(r.uniform(-90, 90, 10_000), r.uniform(-180, 180, 10_000)) for _ in range(3)]
    ab = ev.haversine_km(pts[0], pts[1])
    bc = ev.haversine_km(pts[1], pts[2])
    ac = ev.haversine_km(pts[0], pts[2])
    assert np.all(ac <= ab + bc + 1e-9)


def test_vectorised_matches_scalar():
    r = np.random.default_rng(1)
    lat, lon = r.uniform(-80, 80, 20), r.uniform(-170, 170, 20)
    d = ev.haversine_km((lat, lon), (40.0, -74.0))
    for i in range(20):
        assert d[i] == pytest.approx(ev.haversine_km((lat[i], lon[i]), (40.0, -74.0)), abs=1e-9)


# -- percentiles and categories ------------------------------------------------

def test_median_by_nearest_rank():
    pc = ev.nearest_rank_percentiles([4.0, 1.0, 3.0, 2.0])
    assert pc[50] == 2.0
    assert pc[25] == 1.0
    assert pc[26] == 2.0
    assert pc[100] == 4.0
    assert sorted(pc) == list(range(1, 101))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1e4, allow_nan=False), min_size=1, max_size=300))
def test_percentile_curve_monotone(errors):
    pc = ev.nearest_rank_percentiles(errors)
    vals = [pc[q] for q in range(1, 101)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert vals[-1] == max(errors)
    assert vals[0] in errors


def test_categorize_examples():
    assert ev.categorize([0.5, 6.0, 20.0]) == {"highly": 1, "average": 1, "poorly": 1}
    assert ev.categorize(np.zeros(5)) == {"highly": 5, "average": 0, "poorly": 0}
    assert ev.categorize([1.0, 7.0, 7.0001]) == {"highly": 1, "average": 1, "poorly": 1}
    assert ev.categorize([0.5, 3.0, 9.0], high_km=3.0, poor_km=3.0)["average"] == 0


@settings(max_examples=100, deadline=None)
@given(errors=st.lists(st.floats(0, 100, allow_nan=False), max_size=200),
       high=st.floats(0, 50), poor=st.floats(0, 50))
def test_categories_partition(errors, high, poor):
    c = ev.categorize(errors, high, poor)
    assert sum(c.values()) == len(errors)
    assert min(c.values()) >= 0


# -- a small hand-built dataset ------------------------------------------------

def tiny(n_slots=6, n_users=3, test_cells=((4, 0),), seed=0):
    r = np.random.default_rng(seed)
    lat = 40.0 + r.random((n_slots, n_users))
    lon = -74.0 + r.random((n_slots, n_users))
    seq = SnapshotSequence(lat, lon, 0, 10800)
    labels = np.full((n_slots, n_users), Split.TRAIN, dtype=np.int8)
    for s, u in test_cells:
        labels[s, u] = Split.TEST
    splits = SplitAssignment(labels, 0.5, seed)
    norm = normalization_bounds(lat.ravel(), lon.ravel())
    return seq, splits, norm


def truth(examples, seq, norm):
    out = np.zeros((len(examples), seq.n_users, 2))
    for b, e in enumerate(examples):
        out[b] = np.nan_to_num(e.target.values)
    return out


def test_perfect_predictor():
    seq, splits, norm = tiny(test_cells=((3, 0), (4, 1), (5, 2)))
    ex = build_examples(seq, 2, splits, norm)
    rep = ev.evaluate(truth(ex, seq, norm), ex, seq, norm)
    assert rep.mean_km == pytest.approx(0.0, abs=1e-6)
    assert rep.pct_below_1km == 100.0
    assert len(rep.errors_km) == 3
    assert sum(rep.category_counts.values()) == 3


def test_only_test_entries_scored():
    seq, splits, norm = tiny(n_slots=8, n_users=4, test_cells=((3, 1), (6, 2)))
    ex = build_examples(seq, 2, splits, norm)
    audit = []
    rep = ev.evaluate(np.full((len(ex), 4, 2), 0.5), ex, seq, norm, audit=audit)
    assert sorted(rep.entries) == [(3, 1), (6, 2)]
    assert all(kind == "TEST" for _, _, kind in audit)


def test_empty_test_set():
    seq, splits, norm = tiny(test_cells=())
    ex = build_examples(seq, 2, splits, norm)
    with pytest.raises(EmptyReportError):
        ev.evaluate(np.zeros((len(ex), 3, 2)), ex, seq, norm)


def test_report_is_deterministic():
    seq, splits, norm = tiny(n_slots=10, n_users=5, test_cells=((4, 0), (7, 3), (9, 4)))
    ex = build_examples(seq, 3, splits, norm)
    pred = np.random.default_rng(3).random((len(ex), 5, 2))
    a = ev.evaluate(pred, ex, seq, norm).to_dict()
    b = ev.evaluate(pred.copy(), ex, seq, norm).to_dict()
    assert a == b


def test_report_errors_match_direct_haversine():
    seq, splits, norm = tiny(n_slots=10, n_users=5, test_cells=((4, 0), (7, 3)))
    ex = build_examples(seq, 3, splits, norm)
    pred = np.full((len(ex), 5, 2), 0.25)
    rep = ev.evaluate(pred, ex, seq, norm)
    plat, plon = norm.denormalize(0.25, 0.25)
    for (s, u), km in zip(rep.entries, rep.errors_km):
        assert km == pytest.approx(ev.haversine_km((plat, plon), (seq.lat[s, u], seq.lon[s, u])), abs=1e-9)


# -- mobility ------------------------------------------------------------------

def test_stationary_user_perfect_prediction_row():
    seq, splits, norm = tiny(n_slots=6, n_users=2, test_cells=((4, 0),))
    seq.lat[:, 0] = 40.5
    seq.lon[:, 0] = -73.5
    ex = build_examples(seq, 2, splits, norm)
    rep = ev.evaluate(truth(ex, seq, norm), ex, seq, norm)
    row = ev.mobility_scatter(rep, split_threshold_km=1.0)[0]
    assert row["user_id"] == 0
    assert row["std_lat"] == 0.0 and row["std_lon"] == 0.0
    assert row["mean_error_km"] == pytest.approx(0.0, abs=1e-6)
    assert row["flag"] == "below"


def test_single_geotag_std_is_zero():
    lat = np.full((4, 2), np.nan)
    lon = np.full((4, 2), np.nan)
    lat[1, 0], lon[1, 0] = 40.0, -74.0
    lat[:, 1], lon[:, 1] = [40.0, 41.0, 40.0, 41.0], -74.0
    std_lat, std_lon = ev.user_coordinate_std(SnapshotSequence(lat, lon, 0, 10800))
    assert std_lat[0] == 0.0 and std_lon[0] == 0.0
    assert std_lat[1] == pytest.approx(0.5)  # population std


def test_scatter_threshold_defaults_to_run_mean():
    seq, splits, norm = tiny(n_slots=10, n_users=5, test_cells=((4, 0), (5, 1), (6, 2), (7, 3)))
    ex = build_examples(seq, 2, splits, norm)
    rep = ev.evaluate(np.random.default_rng(0).random((len(ex), 5, 2)), ex, seq, norm)
    rows = ev.mobility_scatter(rep)
    for r in rows:
        assert r["flag"] == ("below" if r["mean_error_km"] <= rep.mean_km else "above")
    assert 0.0 < ev.fraction_below(rows) < 1.0


# -- baselines -----------------------------------------------------------------

def test_last_known_zero_error_for_static_user():
    seq, splits, norm = tiny(n_slots=6, n_users=2, test_cells=((5, 0),))
    seq.lat[:, 0] = 40.3
    seq.lon[:, 0] = -73.7
    ex = build_examples(seq, 2, splits, norm)
    pred = ev.baseline_last_known(ex, np.array([0.5, 0.5]))
    rep = ev.evaluate(pred, ex, seq, norm)
    assert rep.mean_km == pytest.approx(0.0, abs=1e-6)


def test_friend_centroid_is_arithmetic_mean():
    lat = np.array([[np.nan, 0.0, 0.0]] * 3)
    lon = np.array([[np.nan, 0.0, 2.0]] * 3)
    seq = SnapshotSequence(lat, lon, 0, 10800)
    splits = SplitAssignment(np.where(np.isnan(lat), 0, 1).astype(np.int8), 1.0, 0)
    norm = normalization_bounds([-1.0, 1.0], [0.0, 2.0])
    ex = build_examples(seq, 2, splits, norm)
    graph = SocialGraph.from_friendships(3, [(0, 1), (0, 2)])
    pred = ev.baseline_friend_centroid(ex, graph, np.array([0.5, 0.5]))
    assert norm.denormalize(*pred[0, 0]) == pytest.approx((0.0, 1.0))


def test_no_friends_no_history_falls_back_to_centroid():
    lat = np.array([[np.nan, 40.0]] * 3)
    lon = np.array([[np.nan, -74.0]] * 3)
    seq = SnapshotSequence(lat, lon, 0, 10800)
    splits = SplitAssignment(np.where(np.isnan(lat), 0, 1).astype(np.int8), 1.0, 0)
    norm = normalization_bounds([39.0, 41.0], [-75.0, -73.0])
    ex = build_examples(seq, 2, splits, norm)
    graph = SocialGraph.from_friendships(2, [])
    centroid = np.array([0.2, 0.7])
    pred = ev.baseline_friend_centroid(ex, graph, centroid)
    np.testing.assert_array_equal(pred[0, 0], centroid)
    # a user without friends but with history keeps her own last geo-tag
    np.testing.assert_allclose(pred[0, 1], [0.5, 0.5])


def test_training_centroid_uses_train_only():
    seq, splits, norm = tiny(n_slots=5, n_users=2, test_cells=((2, 0),))
    seq.lat[2, 0] = 41.0
    c = ev.training_centroid(seq, splits, norm)
    train = splits.labels == Split.TRAIN
    zlat, zlon = norm.normalize(seq.lat[train], seq.lon[train])
    np.testing.assert_allclose(c, [zlat.mean(), zlon.mean()])


def test_subset_mean():
    seq, splits, norm = tiny(n_slots=8, n_users=4, test_cells=((3, 1), (6, 2), (7, 2)))
    ex = build_examples(seq, 2, splits, norm)
    rep = ev.evaluate(np.full((len(ex), 4, 2), 0.5), ex, seq, norm)
    assert ev.subset_mean_km(rep, [2]) == pytest.approx(np.mean(rep.errors_km[1:]))
    with pytest.raises(EmptyReportError):
        ev.subset_mean_km(rep, [0])


# -- sweep ---------------------------------------------------------------------

TINY_MODEL = neural.ModelConfig(n_ts=2, n_cnn=2, w_cnn=2, n_g=(3,), k=2, max_epochs=2, batch_size=0)


def test_sweep_with_p_one_surfaces_empty_report():
    seq, _, _ = tiny(n_slots=6, n_users=3)
    graph = SocialGraph.from_friendships(3, [(0, 1), (1, 2)])
    res = ev.critical_mass_sweep(seq, graph, [1.0], TINY_MODEL, seeds=(1,))
    assert list(res.cells) == [(1.0, 1)]
    assert res.cells[(1.0, 1)].report is None
    assert res.errors[(1.0, 1)].startswith("empty-report")


def test_sweep_rejects_bad_p():
    seq, _, _ = tiny()
    with pytest.raises(InvalidInputError):
        ev.critical_mass_sweep(seq, SocialGraph.from_friendships(3, []), [0.0], TINY_MODEL)


def test_sweep_cells_and_skip():
    seq, _, _ = tiny(n_slots=12, n_users=5, seed=4)
    graph = SocialGraph.from_friendships(5, [(0, 1), (1, 2), (2, 3), (3, 4)])
    res = ev.critical_mass_sweep(seq, graph, [0.5, 0.3], TINY_MODEL, seeds=(2, 1), skip={(0.5, 1)})
    assert sorted(res.cells) == [(0.3, 1), (0.3, 2), (0.5, 2)]
    again = ev.critical_mass_sweep(seq, graph, [0.5], TINY_MODEL, seeds=(2,))
    assert again.cells[(0.5, 2)].report.to_dict() == res.cells[(0.5, 2)].report.to_dict()
    agg = res.mean_by_p()
    assert set(agg) <= {0.3, 0.5}


def test_sweep_csv_round_trip(tmp_path):
    rows = {(0.9, 1): (2.5, 40.0), (0.01, 3): (17.123456789, 1.23456), (0.1, 2): (5.0, 45.2)}
    path = tmp_path / "sweep.csv"
    ev.write_sweep_csv(rows, path)
    text = path.read_text()
    assert text.splitlines()[0] == "p,seed,mean_km,pct_below_1km"
    assert text.splitlines()[1] == "0.01,3,17.123457,1.2346"
    back = ev.read_sweep_csv(path)
    ev.write_sweep_csv(back, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_text() == text


def test_percentiles_csv(tmp_path):
    seq, splits, norm = tiny(n_slots=10, n_users=5, test_cells=((4, 0), (7, 3), (9, 4)))
    ex = build_examples(seq, 3, splits, norm)
    rep = ev.evaluate(np.full((len(ex), 5, 2), 0.5), ex, seq, norm)
    ev.write_percentiles_csv(rep, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "percentile,km"
    assert len(lines) == 101
    ev.write_mobility_csv(ev.mobility_scatter(rep), tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().startswith("user_id,std_lat,std_lon,mean_error_km,flag\n")
