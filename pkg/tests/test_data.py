import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cflab.data import (
    ExtractionCriteria, SplitError, SplitSpec, extract_events, generate_fleet, make_tasks,
    read_events_csv, read_truth, task_manifest, tasks_from_manifest, write_events_csv,
)
from cflab.physics import DEFAULT_IDM_BOX
from cflab.style import DEFAULT_THRESHOLDS, bin_arrays

from conftest import make_event, steady_event

C = ExtractionCriteria()


def same(xs, ys):
    return len(xs) == len(ys) and all(x.equals(y) for x, y in zip(xs, ys))


def event_of(seconds, lateral=0.0, driver="d0", eid="e0", **kw):
    n = int(round(seconds / 0.1)) + 1
    lat = np.zeros(n)
    lat[n // 2] = lateral
    return steady_event(n, driver_id=driver, event_id=eid, lateral=lat, **kw)


def driver_events(driver, n_events, seconds=16.0):
    return [event_of(seconds, driver=driver, eid=f"{driver}-{k:02d}") for k in range(n_events)]


@pytest.fixture(scope="module")
def fleet():
    return generate_fleet(44, 25, profiles_seed=3)


# extraction boundaries -------------------------------------------------------


def test_exactly_fifteen_seconds_is_rejected():
    evs = driver_events("a", 20, seconds=15.0)
    acc, counts, rej = extract_events(evs)
    assert acc == [] and counts == {}
    assert {r.reason for r in rej} == {"too-short"}


def test_just_over_fifteen_seconds_is_accepted():
    acc, counts, _ = extract_events(driver_events("a", 20, seconds=15.1))
    assert counts == {"a": 20}


def test_one_lateral_sample_over_limit_is_rejected():
    evs = driver_events("a", 20)
    evs[3] = event_of(16.0, lateral=2.6, driver="a", eid="a-03")
    acc, counts, rej = extract_events(evs + driver_events("b", 20))
    # a keeps only 19 events and is dropped entirely
    assert counts == {"b": 20}
    reasons = {(r.event_id, r.reason) for r in rej}
    assert ("a-03", "lateral-offset") in reasons
    assert sum(r.reason == "driver-below-min-events" for r in rej) == 19
    assert event_of(16.0, lateral=-2.6).lateral.min() == -2.6
    assert extract_events([event_of(16.0, lateral=-2.6)], ExtractionCriteria(min_events_per_driver=1))[0] == []


def test_driver_with_nineteen_events_is_dropped():
    acc, counts, rej = extract_events(driver_events("a", 19) + driver_events("b", 20))
    assert counts == {"b": 20}
    assert {r.event_id for r in rej} == {f"a-{k:02d}" for k in range(19)}


def test_lead_vehicle_change_and_non_positive_spacing():
    n = 200
    ids = ("lv0",) * 100 + ("lv1",) * 100
    changed = steady_event(n, lv_ids=ids)
    gap = np.full(n, 10.0)
    gap[50] = 0.0
    touching = make_event(gap, 10.0, 10.0)
    one = ExtractionCriteria(min_events_per_driver=1)
    _, _, rej = extract_events([changed, touching], one)
    assert [r.reason for r in rej] == ["lead-vehicle-changed", "non-positive-spacing"]
    relaxed = ExtractionCriteria(min_events_per_driver=1, require_constant_lv=False)
    assert len(extract_events([changed], relaxed)[0]) == 1


def test_criteria_validation():
    with pytest.raises(ValueError):
        ExtractionCriteria(max_lateral=0)
    with pytest.raises(ValueError):
        ExtractionCriteria(min_events_per_driver=0)


def test_accepted_events_satisfy_every_criterion(fleet):
    acc, _, _ = extract_events(fleet.events)
    for e in acc:
        assert e.duration > C.min_duration
        assert np.max(np.abs(e.lateral)) < C.max_lateral
        assert e.spacing.min() > 0


# generation ------------------------------------------------------------------


def test_default_fleet_size_and_all_pass_extraction(fleet):
    assert len(fleet.events) == 1100
    acc, counts, rej = extract_events(fleet.events)
    assert len(acc) == 1100 and rej == []
    assert len(counts) == 44 and set(counts.values()) == {25}


def test_same_seed_gives_identical_fleet():
    a = generate_fleet(3, 4, profiles_seed=9)
    b = generate_fleet(3, 4, profiles_seed=9)
    assert same(a.events, b.events)
    assert a.truth_json() == b.truth_json()
    c = generate_fleet(3, 4, profiles_seed=10)
    assert not same(c.events, a.events)


def test_driver_streams_are_independent_of_fleet_size():
    small = generate_fleet(2, 3, profiles_seed=4)
    big = generate_fleet(5, 3, profiles_seed=4)
    assert same(small.events, big.events[:6])


def test_fleet_covers_every_table_bin(fleet):
    sp = np.concatenate([e.spacing for e in fleet.events])
    dv = np.concatenate([e.dv for e in fleet.events])
    acc = np.concatenate([e.a_fv for e in fleet.events])
    a, r, g, _ = bin_arrays(sp, dv, acc, DEFAULT_THRESHOLDS)
    assert set(np.unique(g)) == {0, 1, 2}
    assert set(np.unique(r)) == set(range(5))
    assert set(np.unique(a)) == set(range(5))


def test_profiles_inside_box(fleet):
    for p in fleet.profiles.values():
        assert DEFAULT_IDM_BOX.contains(p.base.to_array())


def test_truth_round_trip(tmp_path, fleet):
    path = tmp_path / "truth.json"
    path.write_text(fleet.truth_json())
    truth = read_truth(path)
    assert truth.keys() == fleet.profiles.keys()
    assert all(truth[k] == fleet.profiles[k] for k in truth)
    path.write_text(json.dumps({"drivers": json.loads(fleet.truth_json())}))
    assert read_truth(path) == truth


def test_fleet_csv_round_trip(tmp_path):
    fl = generate_fleet(2, 2, profiles_seed=1)
    path = tmp_path / "f.csv"
    write_events_csv(fl.events, path)
    assert same(read_events_csv(path), fl.events)


# splits ----------------------------------------------------------------------


def twenty_event_drivers(n_drivers):
    return [e for d in range(n_drivers) for e in driver_events(f"D{d:02d}", 20)]


def test_default_split_is_33_by_11(fleet):
    train, test = make_tasks(fleet.events)
    assert len(train) == 33 and len(test) == 11
    assert not {t.driver_id for t in train} & {t.driver_id for t in test}


@pytest.mark.parametrize("fraction, n_sup", [(0.25, 5), (1 / 3, 6)])
def test_support_query_counts(fraction, n_sup):
    train, test = make_tasks(twenty_event_drivers(4), SplitSpec(3, 1, fraction))
    for t in train + test:
        assert (len(t.support), len(t.query)) == (n_sup, 20 - n_sup)


def test_split_errors():
    with pytest.raises(SplitError):
        make_tasks(twenty_event_drivers(3), SplitSpec(3, 1))
    with pytest.raises(SplitError):
        make_tasks(driver_events("a", 2), SplitSpec(1, 0))
    with pytest.raises(ValueError):
        SplitSpec(support_fraction=1.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), frac=st.floats(0.05, 0.95), n_events=st.integers(20, 30))
def test_partition_is_exact_and_disjoint(seed, frac, n_events):
    events = [e for d in range(3) for e in driver_events(f"D{d}", n_events)]
    train, test = make_tasks(events, SplitSpec(2, 1, frac, seed))
    for t in train + test:
        sup = {e.event_id for e in t.support}
        qry = {e.event_id for e in t.query}
        assert not sup & qry
        assert len(sup) + len(qry) == n_events
        assert len(sup) == int(np.floor(n_events * frac + 1e-9))


def test_manifest_round_trip(fleet):
    train, test = make_tasks(fleet.events, SplitSpec(seed=5))
    manifest = json.loads(json.dumps(task_manifest(train, test)))
    tr2, te2 = tasks_from_manifest(manifest, fleet.events)
    assert [t.driver_id for t in tr2] == [t.driver_id for t in train]
    assert all(same(a.support, b.support) and same(a.query, b.query) for a, b in zip(tr2 + te2, train + test))
    manifest[train[0].driver_id]["query"].append("nope")
    with pytest.raises(SplitError, match="nope"):
        tasks_from_manifest(manifest, fleet.events)
