from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtrdiv.dataio import csv_has_propensity, output_paths, read_trajectories_csv, write_trajectories_csv
from dtrdiv.errors import InvalidRecordError
from dtrdiv.qcore import ActionSet, TrajectoryDataset
from dtrdiv.simulate import ScenarioConfig, generate_correct, generate_two_stage


def assert_same(a: TrajectoryDataset, b: TrajectoryDataset):
    assert a.T == b.T and a.actions == b.actions
    for s, r in zip(a.stages, b.stages):
        np.testing.assert_array_equal(s.x, r.x)
        np.testing.assert_array_equal(s.a, r.a)
        np.testing.assert_array_equal(s.y, r.y)
        if s.p is None:
            assert r.p is None
        else:
            np.testing.assert_array_equal(s.p, r.p)


def test_single_stage_round_trip(tmp_path):
    data = generate_correct(ScenarioConfig(n=300), 4)
    write_trajectories_csv(data, tmp_path / "d.csv")
    assert csv_has_propensity(tmp_path / "d.csv")
    assert_same(data, read_trajectories_csv(tmp_path / "d.csv"))


def test_two_stage_round_trip(tmp_path):
    data = generate_two_stage(100, 2)
    write_trajectories_csv(data, tmp_path / "d.csv")
    back = read_trajectories_csv(tmp_path / "d.csv")
    assert_same(data, back)
    assert back.ids == tuple(str(i) for i in data.ids)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.sampled_from([1, 2]), st.floats(0, 1e6), st.floats(1e-9, 1.0)), min_size=2, max_size=20))
def test_round_trip_is_bit_exact(tmp_path_factory, rows):
    x, a, y, p = (list(c) for c in zip(*rows))
    data = TrajectoryDataset.single_stage(np.array(x)[:, None], a, y, p, ActionSet((1, 2)))
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    write_trajectories_csv(data, path)
    assert_same(data, read_trajectories_csv(path, ActionSet((1, 2))))


@pytest.mark.parametrize(
    "body, match",
    [
        ("x_1,a,y\n0.5,1,-2\n", "row 2: outcome"),
        ("x_1,a,y,p\n0.5,1,2,0\n", "row 2: propensity"),
        ("x_1,a,y\n0.5,1.5,2\n", "row 2: action"),
        ("x_1,a,y\n0.5,1,2\n0.1,2,abc\n", "row 3"),
        ("x_1,a\n0.5,1\n", "'y'"),
        ("x_2,a,y\n0.5,1,2\n", "x_1..x_d"),
        ("x_1,a,y,z\n0.5,1,2,3\n", "unexpected"),
        ("id,t,x_1,a,y\n1,1,0,1,1\n1,3,0,2,1\n", "contiguously"),
        ("x_1,a,y\n0.5,1,2,7\n", "row 2: expected 3 fields"),
        ("", "empty"),
    ],
)
def test_malformed_files(tmp_path, body, match):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(InvalidRecordError, match=match):
        read_trajectories_csv(path, ActionSet((1, 2)))


def test_output_paths():
    assert [p.name for p in output_paths("out/t1a")] == ["t1a.json", "t1a.csv"]
    assert [p.name for p in output_paths("t1a.json")] == ["t1a.json", "t1a.csv"]
