import json

import numpy as np
import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from bridgekit.exceptions import ValidationError
from bridgekit.gauss_markov import GaussianMarginal, LinearPrior, TimeGrid, bridge_solve
from bridgekit.serialization import Scenario, atomic_write, bridge_from_json, bridge_to_json, fmt, write_csv

BASE = {
    "version": 1,
    "prior": {"drift": [[-1.0, 0.0], [0.5, -2.0]], "epsilon": 0.5},
    "marginals": {
        "initial": {"mean": [0.0, 1.0], "covariance": [[1.0, 0.2], [0.2, 2.0]]},
        "final": {"mean": [3.0, -1.0], "covariance": [[0.5, 0.0], [0.0, 0.5]]},
    },
    "time": {"start": 0.0, "end": 2.0, "steps": 400},
}


def mapping(**changes):
    data = yaml.safe_load(yaml.safe_dump(BASE))
    data.update(changes)
    return data


def test_fmt_uses_nine_significant_digits():
    assert fmt(np.pi) == "3.14159265"
    assert fmt(-2.6180339887498949) == "-2.61803399"
    assert fmt(1e-20) == "1e-20"
    assert fmt(5) == "5"


def test_write_csv_formats_numbers(tmp_path):
    write_csv(tmp_path / "a.csv", ["id", "value"], [[np.int64(3), 1.0 / 3.0], [4, 2.0]])
    assert (tmp_path / "a.csv").read_text() == "id,value\n3,0.333333333\n4,2\n"


def test_atomic_write_leaves_no_temporaries(tmp_path):
    target = tmp_path / "sub" / "file.txt"
    atomic_write(target, "one\n")
    atomic_write(target, "two\n")
    assert target.read_text() == "two\n"
    assert [p.name for p in target.parent.iterdir()] == ["file.txt"]


def test_scenario_defaults():
    s = Scenario.from_mapping(mapping())
    assert s.prior.epsilon == 0.5
    assert s.time.steps == 400
    assert s.space is None
    assert s.simulation == {"paths": 10_000, "seed": 0, "dt": None, "export_paths": 10}
    assert s.output == {"directory": ".", "formats": ["json", "csv"]}


def test_scenario_default_time_grid():
    data = mapping()
    del data["time"]
    assert Scenario.from_mapping(data).time.steps == 1000


def test_scenario_round_trip_is_byte_identical():
    data = mapping(
        space={"lower": [-8.0, -8.0], "upper": [9.0, 9.0], "points": [40, 40], "tol": 1e-6},
        simulation={"paths": 50, "seed": 7, "dt": 0.01},
        output={"directory": "out", "formats": ["csv"]},
    )
    text = Scenario.from_mapping(data).dumps()
    again = Scenario.loads(text)
    assert again.dumps() == text
    assert again.simulation["dt"] == 0.01
    assert again.space.points == (40, 40)


@pytest.mark.parametrize(
    "change",
    [
        {"version": 2},
        {"version": "1"},
        {"extra": 1},
        {"prior": {"drift": [[0.0]], "epsilon": 1.0, "colour": "red"}},
        {"prior": {"drift": [[0.0]], "epsilon": -1.0}},
        {"prior": {"drift": [[0.0, 1.0]]}},
        {"time": {"start": 1.0, "end": 0.0, "steps": 10}},
        {"time": {"steps": 10.5}},
        {"simulation": {"paths": 0}},
        {"simulation": {"seed": -1}},
        {"simulation": {"dt": 0.0}},
        {"output": {"formats": ["xml"]}},
        {"space": {"lower": [0.0], "upper": [1.0], "points": [40]}},
        {"space": {"lower": [0.0, 0.0], "upper": [1.0, 1.0], "points": [40, 40], "slices": 1}},
    ],
)
def test_scenario_rejects_bad_input(change):
    with pytest.raises(ValidationError):
        Scenario.from_mapping(mapping(**change))


def test_scenario_rejects_mismatched_marginal():
    data = mapping()
    data["marginals"]["final"] = {"mean": [0.0], "covariance": [[1.0]]}
    with pytest.raises(ValidationError):
        Scenario.from_mapping(data)


def test_scenario_rejects_missing_and_invalid_text():
    with pytest.raises(ValidationError):
        Scenario.from_mapping({"version": 1})
    with pytest.raises(ValidationError):
        Scenario.loads("version: [1,")
    with pytest.raises(ValidationError):
        Scenario.loads("- just a list")


def test_with_epsilon_keeps_the_original():
    s = Scenario.from_mapping(mapping())
    t = s.with_epsilon(0.0)
    assert t.prior.epsilon == 0.0 and s.prior.epsilon == 0.5
    np.testing.assert_array_equal(t.prior.drift, s.prior.drift)


@pytest.fixture(scope="module")
def bridge():
    return bridge_solve(
        LinearPrior([[-1.0, 0.3], [0.0, -0.5]], 0.7),
        GaussianMarginal([0.0, 1.0], [[1.0, 0.2], [0.2, 2.0]]),
        GaussianMarginal([3.0, -1.0], [[0.5, 0.0], [0.0, 0.5]]),
        TimeGrid(0.0, 1.0, 200),
    )


def test_bridge_json_round_trip(bridge):
    text = bridge_to_json(bridge)
    back = bridge_from_json(text)
    assert bridge_to_json(back) == text
    for name in ("pi", "mean_drift", "mean", "covariance"):
        np.testing.assert_array_equal(getattr(back, name), getattr(bridge, name))
    assert back.epsilon == bridge.epsilon
    assert back.grid == bridge.grid


def test_bridge_json_schema(bridge):
    doc = json.loads(bridge_to_json(bridge))
    assert doc["format"] == "bridgekit.gauss-markov-bridge"
    assert doc["times"] == {"start": 0.0, "end": 1.0, "steps": 200}
    assert np.asarray(doc["pi"]).shape == (201, 2, 2)
    assert doc["tolerances"] == {"endpoint_tol": 1e-6, "time_steps": 200}
    assert set(doc["diagnostics"]) >= {"mean_endpoint_error", "covariance_endpoint_error"}


@pytest.mark.parametrize(
    "edit",
    [
        lambda d: d.update(format="other"),
        lambda d: d.pop("pi"),
        lambda d: d.update(extra=1),
        lambda d: d.update(pi=d["pi"][:-1]),
        lambda d: d.update(dimension=3),
    ],
)
def test_bridge_json_rejects_tampering(bridge, edit):
    doc = json.loads(bridge_to_json(bridge))
    edit(doc)
    with pytest.raises(ValidationError):
        bridge_from_json(json.dumps(doc))
    with pytest.raises(ValidationError):
        bridge_from_json("{not json")


@given(
    eps=st.floats(0.0, 5.0),
    drift=st.floats(-2.0, 2.0),
    var0=st.floats(0.2, 4.0),
    var1=st.floats(0.2, 4.0),
    shift=st.floats(-5.0, 5.0),
)
def test_bridge_json_round_trip_property(eps, drift, var0, var1, shift):
    b = bridge_solve(
        LinearPrior([[drift]], eps),
        GaussianMarginal([0.0], [[var0]]),
        GaussianMarginal([shift], [[var1]]),
        TimeGrid(0.0, 1.0, 400),
        endpoint_tol=1e-4,
    )
    text = bridge_to_json(b)
    assert bridge_to_json(bridge_from_json(text)) == text
