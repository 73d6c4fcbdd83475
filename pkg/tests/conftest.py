import json

import numpy as np
import pytest

import sase


def make_feeder(n, r=0.02, x=0.08, shunt_b=0.0, lateral_every=5, seed_loads=True):
    """Deterministic radial feeder with n buses: a trunk plus short laterals."""
    buses = [{"id": 1, "role": "slack", "v_set": 1.0, "theta_set": 0.0,
              "shunt_g": 0.0, "shunt_b": shunt_b}]
    branches = []
    for i in range(2, n + 1):
        parent = i - 2 if (lateral_every and i % lateral_every == 0 and i > 3) else i - 1
        scale = (0.5 + ((i * 7) % 10) / 10.0) if seed_loads else 1.0
        buses.append({
            "id": i, "role": "load",
            "p_nom": -0.004 * scale, "q_nom": -0.0016 * scale,
            "shunt_g": 0.0, "shunt_b": shunt_b,
        })
        branches.append({"from": parent, "to": i, "r": r, "x": x})
    doc = {"base_mva": 1.0, "buses": buses, "branches": branches}
    return sase.parse_network(json.dumps(doc))


def make_star6(r=0.05, x=0.2):
    """Star companion of the bundled feeder: loads hang directly off the slack."""
    buses = [{"id": 1, "role": "slack", "v_set": 1.0, "theta_set": 0.0}]
    p = [-0.012, -0.015, -0.009, -0.018, -0.012]
    for i in range(5):
        buses.append({"id": i + 2, "role": "load", "p_nom": p[i], "q_nom": 0.4 * p[i]})
    branches = [{"from": 1, "to": i + 2, "r": r, "x": x} for i in range(5)]
    return sase.parse_network(json.dumps({"base_mva": 1.0, "buses": buses, "branches": branches}))


TWO_BUS_DOC = json.dumps({
    "base_mva": 1.0,
    "buses": [
        {"id": 1, "role": "slack", "v_set": 1.0, "theta_set": 0.0},
        {"id": 2, "role": "load", "p_nom": -1.0, "q_nom": 0.0},
    ],
    "branches": [{"from": 1, "to": 2, "r": 0.0, "x": 1.0}],
})


@pytest.fixture(scope="session")
def feeder6():
    return sase.bundled_feeder6()


@pytest.fixture(scope="session")
def feeder6_point(feeder6):
    return sase.solve_power_flow(feeder6)


@pytest.fixture(scope="session")
def feeder6_model(feeder6, feeder6_point):
    return sase.tangent_matrix(feeder6, feeder6_point)


@pytest.fixture(scope="session")
def two_bus():
    """Purely inductive single line (unit susceptance), zero nominal load."""
    doc = json.loads(TWO_BUS_DOC)
    doc["buses"][1]["p_nom"] = 0.0
    return sase.parse_network(json.dumps(doc))


@pytest.fixture(scope="session")
def two_bus_flat(two_bus):
    return sase.solve_power_flow(two_bus)


@pytest.fixture(scope="session")
def table1_cfg():
    return sase.MeasurementConfig()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
