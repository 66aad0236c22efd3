"""Shared fixtures: the 4-encounter toy cohort used across module tests."""

import pytest

from medgcn.graph import build_graph

TOY_PATIENTS = ["P1", "P2"]
TOY_ENCOUNTERS = [("E1", "P1"), ("E2", "P1"), ("E3", "P2"), ("E4", "P2")]
TOY_LAB_RESULTS = [
    ("E1", "L1", 5.0),
    ("E1", "L2", 100.0),
    ("E2", "L1", 0.0),
    ("E2", "L3", 0.8),
    ("E3", "L2", 140.0),
    ("E4", "L1", 10.0),
    ("E4", "L3", 0.4),
]
TOY_PRESCRIPTIONS = [
    ("E1", "M1"),
    ("E1", "M2"),
    ("E2", "M2"),
    ("E3", "M3"),
    ("E4", "M1"),
    ("E4", "M3"),
]


def make_toy_graph():
    return build_graph(TOY_PATIENTS, TOY_ENCOUNTERS, TOY_LAB_RESULTS, TOY_PRESCRIPTIONS)


@pytest.fixture
def toy_graph():
    return make_toy_graph()
