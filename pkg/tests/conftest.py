"""Shared fixtures.

Everything loads from the packaged MiniCell data set so tests exercise the
same fixtures users get, and a couple of tiny hand-built models keep the
kernel tests readable.
"""

import json
from importlib import resources

import pytest

from holobench.control import ReferenceControl, load_orders
from holobench.model import load_model
from holobench.scenario import load_scenario


def _data_text(*parts: str) -> str:
    node = resources.files("holobench.data")
    for p in parts:
        node = node / p
    return node.read_text(encoding="utf-8")


@pytest.fixture(scope="session")
def minicell_model_doc():
    return json.loads(_data_text("minicell", "model.json"))


@pytest.fixture()
def minicell_model(minicell_model_doc):
    return load_model(json.dumps(minicell_model_doc))


@pytest.fixture()
def minicell_orders():
    return load_orders(_data_text("minicell", "orders.json"))


@pytest.fixture()
def null_scenario():
    return load_scenario(_data_text("scenarios", "null.json"))


@pytest.fixture()
def ps9_scenario():
    return load_scenario(_data_text("scenarios", "ps9.json"))


@pytest.fixture()
def scenario_by_name():
    def load(name):
        return load_scenario(_data_text("scenarios", name + ".json"))

    return load


@pytest.fixture()
def control(minicell_model):
    return ReferenceControl(minicell_model)


# Single machine, single shuttle, straight line IN -> M1 -> OUT.
LINE_MODEL = {
    "machines": {"M1": {"node": "M1", "operations": {"A": 10}}},
    "transport": {
        "nodes": ["IN", "M1", "OUT"],
        "edges": [
            {"from": "IN", "to": "M1", "travel": 5},
            {"from": "M1", "to": "IN", "travel": 5},
            {"from": "M1", "to": "OUT", "travel": 5},
            {"from": "OUT", "to": "M1", "travel": 5},
        ],
    },
    "shuttles": {"S1": {"home": "IN"}},
    "stations": {"input": "IN", "output": "OUT"},
}


@pytest.fixture()
def line_model():
    return load_model(json.dumps(LINE_MODEL))


@pytest.fixture()
def line_model_doc():
    return json.loads(json.dumps(LINE_MODEL))
