import json

import pytest

from enkf_fcnn.config import load_config, preset_dict

ACCEPTANCE = []


def record_acceptance(tag, passed, detail):
    ACCEPTANCE.append((tag, passed, detail))
    print(f"{tag} {'PASS' if passed else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for tag, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{tag} {'PASS' if passed else 'FAIL'}: {detail}")


def small_document(model="lorenz63", **overrides):
    """A preset shrunk to a few short trajectories; ``overrides`` use dotted keys."""
    doc = preset_dict(f"{model}-paper")
    doc["name"] = f"{model}-small"
    doc["experiment"].update({"initial_conditions": 4, "windows": 6, "spinup_steps": 100})
    doc["ensemble"] = {"large": 20, "small": 5}
    doc["fcnn"].update({"hidden_sizes": [8], "epochs": 5, "patience": 5, "refinement_rounds": 0})
    for key, value in overrides.items():
        node = doc
        *head, last = key.split(".")
        for part in head:
            node = node[part]
        node[last] = value
    return doc


@pytest.fixture
def write_config(tmp_path):
    def write(model="lorenz63", name="config.json", **overrides):
        path = tmp_path / name
        path.write_text(json.dumps(small_document(model, **overrides), indent=2))
        return path
    return write


@pytest.fixture
def small_config(write_config):
    return load_config(str(write_config()))
