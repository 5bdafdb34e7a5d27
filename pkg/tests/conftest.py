import json

import numpy as np
import pytest

from genert.scene import environment_from_dict, load_environment

# PASS/FAIL lines collected by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def ground_quad_doc(size=10.0, **extra):
    """Two triangles forming a size x size ground quad at z = 0, one class."""
    h = size / 2
    tris = [[-h, -h, 0, h, -h, 0, h, h, 0], [-h, -h, 0, h, h, 0, -h, h, 0]]
    doc = {
        "version": 1,
        "classes": [{"id": 0, "name": "ground", "ground": True}],
        "materials": [{"class_id": 0, "humidity": hum, "permittivity": eps, "conductivity": sig}
                      for hum, eps, sig in (("dry", 3.0, 0.001), ("medium_dry", 15.0, 0.03), ("wet", 30.0, 0.1))],
        "surfaces": [{"id": i, "class_id": 0, "vertices": t} for i, t in enumerate(tris)],
        "bounds": [-h, -h, -1.0, h, h, 1.0],
    }
    doc.update(extra)
    return doc


def write_doc(path, doc):
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="session")
def canyon():
    return load_environment("box_canyon")


@pytest.fixture
def ground_env():
    return environment_from_dict(ground_quad_doc(size=200.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def polarized_10k(canyon):
    from genert.training import build_polarized_datasets

    return build_polarized_datasets(canyon, budget=10_000, seed=0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
