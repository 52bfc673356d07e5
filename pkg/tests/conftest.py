import numpy as np
import pytest

from grail.envs import data_dir, fixture_path
from grail.logiclang import load_decls, load_program, make_decls

ENVS = ("ladderworld", "diverworld", "slalomworld")


@pytest.fixture(scope="session")
def data():
    return data_dir()


def env_programs(name):
    d = data_dir()
    decls = load_decls(d / "decls" / f"{name}.toml")
    policy = load_program(d / "programs" / name / "policy.pl", decls, "policy")
    blend = load_program(d / "programs" / name / "blend.pl", decls, "blend")
    return decls, policy, blend


@pytest.fixture(scope="session")
def ladder_programs():
    return env_programs("ladderworld")


@pytest.fixture
def toy_decls():
    """Declarations for hand-written examples; ``go_right`` takes an object."""
    return make_decls({
        "go_right": {"kind": "action", "args": ["agent"]},
        "up_ladder": {"kind": "action", "args": ["agent"]},
        "jump": {"kind": "action", "args": ["world"]},
        "left_of": {"kind": "spatial", "args": ["*", "*"]},
        "on_ladder": {"kind": "spatial", "args": ["agent", "ladder"]},
        "near": {"kind": "spatial", "args": ["agent", "ladder"]},
        "true": {"kind": "status", "args": ["world"]},
    })


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def ladder_fixture():
    return fixture_path("ladderworld")


# one record per acceptance criterion, printed at the end of the session
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for rec in ACCEPTANCE:
        mark = "PASS" if rec["ok"] else "FAIL"
        terminalreporter.write_line(f"{mark}  {rec['name']}: {rec['detail']}")
