"""Shared fixtures: toy projects copied into a temporary directory.

Each project directory under ``tests/fixtures`` holds a small Java corpus,
a scripted bank and the expected report.  The run config is written here
because the compile and coverage commands point at the stub scripts
through the running interpreter.
"""

from pathlib import Path
from promptforge.config import ENV_OVERRIDES

import pytest
import shlex
import shutil
import sys
import tomlkit


FIXTURES = Path(__file__).parent / "fixtures"
STUBS = FIXTURES / "stubs"


def stub_command(stub: str, *args: str) -> str:
    return " ".join([shlex.quote(sys.executable), shlex.quote(str(STUBS / stub)), *args])


COMPILE_CMD = stub_command("compile_stub.py", "{file}")


def copy_project(name: str, target: Path) -> Path:
    project = target / name
    shutil.copytree(FIXTURES / name, project)
    return project


def write_config(project: Path, data: dict, name: str = "run.toml") -> Path:
    path = project / name
    path.write_text(tomlkit.dumps(data), encoding="utf-8")
    return path


def mutation_config_data() -> dict:
    return {
        "task": "mutation",
        "corpus": ["colt/*.java", "util/*.java"],
        "output_dir": "out",
        "workers": 3,
        "backend": {"kind": "scripted", "model": "toy-model", "bank": "bank.json"},
        "adapter": {"compile_cmd": COMPILE_CMD},
        "mutation": {"baseline": "baseline.csv"},
    }


def oracle_config_data() -> dict:
    return {
        "task": "oracle",
        "corpus": ["util/*.java"],
        "output_dir": "out",
        "backend": {"kind": "scripted", "model": "toy-model", "bank": "bank.json"},
        "oracle": {"ground_truth": "truth.json"},
    }


def testgen_config_data() -> dict:
    return {
        "task": "testgen",
        "corpus": ["colt/*.java"],
        "output_dir": "out",
        "workers": 2,
        "backend": {"kind": "scripted", "model": "toy-model", "bank": "bank.json"},
        "adapter": {
            "compile_cmd": COMPILE_CMD,
            "coverage_cmd": stub_command(
                "coverage_stub.py", "--universe", "colt/Stats.java:6-30", "--out", "{out}", "{tests}"
            ),
        },
        "testgen": {
            "coverage_map": "randoop.csv",
            "schedule": {"start": 0.0, "end": 0.1, "step": 0.1, "queries_per_temperature": 2},
        },
    }


@pytest.fixture
def mutation_project(tmp_path):
    project = copy_project("mutation", tmp_path)
    return write_config(project, mutation_config_data())


@pytest.fixture
def oracle_project(tmp_path):
    project = copy_project("oracle", tmp_path)
    return write_config(project, oracle_config_data())


@pytest.fixture
def testgen_project(tmp_path):
    project = copy_project("testgen", tmp_path)
    return write_config(project, testgen_config_data())


@pytest.fixture(autouse=True)
def _no_env_overrides(monkeypatch):
    for name in ENV_OVERRIDES:
        monkeypatch.delenv(name, raising=False)
