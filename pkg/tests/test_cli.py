"""End-to-end tests: the CLI run as a subprocess over the fixture projects."""

from tests.conftest import FIXTURES
from tests.conftest import mutation_config_data
from tests.conftest import write_config

import json
import os
import subprocess
import sys


def _cli(*args, env=None):
    return subprocess.run(
        [sys.executable, "-m", "promptforge.cli", *(str(a) for a in args)],
        capture_output=True,
        text=True,
        env=env,
    )


def _golden(project):
    return (FIXTURES / project / "report.md").read_text(encoding="utf-8")


def _offline_env(**extra):
    env = {k: v for k, v in os.environ.items() if not k.lower().endswith("_proxy")}
    env.update(extra)
    return env


class TestMutate:
    def test_report_matches_golden(self, mutation_project):
        result = _cli("mutate", "--config", mutation_project)
        assert result.returncode == 0, f"stderr: {result.stderr}"
        assert "=== Mutation: setup ===" in result.stdout
        assert "  Instances: 10" in result.stdout
        out = mutation_project.parent / "out"
        assert (out / "report.md").read_text() == _golden("mutation")
        assert (out / "report.csv").exists()
        assert (out / "report.json").exists()
        assert "SYNTAX_BOMB" not in (out / "mutants.md").read_text()

    def test_rerun_is_byte_identical(self, mutation_project, tmp_path):
        first = _cli("mutate", "--config", mutation_project, "--out", tmp_path / "first")
        second = _cli("mutate", "--config", mutation_project, "--out", tmp_path / "second", "--workers", "1")
        assert first.returncode == second.returncode == 0
        records = [(tmp_path / name / "records.json").read_bytes() for name in ("first", "second")]
        assert records[0] == records[1]

    def test_report_is_rebuilt_from_records(self, mutation_project):
        assert _cli("mutate", "--config", mutation_project).returncode == 0
        report = mutation_project.parent / "out" / "report.md"
        report.unlink()
        result = _cli("report", "--config", mutation_project)
        assert result.returncode == 0, f"stderr: {result.stderr}"
        assert report.read_text() == _golden("mutation")

    def test_report_joins_runs(self, mutation_project, tmp_path):
        for model in ("alpha", "beta"):
            run = _cli("mutate", "--config", mutation_project, "--model", model, "--out", tmp_path / model)
            assert run.returncode == 0
        runs = [tmp_path / "alpha", tmp_path / "beta"]
        result = _cli("report", "--config", mutation_project, "--out", tmp_path / "joined", *runs)
        assert result.returncode == 0, f"stderr: {result.stderr}"
        rows = json.loads((tmp_path / "joined" / "report.json").read_text())["rows"]
        assert [row["Tool"] for row in rows] == ["alpha", "beta", "baseline"]

    def test_report_rejects_other_task(self, mutation_project, oracle_project, tmp_path):
        assert _cli("oracle", "--config", oracle_project, "--out", tmp_path / "oracle").returncode == 0
        result = _cli("report", "--config", mutation_project, tmp_path / "oracle")
        assert result.returncode == 1
        assert "holds a oracle run" in result.stderr


class TestOracle:
    def test_report_matches_golden(self, oracle_project):
        result = _cli("oracle", "--config", oracle_project)
        assert result.returncode == 0, f"stderr: {result.stderr}"
        out = oracle_project.parent / "out"
        assert (out / "report.md").read_text() == _golden("oracle")
        assert (out / "oracles.md").exists()
        assert (out / "near_misses.md").exists()


class TestTestgen:
    def test_report_matches_golden(self, testgen_project):
        result = _cli("testgen", "--config", testgen_project)
        assert result.returncode == 0, f"stderr: {result.stderr}"
        assert "Wrote 2 test unit(s)" in result.stdout
        out = testgen_project.parent / "out"
        assert (out / "report.md").read_text() == _golden("testgen")
        tests = sorted(p.relative_to(out).as_posix() for p in out.glob("*/*.java"))
        assert tests == ["Stats.max/t0.0_q0.java", "Stats.sum/t0.0_q0.java"]
        assert (out / "Stats.max" / "coverage.csv").exists()
        assert not any("SYNTAX_BOMB" in p.read_text() for p in out.glob("*/*.java"))


class TestAblate:
    def test_two_variants(self, mutation_project):
        result = _cli("ablate", "--config", mutation_project, "--variants", "default,nl-only")
        assert result.returncode == 0, f"stderr: {result.stderr}"
        assert "  default: compilable = 0.900" in result.stdout
        assert "  nl-only: compilable = 0.000" in result.stdout
        out = mutation_project.parent / "out"
        assert (out / "ablation.md").exists()
        assert (out / "nl-only" / "records.json").exists()


class TestExitCodes:
    def test_missing_config(self, tmp_path):
        result = _cli("mutate", "--config", tmp_path / "absent.toml")
        assert result.returncode == 1
        assert "config file not found" in result.stderr

    def test_usage_error(self, mutation_project):
        result = _cli("mutate", "--config", mutation_project, "--variant", "few-shot")
        assert result.returncode == 1

    def test_http_backend_without_api_key(self, mutation_project):
        env = _offline_env()
        env.pop("PROMPTFORGE_API_KEY", None)
        data = mutation_config_data()
        data["backend"] = {"kind": "http", "model": "toy-model", "base_url": "http://127.0.0.1:9"}
        config = write_config(mutation_project.parent, data, "http.toml")
        result = _cli("mutate", "--config", config, env=env)
        assert result.returncode == 2
        assert "PROMPTFORGE_API_KEY" in result.stderr

    def test_incomplete_run(self, mutation_project):
        env = _offline_env(PROMPTFORGE_API_KEY="test-key")
        data = mutation_config_data()
        data["backend"] = {
            "kind": "http",
            "model": "toy-model",
            "base_url": "http://127.0.0.1:9",
            "max_attempts": 1,
            "timeout_s": 2.0,
        }
        config = write_config(mutation_project.parent, data, "http.toml")
        result = _cli("mutate", "--config", config, env=env)
        assert result.returncode == 2
        assert "10 record(s) incomplete" in result.stderr
        records = json.loads((mutation_project.parent / "out" / "records.json").read_text())["records"]
        assert all(record["incomplete"] for record in records)

        allowed = _cli("mutate", "--config", config, "--allow-partial", env=env)
        assert allowed.returncode == 0
