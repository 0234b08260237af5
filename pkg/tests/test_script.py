import json
import os
import subprocess
from pathlib import Path
from typing import List

import pytest

from confspace.cli.script import EXIT_OK, EXIT_USAGE, EXIT_VERIFICATION, parse_cli_args, run
from confspace.config import load_config
from confspace.io import read_samples, read_trajectory

_RESULTS_DIRECTORY = Path(
    os.path.join(os.path.dirname(os.path.realpath(__file__)), "expected_results")
)
_SMALL = _RESULTS_DIRECTORY / "configs" / "small.toml"
_FREE = _RESULTS_DIRECTORY / "configs" / "free.toml"


def _confspace(tmp_path: Path, *args: str, config: Path = _SMALL) -> subprocess.CompletedProcess:
    """
    Run the installed `confspace` command with its output directory under tmp_path.
    """
    cmd = f"confspace --config {config} --out {tmp_path} " + " ".join(args)
    return subprocess.run(cmd, shell=True, capture_output=True, text=True)


def _assert_physical_parameters(manifest) -> None:
    config = load_config(_SMALL)
    assert manifest["params_hash"] == config.config_hash()
    assert (manifest["d"], manifest["L"], manifest["z"]) == (2, 4.0, 1.0)
    assert manifest["potential"] == "lennard_jones"
    assert manifest["potential_hash"] == config.phi().fingerprint()
    assert manifest["window"] == {"lower": [0.0, 0.0], "upper": [4.0, 4.0]}


def test_sample_poisson(tmp_path: Path):
    result = _confspace(tmp_path, "sample-poisson")
    assert result.returncode == EXIT_OK, result.stderr
    manifest, samples = read_samples(tmp_path / "poisson-samples.txt")
    assert len(samples) == 5
    assert manifest["command"] == "sample-poisson"
    assert manifest["seed"] == 0
    _assert_physical_parameters(manifest)
    assert manifest["intensity"] == "uniform"
    assert "mixing" not in manifest
    assert str(tmp_path / "poisson-samples.txt") in result.stdout


def test_sample_poisson_is_reproducible(tmp_path: Path):
    assert run(["--config", str(_SMALL), "--out", str(tmp_path / "a"), "sample-poisson", "--mixed"]) == EXIT_OK
    assert run(["--config", str(_SMALL), "--out", str(tmp_path / "b"), "sample-poisson", "--mixed"]) == EXIT_OK
    first = (tmp_path / "a" / "mixed-poisson-samples.txt").read_text()
    manifest, _ = read_samples(tmp_path / "a" / "mixed-poisson-samples.txt")
    assert manifest["mixing"] == [[0.5, 0.5], [1.5, 0.5]]
    assert first == (tmp_path / "b" / "mixed-poisson-samples.txt").read_text()
    assert run(["--config", str(_SMALL), "--seed", "5", "--out", str(tmp_path / "c"), "sample-poisson", "--mixed"]) == EXIT_OK
    assert (tmp_path / "c" / "mixed-poisson-samples.txt").read_text() != first


def test_zero_activity_gives_empty_configurations(tmp_path: Path):
    config = tmp_path / "empty.toml"
    config.write_text("[domain]\nL = 4.0\n[intensity]\nz = 0.0\n[correlation]\nr_max = 2.0\n[run]\nn_samples = 3\n")
    assert run(["--config", str(config), "--out", str(tmp_path), "sample-poisson"]) == EXIT_OK
    _, samples = read_samples(tmp_path / "poisson-samples.txt")
    assert [gamma.n for gamma in samples] == [0, 0, 0]


def test_distance_of_a_file_to_itself(tmp_path: Path, capsys):
    assert run(["--config", str(_SMALL), "--out", str(tmp_path), "sample-poisson"]) == EXIT_OK
    capsys.readouterr()
    path = str(tmp_path / "poisson-samples.txt")
    assert run(["--config", str(_SMALL), "distance", path, path]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    costs = [line for line in lines if "matching" not in line]
    assert costs == [f"{k} 0" for k in range(5)]
    assert all(line.startswith(f"{k // 2} ") for k, line in enumerate(lines))


def test_distance_between_different_counts(tmp_path: Path, capsys):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    a.write_text("2 4 1\n1.0 1.0\n")
    b.write_text("2 4 2\n1.0 1.0\n3.0 3.0\n")
    assert run(["distance", str(a), str(b)]) == EXIT_OK
    assert capsys.readouterr().out == "inf\n"
    c = tmp_path / "c.txt"
    c.write_text("2 4 1\n3.5 1.0\n")
    assert run(["distance", str(a), str(c)]) == EXIT_OK
    assert capsys.readouterr().out.splitlines() == ["1.5", "matching 0"]


def test_sample_gibbs_and_correlate(tmp_path: Path):
    result = _confspace(tmp_path, "sample-gibbs")
    assert result.returncode == EXIT_OK, result.stderr
    assert "acceptance birth=" in result.stdout
    manifest, samples = read_samples(tmp_path / "gibbs-samples.txt")
    _assert_physical_parameters(manifest)
    assert manifest["mcmc"]["burn_in"] == 200
    assert manifest["mcmc"]["thinning"] == 10
    assert manifest["mcmc"]["n_samples"] == 20
    assert manifest["mcmc"]["seed"] == 0
    assert len(samples) == 20
    result = _confspace(tmp_path, "correlate", str(tmp_path / "gibbs-samples.txt"))
    assert result.returncode == EXIT_OK, result.stderr
    lines = (tmp_path / "correlation.csv").read_text().splitlines()
    assert lines[1] == "bin_lo,bin_hi,g2,stderr"
    assert len(lines) == 2 + 5
    assert json.loads((tmp_path / "correlation.json").read_text())["n_samples"] == 20


def test_sample_gibbs_canonical(tmp_path: Path):
    assert run(["--config", str(_SMALL), "--out", str(tmp_path), "sample-gibbs", "--canonical", "4"]) == EXIT_OK
    manifest, samples = read_samples(tmp_path / "gibbs-canonical-4.txt")
    assert {gamma.n for gamma in samples} == {4}
    assert manifest["canonical"] == 4
    assert manifest["mcmc"]["n_samples"] == 20


@pytest.mark.parametrize("command", ["simulate-free", "simulate-interacting"])
def test_simulate(tmp_path: Path, command: str):
    assert run(["--config", str(_SMALL), "--out", str(tmp_path), "sample-poisson"]) == EXIT_OK
    start = tmp_path / "poisson-samples.txt"
    assert run(["--config", str(_SMALL), "--out", str(tmp_path), command, "--start", str(start)]) == EXIT_OK
    name = "free-trajectory.txt" if command == "simulate-free" else "interacting-trajectory.txt"
    manifest, trajectory = read_trajectory(tmp_path / name)
    assert manifest["command"] == command
    _assert_physical_parameters(manifest)
    assert manifest["trajectory"]["dt"] == 0.01
    assert manifest["trajectory"]["n_steps"] == 10
    assert manifest["trajectory"]["save_every"] == 5
    assert manifest["start"] == str(start)
    assert trajectory.times == pytest.approx([0.0, 0.05, 0.1])
    _, samples = read_samples(start)
    assert trajectory.configurations[0] == samples[0]


def test_verify_passes(tmp_path: Path):
    result = _confspace(tmp_path, "--format csv", "verify", "poisson-identities")
    assert result.returncode == EXIT_OK, result.stdout + result.stderr
    assert "7/7 passed" in result.stdout
    data = json.loads((tmp_path / "verify-poisson-identities.json").read_text())
    assert len(data["results"]) == 7
    assert all(record["pass"] for record in data["results"])
    assert (tmp_path / "verify-poisson-identities.csv").is_file()


def test_verify_reports_failures(tmp_path: Path):
    # without interaction, dropping the Boltzmann factor changes nothing and the power check fails
    result = _confspace(tmp_path, "verify", "mecke", config=_FREE)
    assert result.returncode == EXIT_VERIFICATION, result.stderr
    assert "FAIL" in result.stdout
    records = json.loads((tmp_path / "verify-mecke.json").read_text())["results"]
    power = next(record for record in records if record["test"] == "mecke-gibbs-power")
    assert not power["pass"]


@pytest.mark.parametrize(
    "args",
    [
        ["--config", "does-not-exist.toml", "sample-poisson"],
        ["--config", str(_RESULTS_DIRECTORY / "tables" / "soft_step.table"), "sample-poisson"],
        ["verify", "nonsense"],
        ["sample-gibbs", "--canonical", "many"],
        [],
    ],
)
def test_usage_errors(tmp_path: Path, args: List[str]):
    try:
        code = run(["--out", str(tmp_path)] + args)
    except SystemExit as e:
        # argparse exits during parsing
        code = e.code
    assert code == EXIT_USAGE


def test_invalid_configuration(tmp_path: Path):
    config = tmp_path / "bad.toml"
    config.write_text("[domain]\nL = -1.0\n")
    assert run(["--config", str(config), "sample-poisson"]) == EXIT_USAGE
    missing = tmp_path / "missing.txt"
    assert run(["--config", str(_SMALL), "correlate", str(missing)]) == EXIT_USAGE


def test_correlate_rejects_bins_beyond_half_the_box(tmp_path: Path):
    assert run(["--config", str(_SMALL), "--out", str(tmp_path), "sample-poisson"]) == EXIT_OK
    config = tmp_path / "wide.toml"
    config.write_text(_SMALL.read_text().replace("r_max = 1.5", "r_max = 3.0"))
    samples = str(tmp_path / "poisson-samples.txt")
    assert run(["--config", str(config), "--out", str(tmp_path), "correlate", samples]) == EXIT_USAGE
    assert not (tmp_path / "correlation.csv").exists()


def test_parse_cli_args():
    args_basic = parse_cli_args(["verify", "mecke"])
    assert args_basic.command == "verify"
    assert args_basic.suite == "mecke"
    assert args_basic.config is None
    assert args_basic.seed is None
    assert args_basic.verbose is False
    args_full = parse_cli_args(
        [
            "--config",
            "run.toml",
            "--seed",
            "3",
            "--workers",
            "4",
            "--out",
            "results",
            "--format",
            "csv",
            "simulate-free",
            "--start",
            "start.txt",
        ]
    )
    assert args_full.config == Path("run.toml")
    assert args_full.seed == 3
    assert args_full.workers == 4
    assert args_full.out == Path("results")
    assert args_full.format == "csv"
    assert args_full.start == Path("start.txt")
    assert parse_cli_args(["sample-gibbs", "--canonical", "7"]).canonical == 7
