"""
Text formats for sample sets, trajectories, correlation tables and test
results. Every file starts with a `# manifest {json}` line carrying the
configuration hash and seed it was produced with.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

from confspace.configuration import Configuration, iter_snapshots
from confspace.dynamics import Trajectory
from confspace.gibbs import CorrelationEstimate

LOG = logging.getLogger("confspace")

MANIFEST_PREFIX = "# manifest "
TIME_PREFIX = "# t="

PathLike = Union[str, Path]
Manifest = Dict[str, Any]


def make_manifest(params_hash: str, seed: int, **extra: Any) -> Manifest:
    return {"params_hash": params_hash, "seed": seed, **extra}


def _manifest_line(manifest: Manifest) -> str:
    return MANIFEST_PREFIX + json.dumps(manifest, sort_keys=True) + "\n"


def _split_manifest(lines: List[str], path: PathLike) -> Tuple[Manifest, List[str]]:
    """
    Files written by hand may omit the manifest; they read with an empty one.
    """
    if not lines or not lines[0].startswith(MANIFEST_PREFIX):
        return {}, lines
    try:
        return json.loads(lines[0][len(MANIFEST_PREFIX) :]), lines[1:]
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: malformed manifest line: {e}") from e


def _prepare(path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_samples(path: PathLike, samples: Sequence[Configuration], manifest: Manifest) -> Path:
    """
    Manifest line, then one snapshot block per configuration.
    """
    path = _prepare(path)
    with open(path, "w") as f:
        f.write(_manifest_line({**manifest, "n_samples": len(samples)}))
        for gamma in samples:
            f.write(gamma.to_snapshot())
    LOG.info(f"Saved {len(samples)} configurations to {path}")
    return path


def read_samples(path: PathLike) -> Tuple[Manifest, List[Configuration]]:
    manifest, rows = _split_manifest(Path(path).read_text().splitlines(), path)
    rows = [row for row in rows if row.strip() and not row.startswith("#")]
    samples = list(iter_snapshots(rows))
    expected = manifest.get("n_samples")
    if expected is not None and expected != len(samples):
        raise ValueError(f"{path}: manifest announces {expected} samples, found {len(samples)}")
    return manifest, samples


def write_trajectory(path: PathLike, trajectory: Trajectory, manifest: Manifest) -> Path:
    """
    Manifest line, then `# t=<time>` before each saved snapshot.
    """
    path = _prepare(path)
    with open(path, "w") as f:
        f.write(_manifest_line(manifest))
        for t, gamma in zip(trajectory.times, trajectory.configurations):
            f.write(f"{TIME_PREFIX}{t:.17g}\n")
            f.write(gamma.to_snapshot())
    LOG.info(f"Saved trajectory with {len(trajectory.times)} frames to {path}")
    return path


def read_trajectory(path: PathLike) -> Tuple[Manifest, Trajectory]:
    manifest, rows = _split_manifest(Path(path).read_text().splitlines(), path)
    times: List[float] = []
    blocks: List[List[str]] = []
    for row in rows:
        if row.startswith(TIME_PREFIX):
            times.append(float(row[len(TIME_PREFIX) :]))
            blocks.append([])
        elif row.strip() and not row.startswith("#"):
            if not blocks:
                raise ValueError(f"{path}: snapshot data before the first `{TIME_PREFIX}` line")
            blocks[-1].append(row)
    configurations = []
    for block in blocks:
        parsed = list(iter_snapshots(block))
        if len(parsed) != 1:
            raise ValueError(f"{path}: expected one snapshot per time, found {len(parsed)}")
        configurations.append(parsed[0])
    return manifest, Trajectory(times=times, configurations=configurations)


def write_correlation_csv(path: PathLike, estimate: CorrelationEstimate, manifest: Manifest) -> Path:
    """
    Columns bin_lo, bin_hi, g2, stderr; the intensity goes into the manifest.
    """
    path = _prepare(path)
    edges = estimate.bin_edges
    with open(path, "w", newline="") as f:
        f.write(
            _manifest_line(
                {
                    **manifest,
                    "n_samples": estimate.n_samples,
                    "intensity": estimate.intensity,
                    "intensity_stderr": estimate.intensity_stderr,
                    "xi_hat": estimate.xi_hat,
                }
            )
        )
        writer = csv.writer(f)
        writer.writerow(["bin_lo", "bin_hi", "g2", "stderr"])
        for k, (g, se) in enumerate(zip(estimate.pair_correlation, estimate.stderr)):
            writer.writerow([f"{value:.17g}" for value in (edges[k], edges[k + 1], g, se)])
    LOG.info(f"Saved pair correlation table to {path}")
    return path


def write_correlation_json(path: PathLike, estimate: CorrelationEstimate, manifest: Manifest) -> Path:
    path = _prepare(path)
    path.write_text(json.dumps({"manifest": manifest, **estimate.model_dump()}, indent=2) + "\n")
    LOG.info(f"Saved pair correlation estimate to {path}")
    return path


def write_results(path: PathLike, records: Sequence[Dict[str, Any]], manifest: Manifest) -> Path:
    """
    JSON document {"manifest": ..., "results": [records]}.
    """
    path = _prepare(path)
    path.write_text(json.dumps({"manifest": manifest, "results": list(records)}, indent=2) + "\n")
    LOG.info(f"Saved {len(records)} test results to {path}")
    return path


def write_results_csv(path: PathLike, records: Sequence[Dict[str, Any]], manifest: Manifest) -> Path:
    """
    One row per record with the common columns; extra detail keys are dropped.
    """
    path = _prepare(path)
    columns = ["test", "params_hash", "seed", "n", "mean", "stderr", "target", "z", "pass"]
    with open(path, "w", newline="") as f:
        f.write(_manifest_line(manifest))
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(records)
    LOG.info(f"Saved {len(records)} test results to {path}")
    return path
