import argparse
import logging
import math
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, NoReturn, Optional

from pydantic import ValidationError

from confspace import io
from confspace import rng as rngs
from confspace.config import RunConfig, load_config, tomllib
from confspace.configuration import Configuration
from confspace.dynamics import simulate_free, simulate_interacting
from confspace.gibbs import canonical_sample, estimate_correlations, run_gc_chain
from confspace.intensity import sample_mixed_poisson, sample_poisson
from confspace.metric import rho
from confspace.suites import SUITE_NAMES, run_suite

LOG = logging.getLogger("confspace")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFICATION = 2
EXIT_RUNTIME = 3

# Stream ids of the command-level samplers.
_SAMPLE_STREAM = 0
_START_STREAM = 1


class UsageError(Exception):
    """
    Bad command-line input detected after argument parsing.
    """


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _manifest(config: RunConfig, command: str, **extra: Any) -> io.Manifest:
    """
    Hash and seed, plus the physical parameters the output was produced with.
    """
    phi = config.phi()
    return io.make_manifest(
        config.config_hash(),
        config.run.seed,
        command=command,
        d=config.domain.d,
        L=config.domain.L,
        z=config.intensity.z,
        potential=phi.kind,
        potential_hash=phi.fingerprint(),
        window=config.obs_window().model_dump(mode="json"),
        **extra,
    )


def cmd_sample_poisson(config: RunConfig, args: argparse.Namespace) -> int:
    dom, window, sigma = config.dom(), config.obs_window(), config.sigma()
    rng = rngs.stream(config.run.seed, _SAMPLE_STREAM)
    if args.mixed:
        law = config.law()
        samples = [sample_mixed_poisson(law, sigma, window, dom, rng)[1] for _ in range(config.run.n_samples)]
    else:
        samples = [sample_poisson(sigma, window, dom, rng) for _ in range(config.run.n_samples)]
    name = "mixed-poisson-samples.txt" if args.mixed else "poisson-samples.txt"
    extra = {"mixing": [list(atom) for atom in config.mixing.atoms]} if args.mixed else {}
    manifest = _manifest(config, "sample-poisson", intensity=config.intensity.kind, **extra)
    path = io.write_samples(config.run.out / name, samples, manifest)
    counts = [gamma.n for gamma in samples]
    print(f"{len(samples)} configurations, mean count {sum(counts) / len(counts):.6g} -> {path}")
    return EXIT_OK


def cmd_sample_gibbs(config: RunConfig, args: argparse.Namespace) -> int:
    spec, params = config.gibbs_spec(), config.mcmc_params()
    rng = rngs.stream(config.run.seed, _SAMPLE_STREAM)
    manifest = _manifest(config, "sample-gibbs", mcmc=params.model_dump(mode="json"))
    if args.canonical is not None:
        samples = canonical_sample(spec, args.canonical, params, rng)
        manifest = {**manifest, "canonical": args.canonical}
        path = io.write_samples(config.run.out / f"gibbs-canonical-{args.canonical}.txt", samples, manifest)
        print(f"{len(samples)} configurations with {args.canonical} points -> {path}")
        return EXIT_OK
    result = run_gc_chain(spec, params, rng)
    path = io.write_samples(config.run.out / "gibbs-samples.txt", result.samples, manifest)
    s = result.stats
    counts = [gamma.n for gamma in result.samples]
    print(
        f"{len(result.samples)} configurations, mean count {sum(counts) / len(counts):.6g}, "
        f"acceptance birth={s.birth_rate:.3f} death={s.death_rate:.3f} move={s.move_rate:.3f} -> {path}"
    )
    return EXIT_OK


def _start(config: RunConfig, args: argparse.Namespace) -> Configuration:
    if args.start is not None:
        _, samples = io.read_samples(args.start)
        if not samples:
            raise UsageError(f"{args.start} holds no configuration")
        return samples[0]
    dom = config.dom()
    return sample_poisson(config.sigma(), config.obs_window(), dom, rngs.stream(config.run.seed, _START_STREAM))


def _trajectory_manifest(config: RunConfig, args: argparse.Namespace, command: str) -> io.Manifest:
    start = str(args.start) if args.start is not None else "poisson"
    return _manifest(config, command, trajectory=config.trajectory_params().model_dump(mode="json"), start=start)


def cmd_simulate_free(config: RunConfig, args: argparse.Namespace) -> int:
    trajectory = simulate_free(_start(config, args), config.trajectory_params())
    path = io.write_trajectory(
        config.run.out / "free-trajectory.txt", trajectory, _trajectory_manifest(config, args, "simulate-free")
    )
    print(f"{len(trajectory.times)} frames of {trajectory.final.n} particles -> {path}")
    return EXIT_OK


def cmd_simulate_interacting(config: RunConfig, args: argparse.Namespace) -> int:
    trajectory = simulate_interacting(config.phi(), _start(config, args), config.trajectory_params())
    path = io.write_trajectory(
        config.run.out / "interacting-trajectory.txt",
        trajectory,
        _trajectory_manifest(config, args, "simulate-interacting"),
    )
    print(f"{len(trajectory.times)} frames of {trajectory.final.n} particles -> {path}")
    return EXIT_OK


def cmd_verify(config: RunConfig, args: argparse.Namespace) -> int:
    outcomes = run_suite(config, args.suite)
    params_hash = config.config_hash()
    records = [outcome.to_record(params_hash, config.run.seed) for outcome in outcomes]
    manifest = _manifest(config, f"verify {args.suite}")
    path = io.write_results(config.run.out / f"verify-{args.suite}.json", records, manifest)
    if config.run.format == "csv":
        io.write_results_csv(config.run.out / f"verify-{args.suite}.csv", records, manifest)
    failed = [outcome.test for outcome in outcomes if not outcome.passed]
    for outcome in outcomes:
        z = "n/a" if outcome.z is None else f"{outcome.z:.3f}"
        print(f"{outcome.test:<36} n={outcome.n:<9} z={z:<10} {'pass' if outcome.passed else 'FAIL'}")
    print(f"{len(outcomes) - len(failed)}/{len(outcomes)} passed -> {path}")
    if failed:
        LOG.error(f"Verification failed: {', '.join(failed)}")
        return EXIT_VERIFICATION
    return EXIT_OK


def cmd_distance(config: RunConfig, args: argparse.Namespace) -> int:
    _, first = io.read_samples(args.a)
    _, second = io.read_samples(args.b)
    if len(first) != len(second):
        raise UsageError(f"{args.a} holds {len(first)} configurations but {args.b} holds {len(second)}")
    for k, (gamma, omega) in enumerate(zip(first, second)):
        result = rho(gamma, omega)
        prefix = f"{k} " if len(first) > 1 else ""
        if math.isinf(result.cost):
            print(f"{prefix}inf")
            continue
        print(f"{prefix}{result.cost:.17g}")
        print(f"{prefix}matching {' '.join(str(j) for j in result.assignment or [])}")
    return EXIT_OK


def cmd_correlate(config: RunConfig, args: argparse.Namespace) -> int:
    _, samples = io.read_samples(args.samples)
    estimate = estimate_correlations(
        samples, config.obs_window(), config.correlation.edges(), config.correlation.batches
    )
    manifest = {**_manifest(config, "correlate"), "source": str(args.samples)}
    path = io.write_correlation_csv(config.run.out / "correlation.csv", estimate, manifest)
    if config.run.format == "json":
        io.write_correlation_json(config.run.out / "correlation.json", estimate, manifest)
    print(
        f"intensity {estimate.intensity:.6g} +- {estimate.intensity_stderr:.2g}, "
        f"xi_hat {estimate.xi_hat:.6g} -> {path}"
    )
    return EXIT_OK


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace], int]] = {
    "sample-poisson": cmd_sample_poisson,
    "sample-gibbs": cmd_sample_gibbs,
    "simulate-free": cmd_simulate_free,
    "simulate-interacting": cmd_simulate_interacting,
    "verify": cmd_verify,
    "distance": cmd_distance,
    "correlate": cmd_correlate,
}


def parse_cli_args(args: Optional[List[str]] = None) -> argparse.Namespace:
    """
    Parses the command-line arguments passed to confspace.
    """
    parser = _Parser(
        prog="confspace",
        description=main.__doc__,
        formatter_class=argparse.RawTextHelpFormatter,
    )
    parser.add_argument(
        "--config",
        type=Path,
        help="TOML configuration file.\nThe packaged defaults are used when omitted.",
    )
    parser.add_argument("--seed", type=int, help="run seed (overrides the configuration).")
    parser.add_argument("--workers", type=int, help="worker processes for the verification suites.")
    parser.add_argument("--out", type=Path, help="directory the output files are written to.")
    parser.add_argument("--format", choices=["json", "csv"], help="format of tabular outputs.")
    parser.add_argument("--verbose", action="store_true", help="log per-shard detail.")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    sample_poisson = commands.add_parser("sample-poisson", help="sample (mixed) Poisson configurations.")
    sample_poisson.add_argument(
        "--mixed", action="store_true", help="draw the activity from the mixing law first."
    )
    sample_gibbs = commands.add_parser("sample-gibbs", help="sample the Gibbs specification by MCMC.")
    sample_gibbs.add_argument(
        "--canonical", type=int, metavar="N", help="sample with exactly N points instead."
    )
    for name, text in (
        ("simulate-free", "run the free diffusion."),
        ("simulate-interacting", "run the interacting diffusion."),
    ):
        sub = commands.add_parser(name, help=text)
        sub.add_argument(
            "--start",
            type=Path,
            help="sample-set file whose first configuration starts the path.\n"
            "A Poisson sample of the configured intensity is used when omitted.",
        )
    verify = commands.add_parser("verify", help="run a verification suite.")
    verify.add_argument("suite", choices=SUITE_NAMES)
    distance = commands.add_parser(
        "distance", help="optimal-matching distance between the configurations of two files."
    )
    distance.add_argument("a", type=Path)
    distance.add_argument("b", type=Path)
    correlate = commands.add_parser("correlate", help="estimate intensity and pair correlation.")
    correlate.add_argument("samples", type=Path)
    return parser.parse_args(args)


def run(args: Optional[List[str]] = None) -> int:
    """
    Run one command and return its exit code.
    """
    parsed = parse_cli_args(args)
    logging.basicConfig(
        level=logging.DEBUG if parsed.verbose else logging.INFO,
        format="%(asctime)s %(message)s",
        stream=sys.stderr,
    )
    try:
        config = load_config(parsed.config).with_overrides(
            seed=parsed.seed, workers=parsed.workers, out=parsed.out, format=parsed.format
        )
    except FileNotFoundError as e:
        LOG.error(f"Configuration file not found: {e.filename}")
        return EXIT_USAGE
    except tomllib.TOMLDecodeError as e:
        LOG.error(f"Malformed configuration {parsed.config}: {e}")
        return EXIT_USAGE
    except (ValidationError, ValueError) as e:
        LOG.error(f"Invalid configuration {parsed.config or 'defaults'}:\n{e}")
        return EXIT_USAGE
    try:
        return COMMANDS[parsed.command](config, parsed)
    except (UsageError, FileNotFoundError) as e:
        LOG.error(str(e))
        return EXIT_USAGE
    except Exception as e:
        LOG.error(f"{parsed.command} failed: {e}", exc_info=True)
        return EXIT_RUNTIME


def main() -> None:
    """
    Sample, simulate and verify point processes and particle diffusions on
    the configuration space of a periodic box.
    """
    sys.exit(run())


if __name__ == "__main__":
    main()
