import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import pandas as pd
from pydantic import ValidationError

from carechain import analysis, bench
from carechain.io import exporters
from carechain.io.loader import DEFAULT_SCENARIO, load_scenario_config, resolve_path
from carechain.ledger import ChainDecodeError, verify_chain
from carechain.schemas import Architecture, ScenarioConfig
from carechain.telemetry import build_streams, make_cohort, plan_injections

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2


def _find_tests_dir():
    """Locate the tests/ directory whether running from project root or installed."""
    candidate = os.path.join(os.getcwd(), "tests")
    if os.path.isdir(candidate):
        return candidate
    candidate = os.path.join(os.path.dirname(os.path.dirname(__file__)), "tests")
    if os.path.isdir(candidate):
        return candidate
    return None


def _run_pytest(output_dir, marker_filter=None):
    try:
        import pytest
    except ImportError:
        logging.warning("pytest is required to run tests. Install it with: pip install pytest")
        return EXIT_CONFIG

    tests_dir = _find_tests_dir()
    if tests_dir is None:
        logging.error(
            "Could not find the tests/ directory. "
            "Run carechain from the project root, or install the package in editable mode."
        )
        return EXIT_CONFIG

    pytest_args = [tests_dir, "-v", f"--output-dir={output_dir}"]
    if marker_filter:
        pytest_args += ["-m", marker_filter]

    # pytest reinitialises its own I/O; the CLI handlers would otherwise hold stale streams.
    logging.shutdown()
    return int(pytest.main(pytest_args))


def _parse_eps(grid: str) -> List[Optional[float]]:
    out = []
    for token in grid.split(","):
        token = token.strip().lower()
        if not token:
            continue
        out.append(None if token in ("off", "none") else float(token))
    return out


def _load(config_path: str, args) -> Optional[ScenarioConfig]:
    """Loads a config and applies the shared CLI overrides; None when anything is invalid."""
    config = load_scenario_config(config_path)
    if config is None:
        return None
    overrides = {
        "seed": getattr(args, "seed", None),
        "architecture": getattr(args, "architecture", None),
        "duration_ms": getattr(args, "duration_ms", None),
        "patients": getattr(args, "patients", None),
    }
    if not any(v is not None for v in overrides.values()):
        return config
    try:
        return config.with_overrides(**{k: v for k, v in overrides.items() if v is not None})
    except ValidationError as e:
        logging.error(f"Invalid command-line overrides: {e}")
        return None


def _write_config(config: ScenarioConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(config.model_dump_json(indent=2) + "\n")
    logging.info(f"Wrote {path}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    config = _load(args.config, args)
    if config is None:
        return EXIT_CONFIG
    tcfg = config.telemetry
    profiles = make_cohort(config.patients, config.seed, tcfg.sample_period_ms, tcfg.random_phase)
    if tcfg.injections is not None:
        injections = list(tcfg.injections)
    else:
        injections = plan_injections(profiles, config.duration_ms, config.seed, tcfg.warmup_ms, tcfg.episode_ms,
                                     tcfg.gap_ms, tcfg.start_jitter_ms, tcfg.tail_ms, tcfg.magnitudes)
    streams = build_streams(profiles, injections, config.seed, config.duration_ms)
    os.makedirs(args.output_dir, exist_ok=True)
    exporters.write_vitals_csv(streams, os.path.join(args.output_dir, "vitals.csv"))
    exporters.write_injections_csv(injections, os.path.join(args.output_dir, "injections.csv"))
    analysis.write_table(pd.DataFrame([p.model_dump(mode="json") for p in profiles]),
                         args.output_dir, "cohort")
    return EXIT_OK


def cmd_run(args) -> int:
    config = _load(args.config, args)
    if config is None:
        return EXIT_CONFIG
    world = None
    if config.patients == 0:
        report = bench.run_scenario(config)
    else:
        world = bench.simulate(config, trace=args.trace)
        report = bench.collect_metrics(world)
        logging.info(f"{config.scenario_id}: " + bench.summary_line(report))

    out = args.output_dir
    analysis.write_run_report(report, out)
    if world is not None:
        exporters.write_decisions_csv(world.engine.decisions, os.path.join(out, "decisions.csv"))
        if world.chain is not None:
            exporters.write_chain(world.chain, out)
        if args.trace:
            exporters.write_trace_ndjson(world.sim.trace, os.path.join(out, "trace.ndjson"))
    analysis.print_run_summary(report)
    if report.access.violations:
        logging.error(f"{report.access.violations} access decisions violate the policy set.")
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_compare(args) -> int:
    paths = args.configs or [DEFAULT_SCENARIO]
    configs = []
    for path in paths:
        config = _load(path, args)
        if config is None:
            return EXIT_CONFIG
        configs.append(config)
    if len(configs) == 1:
        logging.info("One config given; comparing it under all three architectures.")
        configs = bench.default_trio(configs[0])
    try:
        comparison = bench.compare(configs, args.offered)
    except ValueError as e:
        logging.error(str(e))
        return EXIT_CONFIG
    analysis.write_comparison(comparison.report, comparison.metrics, comparison.throughput, args.output_dir, args.plot)
    analysis.print_comparison(comparison.report)
    violations = sum(m.access.violations for m in comparison.metrics)
    if violations:
        logging.error(f"{violations} access decisions violate the policy set.")
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_throughput(args) -> int:
    config = _load(args.config, args)
    if config is None:
        return EXIT_CONFIG
    try:
        result = bench.throughput_probe(config, args.offered)
    except ValueError as e:
        logging.error(str(e))
        return EXIT_CONFIG
    df = analysis.throughput_frame([result])
    if args.output_dir:
        analysis.write_table(df, args.output_dir, "throughput")
    analysis.print_table(df)
    return EXIT_OK


def cmd_attack_eval(args) -> int:
    config = _load(args.config, args)
    if config is None:
        return EXIT_CONFIG
    try:
        grid = _parse_eps(args.eps)
        evaluation = bench.attack_eval(config, grid, args.seeds)
    except ValueError as e:
        logging.error(str(e))
        return EXIT_CONFIG
    df = analysis.attack_frame(evaluation.points)
    if args.output_dir:
        analysis.write_table(df, args.output_dir, "attack")
    analysis.print_table(df)
    if not bench.non_increasing(evaluation.advantages):
        logging.error("Membership advantage increases along the epsilon grid.")
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_verify_chain(args) -> int:
    if not os.path.exists(args.chain_file):
        logging.error(f"Chain file not found: {args.chain_file}")
        return EXIT_CONFIG
    try:
        chain = exporters.read_chain(args.chain_file)
    except ChainDecodeError as e:
        where = f" at block {e.index}" if e.index is not None else ""
        logging.error(f"Chain file is malformed{where}: {e}")
        return EXIT_VIOLATION
    bad = verify_chain(chain)
    if bad is not None:
        logging.error(f"Chain verification failed: first invalid block is {bad}.")
        print(json.dumps({"valid": False, "first_invalid": bad, "blocks": len(chain)}))
        return EXIT_VIOLATION
    logging.info(f"Chain of {len(chain)} blocks verified.")
    print(json.dumps({"valid": True, "first_invalid": None, "blocks": len(chain)}))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    config = _load(args.config, args)
    if config is None:
        return EXIT_CONFIG
    targets = bench.CalibrationTargets()
    if args.targets:
        target_path = resolve_path(args.targets)
        if target_path is None:
            logging.error(f"Targets file not found: {args.targets}")
            return EXIT_CONFIG
        try:
            targets = bench.CalibrationTargets.model_validate_json(target_path.read_text(encoding="utf-8"))
        except ValidationError as e:
            logging.error(f"Failed to validate calibration targets: {e}")
            return EXIT_CONFIG
    result = bench.calibrate(config, targets, args.iterations)
    os.makedirs(args.output_dir, exist_ok=True)
    for arch, calibrated in result.configs.items():
        _write_config(calibrated, os.path.join(args.output_dir, f"calibrated_{arch.value}.json"))
    df = pd.DataFrame([{"metric": k, "achieved": v} for k, v in result.achieved.items()])
    analysis.write_table(df, args.output_dir, "calibration")
    analysis.print_table(df)
    return EXIT_OK if result.ok else EXIT_VIOLATION


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def main():
    """Main CLI entry point for carechain."""

    parser = argparse.ArgumentParser(description="Carechain: simulate and benchmark an edge / federated-learning / "
                                                 "permissioned-ledger healthcare IoT stack against cloud and PoW baselines.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", type=str, default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="Set the logging level.")

    overrides = argparse.ArgumentParser(add_help=False)
    overrides.add_argument("--seed", type=int, default=None, help="Override the config's root seed.")
    overrides.add_argument("--architecture", type=str, default=None, choices=[a.value for a in Architecture],
                           help="Override the config's architecture.")
    overrides.add_argument("--duration-ms", type=int, default=None, help="Override the simulated duration.")
    overrides.add_argument("--patients", type=int, default=None, help="Override the number of patients.")

    # --- Generate Command ---
    gen_parser = subparsers.add_parser("generate", parents=[common, overrides], formatter_class=argparse.RawTextHelpFormatter,
        help="Dump the synthetic cohort, anomaly plan and vitals streams of a scenario.")
    gen_parser.add_argument("--config", type=str, default=DEFAULT_SCENARIO, help="Scenario JSON file or bundled asset name.")
    gen_parser.add_argument("--output-dir", type=str, required=True, help="Directory to save vitals.csv, injections.csv and cohort.csv.")

    # --- Run Command ---
    run_parser = subparsers.add_parser("run", parents=[common, overrides], formatter_class=argparse.RawTextHelpFormatter,
        help="Run one scenario and write its metrics, decision log and chain.")
    run_parser.add_argument("config", nargs="?", default=DEFAULT_SCENARIO, help="Scenario JSON file or bundled asset name.")
    run_parser.add_argument("--output-dir", type=str, required=True, help="Directory to save the run artifacts.")
    run_parser.add_argument("--trace", action="store_true", help="Also write the event trace as NDJSON.")

    # --- Compare Command ---
    cmp_parser = subparsers.add_parser("compare", parents=[common, overrides], formatter_class=argparse.RawTextHelpFormatter,
        help="Compare architectures on one workload (a single config is expanded to the proposed/cloud/PoW trio).")
    cmp_parser.add_argument("configs", nargs="*", help="Scenario JSON files or bundled asset names.")
    cmp_parser.add_argument("--output-dir", type=str, required=True, help="Directory to save comparison.md/.csv/.json.")
    cmp_parser.add_argument("--offered", type=float, default=None, help="Offered load for the throughput probes (TPS).")
    cmp_parser.add_argument("--plot", action="store_true", help="Also save a bar chart of latency, TPS and energy.")

    # --- Throughput Command ---
    tp_parser = subparsers.add_parser("throughput", parents=[common, overrides], formatter_class=argparse.RawTextHelpFormatter,
        help="Probe the sustained transaction throughput at an offered load.")
    tp_parser.add_argument("config", nargs="?", default=DEFAULT_SCENARIO, help="Scenario JSON file or bundled asset name.")
    tp_parser.add_argument("--offered", type=float, default=None, help="Offered load in TPS (default from the config).")
    tp_parser.add_argument("--output-dir", type=str, default=None, help="Directory to save throughput.csv/.json.")

    # --- Attack-Eval Command ---
    atk_parser = subparsers.add_parser("attack-eval", parents=[common, overrides], formatter_class=argparse.RawTextHelpFormatter,
        help="Membership-inference advantage of the federated model over an epsilon grid.")
    atk_parser.add_argument("config", nargs="?", default=DEFAULT_SCENARIO, help="Scenario JSON file or bundled asset name.")
    atk_parser.add_argument("--eps", type=str, default="off,8,1,0.5", help="Comma-separated per-round epsilons; 'off' disables DP.")
    atk_parser.add_argument("--seeds", type=int, default=bench.DEFAULT_ATTACK_SEEDS, help="Paired seeds per grid point.")
    atk_parser.add_argument("--output-dir", type=str, default=None, help="Directory to save attack.csv/.json.")

    # --- Verify-Chain Command ---
    vc_parser = subparsers.add_parser("verify-chain", parents=[common], formatter_class=argparse.RawTextHelpFormatter,
        help="Decode a binary chain export and verify every block.")
    vc_parser.add_argument("chain_file", type=str, help="Path to a chain.bin written by 'run'.")

    # --- Calibrate Command ---
    cal_parser = subparsers.add_parser("calibrate", parents=[common, overrides], formatter_class=argparse.RawTextHelpFormatter,
        help="Tune slot interval, WAN delays, cloud service rate and PoW difficulty to the reference targets.")
    cal_parser.add_argument("targets", nargs="?", default=None, help="Optional JSON file of calibration targets.")
    cal_parser.add_argument("--config", type=str, default=DEFAULT_SCENARIO, help="Scenario JSON file or bundled asset name.")
    cal_parser.add_argument("--iterations", type=int, default=3, help="Refinement passes per knob.")
    cal_parser.add_argument("--output-dir", type=str, required=True, help="Directory to save the calibrated configs.")

    # --- Test Commands ---
    test_parser = subparsers.add_parser("test", formatter_class=argparse.RawTextHelpFormatter,
        help="Run the bundled test-suite (without the slow acceptance runs).")
    test_parser.add_argument("--output-dir", type=str, default="./carechain_test_output", help="Directory to save the test output.")

    slow_parser = subparsers.add_parser("test-slow", formatter_class=argparse.RawTextHelpFormatter,
        help="Run only the slow acceptance checks (full default scenarios, large randomized sets).")
    slow_parser.add_argument("--output-dir", type=str, default="./carechain_test_slow", help="Directory to save the test output.")

    args = parser.parse_args()

    # Configure logging
    log_level = getattr(logging, args.log_level.upper() if hasattr(args, 'log_level') else 'INFO', logging.INFO)
    logging.basicConfig(level=log_level, format='%(asctime)s - %(levelname)s - %(message)s')

    commands = {
        "generate": cmd_generate,
        "run": cmd_run,
        "compare": cmd_compare,
        "throughput": cmd_throughput,
        "attack-eval": cmd_attack_eval,
        "verify-chain": cmd_verify_chain,
        "calibrate": cmd_calibrate,
    }
    if args.command == "test":
        code = _run_pytest(args.output_dir, marker_filter="not slow")
    elif args.command == "test-slow":
        code = _run_pytest(args.output_dir, marker_filter="slow")
    else:
        code = commands[args.command](args)
    sys.exit(code)


if __name__ == "__main__":
    main()
