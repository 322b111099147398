"""
Command-line entry point: solve, density, compare, example and history subcommands.

Every run writes a JSON run report next to its outputs, also on failure.
"""

import argparse
import csv
import logging
import os
import re
import sys
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Dict, List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv
from tqdm import tqdm

from .density import EXPM_METHODS, stationary_density
from .doubling import RiccatiSolution, Variant, solve_riccati
from .examples import EXAMPLE_NAMES, KAPPA_SWEEP, build_example, cascading_model
from .exceptions import ConvergenceError, FluidQueueError, ModelError, ParameterError
from .model import DEFAULT_ETA, FluidQueueModel, Scheme, choose_parameters, format_model, parse_model
from .oracle import MIN_DIGITS, ExtendedSolution, density_extended, error_metrics, solve_riccati_extended
from .run_log import RunLog, RunReport, model_fingerprint

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

VARIANT_ORDER = (Variant.GLX, Variant.XXL, Variant.COMP)

_LOGRANGE = re.compile(r"^logrange\(\s*([^,]+),\s*([^,]+),\s*([^,)]+)\)$")


def format_number(x: float) -> str:
    """17 significant digits with a bare exponent, e.g. 1.0000000000000000e0"""
    x = float(x)
    if not np.isfinite(x):
        return str(x)
    mantissa, exponent = f"{x:.16e}".split("e")
    return f"{mantissa}e{int(exponent)}"


def parse_points(text: str) -> np.ndarray:
    """
    Parse a list of fluid levels

    Args:
        text: A comma separated list of reals, or logrange(a,b,k) for k
            log-spaced points from a to b

    Returns:
        The levels as a float array
    """
    text = text.strip()
    match = _LOGRANGE.match(text)
    try:
        if not match:
            return np.array([float(tok) for tok in text.split(",") if tok.strip()])
        a, b, k = float(match.group(1)), float(match.group(2)), int(match.group(3))
    except ValueError:
        raise ParameterError(f"malformed points: {text}") from None
    if a <= 0 or b <= 0 or k < 1:
        raise ParameterError(f"logrange needs positive bounds and count, got {text}")
    return np.geomspace(a, b, k)


def _write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence], report: RunReport):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([cell if isinstance(cell, str) else format_number(cell) for cell in row])
    report.add_output(path)


def _write_matrix(path: str, matrix: np.ndarray, report: RunReport):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        for row in np.atleast_2d(matrix):
            writer.writerow([format_number(v) for v in row])
    report.add_output(path)


def _load_model(path: str, report: RunReport) -> FluidQueueModel:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except UnicodeDecodeError as exc:
        raise ModelError(f"model file {path} is not valid UTF-8 text: {exc.reason} at byte {exc.start}") from None
    report.model_fingerprint = model_fingerprint(text)
    return parse_model(text)


def _solve(model: FluidQueueModel, args, variant: Variant) -> RiccatiSolution:
    params = choose_parameters(model, Scheme(args.scheme), args.eta, getattr(args, "subtraction_free", False))
    return solve_riccati(model, params, variant, getattr(args, "tol", None), getattr(args, "max_iter", 100))


def _record_solution(report: RunReport, solution: RiccatiSolution):
    diag = solution.diagnostics
    report.variant = diag.variant.value
    report.scheme = diag.params.scheme.value
    report.parameters = diag.params.to_dict()
    report.iterations = diag.iterations
    report.diagnostics = diag.to_dict()


def _print_diagnostics(solution: RiccatiSolution):
    diag = solution.diagnostics
    print(f"variant {diag.variant.value}, scheme {diag.params.scheme.value}, "
          f"alpha {diag.params.alpha:.6e}, beta {diag.params.beta:.6e}")
    for k, ratio in enumerate(diag.increment_ratios, start=1):
        print(f"  step {k:3d}  increment ratio {ratio:.3e}")
    print(f"converged in {diag.iterations} steps")
    if diag.perron_value is not None:
        contraction = "n/a" if diag.contraction is None else f"{diag.contraction:.6e}"
        print(f"decay rate {diag.perron_value:.6e}, contraction {contraction}")


def cmd_solve(args, report: RunReport):
    model = _load_model(args.model, report)
    solution = _solve(model, args, Variant(args.variant))
    _record_solution(report, solution)
    _print_diagnostics(solution)
    _write_matrix(os.path.join(args.output_dir, "psi.csv"), solution.psi, report)
    if args.psi_hat:
        _write_matrix(os.path.join(args.output_dir, "psi_hat.csv"), solution.psi_hat, report)


def cmd_density(args, report: RunReport):
    model = _load_model(args.model, report)
    levels = parse_points(args.points)
    solution = _solve(model, args, Variant(args.variant))
    _record_solution(report, solution)
    result = stationary_density(model, solution, levels, args.expm)
    header = ["x"] + [f"f_{i + 1}" for i in range(model.n)] + ["total"]
    rows = [[x, *values, total] for x, values, total in zip(result.levels, result.values, result.total())]
    _write_csv(os.path.join(args.output_dir, "density.csv"), header, rows, report)
    _write_matrix(os.path.join(args.output_dir, "p_minus.csv"), result.p_minus[None, :], report)
    print(f"density written at {len(levels)} levels, boundary mass {result.p_minus.sum():.6e}")


def compare_variants(
    model: FluidQueueModel,
    scheme: Scheme = Scheme.SDA,
    eta: float = DEFAULT_ETA,
    digits: int = MIN_DIGITS,
    reference: Optional[ExtendedSolution] = None,
) -> Dict[Variant, dict]:
    """
    Solve with every variant and measure the errors of Psi against the oracle

    A variant that fails is reported with NaN errors instead of aborting the
    comparison; an oracle failure propagates.
    """
    if reference is None:
        reference = solve_riccati_extended(model, digits)
    params = choose_parameters(model, scheme, eta)
    results = {}
    for variant in VARIANT_ORDER:
        try:
            solution = solve_riccati(model, params, variant)
        except FluidQueueError as exc:
            logger.warning("%s failed: %s", variant.value, exc)
            results[variant] = {"solution": None, "metrics": None, "iterations": None, "error": str(exc)}
            continue
        metrics = error_metrics(solution.psi, reference.psi)
        results[variant] = {
            "solution": solution,
            "metrics": metrics,
            "iterations": solution.diagnostics.iterations,
            "error": None,
        }
    return results


def _metric_cells(entry: dict) -> List[float]:
    if entry["metrics"] is None:
        return [float("nan"), float("nan")]
    return [entry["metrics"].e_norm, entry["metrics"].e_cw]


def cmd_compare(args, report: RunReport):
    model = _load_model(args.model, report)
    if args.digits < MIN_DIGITS:
        raise ParameterError(f"--digits must be at least {MIN_DIGITS}, got {args.digits}")
    params = choose_parameters(model, Scheme(args.scheme), args.eta)
    report.scheme = params.scheme.value
    report.parameters = params.to_dict()
    reference = solve_riccati_extended(model, args.digits)
    results = compare_variants(model, params.scheme, args.eta, args.digits, reference)
    report.iterations = results[Variant.COMP]["iterations"]
    report.diagnostics = {"oracle_iterations": reference.iterations, "oracle_digits": reference.digits}

    rows = []
    for variant, entry in results.items():
        iterations = "" if entry["iterations"] is None else str(entry["iterations"])
        rows.append([variant.value, *_metric_cells(entry), iterations])
        print(f"{variant.value:>5}  e_norm {_metric_cells(entry)[0]:.3e}  e_cw {_metric_cells(entry)[1]:.3e}")
        if args.error_matrices and entry["metrics"] is not None:
            path = os.path.join(args.output_dir, f"errors_{variant.value}.csv")
            _write_matrix(path, entry["metrics"].relative, report)
    _write_csv(os.path.join(args.output_dir, "compare.csv"), ["variant", "e_norm", "e_cw", "iterations"], rows, report)

    if args.points:
        levels = parse_points(args.points)
        exact = density_extended(model, levels, args.digits, reference)
        header = ["x", "total"]
        columns = []
        for variant, entry in results.items():
            header += [f"{variant.value}_e_norm", f"{variant.value}_e_cw"]
            if entry["solution"] is None:
                columns.append(None)
                continue
            columns.append(stationary_density(model, entry["solution"], levels, args.expm).values)
        rows = []
        for i, x in enumerate(tqdm(levels, desc="density errors")):
            row = [x, float(sum(exact[i]))]
            for values in columns:
                if values is None:
                    row += [float("nan"), float("nan")]
                else:
                    metrics = error_metrics(values[i], exact[i])
                    row += [metrics.e_norm, metrics.e_cw]
            rows.append(row)
        _write_csv(os.path.join(args.output_dir, "density_errors.csv"), header, rows, report)


def _sweep_row(kappa: float, digits: int) -> List[float]:
    model = cascading_model(kappa)
    results = compare_variants(model, digits=digits)
    row = [kappa]
    for variant in VARIANT_ORDER:
        row += _metric_cells(results[variant])
    return row


def _thread_count() -> int:
    raw = os.getenv("FLUIDQ_THREADS", "1").strip()
    try:
        threads = int(raw)
    except ValueError:
        raise ParameterError(f"FLUIDQ_THREADS must be a positive integer, got {raw!r}") from None
    if threads < 1:
        raise ParameterError(f"FLUIDQ_THREADS must be a positive integer, got {raw!r}")
    return threads


def cmd_example(args, report: RunReport):
    if args.sweep:
        if args.name != "cascading":
            raise ParameterError("--sweep is only available for the cascading example")
        threads = _thread_count()
        print(f"sweeping kappa over {len(KAPPA_SWEEP)} values with {threads} thread(s)")
        rows = []
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_sweep_row, kappa, args.digits) for kappa in KAPPA_SWEEP]
            for future in tqdm(as_completed(futures), total=len(futures), desc="kappa sweep"):
                rows.append(future.result())
        rows.sort(key=lambda row: row[0])
        header = ["kappa"] + [f"{v.value}_{m}" for v in VARIANT_ORDER for m in ("e_norm", "e_cw")]
        _write_csv(os.path.join(args.output_dir, "kappa_sweep.csv"), header, rows, report)
        return

    model = build_example(args.name, args.kappa)
    text = format_model(model)
    report.model_fingerprint = model_fingerprint(text)
    stem = "weakly_connected" if args.name == "weakly-connected" else "cascading"
    path = os.path.join(args.output_dir, f"{stem}.fq")
    with open(path, "w") as f:
        f.write(text)
    report.add_output(path)
    print(f"wrote {path}")


def cmd_history(args, report: RunReport):
    log_file = args.log_file or os.getenv("FLUIDQ_RUN_LOG")
    if not log_file:
        raise ParameterError("no run history: pass --log-file or set FLUIDQ_RUN_LOG")
    if not os.path.exists(log_file):
        raise ParameterError(f"run history {log_file} does not exist")
    log = RunLog(log_file)
    summary = log.get_variant_summary()
    recent = log.get_recent_runs(args.limit)
    print(f"{'variant':>8}  {'runs':>5}  {'failures':>8}  mean iterations")
    for row in summary:
        print(f"{row['variant']:>8}  {row['runs']:>5}  {row['failures']:>8}  {row['mean_iterations']:.2f}")
    print(f"\n{len(recent)} most recent run(s):")
    for run in recent:
        print(f"  {run['timestamp']}  {run['status']:<5}  {' '.join(run['command'][1:])}")
    rows = [[row["variant"], str(row["runs"]), str(row["failures"]), row["mean_iterations"]] for row in summary]
    _write_csv(os.path.join(args.output_dir, "history.csv"), ["variant", "runs", "failures", "mean_iterations"], rows, report)


def _add_solver_flags(sub: argparse.ArgumentParser, with_variant: bool = True):
    if with_variant:
        sub.add_argument("--variant", choices=[v.value for v in Variant], default=Variant.COMP.value)
    sub.add_argument("--scheme", choices=[s.value for s in Scheme], default=Scheme.SDA.value)
    sub.add_argument("--eta", type=float, default=DEFAULT_ETA)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fluidq", description="Componentwise accurate fluid queue solvers")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output-dir", default=".", help="directory for output files")
    common.add_argument("--report", default=None, help="run report path (default <output-dir>/run_report.json)")
    common.add_argument("--verbose", action="store_true", help="log iteration details")
    subparsers = parser.add_subparsers(dest="command", required=True)

    solve = subparsers.add_parser("solve", parents=[common], help="compute Psi")
    solve.add_argument("--model", required=True)
    _add_solver_flags(solve)
    solve.add_argument("--tol", type=float, default=None)
    solve.add_argument("--max-iter", type=int, default=100)
    solve.add_argument("--subtraction-free", action="store_true")
    solve.add_argument("--psi-hat", action="store_true", help="also write psi_hat.csv")
    solve.set_defaults(handler=cmd_solve)

    density = subparsers.add_parser("density", parents=[common], help="evaluate the stationary density")
    density.add_argument("--model", required=True)
    density.add_argument("--points", required=True, help="comma list or logrange(a,b,k)")
    _add_solver_flags(density)
    density.add_argument("--subtraction-free", action="store_true")
    density.add_argument("--expm", choices=EXPM_METHODS, default="taylor")
    density.set_defaults(handler=cmd_density)

    compare = subparsers.add_parser("compare", parents=[common], help="compare variants against the oracle")
    compare.add_argument("--model", required=True)
    _add_solver_flags(compare, with_variant=False)
    compare.add_argument("--digits", type=int, default=MIN_DIGITS)
    compare.add_argument("--error-matrices", action="store_true", help="write errors_<variant>.csv")
    compare.add_argument("--points", default=None, help="also compare densities at these levels")
    compare.add_argument("--expm", choices=EXPM_METHODS, default="taylor")
    compare.set_defaults(handler=cmd_compare)

    example = subparsers.add_parser("example", parents=[common], help="write a built-in model")
    example.add_argument("--name", choices=EXAMPLE_NAMES, required=True)
    example.add_argument("--kappa", type=float, default=1.0)
    example.add_argument("--sweep", action="store_true", help="run the kappa sweep comparison")
    example.add_argument("--digits", type=int, default=MIN_DIGITS)
    example.set_defaults(handler=cmd_example)

    history = subparsers.add_parser("history", parents=[common], help="summarize the run history")
    history.add_argument("--log-file", default=None, help="run history file (default $FLUIDQ_RUN_LOG)")
    history.add_argument("--limit", type=int, default=10, help="number of recent runs to list")
    history.set_defaults(handler=cmd_history)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    report = RunReport(command=["fluidq", *argv])
    code = EXIT_OK
    start_time = time.time()
    try:
        os.makedirs(args.output_dir, exist_ok=True)
        args.handler(args, report)
    except (ModelError, ParameterError, OSError) as exc:
        report.fail(exc)
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except FluidQueueError as exc:
        report.fail(exc)
        if isinstance(exc, ConvergenceError):
            report.diagnostics = exc.to_dict()
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    except Exception as exc:
        logger.exception("unexpected failure in %s", args.command)
        report.fail(exc)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    report.wall_time = time.time() - start_time

    report_path = args.report or os.path.join(args.output_dir, "run_report.json")
    try:
        report.write(report_path)
    except OSError as exc:
        logger.warning("could not write run report %s: %s", report_path, exc)
    log_file = os.getenv("FLUIDQ_RUN_LOG")
    if log_file and args.command != "history":
        RunLog(log_file).record_run(report)
    return code


if __name__ == "__main__":
    sys.exit(main())
