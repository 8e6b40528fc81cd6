"""Command-line entry points binding the library into reproducible runs.

Subcommands: ``simulate | fit | select | se | eval``.  Every run writes
a JSON manifest recording the command, configuration, master seed,
package versions, wall time, and SHA-256 digests of inputs and outputs,
so any artifact can be traced to the exact invocation that produced it.

Exit codes: 0 success, 2 validation error, 3 numerical failure,
4 configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._stack import StackedData
from .covariates import CovariateError, parse_covariate_spec, write_covariate_spec
from .events import (
    EventLogError,
    parse_event_log,
    read_catalog,
    serialize_event_log,
    write_catalog,
)
from .evalsuite import (
    ReplicationRecord,
    estimation_metrics,
    extract_estimates,
    format_estimation_report,
    format_selection_report,
    selection_metrics,
    support_coordinates,
    truth_support,
)
from .inference import free_coordinates, observed_info, standard_errors
from .lik import QuadratureConfig, compile_dataset
from .model import (
    ModelError,
    PenaltyConfig,
    read_mask,
    read_params,
    write_params,
)
from .select import GridSpec, SupportMask, format_bic_table, grid_search, support_of
from .simulator import GuardTripped, SimConfig, TrueModel, simulate_dataset
from .stem import ConfigInvalid, FitConfig, fit

logger = logging.getLogger("eventfactor")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_CONFIG = 4


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, args: dict, seed: int,
                    inputs: list[Path], outputs: list[Path], t0: float):
    manifest = {
        "command": command,
        "config": {k: v for k, v in args.items() if not isinstance(v, Path)},
        "seed": seed,
        "versions": {"eventfactor": __version__, "numpy": np.__version__},
        "wall_time_s": round(time.perf_counter() - t0, 3),
        "inputs": {str(p): _sha256(p) for p in inputs if p.exists()},
        "outputs": {str(p): _sha256(p) for p in outputs if p.exists()},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_inputs(catalog_path: Path, spec_path: Path):
    catalog = read_catalog(catalog_path.read_text())
    spec = parse_covariate_spec(spec_path.read_text(), catalog)
    return catalog, spec


def _load_dataset(data_dir: Path, catalog, spec):
    events_path = data_dir / "events.log"
    dataset = parse_event_log(events_path.read_text().splitlines(), catalog)
    return dataset, compile_dataset(dataset, spec)


def _fit_config(args) -> FitConfig:
    return FitConfig(
        total_iters=args.iters,
        burn_in=args.burn_in,
        avg_window=args.avg_window,
        seed=args.seed,
        threads=args.threads,
        engine=args.engine,
        progress=args.verbose,
    )


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    catalog, spec = _load_inputs(args.catalog, args.spec)
    params, _ = read_params(args.truth.read_text())
    if args.n < 1:
        raise ConfigInvalid("n must be at least 1")
    model = TrueModel(params, spec, catalog, censor_rate=args.censor_rate)
    result = simulate_dataset(model, SimConfig(n=args.n, seed=args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    events_path = out / "events.log"
    events_path.write_text(serialize_event_log(result.dataset))
    truth_path = out / "truth.params"
    truth_path.write_text(write_params(params, catalog.names))
    theta_path = out / "truth.thetas"
    np.savetxt(theta_path, result.thetas, delimiter="\t")
    catalog_path = out / "catalog.txt"
    catalog_path.write_text(write_catalog(catalog))
    spec_path = out / "covariates.spec"
    spec_path.write_text(write_covariate_spec(spec, catalog))
    _write_manifest(
        out, "simulate", vars(args), args.seed,
        [args.catalog, args.spec, args.truth],
        [events_path, truth_path, theta_path, catalog_path, spec_path], t0,
    )
    print(f"simulated {result.dataset.n_subjects} subjects -> {events_path}")
    return EXIT_OK


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    catalog, spec = _load_inputs(args.catalog, args.spec)
    mask, _ = read_mask(args.mask.read_text())
    _, works = _load_dataset(Path(args.data), catalog, spec)
    penalty = PenaltyConfig(gamma1=args.gamma1, gamma2=args.gamma2)
    result = fit(works, None, mask, penalty, _fit_config(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params_path = out / "fitted.params"
    params_path.write_text(write_params(result.params_avg, catalog.names))
    trace_path = out / "trace.tsv"
    with trace_path.open("w") as fh:
        fh.write("iter\tobjective\tacceptance\n")
        for i, (obj, acc) in enumerate(
            zip(result.objective_trace, result.acceptance_trace), start=1
        ):
            fh.write(f"{i}\t{obj!r}\t{acc!r}\n")
    _write_manifest(
        out, "fit", vars(args), args.seed,
        [args.catalog, args.spec, args.mask, Path(args.data) / "events.log"],
        [params_path, trace_path], t0,
    )
    print(f"fit complete -> {params_path}")
    return EXIT_OK


def cmd_select(args) -> int:
    t0 = time.perf_counter()
    catalog, spec = _load_inputs(args.catalog, args.spec)
    mask, _ = read_mask(args.mask.read_text())
    _, works = _load_dataset(Path(args.data), catalog, spec)
    gridspec = GridSpec(
        (args.log_gamma1_min, args.log_gamma1_max), args.n_gamma1,
        (args.log_gamma2_min, args.log_gamma2_max), args.n_gamma2,
    )
    quad = QuadratureConfig(nodes_per_dim=args.quad_nodes)
    result = grid_search(
        StackedData(works), None, mask, gridspec,
        fit_config=_fit_config(args), quad=quad, n_jobs=args.threads,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table_path = out / "bic_table.tsv"
    table_path.write_text(format_bic_table(result))
    outputs = [table_path]
    if result.best is not None:
        selected_path = out / "selected.params"
        selected_path.write_text(write_params(result.best_params, catalog.names))
        outputs.append(selected_path)
        print(
            f"selected gamma1={result.best.gamma1:.6g} gamma2={result.best.gamma2:.6g} "
            f"(BIC {result.best.bic:.2f}) -> {selected_path}"
        )
    _write_manifest(
        out, "select", vars(args), args.seed,
        [args.catalog, args.spec, args.mask, Path(args.data) / "events.log"],
        outputs, t0,
    )
    return EXIT_OK if result.best is not None else EXIT_NUMERICAL


def cmd_se(args) -> int:
    t0 = time.perf_counter()
    catalog, spec = _load_inputs(args.catalog, args.spec)
    mask, _ = read_mask(args.mask.read_text())
    params, _ = read_params(args.params.read_text())
    _, works = _load_dataset(Path(args.data), catalog, spec)
    info = observed_info(
        params, works, mask, n_draws=args.draws, seed=args.seed
    )
    ses = standard_errors(info)
    cov_labels = [r.label(catalog) for r in spec.rules_fixed[0]] if spec.shared else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    se_path = out / "se_table.tsv"
    with se_path.open("w") as fh:
        fh.write("coordinate\testimate\tse\n")
        for coord, se in zip(info.coordinates, ses):
            est, _ = extract_estimates(params, [coord])
            fh.write(
                f"{coord.name(catalog.names, cov_labels)}\t{est[0]!r}\t{se!r}\n"
            )
    _write_manifest(
        out, "se", vars(args), args.seed,
        [args.catalog, args.spec, args.mask, args.params, Path(args.data) / "events.log"],
        [se_path], t0,
    )
    print(f"standard errors -> {se_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    catalog, spec = _load_inputs(args.catalog, args.spec)
    mask, _ = read_mask(args.mask.read_text())
    truth_params, _ = read_params(args.truth.read_text())
    truth = truth_support(truth_params)
    coords, truth_values = support_coordinates(truth_params, mask)

    cov_labels = (
        [r.label(catalog) for r in spec.rules_fixed[0]] if spec.shared else None
    )
    records = []
    inputs = [args.catalog, args.spec, args.mask, args.truth]
    for i, rep_dir in enumerate(args.replications):
        rep = Path(rep_dir)
        table_path = rep / "bic_table.tsv"
        inputs.append(table_path)
        digests = _read_support_digests(table_path)
        sel_params_path = rep / "selected.params"
        if not sel_params_path.exists():
            logger.warning("replication %s has no selected.params; skipped", rep)
            continue
        sel_params, _ = read_params(sel_params_path.read_text())
        selected = SupportMask.of_params(sel_params)
        est, ses = extract_estimates(sel_params, coords)
        se_path = rep / "se_table.tsv"
        if se_path.exists():
            by_name = _read_se_table(se_path)
            names = [c.name(catalog.names, cov_labels) for c in coords]
            ses = np.array([by_name.get(nm, np.nan) for nm in names])
        records.append(ReplicationRecord(i, digests, selected, est, ses))

    metrics = selection_metrics(records, truth, mask)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sel_path = out / "selection_metrics.tsv"
    sel_path.write_text(format_selection_report(metrics))
    outputs = [sel_path]
    try:
        est_metrics = estimation_metrics(records, truth_values, truth, mask)
        cov_labels = (
            [r.label(catalog) for r in spec.rules_fixed[0]] if spec.shared else None
        )
        est_path = out / "estimation_metrics.tsv"
        est_path.write_text(
            format_estimation_report(
                est_metrics, coords, truth_values, catalog.names, cov_labels
            )
        )
        outputs.append(est_path)
    except Exception as err:
        logger.warning("estimation metrics unavailable: %s", err)
    _write_manifest(out, "eval", vars(args), 0, inputs, outputs, t0)
    print(f"metrics -> {sel_path}")
    return EXIT_OK


def _read_support_digests(table_path: Path) -> list[str]:
    digests = []
    for line in table_path.read_text().splitlines()[1:]:
        parts = line.split("\t")
        if len(parts) >= 6 and not parts[5].startswith("ERROR"):
            digests.append(parts[5])
    return digests


def _read_se_table(se_path: Path) -> dict[str, float]:
    out = {}
    for line in se_path.read_text().splitlines()[1:]:
        name, _est, se = line.split("\t")
        out[name] = float(se)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eventfactor",
        description="Dynamic multiplicative factor models for event sequences",
    )
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--catalog", type=Path, required=True)
        p.add_argument("--spec", type=Path, required=True)
        if data:
            p.add_argument("--data", type=Path, required=True,
                           help="directory containing events.log")
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)

    def fit_opts(p):
        p.add_argument("--iters", type=int, default=500)
        p.add_argument("--burn-in", type=int, default=300)
        p.add_argument("--avg-window", type=int, default=200)
        p.add_argument("--engine", default="auto")

    p = sub.add_parser("simulate", help="simulate an event log from a true model")
    common(p, data=False)
    p.add_argument("--truth", type=Path, required=True, help="true parameter file")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--censor-rate", type=float, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="penalized stochastic-EM fit")
    common(p)
    p.add_argument("--mask", type=Path, required=True)
    p.add_argument("--gamma1", type=float, required=True)
    p.add_argument("--gamma2", type=float, required=True)
    fit_opts(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="BIC grid search over penalty tunings")
    common(p)
    p.add_argument("--mask", type=Path, required=True)
    p.add_argument("--log-gamma1-min", type=float, required=True)
    p.add_argument("--log-gamma1-max", type=float, required=True)
    p.add_argument("--n-gamma1", type=int, required=True)
    p.add_argument("--log-gamma2-min", type=float, required=True)
    p.add_argument("--log-gamma2-max", type=float, required=True)
    p.add_argument("--n-gamma2", type=int, required=True)
    p.add_argument("--quad-nodes", type=int, default=15)
    fit_opts(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("se", help="standard errors at fitted parameters")
    common(p)
    p.add_argument("--mask", type=Path, required=True)
    p.add_argument("--params", type=Path, required=True)
    p.add_argument("--draws", type=int, default=500)
    p.set_defaults(func=cmd_se)

    p = sub.add_parser("eval", help="replication metrics against a truth file")
    common(p, data=False)
    p.add_argument("--mask", type=Path, required=True)
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("replications", nargs="+")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigInvalid, ValueError) as err:
        if isinstance(err, (EventLogError, CovariateError, ModelError)):
            print(f"validation error: {err}", file=sys.stderr)
            return EXIT_VALIDATION
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (GuardTripped, FloatingPointError, np.linalg.LinAlgError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FileNotFoundError as err:
        print(f"validation error: {err}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
