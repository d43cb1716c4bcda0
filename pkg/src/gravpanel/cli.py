"""Command-line interface: prune, estimate, diagnose, report, simulate.

Outputs are written atomically (temp file + rename) and every run that writes
a file also writes a ``<output>.manifest.json`` with the fully resolved
options, input digests, versions and wall time, from which the run can be
re-executed bit for bit. Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import difflib
import hashlib
import json
import os
import sys
import tempfile
import time

import numpy as np
import scipy

from . import __version__
from .corrections import get_correction
from .diagnostics import (
    diagnose,
    industry_report,
    leading_order_summary,
    pair_presence_map,
)
from .errors import GravpanelError
from .estimation import EstimateConfig, cluster_robust_vcov, fit, CLUSTER_GROUPINGS
from .panel import ColumnSchema, load_panel, write_panel
from .pruning import prune
from .simulation import (
    ATTRITION_MODES,
    ERROR_MODES,
    DgpConfig,
    run_monte_carlo,
)


class UsageError(Exception):
    pass


def _positive_float(text):
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"{text!r} must be positive")
    return value


def _psi_value(text):
    value = float(text)
    if not (0.0 <= value < 1.0):
        raise argparse.ArgumentTypeError(f"psi {text!r} out of range [0, 1)")
    return value


def _psi_list(text):
    return [_psi_value(tok) for tok in text.split(",") if tok != ""]


def _name_list(text):
    return tuple(tok.strip() for tok in text.split(",") if tok.strip())


def _threads_default() -> int:
    env = os.environ.get("GRAVPANEL_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def _atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(primary_output: str, command: str, options: dict, inputs, started: float):
    manifest = {
        "command": command,
        "options": {k: v for k, v in sorted(options.items())},
        "inputs": [
            {"path": p, "sha256": _sha256(p)} for p in inputs if os.path.exists(p)
        ],
        "versions": {
            "gravpanel": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": sys.version.split()[0],
        },
        "wall_time_seconds": time.time() - started,
    }
    _atomic_write_text(primary_output + ".manifest.json", json.dumps(manifest, indent=2) + "\n")


def argv_from_manifest(manifest: dict) -> list[str]:
    """Rebuild an argv that reproduces the recorded run exactly."""
    argv = [manifest["command"]]
    for key, value in manifest["options"].items():
        if value is None or value is False:
            continue
        flag = "--" + key.replace("_", "-")
        if value is True:
            argv.append(flag)
        elif isinstance(value, (list, tuple)):
            argv.extend([flag, ",".join(str(v) for v in value)])
        else:
            argv.extend([flag, str(value)])
    return argv


def _schema_from(ns) -> ColumnSchema:
    covs = ns.__dict__.get("covariates")
    if covs == ("none",):  # explicit fixed-effects-only fit
        covs = ()
    elif not covs:
        covs = None
    return ColumnSchema(
        exporter=ns.exporter_col,
        importer=ns.importer_col,
        period=ns.period_col,
        flow=ns.flow_col,
        covariates=covs,
        delimiter=ns.delimiter,
    )


def _add_schema_options(parser):
    parser.add_argument("--delimiter", default=",", help="field delimiter (default ,)")
    parser.add_argument("--exporter-col", default="exporter")
    parser.add_argument("--importer-col", default="importer")
    parser.add_argument("--period-col", default="year")
    parser.add_argument("--flow-col", default="trade")


def _add_common(parser):
    parser.add_argument("--config", help="JSON file whose keys mirror the flags; flags win")


def _estimate_config(ns) -> EstimateConfig:
    return EstimateConfig(
        foc_tolerance=ns.tol,
        max_outer_iterations=ns.max_outer,
        max_inner_iterations=ns.max_inner,
        exponent_cap=ns.exponent_cap,
    )


def _add_estimator_options(parser):
    parser.add_argument("--tol", type=_positive_float, default=1e-8,
                        help="first-order-condition tolerance (default 1e-8)")
    parser.add_argument("--max-outer", type=int, default=200)
    parser.add_argument("--max-inner", type=int, default=10_000)
    parser.add_argument("--exponent-cap", type=_positive_float, default=30.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gravpanel",
        description="Pseudo-Poisson gravity-panel toolkit: prune uninformative "
        "observations, estimate, diagnose bias orders, and simulate.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("prune", help="drop uninformative observations")
    p.add_argument("--input", required=False)
    p.add_argument("--output", help="write the pruned panel here")
    p.add_argument("--report", help="write a JSON pruning report here")
    _add_schema_options(p)
    _add_common(p)

    p = sub.add_parser("estimate", help="fit the three-way model")
    p.add_argument("--input", required=False)
    p.add_argument("--covariates", type=_name_list,
                   help="comma-separated covariate columns; 'none' fits fixed "
                        "effects only (default: all non-key columns)")
    p.add_argument("--cluster", choices=CLUSTER_GROUPINGS,
                   help="compute a cluster-robust covariance with this grouping")
    p.add_argument("--correction", help="apply a registered correction (e.g. spj)")
    p.add_argument("--prune", action="store_true", help="prune before fitting")
    p.add_argument("--export-fe", action="store_true",
                   help="include the (large) fixed-effect maps in the output")
    p.add_argument("--out", help="write the fit as JSON here (default: stdout)")
    _add_estimator_options(p)
    _add_schema_options(p)
    _add_common(p)

    p = sub.add_parser("diagnose", help="prune and summarize the bias order")
    p.add_argument("--input", required=False)
    p.add_argument("--out", help="write the diagnostic as JSON here (default: stdout)")
    _add_schema_options(p)
    _add_common(p)

    p = sub.add_parser("report", help="bias-order table over a directory of panels")
    p.add_argument("--inputs", required=False, help="directory of delimited panel files")
    p.add_argument("--out", help="summary table CSV")
    p.add_argument("--figure-data", help="per-dataset coverage CSV (label, I_bar, J_bar)")
    p.add_argument("--pair-presence-dir",
                   help="also write per-dataset pair presence CSVs into this directory")
    p.add_argument("--initial-countries", type=int,
                   help="reference country count drawn on the coverage figure")
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    _add_schema_options(p)
    _add_common(p)

    p = sub.add_parser("simulate", help="Monte Carlo study on synthetic panels")
    p.add_argument("--dgp", choices=("dgp1", "wz1"), default="dgp1",
                   help="synthetic design (wz1 is an accepted alias of dgp1)")
    p.add_argument("--N", type=int, help="countries per side")
    p.add_argument("--T", type=int, help="periods")
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--psi", type=_psi_list, help="comma-separated attrition fractions")
    p.add_argument("--nbar-target", type=_positive_float,
                   help="instead of a fixed N, use floor(target/(1-psi)) per psi")
    p.add_argument("--reps", type=int, help="replications per psi")
    p.add_argument("--attrition", choices=ATTRITION_MODES, default="eta-smallest")
    p.add_argument("--error-mode", choices=ERROR_MODES, default="unit-mean")
    p.add_argument("--estimators", type=_name_list, default=("feppml", "spj"))
    p.add_argument("--seed", type=int, help="base seed (required)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker parallelism (env GRAVPANEL_THREADS overrides the default of 1)")
    p.add_argument("--out", help="summary CSV (one row per psi)")
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    _add_estimator_options(p)
    _add_common(p)

    return parser


def _apply_config_file(ns) -> None:
    path = getattr(ns, "config", None)
    if not path:
        return
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise GravpanelError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    for key, value in data.items():
        attr = key.replace("-", "_")
        if not hasattr(ns, attr):
            raise UsageError(f"config file key {key!r} does not match any flag")
        if ns.__dict__.get("_explicit") and attr in ns._explicit:
            continue  # flags win
        if attr == "psi" and isinstance(value, list):
            value = [_psi_value(str(v)) for v in value]
        if attr in ("covariates", "estimators") and isinstance(value, list):
            value = tuple(value)
        setattr(ns, attr, value)


def _float_repr(v) -> str:
    return repr(float(v))


# -- subcommand bodies -------------------------------------------------------------


def _require(ns, *names):
    for name in names:
        if getattr(ns, name, None) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _cmd_prune(ns) -> int:
    _require(ns, "input")
    started = time.time()
    panel = load_panel(ns.input, _schema_from(ns))
    pruned, report = prune(panel)
    summary = report.to_dict()
    outputs = []
    if ns.output:
        import io

        buf = io.StringIO()
        write_panel(pruned, buf, _schema_from(ns))
        _atomic_write_text(ns.output, buf.getvalue())
        outputs.append(ns.output)
    if ns.report:
        _atomic_write_text(ns.report, json.dumps(summary, indent=2) + "\n")
        outputs.append(ns.report)
    if not outputs:
        print(json.dumps(summary, indent=2))
    options = _manifest_options(ns)
    for out in outputs:
        _write_manifest(out, "prune", options, [ns.input], started)
    print(
        f"pruned {summary['n_dropped']} of {summary['dims_before']['n']} observations "
        f"in {summary['rounds']} rounds (n* = {summary['dims_after']['n']})",
        file=sys.stderr,
    )
    return 0


def _fe_maps_block(result):
    def _encode(mapping):
        return [
            {"cell": [str(a), str(b)], "value": value}
            for (a, b), value in sorted(mapping.items(), key=lambda kv: (str(kv[0][0]), str(kv[0][1])))
        ]

    return {
        "alpha": _encode(result.alpha),
        "gamma": _encode(result.gamma),
        "eta": _encode(result.eta),
    }


def _cmd_estimate(ns) -> int:
    _require(ns, "input")
    started = time.time()
    schema = _schema_from(ns)
    panel = load_panel(ns.input, schema)
    prune_summary = None
    if ns.prune:
        panel, prune_report = prune(panel)
        prune_summary = prune_report.to_dict()
    config = _estimate_config(ns)
    result = fit(panel, config)
    payload = {
        "covariates": list(panel.covariate_names),
        "beta": [float(b) for b in result.beta],
        "converged": result.converged,
        "outer_iterations": result.outer_iterations,
        "foc_residuals": result.foc_residuals,
        "dims": panel.dims.to_dict(),
        "warnings": list(result.warnings),
    }
    if prune_summary:
        payload["prune"] = prune_summary
    if ns.cluster:
        vcov = cluster_robust_vcov(panel, result, ns.cluster)
        payload["cluster"] = ns.cluster
        payload["vcov"] = [[float(v) for v in row] for row in vcov]
        payload["std_errors"] = [float(v) for v in np.sqrt(np.diag(vcov))]
    if ns.correction:
        correction = get_correction(ns.correction)
        corrected = correction(panel, config)
        payload["correction"] = {
            "method": corrected.method,
            "beta_corrected": [float(b) for b in corrected.beta_corrected],
            "beta_uncorrected": [float(b) for b in corrected.beta_uncorrected],
            "half_estimates": (
                [[float(b) for b in h] for h in corrected.half_estimates]
                if corrected.half_estimates is not None
                else None
            ),
            "halves": (
                {
                    "first": [str(p) for p in corrected.split.first_half],
                    "second": [str(p) for p in corrected.split.second_half],
                }
                if corrected.split is not None
                else None
            ),
            "subfits": [
                {
                    "part": rep.part,
                    "converged": rep.fit.converged,
                    "outer_iterations": rep.fit.outer_iterations,
                    "prune": rep.prune_report.to_dict() if rep.prune_report else None,
                }
                for rep in corrected.subfit_reports
            ],
        }
    if ns.export_fe:
        payload["fixed_effects"] = _fe_maps_block(result)
    text = json.dumps(payload, indent=2) + "\n"
    if ns.out:
        _atomic_write_text(ns.out, text)
        _write_manifest(ns.out, "estimate", _manifest_options(ns), [ns.input], started)
    else:
        print(text, end="")
    return 0


def _cmd_diagnose(ns) -> int:
    _require(ns, "input")
    started = time.time()
    panel = load_panel(ns.input, _schema_from(ns))
    diag, report = diagnose(panel)
    payload = {
        "diagnostic": diag.to_dict(),
        "prune": report.to_dict(),
    }
    text = json.dumps(payload, indent=2) + "\n"
    if ns.out:
        _atomic_write_text(ns.out, text)
        _write_manifest(ns.out, "diagnose", _manifest_options(ns), [ns.input], started)
    else:
        print(text, end="")
    return 0


def _cmd_report(ns) -> int:
    _require(ns, "inputs", "out")
    started = time.time()
    if not os.path.isdir(ns.inputs):
        raise GravpanelError(f"--inputs {ns.inputs!r} is not a directory")
    files = sorted(
        f for f in os.listdir(ns.inputs) if f.lower().endswith((".csv", ".tsv", ".txt"))
    )
    if not files:
        raise GravpanelError(f"no delimited files found in {ns.inputs!r}")
    schema = _schema_from(ns)
    labeled = []
    loaded_panels = {}
    for name in files:
        label = os.path.splitext(name)[0]
        path = os.path.join(ns.inputs, name)
        try:
            panel = load_panel(path, schema)
        except GravpanelError as exc:
            labeled.append((label, None, str(exc)))
            continue
        loaded_panels[label] = panel
        labeled.append((label, panel, None))

    from .diagnostics import IndustryRow

    rows = []
    for label, panel, err in labeled:
        if err is not None:
            rows.append(IndustryRow(label=label, error=err))
        else:
            rows.extend(industry_report([(label, panel)]))

    header = [
        "label", "n", "n_star", "share", "I_bar", "J_bar",
        "I_bar_display", "J_bar_display", "leading_order", "amplification", "error",
    ]
    lines = [",".join(header)]
    for r in rows:
        lines.append(
            ",".join(
                [
                    r.label,
                    "" if r.n is None else str(r.n),
                    "" if r.n_star is None else str(r.n_star),
                    "" if r.share is None else f"{r.share:.3f}",
                    "" if r.I_bar is None else _float_repr(r.I_bar),
                    "" if r.J_bar is None else _float_repr(r.J_bar),
                    "" if r.I_bar_display is None else str(r.I_bar_display),
                    "" if r.J_bar_display is None else str(r.J_bar_display),
                    "" if r.leading_order is None else _float_repr(r.leading_order),
                    "" if r.amplification is None else _float_repr(r.amplification),
                    r.error or "",
                ]
            )
        )
    summary = leading_order_summary(rows)
    _atomic_write_text(ns.out, "\n".join(lines) + "\n")
    outputs = [ns.out]

    if ns.figure_data:
        fig_lines = ["label,I_bar,J_bar"]
        for r in rows:
            if r.error is None:
                fig_lines.append(f"{r.label},{_float_repr(r.I_bar)},{_float_repr(r.J_bar)}")
        _atomic_write_text(ns.figure_data, "\n".join(fig_lines) + "\n")
        outputs.append(ns.figure_data)

    if ns.pair_presence_dir:
        os.makedirs(ns.pair_presence_dir, exist_ok=True)
        for label, panel in loaded_panels.items():
            pruned, _ = prune(panel)
            presence = pair_presence_map(panel, pruned)
            p_lines = ["exporter,importer,count"]
            for e, i, c in zip(presence.exporters, presence.importers, presence.counts):
                p_lines.append(f"{e},{i},{c}")
            p_path = os.path.join(ns.pair_presence_dir, f"{label}_pair_presence.csv")
            _atomic_write_text(p_path, "\n".join(p_lines) + "\n")
            if not ns.no_figures:
                from .figures import save_pair_presence_figure

                save_pair_presence_figure(
                    presence,
                    os.path.join(ns.pair_presence_dir, f"{label}_pair_presence.png"),
                    title=label,
                )

    if not ns.no_figures:
        from .figures import save_coverage_figure

        stem = os.path.splitext(ns.figure_data or ns.out)[0]
        save_coverage_figure(rows, stem + ".png", ns.initial_countries)
        outputs.append(stem + ".png")

    for key, value in summary.items():
        if value is not None:
            print(f"{key}: {value:.6f}", file=sys.stderr)
    _write_manifest(
        ns.out, "report", _manifest_options(ns),
        [os.path.join(ns.inputs, f) for f in files], started,
    )
    return 0


def _cmd_simulate(ns) -> int:
    _require(ns, "T", "psi", "reps", "out")
    if ns.seed is None:
        raise UsageError("--seed is required (simulations are never implicitly random)")
    if ns.N is None and ns.nbar_target is None:
        raise UsageError("either --N or --nbar-target is required")
    if ns.reps < 2:
        raise UsageError("--reps must be at least 2")
    threads = ns.threads if ns.threads is not None else _threads_default()
    if threads < 1:
        raise UsageError("--threads must be at least 1")
    started = time.time()
    est_config = _estimate_config(ns)
    estimators = list(ns.estimators)

    rows = []
    flagged = []
    for psi in ns.psi:
        if ns.nbar_target is not None:
            N = int(np.floor(ns.nbar_target / (1.0 - psi)))
        else:
            N = ns.N
        config = DgpConfig(
            N=N,
            T=ns.T,
            beta_true=ns.beta,
            psi=psi,
            attrition=ns.attrition,
            error_mode=ns.error_mode,
            seed=ns.seed,
        )
        summary = run_monte_carlo(
            config, ns.reps, estimators, est_config=est_config, threads=threads
        )
        row = {
            "psi": psi,
            "N_bar": (1.0 - psi) * N,
            "mean_n_star": summary.mean_n_star,
        }
        for label in estimators:
            stats = summary.estimators[label]
            row[f"{label}_bias_pct"] = stats.bias_pct
            row[f"{label}_sd"] = stats.sd
            row[f"{label}_bias_over_sd"] = stats.bias_over_sd
        rows.append(row)
        if summary.flagged:
            flagged.append((psi, summary.failures, summary.failure_rate))

    header = ["psi", "N_bar", "mean_n_star"]
    for label in estimators:
        header += [f"{label}_bias_pct", f"{label}_sd", f"{label}_bias_over_sd"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_float_repr(row[h]) for h in header))
    _atomic_write_text(ns.out, "\n".join(lines) + "\n")

    if not ns.no_figures and len(rows) > 1:
        from .figures import save_simulation_figure

        save_simulation_figure(rows, estimators, os.path.splitext(ns.out)[0] + ".png")

    for psi, failures, rate in flagged:
        print(
            f"warning: psi={psi}: {failures} estimator failures "
            f"(rate {rate:.4%} exceeds 0.1%)",
            file=sys.stderr,
        )
    _write_manifest(ns.out, "simulate", _manifest_options(ns), [], started)
    return 0


_COMMANDS = {
    "prune": _cmd_prune,
    "estimate": _cmd_estimate,
    "diagnose": _cmd_diagnose,
    "report": _cmd_report,
    "simulate": _cmd_simulate,
}

_MANIFEST_SKIP = {"command", "config", "_explicit"}


def _manifest_options(ns) -> dict:
    out = {}
    for key, value in vars(ns).items():
        if key in _MANIFEST_SKIP:
            continue
        if isinstance(value, tuple):
            value = list(value)
        out[key] = value
    return out


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        ns, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if ns.command is None:
        parser.print_usage(sys.stderr)
        return 2
    if extra:
        bad = next((t for t in extra if t.startswith("-")), extra[0])
        known = []
        for action in parser._subparsers._group_actions[0].choices[ns.command]._actions:
            known.extend(action.option_strings)
        match = difflib.get_close_matches(bad, known, n=1)
        hint = f" (did you mean {match[0]!r}?)" if match else ""
        print(f"gravpanel {ns.command}: unrecognized argument {bad!r}{hint}", file=sys.stderr)
        return 2
    # track explicitly provided flags so config-file values do not override them
    explicit = set()
    for token in argv[1:]:
        if token.startswith("--"):
            explicit.add(token[2:].split("=", 1)[0].replace("-", "_"))
    ns._explicit = explicit
    try:
        _apply_config_file(ns)
        return _COMMANDS[ns.command](ns)
    except UsageError as exc:
        print(f"gravpanel {ns.command}: {exc}", file=sys.stderr)
        return 2
    except GravpanelError as exc:
        print(f"gravpanel {ns.command}: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"gravpanel {ns.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
