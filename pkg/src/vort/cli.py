"""Command-line entry point: kernel tables, SOE sweeps, theory checks and experiments.

Every command writes plain data files (CSV or JSON) plus a manifest holding
the resolved configuration, its hash and a git-style content hash of each
output. Data files depend only on the configuration and seed; timings and
timestamps live in the manifest.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from vort import __version__
from vort.gl_kernel import gl_weights
from vort.harness import (
    EXP_LAMBDA_GRID,
    config_hash,
    fit_mixture_to_powerlaw,
    resolve_preset,
    run_experiment,
    summarize,
    table_rows,
)
from vort.plasticity import (
    PlasticityConfig,
    SoeFamily,
    estimate_smoothness,
    loss_alpha_grads,
    make_planted_trace,
    plasticity_descent,
    pl_envelope,
    retrieval_loss,
    shared_order_objective,
)
from vort.soe import SoeCertificationError, build_soe, moment_oracle
from vort.theory_checks import (
    CheckResult,
    MixtureModel,
    divergence_check,
    mixture_l2_error,
    near_zero_ratios,
    quantisation_grid_error,
    quantisation_sweep,
    separation_sweep,
)

OUT_ENV = "VORT_OUT_DIR"
FORMATS = ("csv", "json")
SUITES = ("soe", "quantisation", "separation", "plasticity")


class CliError(Exception):
    """User-facing failure; printed without a traceback, exit status 2."""


# ---- output plumbing -------------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _plain(v):
    if isinstance(v, np.ndarray):
        return [_plain(x) for x in v.tolist()]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def dumps_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2, ensure_ascii=False, allow_nan=True) + "\n"


def render_table(columns: list[str], rows: list[list], fmt: str) -> str:
    """CSV (header row, LF endings) or JSON ``{"columns", "rows"}`` with the same numbers."""
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(v) for v in r])
        return buf.getvalue()
    if fmt == "json":
        return dumps_json({"columns": columns, "rows": rows})
    raise CliError(f"unknown format {fmt!r}")


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _default_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "."))


def _check_writable(paths: list[Path], force: bool) -> None:
    clash = [str(p) for p in paths if p.exists()]
    if clash and not force:
        raise CliError(f"refusing to overwrite {', '.join(clash)} (use --force)")


def write_outputs(files: dict[Path, str], manifest_path: Path, command: str, config: dict, force: bool, extra=None) -> None:
    """Write data files and their manifest; nothing is written if any target exists without ``force``."""
    _check_writable([*files, manifest_path], force)
    hashes = {}
    for path, text in files.items():
        path.parent.mkdir(parents=True, exist_ok=True)
        data = text.encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(data)
        hashes[path.name] = git_blob_hash(data)
    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "outputs": hashes,
        "version": __version__,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    if extra:
        manifest.update(extra)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    with open(manifest_path, "wb") as fh:
        fh.write(dumps_json(manifest).encode("utf-8"))


def _single_output(args, stem: str) -> tuple[Path, Path]:
    path = Path(args.out) if args.out else _default_dir() / f"{stem}.{args.format}"
    return path, path.with_name(path.name + ".manifest.json")


# ---- argument parsing -----------------------------------------------------------------


def _floats(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _ints(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _int_range(text: str) -> list[int]:
    """``a:b`` inclusive, or a comma list."""
    if ":" in text:
        a, _, b = text.partition(":")
        try:
            lo, hi = int(a), int(b)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad range {text!r}")
        if lo < 1 or hi < lo:
            raise argparse.ArgumentTypeError(f"bad range {text!r}")
        return list(range(lo, hi + 1))
    return _ints(text)


def _override(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vort", description="Variable-order retention kernels: data, checks and experiments.", allow_abbrev=False)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, fmt=True):
        sp.add_argument("--out", help=f"output path (default: ${OUT_ENV} or the current directory)")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if fmt:
            sp.add_argument("--format", choices=FORMATS, default="csv")

    sp = sub.add_parser("kernel", help="exact fractional weights w_j with an exponential reference", allow_abbrev=False)
    sp.add_argument("--alpha", type=_floats, default=[0.3, 0.5, 0.7, 0.9], help="comma-separated orders in (0, 1]")
    sp.add_argument("--max-lag", type=int, default=1000, help="largest lag J")
    sp.add_argument("--exp-rate", type=float, default=0.025, help="rate of the exponential reference column")
    common(sp)

    sp = sub.add_parser("soe-convergence", help="max SOE error against the term count", allow_abbrev=False)
    sp.add_argument("--alpha", type=float, default=0.5)
    sp.add_argument("--horizon", type=int, default=1000)
    sp.add_argument("--eps", type=float, default=1e-3, help="accuracy that sets the node interval")
    sp.add_argument("--terms", type=_int_range, default=list(range(1, 31)), help="term counts, 'a:b' or a comma list")
    common(sp)

    sp = sub.add_parser("verify", help="run a theory check suite; exit 0 iff every check passes", allow_abbrev=False)
    sp.add_argument("--suite", choices=(*SUITES, "all"), default="all")
    sp.add_argument("--alpha", type=_floats, default=[0.3, 0.5], help="orders certified by the SOE suite")
    sp.add_argument("--horizon", type=int, default=1000, help="horizon of the SOE suite")
    sp.add_argument("--eps", type=float, default=4e-3, help="accuracy the SOE suite must certify")
    sp.add_argument("--terms", type=int, default=15, help="term cap of the SOE suite")
    sp.add_argument("--delta", type=float, default=0.1, help="smallest order of the quantisation and plasticity suites")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--mixtures", type=int, default=200, help="random mixtures in the separation sweep")
    sp.add_argument("--out", help="write the JSON report here as well as a manifest")
    sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("experiment", help="train and evaluate all kernels on a synthetic task", allow_abbrev=False)
    sp.add_argument("--task", choices=("zipf", "copy"), required=True)
    sp.add_argument("--preset", choices=("desk", "paper"), default="desk")
    sp.add_argument("--seeds", type=_ints, default=[0, 1, 2, 3, 4])
    sp.add_argument("--seed", type=int, help="single seed (shorthand for --seeds N)")
    sp.add_argument("--set", dest="overrides", type=_override, action="append", default=[], metavar="KEY=VALUE", help="override a preset key")
    common(sp)

    sp = sub.add_parser("fit-mixture", help="least-squares exponential mixture fitted to a power law", allow_abbrev=False)
    sp.add_argument("--alpha", type=float, default=0.7)
    sp.add_argument("--horizon", type=int, default=1000)
    sp.add_argument("--components", type=int, default=5)
    sp.add_argument("--target", choices=("normalized", "raw", "gl"), default="normalized")
    sp.add_argument("--eval-horizons", type=_floats, default=[1e3, 1e4, 1e5], help="horizons for the L2 error of the fitted mixture")
    common(sp)

    sp = sub.add_parser("plasticity-trace", help="order descent on a planted retrieval trace", allow_abbrev=False)
    sp.add_argument("--alpha", type=float, default=0.9, help="starting order")
    sp.add_argument("--eta", type=float, help="step size (default 1/L_hat)")
    sp.add_argument("--iterations", type=int, default=30)
    sp.add_argument("--delta", type=float, default=0.1)
    sp.add_argument("--horizon", type=int, default=256, help="trace length")
    sp.add_argument("--terms", type=int, default=15)
    sp.add_argument("--seed", type=int, default=0)
    common(sp)
    return p


# ---- commands ----------------------------------------------------------------------------


def kernel_table(alphas: list[float], J: int, exp_rate: float = 0.025) -> tuple[list[str], list[list]]:
    if J < 1:
        raise CliError("--max-lag must be >= 1")
    cols = ["j"] + [f"w_{a!r}" for a in alphas] + [f"exp_{exp_rate!r}"]
    series = [gl_weights(a, J).values for a in alphas]
    j = np.arange(J + 1)
    ref = np.exp(-exp_rate * j)
    rows = [[int(k)] + [float(s[k]) for s in series] + [float(ref[k])] for k in j]
    return cols, rows


def cmd_kernel(args) -> int:
    cols, rows = kernel_table(args.alpha, args.max_lag, args.exp_rate)
    path, man = _single_output(args, "kernel")
    cfg = {"alpha": args.alpha, "max_lag": args.max_lag, "exp_rate": args.exp_rate, "format": args.format}
    write_outputs({path: render_table(cols, rows, args.format)}, man, "kernel", cfg, args.force)
    return 0


def soe_convergence_table(alpha: float, horizon: int, eps: float, terms: list[int]) -> tuple[list[str], list[list]]:
    rows = []
    for S in terms:
        a = build_soe(alpha, horizon, target_eps=eps, n_terms=S)
        rows.append([S, a.certified_error])
    return ["S", "max_error"], rows


def cmd_soe_convergence(args) -> int:
    cols, rows = soe_convergence_table(args.alpha, args.horizon, args.eps, args.terms)
    path, man = _single_output(args, "soe_convergence")
    cfg = {"alpha": args.alpha, "horizon": args.horizon, "eps": args.eps, "terms": args.terms, "format": args.format}
    write_outputs({path: render_table(cols, rows, args.format)}, man, "soe-convergence", cfg, args.force)
    return 0


def suite_soe(horizon: int = 1000, eps: float = 4e-3, cap: int = 15, alphas=(0.3, 0.5)) -> list[CheckResult]:
    """Certification of each order within the term cap, plus the moment identity.

    Orders close to 1 are not certifiable on the default node interval: the
    mass of the density below the smallest node is of order
    ``lambda_min^(1-alpha)``, which exceeds a few 1e-3 for ``alpha >= 0.7``.
    """
    out = []
    for a in alphas:
        params = {"alpha": a, "T": horizon, "eps": eps, "max_terms": cap}
        try:
            approx = build_soe(a, horizon, target_eps=eps, max_terms=cap)
            out.append(CheckResult("soe_certified", {**params, "S": approx.n_terms}, approx.certified_error, eps, True))
        except SoeCertificationError as exc:
            out.append(CheckResult("soe_certified", {**params, "S": cap}, exc.achieved, eps, False))
    for a in (0.3, 0.5, 0.7):
        w = gl_weights(a, 20).values
        for j in (1, 2, 5, 10, 20):
            m = moment_oracle(a, j)
            out.append(CheckResult("moment_identity", {"alpha": a, "j": j}, abs(m - w[j]), 1e-9, abs(m - w[j]) <= 1e-9))
    return out


def suite_quantisation(delta: float = 0.1) -> list[CheckResult]:
    out = quantisation_sweep(delta)
    t = 1e3
    for K in (8,):
        e1, e2 = quantisation_grid_error(delta, K, t), quantisation_grid_error(delta, 2 * K, t)
        r = e2 / e1
        out.append(CheckResult("grid_halving", {"delta": delta, "K": K, "t": t, "ratio": r}, r, 0.5, 0.4 <= r <= 0.6))
    ratio = float(near_zero_ratios(10.0)[-1])
    out.append(CheckResult("near_zero_limit", {"alpha": 1e-4, "t": 10.0}, abs(ratio - 1.0), 0.01, abs(ratio - 1.0) <= 0.01))
    return out


def suite_separation(n_mixtures: int = 200, seed: int = 0) -> list[CheckResult]:
    out = separation_sweep(n_mixtures, seed=seed)
    fit = fit_mixture_to_powerlaw(0.7, 1000, 5, target="raw")
    out.append(divergence_check(fit.mixture, 0.7, (1e3, 1e4, 1e5)))
    return out


def quadratic_envelope_check(mu: float = 2.0, eta: float = 0.25, a_star: float = 0.4, alpha0: float = 0.95, iters: int = 30) -> CheckResult:
    """Gradient descent on ``(mu/2)(alpha - a*)^2`` stays under the linear-rate envelope."""

    def F(a):
        return 0.5 * mu * (a - a_star) ** 2, mu * (a - a_star)

    hist = plasticity_descent(F, alpha0, PlasticityConfig(eta=eta, iterations=iters, delta=0.1, L_hat=mu))
    _, vals, _ = hist.as_arrays()
    env = pl_envelope(vals, 0.0, eta, mu)
    excess = float(np.max(vals - env))
    return CheckResult("pl_envelope", {"mu": mu, "eta": eta, "iterations": iters}, excess, 1e-15, excess <= 1e-15)


def planted_descent(seed: int = 0, delta: float = 0.1, alpha0: float = 0.9, iterations: int = 20, n: int = 256, terms: int = 15, eta: float | None = None):
    """Shared-order descent on a planted trace; returns ``(history, eta, L_hat)``."""
    trace = make_planted_trace(n, 16, 48, seed)
    F = shared_order_objective(trace, SoeFamily(n, 1e-3, terms))
    L_hat = estimate_smoothness(F, delta, 1.0)
    step = 1.0 / L_hat if eta is None else eta
    hist = plasticity_descent(F, alpha0, PlasticityConfig(eta=step, iterations=iterations, delta=delta))
    return hist, step, L_hat


def gradient_fd_check(seed: int = 0, n: int = 128, h: float = 1e-5, tol: float = 1e-4) -> list[CheckResult]:
    trace = make_planted_trace(n, 16, 24, seed)
    fam = SoeFamily(n, 1e-3, 15)
    alphas = np.linspace(0.25, 0.95, n)
    g = loss_alpha_grads(trace, alphas, fam)
    out = []
    for i in sorted(set(int(x) for x in trace.sources))[:8]:
        up, dn = alphas.copy(), alphas.copy()
        up[i] += h
        dn[i] -= h
        fd = (retrieval_loss(trace, up, fam) - retrieval_loss(trace, dn, fam)) / (2 * h)
        err = abs(fd - g[i]) / max(1.0, abs(fd))
        out.append(CheckResult("gradient_fd", {"token": i, "analytic": float(g[i]), "fd": fd}, err, tol, err <= tol))
    return out


def suite_plasticity(seed: int = 0, delta: float = 0.1) -> list[CheckResult]:
    out = [quadratic_envelope_check()]
    hist, eta, L_hat = planted_descent(seed, delta)
    _, vals, _ = hist.as_arrays()
    rise = float(np.max(np.diff(vals)))
    slack = 1e-10 * max(1.0, abs(vals[0]))
    out.append(CheckResult("descent_monotone", {"eta": eta, "L_hat": L_hat, "iterations": len(vals) - 1}, rise, slack, rise <= slack))
    out += gradient_fd_check(seed)
    return out


def run_suite(name: str, args) -> list[CheckResult]:
    if name == "soe":
        return suite_soe(args.horizon, args.eps, args.terms, tuple(args.alpha))
    if name == "quantisation":
        return suite_quantisation(args.delta)
    if name == "separation":
        return suite_separation(args.mixtures, args.seed)
    if name == "plasticity":
        return suite_plasticity(args.seed, args.delta)
    raise CliError(f"unknown suite {name!r}")


def cmd_verify(args) -> int:
    names = SUITES if args.suite == "all" else (args.suite,)
    report = {"suites": {}, "pass": True}
    timings = {}
    for name in names:
        t0 = time.perf_counter()
        checks = run_suite(name, args)
        timings[name] = time.perf_counter() - t0
        ok = all(c.passed for c in checks)
        report["suites"][name] = {
            "pass": ok,
            "n_checks": len(checks),
            "n_failed": sum(not c.passed for c in checks),
            "checks": [c.to_dict() for c in checks],
        }
        report["pass"] = report["pass"] and ok
    text = dumps_json(report)
    if args.out:
        path = Path(args.out)
        cfg = {k: getattr(args, k) for k in ("suite", "alpha", "horizon", "eps", "terms", "delta", "seed", "mixtures")}
        write_outputs({path: text}, path.with_name(path.name + ".manifest.json"), "verify", cfg, args.force, {"timings": timings})
    else:
        sys.stdout.write(text)
    for name, s in report["suites"].items():
        print(f"{name}: {'pass' if s['pass'] else 'FAIL'} ({s['n_checks'] - s['n_failed']}/{s['n_checks']})", file=sys.stderr)
        for c in s["checks"]:
            if not c["pass"]:
                print(f"  {c['name']} {c['params']}: lhs={c['lhs']!r} rhs={c['rhs']!r}", file=sys.stderr)
    return 0 if report["pass"] else 1


TIMING_KEYS = ("seconds",)


def split_timings(report: dict) -> tuple[dict, dict]:
    """Copy of an experiment report without wall-clock fields, plus those fields."""
    data = json.loads(json.dumps(_plain(report)))
    timings = {"total": data.pop("seconds", None), "train": {}, "eval": {}}
    for name, c in data.get("curves", {}).items():
        timings["train"][name] = c.pop("seconds", None)
    for name, r in data.get("rows", {}).items():
        timings["eval"][name] = r.pop("seconds", None)
    return data, timings


def experiment_table(summary: dict) -> tuple[list[str], list[list]]:
    cols = ["model", "bucket", "mean", "min", "max"]
    return cols, [[r["model"], r["bucket"], r["mean"], r["min"], r["max"]] for r in table_rows(summary)]


def cmd_experiment(args) -> int:
    seeds = [args.seed] if args.seed is not None else args.seeds
    overrides = dict(args.overrides)
    try:
        config = resolve_preset(args.preset, args.task, overrides)
    except KeyError as exc:
        raise CliError(str(exc.args[0]))
    out_dir = Path(args.out) if args.out else _default_dir() / f"experiment-{args.task}-{args.preset}"
    files = {out_dir / f"report_seed{s}.json" for s in seeds} | {out_dir / "summary.json", out_dir / f"table.{args.format}"}
    _check_writable([*files, out_dir / "manifest.json"], args.force)
    reports, timings = [], {}
    for s in seeds:
        data, t = split_timings(run_experiment(args.task, args.preset, s, overrides))
        reports.append(data)
        timings[str(s)] = t
        print(f"seed {s}: done in {t['total']:.1f}s", file=sys.stderr)
    summary = summarize(reports)
    cols, rows = experiment_table(summary)
    outputs = {out_dir / f"report_seed{r['seed']}.json": dumps_json(r) for r in reports}
    outputs[out_dir / "summary.json"] = dumps_json({"task": args.task, "preset": args.preset, "seeds": seeds, "summary": summary})
    outputs[out_dir / f"table.{args.format}"] = render_table(cols, rows, args.format)
    cfg = {"task": args.task, "preset": args.preset, "seeds": seeds, "resolved": config, "exp_lambda_grid": list(EXP_LAMBDA_GRID)}
    write_outputs(outputs, out_dir / "manifest.json", "experiment", cfg, args.force, {"timings": timings})
    sys.stderr.write(render_table(cols, rows, "csv"))
    return 0


def target_l2_error(mix: MixtureModel, alpha: float, T: float, target: str) -> float:
    """``int_1^T (f - target)^2``; the normalised and exact-weight targets both compare against ``t^(alpha-1)/Gamma(alpha)``."""
    if target == "raw":
        return mixture_l2_error(mix, alpha, T)
    g = math.gamma(alpha)
    scaled = MixtureModel(mix.weights * g, mix.rates)
    return mixture_l2_error(scaled, alpha, T) / g**2


def cmd_fit_mixture(args) -> int:
    if args.components < 1:
        raise CliError("--components must be >= 1")
    fit = fit_mixture_to_powerlaw(args.alpha, args.horizon, args.components, target=args.target)
    mix = fit.mixture
    comp = [[m + 1, float(mix.weights[m]), float(mix.rates[m])] for m in range(mix.M)]
    l2 = [[float(T), target_l2_error(mix, args.alpha, T, args.target)] for T in args.eval_horizons] if args.alpha < 1 else []
    path, man = _single_output(args, "fit_mixture")
    l2_path = path.with_name(path.stem + "_l2" + path.suffix)
    cfg = {
        "alpha": args.alpha,
        "horizon": args.horizon,
        "components": args.components,
        "target": args.target,
        "eval_horizons": args.eval_horizons,
        "format": args.format,
    }
    extra = {"fit": {"residual": fit.residual, "converged": fit.converged, "iterations": fit.iterations, "message": fit.message}}
    files = {
        path: render_table(["m", "weight", "rate"], comp, args.format),
        l2_path: render_table(["T", "l2_error"], l2, args.format),
    }
    write_outputs(files, man, "fit-mixture", cfg, args.force, extra)
    return 0


def cmd_plasticity_trace(args) -> int:
    if args.eta is not None and args.eta <= 0:
        raise CliError("--eta must be positive")
    hist, eta, L_hat = planted_descent(args.seed, args.delta, args.alpha, args.iterations, args.horizon, args.terms, args.eta)
    path, man = _single_output(args, "plasticity_trace")
    cfg = {
        "alpha0": args.alpha,
        "eta": args.eta,
        "iterations": args.iterations,
        "delta": args.delta,
        "horizon": args.horizon,
        "terms": args.terms,
        "seed": args.seed,
        "format": args.format,
    }
    a, F, g = hist.as_arrays()
    rows = [[l, float(a[l]), float(F[l]), float(abs(g[l]))] for l in range(len(a))]
    write_outputs({path: render_table(["l", "alpha", "F", "abs_grad"], rows, args.format)}, man, "plasticity-trace", cfg, args.force, {"eta_used": eta, "L_hat": L_hat})
    return 0


COMMANDS = {
    "kernel": cmd_kernel,
    "soe-convergence": cmd_soe_convergence,
    "verify": cmd_verify,
    "experiment": cmd_experiment,
    "fit-mixture": cmd_fit_mixture,
    "plasticity-trace": cmd_plasticity_trace,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"vort: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, SoeCertificationError) as exc:
        print(f"vort: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
