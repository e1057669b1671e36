"""Command-line interface: ``python -m rvampss {path,se,bootstrap,compare}``.

Every command writes its tables plus a ``manifest.json`` into ``--out``.
Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .baseline import BootstrapConfig, SolverConfig, bootstrap_selection_probability, default_workers
from .data import SynthSpec, load_and_preprocess, make_synthetic
from .exceptions import DomainError, NumericalError
from .glm_model import Likelihood, OccupationLaw
from .rvamp import RvampConfig, default_gamma_grid, selection_path
from .sa_rvamp import SpectralOperator, run_sa_rvamp
from .state_evolution import (
    SE_COLUMNS,
    SpectralMeasure,
    TeacherModel,
    row_orthogonal_spectrum,
    run_se,
)

SCHEMA_VERSION = 1
PATH_COLUMNS = ("gamma0", "feature_index", "pi", "h1x", "vhat1x", "converged", "iterations", "status")
BOOT_COLUMNS = ("gamma0", "feature_index", "pi", "se", "count", "n_fits")
COMPARE_COLUMNS = ("gamma0", "n_features", "q50", "q90", "q99", "max", "seconds_a", "seconds_b")
QUANTILES = (0.5, 0.9, 0.99)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _kv_pairs(items, name):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"{name}: expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _synth_spec(items, seed):
    kv = _kv_pairs(items, "--synth")
    try:
        return SynthSpec(
            N=int(kv.pop("N", 2000)),
            alpha=float(kv.pop("alpha", 0.2)),
            rho=float(kv.pop("rho", 0.01)),
            ensemble=kv.pop("ensemble", "row_orthogonal").replace("-", "_"),
            channel=kv.pop("channel", "logistic"),
            noise_variance=float(kv.pop("noise_variance", 1.0)),
            seed=int(kv.pop("seed", seed)),
        )
    except ValueError as err:
        raise ConfigError(f"--synth: {err}") from err
    finally:
        if kv:
            raise ConfigError(f"--synth: unknown keys {sorted(kv)}")


def _likelihood(args):
    if args.likelihood == "gaussian":
        return Likelihood.gaussian(args.noise_variance)
    return Likelihood.logistic()


def _load_dataset(args, inputs):
    if args.data and args.synth:
        raise ConfigError("give either --data or --synth, not both")
    if args.data:
        inputs[args.data] = _sha256(args.data)
        return load_and_preprocess(
            args.data, log10=args.log10, standardize=args.standardize,
            add_intercept=args.intercept, label_column=args.label_column,
        ), None
    if args.synth:
        ds, x0 = make_synthetic(_synth_spec(args.synth, args.seed))
        return ds, x0
    raise ConfigError("a dataset is required: --data FILE or --synth key=value ...")


def _write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return "" if not np.isfinite(v) else repr(float(v))
    return v


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _write_manifest(out, command, args, argv, inputs, started, wall, outputs, extra=None):
    config = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "schema_version": SCHEMA_VERSION,
        "started_at": started,
        "wall_clock_seconds": wall,
        "inputs": inputs,
        "outputs": outputs,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)


def _rvamp_config(args, gamma0=1.0):
    occ = OccupationLaw.fixed(1) if args.occupation == "fixed" else OccupationLaw.poisson()
    return RvampConfig(
        gamma0=gamma0, penalty_variant=args.penalty, occupation=occ,
        likelihood=_likelihood(args), eps_tol=args.eps_tol, t_max=args.t_max,
        damping=args.damping, quad_order=args.quad_order,
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_path(args):
    inputs = {}
    ds, _ = _load_dataset(args, inputs)
    if args.gammas is not None:
        gammas = np.array(args.gammas, dtype=float)
        if gammas.size == 0:
            raise ConfigError("--gammas is empty")
    else:
        if args.grid < 1:
            raise ConfigError("--grid must be at least 1")
        gammas = default_gamma_grid(ds, args.grid, args.gamma_ratio)
    cfg = _rvamp_config(args)
    path = selection_path(ds, gammas, cfg)
    rows = []
    for k, g in enumerate(path.gammas):
        status = "failed" if path.failed[k] else ("converged" if path.converged[k] else "not_converged")
        for i in range(ds.N):
            rows.append({
                "gamma0": g, "feature_index": i, "pi": path.pi[k, i], "h1x": path.h1x[k, i],
                "vhat1x": path.vhat1x[k, i], "converged": bool(path.converged[k]),
                "iterations": int(path.iterations[k]), "status": status,
            })
    _write_csv(os.path.join(args.out, "path.csv"), PATH_COLUMNS, rows)
    errors = {float(g): e for g, e in zip(path.gammas, path.errors) if e}
    return ["path.csv"], {"failed_points": errors}, (EXIT_NUMERIC if path.failed.any() else EXIT_OK)


def _sa_trial(job):
    seed, N, alpha, rho, channel, cfg = job
    ds, x0 = make_synthetic(SynthSpec(N=N, alpha=alpha, rho=rho, ensemble="row_orthogonal",
                                      channel=channel, seed=seed))
    res = run_sa_rvamp(ds, cfg, x0=x0, spectral=SpectralOperator(ds.A))
    return np.array([[getattr(o, k) for k in SE_COLUMNS] for o in res.observables])


def cmd_se(args):
    teacher = TeacherModel(args.rho, args.alpha, channel=args.channel, noise_variance=args.noise_variance)
    ensemble = args.ensemble.replace("-", "_")
    if ensemble == "row_orthogonal":
        spectrum = row_orthogonal_spectrum(args.alpha)
    elif ensemble == "iid_gaussian":
        n = args.spectrum_n
        A = np.random.default_rng(args.seed).standard_normal((int(round(args.alpha * n)), n)) / np.sqrt(n)
        spectrum = SpectralMeasure.from_matrix(A)
    else:
        raise ConfigError(f"unknown ensemble {args.ensemble!r}")
    cfg = _rvamp_config(args, args.gamma0)
    traj = run_se(teacher, spectrum, cfg, eps_tol=args.se_tol, t_max=args.t_max)
    rows = traj.rows()
    _write_csv(os.path.join(args.out, "se.csv"), ("iteration",) + SE_COLUMNS, rows)
    outputs = ["se.csv"]
    extra = {"se_converged": traj.converged, "T_x": traj.T_x, "T_z": traj.T_z}

    if args.with_sa_rvamp is not None:
        kv = _kv_pairs(args.with_sa_rvamp, "--with-sa-rvamp")
        trials = int(kv.pop("trials", 50))
        N = int(kv.pop("N", 4000))
        if kv:
            raise ConfigError(f"--with-sa-rvamp: unknown keys {sorted(kv)}")
        if ensemble != "row_orthogonal":
            raise ConfigError("--with-sa-rvamp supports the row-orthogonal ensemble only")
        if trials < 1:
            raise ConfigError("trials must be >= 1")
        T = len(rows)
        sa_cfg = _rvamp_config(args, args.gamma0)
        sa_cfg.eps_tol, sa_cfg.t_max = 0.0, T
        ss = np.random.SeedSequence(args.seed)
        seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(trials)]
        jobs = [(s, N, args.alpha, args.rho, args.channel, sa_cfg) for s in seeds]
        workers = args.workers or default_workers()
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                traces = list(ex.map(_sa_trial, jobs))
        else:
            traces = [_sa_trial(j) for j in jobs]
        med = np.median(np.stack(traces), axis=0)
        paired = []
        for t, r in enumerate(rows):
            row = {"iteration": r["iteration"]}
            for j, k in enumerate(SE_COLUMNS):
                row[f"se_{k}"] = r[k]
                row[f"sa_{k}"] = med[t, j]
            paired.append(row)
        cols = ("iteration",) + tuple(c for k in SE_COLUMNS for c in (f"se_{k}", f"sa_{k}"))
        _write_csv(os.path.join(args.out, "se_vs_sa.csv"), cols, paired)
        outputs.append("se_vs_sa.csv")
        extra.update({"sa_trials": trials, "sa_N": N, "sa_seeds": seeds})
    return outputs, extra, EXIT_OK


def cmd_bootstrap(args):
    inputs = {}
    ds, _ = _load_dataset(args, inputs)
    if args.B < 1:
        raise ConfigError("--B must be at least 1")
    solver = SolverConfig(max_iters=args.max_iters)
    rows = []
    fails = {}
    for g in args.gamma0:
        bc = BootstrapConfig(B=args.B, gamma0=g, penalty_variant=args.penalty,
                             occupation=args.occupation, likelihood=_likelihood(args), seed=args.seed)
        res = bootstrap_selection_probability(ds, bc, solver, workers=args.workers)
        fails[float(g)] = res.n_failed
        for i in range(ds.N):
            rows.append({"gamma0": g, "feature_index": i, "pi": res.pi[i],
                         "se": res.standard_error[i], "count": int(res.counts[i]), "n_fits": res.n_fits})
    _write_csv(os.path.join(args.out, "boot.csv"), BOOT_COLUMNS, rows)
    return ["boot.csv"], {"failed_fits": fails}, EXIT_OK


def _by_gamma(rows, path):
    out = {}
    for r in rows:
        try:
            g = float(r["gamma0"])
            i = int(r["feature_index"])
            p = float(r["pi"]) if r["pi"] != "" else np.nan
        except (KeyError, ValueError) as err:
            raise ConfigError(f"{path}: malformed row {r!r} ({err})") from err
        out.setdefault(g, {})[i] = p
    return out


def _match_gamma(g, keys):
    for k in keys:
        if np.isclose(g, k, rtol=1e-9, atol=0.0):
            return k
    return None


def _manifest_seconds(path):
    mf = os.path.join(os.path.dirname(os.path.abspath(path)), "manifest.json")
    try:
        with open(mf, encoding="utf-8") as fh:
            return float(json.load(fh).get("wall_clock_seconds"))
    except (OSError, ValueError, TypeError):
        return float("nan")


def cmd_compare(args):
    inputs = {args.a: _sha256(args.a), args.b: _sha256(args.b)}
    A = _by_gamma(_read_csv(args.a), args.a)
    B = _by_gamma(_read_csv(args.b), args.b)
    ta, tb = _manifest_seconds(args.a), _manifest_seconds(args.b)
    rows = []
    for g in sorted(A, reverse=True):
        k = _match_gamma(g, B)
        if k is None:
            continue
        if set(A[g]) != set(B[k]):
            raise ConfigError(f"feature sets differ at gamma0={g!r}")
        idx = sorted(A[g])
        d = np.abs(np.array([A[g][i] for i in idx]) - np.array([B[k][i] for i in idx]))
        d = d[np.isfinite(d)]
        if d.size == 0:
            continue
        q = np.quantile(d, QUANTILES)
        rows.append({"gamma0": g, "n_features": d.size, "q50": q[0], "q90": q[1], "q99": q[2],
                     "max": d.max(), "seconds_a": ta, "seconds_b": tb})
    if not rows:
        raise ConfigError("no common gamma0 values between the two inputs")
    _write_csv(os.path.join(args.out, "compare.csv"), COMPARE_COLUMNS, rows)
    for r in rows:
        print(f"gamma0={r['gamma0']:.6g}  q50={r['q50']:.4f}  q90={r['q90']:.4f}  q99={r['q99']:.4f}")
    return ["compare.csv"], {"inputs_hashed": inputs}, EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", help="CSV file with a header row")
    g.add_argument("--label-column", default="label")
    g.add_argument("--log10", action="store_true", help="apply log10 to features")
    g.add_argument("--standardize", action="store_true", help="zero mean, unit (1/M) variance")
    g.add_argument("--intercept", action="store_true", help="prepend an unpenalised intercept column")
    g.add_argument("--synth", nargs="+", metavar="KEY=VALUE",
                   help="synthetic instance, e.g. N=2000 alpha=0.2 rho=0.01")


def _add_model_args(p, occupations=("poisson", "fixed")):
    p.add_argument("--likelihood", choices=("logistic", "gaussian"), default="logistic")
    p.add_argument("--noise-variance", type=float, default=1.0)
    p.add_argument("--penalty", choices=("two_point", "deterministic"), default="two_point")
    p.add_argument("--occupation", choices=occupations, default="poisson")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")


def _add_iter_args(p, t_max=500):
    p.add_argument("--damping", type=float, default=1.0)
    p.add_argument("--eps-tol", type=float, default=1e-8)
    p.add_argument("--t-max", type=int, default=t_max)
    p.add_argument("--quad-order", type=int, default=33)


def build_parser():
    parser = argparse.ArgumentParser(prog="rvampss", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("path", help="rVAMP selection probabilities along a penalty grid")
    _add_data_args(p)
    _add_model_args(p)
    _add_iter_args(p)
    p.add_argument("--grid", type=int, default=50, help="number of log-spaced gamma0 values")
    p.add_argument("--gamma-ratio", type=float, default=100.0, help="gamma_max / gamma_min")
    p.add_argument("--gammas", type=float, nargs="*", help="explicit decreasing gamma0 values")
    p.set_defaults(func=cmd_path)

    p = sub.add_parser("se", help="state evolution trajectory")
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--rho", type=float, default=0.01)
    p.add_argument("--ensemble", default="row-orthogonal", choices=("row-orthogonal", "iid-gaussian"))
    p.add_argument("--channel", choices=("logistic", "gaussian"), default="logistic")
    p.add_argument("--gamma0", type=float, required=True)
    p.add_argument("--se-tol", type=float, default=1e-10)
    p.add_argument("--spectrum-n", type=int, default=2000, help="matrix size for the iid spectrum")
    p.add_argument("--with-sa-rvamp", nargs="*", metavar="KEY=VALUE",
                   help="also run SA rVAMP, e.g. trials=50 N=4000")
    p.add_argument("--workers", type=int, default=None)
    _add_model_args(p)
    _add_iter_args(p, t_max=50)
    p.set_defaults(func=cmd_se)

    p = sub.add_parser("bootstrap", help="resampling baseline selection probabilities")
    _add_data_args(p)
    _add_model_args(p, occupations=("poisson", "multinomial", "fixed"))
    p.add_argument("--B", type=int, default=1000)
    p.add_argument("--gamma0", type=float, nargs="+", required=True)
    p.add_argument("--max-iters", type=int, default=20000)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("compare", help="quantiles of |pi_a - pi_b| per gamma0")
    p.add_argument("--a", required=True, help="path.csv from the path command")
    p.add_argument("--b", required=True, help="boot.csv from the bootstrap command")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    try:
        os.makedirs(args.out, exist_ok=True)
        outputs, extra, code = args.func(args)
    except (ConfigError, DomainError, FileNotFoundError, IsADirectoryError) as err:
        print(f"rvampss {args.command}: configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as err:
        print(f"rvampss {args.command}: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    inputs = extra.pop("inputs_hashed", None) or {}
    if getattr(args, "data", None):
        inputs[args.data] = _sha256(args.data)
    _write_manifest(args.out, args.command, args, argv, inputs, started, time.perf_counter() - t0, outputs, extra)
    if code == EXIT_NUMERIC:
        print(f"rvampss {args.command}: some points failed; see manifest.json", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
