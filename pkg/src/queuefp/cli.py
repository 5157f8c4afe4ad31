"""Command-line entry point: ``queuefp <command> [options]``.

Commands: profile, calibrate, solve, decompose, simulate, synth.  Every
command writes ``<command>.manifest.json`` next to its outputs.  Exit
codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, NumericalError, QueueFPError

log = logging.getLogger("queuefp")

MANIFEST_SCHEMA = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

# defaults applied after flags and config file
DEFAULTS = {
    "seed": 0, "jobs": 1, "out_dir": ".", "grid": None, "xmax": None, "min_count": 100,
    "n_bins": 78, "psi": 1.0, "allow_gaps": False, "dims": 1, "window": 2, "profile": None,
    "min_density_count": 100, "tol": None,
    "x0": None, "n_paths": 10_000, "dt": 0.1, "horizon": 1e5, "ceiling": None, "eps": 1e-3,
    "refill_continues": False, "block_size": 4096,
    "n_events": 100_000, "n_days": None, "vbar": 1000.0, "volume_per_order": None, "format": "ndjson",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=False, default=_jsonify) + "\n")


def _jsonify(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")


def _clean(obj):
    """Replace non-finite floats by None, recursively."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


class Run:
    """Collects outputs and writes the manifest."""

    def __init__(self, args, argv, config: dict):
        self.args = args
        self.argv = list(argv)
        self.config = config
        self.out_dir = Path(args.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.outputs: list[Path] = []
        self.inputs: list[Path] = []
        self.t0 = time.perf_counter()

    def path(self, name: str) -> Path:
        p = self.out_dir / name
        self.outputs.append(p)
        return p

    def json(self, name: str, obj) -> Path:
        p = self.path(name)
        _dump(_clean(obj), p)
        return p

    def manifest(self) -> Path:
        resolved = {k: v for k, v in sorted(vars(self.args).items()) if k not in ("func",)}
        cfg_text = json.dumps(resolved, sort_keys=True, default=str)
        obj = {
            "schema_version": MANIFEST_SCHEMA,
            "command": self.args.command,
            "argv": self.argv,
            "config": json.loads(cfg_text),
            "config_sha256": hashlib.sha256(cfg_text.encode()).hexdigest(),
            "inputs": {str(p): _sha256_file(p) for p in self.inputs if p.is_file()},
            "seed": self.args.seed,
            "version": __version__,
            "wall_time_s": time.perf_counter() - self.t0,
            "outputs": {str(p): _sha256_file(p) for p in self.outputs if p.is_file()},
        }
        p = self.out_dir / f"{self.args.command}.manifest.json"
        _dump(obj, p)
        return p


# ---------------------------------------------------------------------------
# input helpers


def _event_files(paths) -> list[Path]:
    files: list[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(q for q in p.iterdir()
                                if q.suffix.lower() in (".ndjson", ".jsonl", ".json", ".csv")
                                and not q.name.endswith(".manifest.json")))
        elif p.exists():
            files.append(p)
        else:
            raise DataError(f"{p}: no such file or directory")
    if not files:
        raise DataError("no event files found")
    return files


def _classify_file(path: str):
    from .events import classify, read_events

    try:
        return classify(read_events(path))
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def _classified(files, jobs: int):
    names = [str(f) for f in files]
    if jobs > 1 and len(names) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_classify_file, names))
    return [_classify_file(n) for n in names]


def _profile_for(args, events_list, run: Run):
    from .events import QuoteEvents
    from .seasonality import IntradayProfile, compute_profile

    if args.profile:
        run.inputs.append(Path(args.profile))
        return IntradayProfile.load(args.profile)
    return compute_profile(QuoteEvents.concat(events_list), n_bins=args.n_bins,
                           allow_gaps=args.allow_gaps, psi=args.psi)


def _load_model(path: str, xmax=None, grid=None):
    """A ModelSpec from a spec file (TOML/JSON) or a calibration JSON."""
    from .calib1d import Calib1D
    from .calib2d import Calib2D
    from .models import _read_mapping, spec_from_mapping

    p = Path(path)
    if not p.is_file():
        raise DataError(f"{p}: no such file")
    obj = _read_mapping(p)
    extra = {}
    if xmax is not None:
        extra["xmax"] = xmax
    if grid is not None:
        extra["n"] = grid
    kind = obj.get("kind")
    if kind == "calib1d":
        return Calib1D.from_json(obj).to_spec(**extra), Calib1D.from_json(obj)
    if kind == "calib2d":
        return Calib2D.from_json(obj).to_spec(**extra), Calib2D.from_json(obj)
    model = dict(obj.get("model", obj))
    model.update(extra)
    return spec_from_mapping({"model": model}, p.parent), None


# ---------------------------------------------------------------------------
# commands


def cmd_profile(args, run: Run) -> None:
    from .plots import profile_plot

    files = _event_files(args.events)
    run.inputs.extend(files)
    events = _classified(files, args.jobs)
    prof = _profile_for(args, events, run)
    run.json("profile.json", prof.to_json())
    prof.write_csv(run.path("profile.csv"))
    profile_plot(prof, run.path("profile.svg"))
    if prof.fit is not None:
        log.info("profile fit: a0=%.6g a1=%.6g a2=%.6g rmse=%.4g", *prof.fit.coef, prof.fit.rmse)


def _edges(args, lo_hi_default, n_default):
    from .grids import uniform_edges

    hi = args.xmax if args.xmax is not None else lo_hi_default
    return uniform_edges(0.0, hi, args.grid or n_default)


def cmd_calibrate(args, run: Run) -> None:
    from .calib1d import Accumulator1D
    from .calib2d import Accumulator2D
    from .events import rescale_events

    files = _event_files(args.events)
    run.inputs.extend(files)
    events = _classified(files, args.jobs)
    prof = _profile_for(args, events, run)
    if args.dims == 1:
        acc = Accumulator1D(_edges(args, 5.0, 50))
    elif args.dims == 2:
        acc = Accumulator2D(_edges(args, 4.0, 32), window=args.window)
    else:
        raise ConfigError("--dims must be 1 or 2")
    for ev in events:
        # one batch per file, merged in file order whatever the worker count
        acc = acc.merge(_fresh(acc).add(rescale_events(ev, prof)))
    cal = acc.finalize(args.min_count, args.min_density_count)
    diag = {}
    for ev in events:
        for k, v in ev.diagnostics.to_dict().items():
            diag[k] = diag.get(k, 0) + v
    out = cal.to_json()
    out["diagnostics"] = diag
    if args.dims == 1:
        run.json("calib1d.json", out)
        _plots_1d(cal, run)
    else:
        run.json("calib2d.json", out)
        _plots_2d(cal, run, decompose=True)


def _fresh(acc):
    from .calib1d import Accumulator1D

    if isinstance(acc, Accumulator1D):
        return Accumulator1D(acc.edges, acc.density_edges, acc.n_tail)
    return type(acc)(acc.x_edges, acc.y_edges, acc.density_edges, acc.window)


def _plots_1d(cal, run: Run) -> None:
    from .plots import grid1d_plot

    for name in ("f", "d", "pi0", "qplus", "qminus", "pplus", "pminus"):
        g = getattr(cal, name)
        if np.any(g.defined):
            grid1d_plot(g, run.path(f"{name}.svg"), name)


def _plots_2d(cal, run: Run, decompose: bool) -> None:
    from .plots import field_plot, quiver_plot

    quiver_plot(cal.fx, cal.fy, run.path("drift_quiver.svg"))
    for name in ("fx", "fy", "dx", "dy", "rho_ab", "pst_xy", "qplus_xy", "qminus_xy"):
        g = getattr(cal, name)
        if np.any(g.defined):
            field_plot(g, run.path(f"{name}.svg"), name)
    if decompose and np.any(cal.fx.defined & cal.fy.defined):
        _write_potentials(cal.fx, cal.fy, run, tol=1e-10)


def _write_potentials(fx, fy, run: Run, tol: float) -> None:
    from .grids import write_grid_csv
    from .plots import field_plot
    from .potentials import decompose_drift, ridge_diagnostic

    pot = decompose_drift(fx, fy, tol=tol)
    ridge = ridge_diagnostic(pot.u)
    run.json("potentials.json", {
        "u": pot.u.to_json(), "w": pot.w.to_json(), "residual": pot.residual, "blend": pot.blend,
        "ridge": {"r": ridge.r.tolist(), "mean": ridge.mean.tolist(), "std": ridge.std.tolist(),
                  "anisotropy": ridge.anisotropy},
    })
    write_grid_csv(pot.u, run.path("u.csv"))
    write_grid_csv(pot.w, run.path("w.csv"))
    field_plot(pot.u, run.path("u.svg"), "u")
    field_plot(pot.w, run.path("w.svg"), "w")


def cmd_solve(args, run: Run) -> None:
    from .fpsolve import gibbs_boltzmann, stationary_1d, stationary_2d
    from .models import ModelSpec1D
    from .plots import field_plot, stationary_plot

    run.inputs.append(Path(args.spec))
    spec, cal = _load_model(args.spec, args.xmax, args.grid)
    if isinstance(spec, ModelSpec1D):
        res = stationary_1d(spec, tol=args.tol or 1e-10)
        out = {"stationary": res.to_json()}
        if not spec.has_jumps():
            gb = gibbs_boltzmann(spec, check_jumps=False)
            out["gibbs_boltzmann"] = gb.to_json()
        run.json("stationary.json", out)
        with open(run.path("stationary.csv"), "w") as fh:
            fh.write("x,pst\n")
            for xi, pi in zip(res.x.tolist(), res.pst.tolist()):
                fh.write(f"{xi!r},{pi!r}\n")
        emp = cal.pst if cal is not None else None
        stationary_plot(res.x, res.pst, run.path("stationary.svg"), empirical=emp)
    else:
        res = stationary_2d(spec, tol=args.tol or 1e-9)
        run.json("stationary2d.json", res.to_json())
        field_plot(res.density, run.path("stationary2d.svg"), "stationary density")


def cmd_decompose(args, run: Run) -> None:
    from .calib2d import Calib2D
    from .grids import Grid2D
    from .models import _read_mapping

    p = Path(args.calibration)
    if not p.is_file():
        raise DataError(f"{p}: no such file")
    run.inputs.append(p)
    obj = _read_mapping(p)
    if obj.get("kind") == "calib2d":
        cal = Calib2D.from_json(obj)
        fx, fy = cal.fx, cal.fy
    elif "fx" in obj and "fy" in obj:
        fx, fy = Grid2D.from_json(obj["fx"]), Grid2D.from_json(obj["fy"])
    else:
        raise DataError(f"{p}: expected a two-dimensional calibration or fx/fy grids")
    _write_potentials(fx, fy, run, tol=args.tol or 1e-10)


def _parse_x0(text, dims):
    if text is None:
        return 1.0 if dims == 1 else (1.0, 1.0)
    if isinstance(text, (int, float)):
        vals = [float(text)]
    elif isinstance(text, (list, tuple)):
        vals = [float(v) for v in text]
    else:
        vals = [float(v) for v in str(text).split(",")]
    if len(vals) != dims:
        raise ConfigError(f"--x0 needs {dims} value(s) for a {dims}D model")
    return vals[0] if dims == 1 else tuple(vals)


def cmd_simulate(args, run: Run) -> None:
    from .models import ModelSpec1D
    from .simulate import SimConfig, aggregate_2d, simulate_2d, simulate_paths

    run.inputs.append(Path(args.spec))
    spec, _ = _load_model(args.spec, args.xmax, args.grid)
    dims = 1 if isinstance(spec, ModelSpec1D) else 2
    cfg = SimConfig(spec, x0=_parse_x0(args.x0, dims), dt=args.dt, horizon=args.horizon,
                    n_paths=args.n_paths, seed=args.seed, ceiling=args.ceiling, eps=args.eps,
                    refill_continues=args.refill_continues, block_size=args.block_size, jobs=args.jobs)
    est = simulate_paths(cfg) if dims == 1 else simulate_2d(cfg)
    out = est.to_json()
    if dims == 2:
        out["aggregate"] = aggregate_2d(est.probabilities)
    run.json("passage.json", out)


def cmd_synth(args, run: Run) -> None:
    from .events import write_csv, write_ndjson
    from .generate import generate_events, truth_from_mapping
    from .models import _read_mapping
    from .seasonality import IntradayProfile

    p = Path(args.truth)
    if not p.is_file():
        raise DataError(f"{p}: no such file")
    run.inputs.append(p)
    truth = truth_from_mapping(_read_mapping(p))
    prof = None
    if args.profile:
        run.inputs.append(Path(args.profile))
        prof = IntradayProfile.load(args.profile)
    rec = generate_events(truth, int(args.n_events), profile=prof, seed=args.seed, n_days=args.n_days,
                          vbar=args.vbar, volume_per_order=args.volume_per_order)
    if args.format == "csv":
        with open(run.path("events.csv"), "w") as fh:
            write_csv(rec, fh)
    else:
        with open(run.path("events.ndjson"), "w") as fh:
            write_ndjson(rec, fh)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    g = common.add_argument_group("global options")
    g.add_argument("--seed", type=int, help="random seed (default 0)")
    g.add_argument("--jobs", type=int, help="worker processes (default 1)")
    g.add_argument("--out-dir", dest="out_dir", help="output directory (default .)")
    g.add_argument("--grid", type=int, help="number of grid cells per axis")
    g.add_argument("--xmax", type=float, help="upper end of the rescaled-volume domain")
    g.add_argument("--min-count", dest="min_count", type=int, help="minimum samples per cell (default 100)")
    g.add_argument("--config", help="TOML or JSON file with option values (flags take precedence)")
    g.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="queuefp", description="Queue-volume dynamics: calibration, solvers and simulation.",
                parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("profile", parents=[common], help="intraday average-volume profile")
    s.add_argument("events", nargs="+", help="event files or directories")
    s.add_argument("--n-bins", dest="n_bins", type=int)
    s.add_argument("--psi", type=float)
    s.add_argument("--allow-gaps", dest="allow_gaps", action="store_true", default=None)
    s.add_argument("--profile", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("calibrate", parents=[common], help="estimate model coefficients from events")
    s.add_argument("events", nargs="+")
    s.add_argument("--dims", type=int, choices=(1, 2))
    s.add_argument("--profile", help="profile JSON (default: computed from the events)")
    s.add_argument("--n-bins", dest="n_bins", type=int)
    s.add_argument("--psi", type=float)
    s.add_argument("--allow-gaps", dest="allow_gaps", action="store_true", default=None)
    s.add_argument("--window", type=int, help="events per bid/ask cross-covariance window (2D)")
    s.add_argument("--min-density-count", dest="min_density_count", type=int)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("solve", parents=[common], help="stationary density of a model")
    s.add_argument("spec", help="model spec (TOML/JSON) or calibration JSON")
    s.add_argument("--tol", type=float)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("decompose", parents=[common], help="split a 2D drift into potentials")
    s.add_argument("calibration")
    s.add_argument("--tol", type=float)
    s.set_defaults(func=cmd_decompose)

    s = sub.add_parser("simulate", parents=[common], help="first-passage Monte Carlo")
    s.add_argument("spec")
    s.add_argument("--x0", help="start state: x or x,y")
    s.add_argument("--n-paths", dest="n_paths", type=int)
    s.add_argument("--dt", type=float)
    s.add_argument("--horizon", type=float)
    s.add_argument("--ceiling", type=float, help="absorbing upper level (default: reflecting)")
    s.add_argument("--eps", type=float, help="queue counts as empty below this level")
    s.add_argument("--refill-continues", dest="refill_continues", action="store_true", default=None)
    s.add_argument("--block-size", dest="block_size", type=int)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic event stream")
    s.add_argument("truth", help="truth file (TOML/JSON)")
    s.add_argument("--n-events", dest="n_events", type=int)
    s.add_argument("--n-days", dest="n_days", type=int)
    s.add_argument("--vbar", type=float)
    s.add_argument("--profile", help="profile JSON giving V̄ per bin")
    s.add_argument("--volume-per-order", dest="volume_per_order", type=float)
    s.add_argument("--format", choices=("ndjson", "csv"))
    s.set_defaults(func=cmd_synth)
    return p


def _resolve(args, command: str) -> dict:
    """Fill unset options from the config file, then from DEFAULTS."""
    cfg: dict = {}
    if getattr(args, "config", None):
        from .models import _read_mapping

        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"{path}: no such config file")
        raw = _read_mapping(path)
        cfg = {k.replace("-", "_"): v for k, v in raw.items() if not isinstance(v, dict)}
        cfg.update({k.replace("-", "_"): v for k, v in raw.get(command, {}).items()})
    for key, default in DEFAULTS.items():
        if getattr(args, key, None) is None:  # unset flag
            setattr(args, key, cfg.get(key, default))
    return cfg


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _resolve(args, args.command)
        run = Run(args, argv, cfg)
        args.func(args, run)
        run.manifest()
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, QueueFPError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
