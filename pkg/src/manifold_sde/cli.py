"""Command-line front end: sample -> build -> simulate -> evaluate -> export.

Every command records its fully resolved argument list in ``manifest.json``
in the directory of its output; ``imd replay manifest.json`` re-executes the
recorded runs and reproduces their outputs bit for bit.

Exit codes: 0 success, 2 usage or parameter error, 3 graph construction
failure, 4 simulation divergence, 1 anything else.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (ConnectivityError, DivergenceError, ManifoldSDEError, OutOfDomainError,
                     ParameterError, ParseError)
from .graph_ops import (GraphConfig, build_graph, build_operator_field, default_bandwidth,
                        load_field, save_field)
from .manifolds import (SPHERE, SWISS_ROLL, load_cloud, sample_sphere, sample_swiss_roll,
                        sample_torus, save_cloud)
from .metrics import endpoint_statistic, sphere_report, swiss_roll_report, vmf_histogram
from .neighbors import build_index
from .score import ScoreConfig
from .sde import METHODS, DriftSpec, IntegratorConfig, Trajectory, simulate_ensemble

log = logging.getLogger("manifold_sde")

EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_GRAPH, EXIT_DIVERGENCE = 0, 1, 2, 3, 4
MANIFEST = "manifest.json"
LONG_TRAJ_HEADER = ["path", "step", "t", "coord", "value"]
LONG_FIELD_HEADER = ["node", "quantity", "i", "j", "value"]


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file whose entries act as default flags")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $IMD_THREADS, else CPU count)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="imd", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", parents=[common], help="sample a synthetic point cloud")
    p.add_argument("--manifold", required=True, choices=["sphere", "torus", "swiss-roll"])
    p.add_argument("--n", type=int, required=True, help="number of points")
    p.add_argument("--dim", type=int, default=2, help="sphere intrinsic dimension")
    p.add_argument("--radius", type=float, default=1.0, help="sphere radius")
    p.add_argument("--major", type=float, default=2.0, help="torus major radius")
    p.add_argument("--minor", type=float, default=1.0, help="torus minor radius")
    p.add_argument("--t-lo", type=float, default=1.5)
    p.add_argument("--t-hi", type=float, default=15.5)
    p.add_argument("--height", type=float, default=20.0)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("build", parents=[common], help="build the operator field of a cloud")
    p.add_argument("cloud")
    p.add_argument("--bandwidth", type=float, default=None,
                   help="kernel bandwidth (default: 1.5x the connectivity radius)")
    p.add_argument("--kernel", choices=["hard_cutoff", "gaussian"], default="hard_cutoff")
    p.add_argument("--scaling-c", type=float, default=None, help="generator scale c (default d+2)")
    p.add_argument("--intrinsic-dim", type=int, default=None)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("simulate", parents=[common], help="integrate an ensemble of paths")
    p.add_argument("cloud")
    p.add_argument("field")
    p.add_argument("--drift", choices=["none", "vmf", "quadratic"], default="none")
    p.add_argument("--kappa", type=float, default=None)
    p.add_argument("--mu-axis", type=int, default=1, help="vMF mean direction e_k (1-based)")
    p.add_argument("--z-star", type=_floats, default=None, help="quadratic minimizer, comma-separated")
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--paths", type=int, default=1, help="paths per start node")
    p.add_argument("--start-nodes", type=_ints, default=[0], help="comma-separated cloud indices")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--speedup", type=float, default=1.0)
    p.add_argument("--drgd", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--sigma", type=float, default=None, help="DRGD scale (default 0.005x diameter)")
    p.add_argument("--knn", type=int, default=1, help="neighbours in the extension map")
    p.add_argument("--method", choices=METHODS, default="imd")
    p.add_argument("--concat", action="store_true", help="write one CSV instead of a directory")
    p.add_argument("-o", "--output", required=True, help="output directory (file with --concat)")

    p = sub.add_parser("evaluate", parents=[common], help="score a simulated ensemble")
    p.add_argument("cloud")
    p.add_argument("run", help="trajectory directory or concatenated trajectory CSV")
    p.add_argument("--kappa", type=float, default=None)
    p.add_argument("--mu-axis", type=int, default=None)
    p.add_argument("--bins", type=int, default=40)
    p.add_argument("--hist", default=None, help="histogram CSV (default: next to the report)")
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("export", parents=[common], help="re-emit data in long format")
    p.add_argument("input", help="trajectory directory/CSV, field CSV or long CSV")
    p.add_argument("--format", default="long")
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("replay", help="re-execute the runs recorded in one or more manifests")
    p.add_argument("manifest", nargs="+", help="runs from all manifests execute in recorded start order")
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


def _config_tokens(path: str, sub: argparse.ArgumentParser) -> list[str]:
    """Turn a key=value config file into flag tokens understood by ``sub``."""
    known = {a.dest: a for a in sub._actions if a.option_strings}
    tokens = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"expected key=value, got {line!r}", lineno)
            key, val = (s.strip() for s in line.split("=", 1))
            dest = key.replace("-", "_")
            if dest not in known or dest == "config":
                raise ParameterError(f"{path}: line {lineno}: unknown key {key!r}")
            act = known[dest]
            flag = next(o for o in act.option_strings if o.startswith("--"))
            if isinstance(act, (argparse._StoreTrueAction, argparse.BooleanOptionalAction)):
                truthy = val.lower() in ("1", "true", "yes", "on")
                if isinstance(act, argparse.BooleanOptionalAction):
                    tokens.append(flag if truthy else "--no-" + flag[2:])
                elif truthy:
                    tokens.append(flag)
            else:
                tokens += [flag, val]
    return tokens


def _find_config(argv: list[str]) -> tuple[int, int, str] | None:
    """Location ``(start, stop, path)`` of a ``--config`` option in ``argv``."""
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return i, i + 2, argv[i + 1]
        if a.startswith("--config="):
            return i, i + 1, a.split("=", 1)[1]
    return None


def parse_args(argv: list[str]) -> tuple[argparse.Namespace, list[str]]:
    """Parse ``argv``; config-file entries are spliced in before the explicit flags.

    Returns the namespace and the resolved argument list (what gets replayed).
    """
    ap = build_parser()
    subs = ap._subparsers._group_actions[0].choices
    found = _find_config(argv)
    cmd = next((a for a in argv if a in subs), None)
    if found is not None and cmd is not None:
        start, stop, path = found
        argv = argv[:start] + argv[stop:]
        i = argv.index(cmd)
        argv = argv[:i + 1] + _config_tokens(path, subs[cmd]) + argv[i + 1:]
    return ap.parse_args(argv), argv


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return max(1, args.threads)
    env = os.environ.get("IMD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ParameterError(f"IMD_THREADS must be an integer, got {env!r}")
    return os.cpu_count() or 1


# --- manifest ----------------------------------------------------------------------

def _write_manifest(out_dir: Path, args, argv, inputs, outputs, started: float) -> None:
    """Record this run in ``out_dir/manifest.json``, replacing any earlier run with the same outputs."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / MANIFEST
    runs = []
    if path.exists():
        try:
            runs = json.loads(path.read_text()).get("runs", [])
        except (json.JSONDecodeError, AttributeError):
            runs = []
    outs = sorted(str(Path(o).resolve()) for o in outputs)
    params = {k: v for k, v in vars(args).items() if k not in ("config", "verbose")}
    entry = {
        "command": args.command,
        "argv": argv,
        "params": params,
        "seed": getattr(args, "seed", None),
        "inputs": [str(Path(i).resolve()) for i in inputs],
        "outputs": outs,
        "cwd": os.getcwd(),
        "version": __version__,
        "started": started,
        "duration_s": round(time.time() - started, 3),
    }
    # a rerun keeps its slot so that replay order stays the pipeline order
    slot = next((k for k, r in enumerate(runs) if sorted(r.get("outputs", [])) == outs), None)
    if slot is None:
        runs.append(entry)
    else:
        runs[slot] = entry
    path.write_text(json.dumps({"runs": runs}, indent=2, default=str) + "\n")


# --- trajectory files -------------------------------------------------------------

def _traj_header(n: int, radial: bool) -> list[str]:
    return ["step", "t"] + [f"x{i + 1}" for i in range(n)] + (["radial_err"] if radial else []) + ["nn_dist"]


def _traj_rows(tr: Trajectory):
    for ell in range(len(tr.times)):
        row = [str(ell), _fmt(tr.times[ell])] + [_fmt(v) for v in tr.states[ell]]
        if tr.radial_err is not None:
            row.append(_fmt(tr.radial_err[ell]))
        row.append(_fmt(tr.nn_dist[ell]))
        yield row


def write_trajectories(out: Path, trajs: list[Trajectory], concat: bool) -> list[Path]:
    n = trajs[0].states.shape[1]
    header = _traj_header(n, trajs[0].radial_err is not None)
    if concat:
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path"] + header)
            for p, tr in enumerate(trajs):
                for row in _traj_rows(tr):
                    w.writerow([str(p)] + row)
        return [out]
    out.mkdir(parents=True, exist_ok=True)
    files = []
    width = max(5, len(str(len(trajs) - 1)))
    for p, tr in enumerate(trajs):
        f = out / f"path_{p:0{width}d}.csv"
        with open(f, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(_traj_rows(tr))
        files.append(f)
    return files


def _parse_traj_csv(path: Path) -> dict[int, Trajectory]:
    """Read a per-path or concatenated trajectory CSV into ``{path: Trajectory}``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: empty file", 1)
        concat = header[0] == "path"
        body = header[1:] if concat else header
        if body[:2] != ["step", "t"]:
            raise ParseError(f"{path}: unexpected trajectory header {header[:3]}", 1)
        xcols = [i for i, h in enumerate(body) if h.startswith("x")]
        radial = "radial_err" in body
        rows: dict[int, list] = {}
        for lineno, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) != len(header):
                raise ParseError(f"{path}: expected {len(header)} cells, got {len(cells)}", lineno)
            try:
                vals = [float(c) for c in cells]
            except ValueError:
                raise ParseError(f"{path}: non-numeric cell", lineno) from None
            p = int(vals[0]) if concat else 0
            rows.setdefault(p, []).append(vals[1:] if concat else vals)
    out = {}
    for p, rs in rows.items():
        a = np.array(rs)
        out[p] = Trajectory(times=a[:, 1], states=a[:, xcols], nn_dist=a[:, body.index("nn_dist")],
                            radial_err=a[:, body.index("radial_err")] if radial else None, path_index=p)
    return out


def read_trajectories(run: Path) -> list[Trajectory]:
    if run.is_dir():
        files = sorted(run.glob("path_*.csv"))
        if not files:
            raise ParameterError(f"{run}: no path_*.csv trajectory files")
        return [_parse_traj_csv(f)[0] for f in files]
    trajs = _parse_traj_csv(run)
    return [trajs[p] for p in sorted(trajs)]


def _run_manifest_entry(run: Path):
    """The manifest entry of the simulate run that produced ``run``, if any."""
    mdir = run if run.is_dir() else run.parent
    m = mdir / MANIFEST
    if not m.exists():
        return None
    target = str(run.resolve())
    for r in json.loads(m.read_text()).get("runs", []):
        if r.get("command") == "simulate" and target in r.get("outputs", []):
            return r
    return None


# --- commands ------------------------------------------------------------------------

def cmd_sample(args, argv, started):
    if args.manifold == "sphere":
        cloud = sample_sphere(args.dim, args.radius, args.n, args.seed)
    elif args.manifold == "torus":
        cloud = sample_torus(args.major, args.minor, args.n, args.seed)
    else:
        cloud = sample_swiss_roll(args.t_lo, args.t_hi, args.height, args.n, args.seed)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_cloud(out, cloud)
    log.info("sample: %d points in R^%d -> %s", cloud.n_points, cloud.ambient_dim, out)
    _write_manifest(out.parent, args, argv, [], [out], started)


def cmd_build(args, argv, started):
    cloud = load_cloud(args.cloud)
    index = build_index(cloud)
    bw = args.bandwidth if args.bandwidth is not None else default_bandwidth(cloud, index)
    d = args.intrinsic_dim if args.intrinsic_dim is not None else cloud.intrinsic_dim
    cfg = GraphConfig(bw, d, kernel=args.kernel, scaling_c=args.scaling_c)
    g = build_graph(cloud, cfg, index)
    field = build_operator_field(g)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_field(out, field)
    print(f"nodes={g.n_nodes} edges={g.n_edges} mean_degree={2 * g.n_edges / g.n_nodes:.3f} "
          f"bandwidth={bw:.6g} degenerate_neighborhoods={field.degenerate_nodes}")
    _write_manifest(out.parent, args, argv, [args.cloud], [out], started)


def _drift_spec(args, n: int) -> DriftSpec:
    if args.drift == "vmf":
        if args.kappa is None:
            raise ParameterError("--drift vmf needs --kappa")
        if not 1 <= args.mu_axis <= n:
            raise ParameterError(f"--mu-axis must lie in [1, {n}]")
        return DriftSpec.vmf(np.eye(n)[args.mu_axis - 1], args.kappa, beta=args.beta)
    if args.drift == "quadratic":
        if args.z_star is None or len(args.z_star) != n:
            raise ParameterError(f"--drift quadratic needs --z-star with {n} values")
        return DriftSpec.quadratic(args.z_star, beta=args.beta)
    return DriftSpec(beta=args.beta)


def cmd_simulate(args, argv, started):
    cloud = load_cloud(args.cloud)
    field = load_field(args.field)
    if field.n_nodes != cloud.n_points or field.ambient_dim != cloud.ambient_dim:
        raise ParameterError("field does not match the cloud (node count or dimension)")
    index = build_index(cloud)
    n = cloud.ambient_dim
    spec = _drift_spec(args, n)
    cfg = IntegratorConfig(step=args.step, steps=args.steps, speedup=args.speedup, seed=args.seed,
                           drgd_enabled=args.drgd, knn_extension=args.knn, method=args.method)
    score = ScoreConfig.for_cloud(cloud, args.sigma) if args.drgd else None
    if args.paths < 1:
        raise ParameterError("--paths must be >= 1")
    nodes = args.start_nodes
    if any(not 0 <= i < cloud.n_points for i in nodes):
        raise ParameterError(f"--start-nodes must lie in [0, {cloud.n_points - 1}]")
    x0s = np.repeat(cloud.points[nodes], args.paths, axis=0)
    threads = _threads(args)
    batch = max(1, min(512, math.ceil(len(x0s) / threads)))
    log.info("simulate: %d paths x %d steps, h_eff=%g, drgd=%s, threads=%d",
             len(x0s), cfg.steps, cfg.h_eff, cfg.drgd_enabled, threads)
    trajs = simulate_ensemble(field, index, cloud, cfg, spec, score, x0s=x0s, threads=threads,
                              batch_size=batch)
    failed = [t for t in trajs if t.error is not None]
    for t in failed:
        # keep only finite states; the error message carries the offending one
        k = len(t.times) - 1
        t.times, t.states, t.nn_dist = t.times[:k], t.states[:k], t.nn_dist[:k]
        if t.radial_err is not None:
            t.radial_err = t.radial_err[:k]
    out = Path(args.output)
    files = write_trajectories(out, trajs, args.concat)
    log.info("simulate: wrote %d file(s) to %s", len(files), out)
    _write_manifest(out.parent if args.concat else out, args, argv, [args.cloud, args.field],
                    [out], started)
    if failed:
        raise failed[0].error


def cmd_evaluate(args, argv, started):
    cloud = load_cloud(args.cloud)
    run = Path(args.run)
    trajs = read_trajectories(run)
    kind = cloud.spec.kind if cloud.spec is not None else None
    kappa, mu_axis = args.kappa, args.mu_axis
    entry = _run_manifest_entry(run)
    if entry is not None and entry["params"].get("drift") == "vmf":
        kappa = kappa if kappa is not None else entry["params"].get("kappa")
        mu_axis = mu_axis if mu_axis is not None else entry["params"].get("mu_axis")
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    outputs = [out]
    if kind == SPHERE:
        mu = None
        if kappa is not None:
            n = cloud.ambient_dim
            axis = mu_axis or 1
            if not 1 <= axis <= n:
                raise ParameterError(f"--mu-axis must lie in [1, {n}]")
            mu = np.eye(n)[axis - 1]
        rep = sphere_report(trajs, cloud.spec.radius, mu, kappa)
        if mu is not None:
            hist = Path(args.hist) if args.hist else out.with_name(out.stem + "_hist.csv")
            rows = vmf_histogram(endpoint_statistic(trajs, mu), cloud.ambient_dim, kappa, args.bins)
            with open(hist, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["bin_left", "bin_right", "count", "target_density"])
                for a, b, c, dens in rows:
                    w.writerow([_fmt(a), _fmt(b), c, _fmt(dens)])
            outputs.append(hist)
    elif kind == SWISS_ROLL:
        if args.kappa is not None or args.mu_axis is not None:
            raise ParameterError("vMF options do not apply to a swiss-roll cloud")
        rep = swiss_roll_report(trajs, cloud)
    else:
        raise ParameterError(f"no metric set for manifold kind {kind!r}")
    out.write_text(rep.to_json(indent=2, sort_keys=True) + "\n")
    print(rep.to_json(sort_keys=True))
    _write_manifest(out.parent, args, argv, [args.cloud, args.run], outputs, started)


def _export_rows(src: Path):
    """Long-format header and rows for any supported input."""
    if src.is_dir():
        trajs = read_trajectories(src)
        return LONG_TRAJ_HEADER, _long_traj(trajs)
    with open(src, newline="") as fh:
        header = next(csv.reader(fh), None)
    if header is None:
        raise ParseError(f"{src}: empty file", 1)
    if header in (LONG_TRAJ_HEADER, LONG_FIELD_HEADER):
        def passthrough():
            with open(src, newline="") as fh:
                r = csv.reader(fh)
                next(r)
                yield from (row for row in r if row)
        return header, passthrough()
    if header[0] == "node":
        return LONG_FIELD_HEADER, _long_field(load_field(src))
    if header[0] in ("step", "path"):
        trajs = read_trajectories(src)
        return LONG_TRAJ_HEADER, _long_traj(trajs)
    raise ParseError(f"{src}: unrecognized input header {header[:3]}", 1)


def _long_traj(trajs):
    for p, tr in enumerate(trajs):
        for ell in range(len(tr.times)):
            t = _fmt(tr.times[ell])
            for k, v in enumerate(tr.states[ell]):
                yield [str(p), str(ell), t, f"x{k + 1}", _fmt(v)]


def _long_field(field):
    n = field.ambient_dim
    for i in range(field.n_nodes):
        for k in range(n):
            yield [str(i), "drift", str(k + 1), "", _fmt(field.drift[i, k])]
        for k in range(n):
            for m in range(n):
                yield [str(i), "cdc", str(k + 1), str(m + 1), _fmt(field.cdc[i, k, m])]


def cmd_export(args, argv, started):
    if args.format != "long":
        raise ParameterError(f"unknown export format {args.format!r} (supported: long)")
    src, out = Path(args.input), Path(args.output)
    header, rows = _export_rows(src)
    rows = list(rows)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    log.info("export: %d rows -> %s", len(rows), out)
    _write_manifest(out.parent, args, argv, [args.input], [out], started)


def cmd_replay(args, argv, started):
    runs = []
    for m in args.manifest:
        runs += json.loads(Path(m).read_text()).get("runs", [])
    if not runs:
        raise ParameterError("no recorded runs")
    runs.sort(key=lambda r: r.get("started", 0.0))
    here = os.getcwd()
    try:
        for r in runs:
            os.chdir(r.get("cwd", here))
            log.info("replay: %s", " ".join(r["argv"]))
            code = main(r["argv"])
            if code != EXIT_OK:
                raise SystemExit(code)
    finally:
        os.chdir(here)


COMMANDS = {"sample": cmd_sample, "build": cmd_build, "simulate": cmd_simulate,
            "evaluate": cmd_evaluate, "export": cmd_export, "replay": cmd_replay}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, resolved = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    except (ParameterError, ParseError, OSError) as exc:
        print(f"imd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    started = time.time()
    try:
        COMMANDS[args.command](args, resolved, started)
    except ConnectivityError as exc:
        print(f"imd: error: {exc}; rerun with --bandwidth {exc.min_bandwidth:.6g} or larger",
              file=sys.stderr)
        return EXIT_GRAPH
    except DivergenceError as exc:
        print(f"imd: error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ParameterError, OutOfDomainError) as exc:
        print(f"imd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ManifoldSDEError, OSError, ValueError) as exc:
        print(f"imd: error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    except SystemExit as exc:
        return int(exc.code or 0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
