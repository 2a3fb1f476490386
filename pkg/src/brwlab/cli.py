"""Single entry-point CLI wiring all modules.

Subcommands: simulate, couple, percolate, renorm, tail, fit, oracle,
probe. Every artifact-producing command registers its outputs in a
manifest (sha256 per file) under --out-dir, so reruns with identical
config and seed are byte-checkable. Exit codes: 0 success, 2 validation
error (including exhausted searches), 3 invariant violation, 4 capacity.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import coupling as coupling_mod
from . import percolation as perc_mod
from . import renorm as renorm_mod
from . import stats as stats_mod
from .config import RunConfig, parse_config
from .engine import (
    ExtinctionRecord,
    ParticleConfiguration,
    SimulationParams,
    run,
    simulate_batch,
)
from .errors import CapacityError, InvariantViolation, NotFoundError, ValidationError
from .io_utils import (
    Manifest,
    fmt,
    parse_grid_spec,
    read_csv,
    read_fit_summary,
    require_columns,
    write_csv,
    write_fit_summary,
)
from .kernels import discretize, min_resolution_supercritical


def _add_common(sp):
    sp.add_argument("--seed", type=int, default=None, help="override the config seed")
    sp.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    sp.add_argument("--out-dir", default=".", help="directory for the manifest")
    sp.add_argument("--quiet", action="store_true")


def _say(args, msg):
    if not args.quiet:
        print(msg)


def _load(args, need_system=True) -> RunConfig:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "replicas", None) is not None:
        cfg.replicas = args.replicas
    if need_system:
        cfg.params()  # raises with a clear message if sections are missing
    return cfg


def _manifest(args) -> Manifest:
    os.makedirs(args.out_dir, exist_ok=True)
    return Manifest(args.out_dir)


# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _load(args)
    params = cfg.params()
    initial = ParticleConfiguration.single_at_origin(params.domain)
    records = simulate_batch(params, initial, cfg.replicas, threads=args.threads)
    man = _manifest(args)
    rows = [
        (r.replica, r.seed, r.outcome, r.tau, r.peak_pop, r.events) for r in records
    ]
    write_csv(args.out, ["replica", "seed", "outcome", "tau", "peak_pop", "events"], rows)
    man.register(args.out)
    if args.genealogy:
        res = run(params, initial, replica=0, record_genealogy=True)
        res.genealogy.dump_jsonl(args.genealogy)
        man.register(args.genealogy)
    man.write()
    extinct = sum(r.extinct for r in records)
    _say(args, f"simulate: {len(records)} replicas, {extinct} extinct -> {args.out}")
    return 0


def cmd_couple(args) -> int:
    cfg = _load(args)
    params = cfg.params()
    if params.kernel.is_discrete:
        raise ValidationError("couple needs a continuous kernel")
    res_spec = args.resolution or cfg.extra.get("resolution", "auto")
    if res_spec == "auto":
        n = min_resolution_supercritical(params.kernel, params.domain, params.lam)
    else:
        n = int(res_spec)
    grid = discretize(params.kernel, params.domain, n)
    man = _manifest(args)
    if args.dump_kernel:
        grid.to_csv(args.dump_kernel)
        man.register(args.dump_kernel)
    report, records = coupling_mod.survival_transfer_report(
        params, grid, cfg.replicas, threads=args.threads
    )
    rows = [
        (
            r.replica,
            r.grid_outcome,
            r.cont_outcome,
            r.max_grid_pop,
            r.max_cont_pop,
            r.domination_ok,
        )
        for r in records
    ]
    write_csv(
        args.out,
        ["replica", "grid_outcome", "cont_outcome", "max_grid_pop", "max_cont_pop", "domination_ok"],
        rows,
    )
    man.register(args.out)
    man.write()
    _say(
        args,
        f"couple: n={n} grid mass={grid.total_mass:.4f}; survival grid "
        f"{report.grid_freq:.4f} <= continuous {report.cont_freq:.4f}",
    )
    return 0


def cmd_percolate(args) -> int:
    sig = perc_mod.percolate_batch(args.p, args.height, args.replicas, args.seed or 0,
                                   threads=args.threads)
    man = _manifest(args)
    rows = [
        (i, "" if s < 0 else int(s), s < 0) for i, s in enumerate(sig)
    ]
    write_csv(args.out, ["replica", "sigma", "survived"], rows)
    man.register(args.out)
    man.write()
    _say(args, f"percolate: p={args.p} height={args.height} -> {args.out}")
    return 0


def _write_block_file(path, bp: renorm_mod.BlockParams):
    with open(path, "w") as fh:
        fh.write(f"m_quota={bp.m_quota}\n")
        fh.write(f"duration={fmt(bp.duration)}\n")
        fh.write(f"p={fmt(bp.p)}\n")
        fh.write(f"replicas={bp.replicas}\n")
        for i in (0, 1):
            for j in (0, 1):
                fh.write(f"c_{i + 1}{j + 1}={fmt(float(bp.c_hat[i, j]))}\n")
                fh.write(f"lo_{i + 1}{j + 1}={fmt(float(bp.c_lo[i, j]))}\n")
                fh.write(f"hi_{i + 1}{j + 1}={fmt(float(bp.c_hi[i, j]))}\n")


def _read_block_file(path) -> renorm_mod.BlockParams:
    vals = {}
    try:
        with open(path) as fh:
            for ln in fh:
                ln = ln.strip()
                if not ln or "=" not in ln:
                    continue
                k, v = ln.split("=", 1)
                vals[k.strip()] = v.strip()
    except OSError as exc:
        raise ValidationError(f"cannot read block file {path}: {exc}")
    try:
        c = np.array([[float(vals[f"c_{i}{j}"]) for j in (1, 2)] for i in (1, 2)])
        lo = np.array([[float(vals[f"lo_{i}{j}"]) for j in (1, 2)] for i in (1, 2)])
        hi = np.array([[float(vals[f"hi_{i}{j}"]) for j in (1, 2)] for i in (1, 2)])
        return renorm_mod.BlockParams(
            int(vals["m_quota"]), float(vals["duration"]), float(vals["p"]),
            c, lo, hi, int(vals.get("replicas", 0)),
        )
    except KeyError as exc:
        raise ValidationError(f"block file {path} is missing {exc}")


def cmd_renorm(args) -> int:
    cfg = _load(args)
    params = cfg.params()
    man = _manifest(args)
    extra = cfg.extra
    if args.search:
        p_target = args.p if args.p is not None else extra.get("p")
        if p_target is None:
            raise ValidationError("renorm --search needs --p (target bond probability)")
        m_grid = [int(x) for x in (args.m_grid or extra.get("m_grid", "1,2,4,8,16")).split(",")]
        t_grid = [float(x) for x in (args.t_grid or extra.get("t_grid", "4,8,16,32")).split(",")]
        bp = renorm_mod.find_block_params(
            params, p_target, m_grid, t_grid,
            search_replicas=args.search_replicas or extra.get("search_replicas", 400),
            refine_replicas=args.refine_replicas or extra.get("refine_replicas", 0),
        )
        block_path = os.path.join(args.out_dir, "block.txt")
        _write_block_file(block_path, bp)
        man.register(block_path)
        matrix_path = os.path.join(args.out_dir, "block_matrix.csv")
        rows = [
            (i + 1, j + 1, float(bp.c_hat[i, j]), float(bp.c_lo[i, j]), float(bp.c_hi[i, j]))
            for i in (0, 1)
            for j in (0, 1)
        ]
        write_csv(matrix_path, ["i", "j", "c_hat", "ci_lo", "ci_hi"], rows)
        man.register(matrix_path)
        man.write()
        _say(args, f"renorm search: M={bp.m_quota} T={bp.duration} -> {block_path}")
        return 0
    if not args.block:
        raise ValidationError("renorm needs either --search or --block <file>")
    bp = _read_block_file(args.block)
    height = args.height or extra.get("height", 8)
    variant = args.variant or extra.get("variant", "integer")
    max_attempts = args.max_attempts or extra.get("max_attempts", 64)
    summary_rows = []
    edges_path = os.path.join(args.out_dir, "ledger_edges.jsonl")
    with open(edges_path, "w") as efh:
        for rep in range(cfg.replicas):
            led = renorm_mod.build_ledger(
                params, bp, replica=rep, height=height,
                max_attempts=max_attempts, variant=variant,
            )
            for att in led.attempts:
                for e in att.edges:
                    efh.write(
                        json.dumps(
                            {
                                "replica": rep,
                                "attempt": e.attempt,
                                "level": e.level,
                                "col": e.col,
                                "dir": e.direction,
                                "alpha_backed": e.alpha_backed,
                                "block_success": e.block_success,
                                "u": e.u,
                                "threshold": e.threshold,
                                "open": e.open,
                            }
                        )
                        + "\n"
                    )
            bound = led.bound_ok()
            summary_rows.append(
                (
                    rep,
                    led.tau,
                    led.g if led.g is not None else "",
                    "" if bound is None else bound,
                    led.outcome == "survived",
                )
            )
            led.drop_blocks()
    man.register(edges_path)
    summary_path = os.path.join(args.out_dir, "ledger_summary.csv")
    write_csv(summary_path, ["replica", "tau", "g", "bound_ok", "perc_survived"], summary_rows)
    man.register(summary_path)
    man.write()
    _say(args, f"renorm: {cfg.replicas} ledgers -> {summary_path}")
    return 0


def _records_from_csv(path) -> list[ExtinctionRecord]:
    header, rows = read_csv(path)
    require_columns(header, ["replica", "outcome", "tau"], path)
    idx = {c: header.index(c) for c in header}
    out = []
    for row in rows:
        outcome = row[idx["outcome"]]
        tau = float(row[idx["tau"]]) if row[idx["tau"]] not in ("", "nan") else math.nan
        out.append(
            ExtinctionRecord(
                int(row[idx["replica"]]), 0, outcome, tau, 0.0, 0, 0, 0
            )
        )
    return out


def cmd_tail(args) -> int:
    header, _rows = read_csv(args.input)
    grid = parse_grid_spec(args.grid)
    if "tau" in header:
        records = _records_from_csv(args.input)
        est = stats_mod.tail_estimate(records, grid)
    elif "sigma" in header:
        _, rows = read_csv(args.input)
        i_sig = header.index("sigma")
        levels = np.array(
            [int(r[i_sig]) if r[i_sig] != "" else -1 for r in rows], dtype=np.int64
        )
        est = stats_mod.tail_from_levels(levels, int(max(grid)), grid)
    else:
        raise ValidationError(f"{args.input} has neither a tau nor a sigma column")
    man = _manifest(args)
    write_csv(
        args.out,
        ["s", "tail", "lo", "hi"],
        zip(est.s, est.tail, est.lo, est.hi),
    )
    man.register(args.out)
    man.write()
    _say(
        args,
        f"tail: n={est.n_total} extinct={est.n_extinct} "
        f"censored={est.n_censored_horizon}+{est.n_censored_cap} -> {args.out}",
    )
    return 0


def cmd_fit(args) -> int:
    header, rows = read_csv(args.input)
    require_columns(header, ["s", "tail"], args.input)
    i_s, i_t = header.index("s"), header.index("tail")
    s = np.array([float(r[i_s]) for r in rows])
    tail = np.array([float(r[i_t]) for r in rows])
    est = stats_mod.TailEstimate(s, tail, tail, tail, 0, 0, 0, 0)
    fit = stats_mod.fit_exponential(
        est, tail_floor=args.floor, tail_ceil=args.ceil, s_hi=args.s_hi
    )
    man = _manifest(args)
    write_fit_summary(args.out, fit)
    man.register(args.out)
    man.write()
    _say(args, f"fit: q_hat={fit.q_hat:.6g} C_hat={fit.c_hat:.6g} r2={fit.r2:.4f}")
    return 0


def cmd_oracle(args) -> int:
    lam = args.lam
    prob = stats_mod.extinction_probability(lam)
    print(f"extinction_probability={fmt(prob)}")
    if args.t is not None:
        print(f"cdf_at_t={fmt(stats_mod.extinction_cdf(lam, args.t))}")
    return 0


def cmd_probe(args) -> int:
    cfg = _load(args)
    params = cfg.params()
    grid_spec = args.grid or cfg.extra.get("grid")
    if grid_spec is None:
        raise ValidationError("probe needs --grid (per-axis spec, ';'-separated)")
    axes = [parse_grid_spec(part) for part in grid_spec.split(";")]
    if len(axes) != params.domain.dimension:
        raise ValidationError(
            f"probe grid has {len(axes)} axes but the domain dimension is "
            f"{params.domain.dimension}"
        )
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    probe = stats_mod.survival_probe(params, pts, cfg.replicas, threads=args.threads)
    man = _manifest(args)
    d = params.domain.dimension
    header = [f"y_{k + 1}" for k in range(d)] + ["freq", "lo", "hi", "replicas"]
    rows = [
        tuple(probe.positions[i]) + (probe.frequency[i], probe.lo[i], probe.hi[i], cfg.replicas)
        for i in range(len(probe.positions))
    ]
    write_csv(args.out, header, rows)
    man.register(args.out)
    man.write()
    _say(args, f"probe: delta_hat={probe.delta_hat:.4f} over {len(pts)} positions")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="brwlab",
        description="Monte Carlo laboratory for branching random walks on a cube",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="bulk BRW replicas -> extinction records CSV")
    sp.add_argument("--config", required=True)
    sp.add_argument("--replicas", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--genealogy", default=None, help="JSONL genealogy dump of replica 0")
    _add_common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("couple", help="continuous vs dyadic-grid coupled runs")
    sp.add_argument("--config", required=True)
    sp.add_argument("--resolution", default=None, help="grid resolution n, or 'auto'")
    sp.add_argument("--replicas", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--dump-kernel", default=None, help="write the grid kernel CSV here")
    _add_common(sp)
    sp.set_defaults(func=cmd_couple)

    sp = sub.add_parser("percolate", help="oriented percolation runs")
    sp.add_argument("--p", type=float, required=True)
    sp.add_argument("--height", type=int, required=True)
    sp.add_argument("--replicas", type=int, required=True)
    sp.add_argument("--out", required=True)
    _add_common(sp)
    sp.set_defaults(func=cmd_percolate)

    sp = sub.add_parser("renorm", help="block renormalization: search or ledger runs")
    sp.add_argument("--config", required=True)
    sp.add_argument("--search", action="store_true")
    sp.add_argument("--p", type=float, default=None)
    sp.add_argument("--m-grid", default=None)
    sp.add_argument("--t-grid", default=None)
    sp.add_argument("--search-replicas", type=int, default=None)
    sp.add_argument("--refine-replicas", type=int, default=None)
    sp.add_argument("--block", default=None)
    sp.add_argument("--replicas", type=int, default=None)
    sp.add_argument("--height", type=int, default=None)
    sp.add_argument("--max-attempts", type=int, default=None)
    sp.add_argument("--variant", choices=("integer", "exact"), default=None)
    _add_common(sp)
    sp.set_defaults(func=cmd_renorm)

    sp = sub.add_parser("tail", help="extinction-tail curve from a records CSV")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--grid", required=True, help="s grid, lo:hi:step")
    sp.add_argument("--out", required=True)
    _add_common(sp)
    sp.set_defaults(func=cmd_tail)

    sp = sub.add_parser("fit", help="exponential fit of a tail CSV")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--floor", type=float, default=1e-3)
    sp.add_argument("--ceil", type=float, default=0.5)
    sp.add_argument("--s-hi", type=float, default=None)
    _add_common(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("oracle", help="linear birth-death extinction oracle")
    sp.add_argument("--lambda", dest="lam", type=float, required=True)
    sp.add_argument("--t", type=float, default=None)
    _add_common(sp)
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("probe", help="survival frequency over starting positions")
    sp.add_argument("--config", required=True)
    sp.add_argument("--grid", default=None, help="per-axis grid specs joined by ';'")
    sp.add_argument("--replicas", type=int, default=None)
    sp.add_argument("--out", required=True)
    _add_common(sp)
    sp.set_defaults(func=cmd_probe)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NotFoundError as exc:
        print(f"search exhausted: {exc}", file=sys.stderr)
        return 2
    except InvariantViolation as exc:
        print(f"invariant violation (bug): {exc}", file=sys.stderr)
        return 3
    except CapacityError as exc:
        print(f"capacity exceeded: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
