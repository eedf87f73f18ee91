"""Command line entry point ``fdbeam``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import load_config
from .errors import ConfigError, NumericalError, StructuralError
from .experiment import Pipeline, _budget_csv, load_experiment, run_experiment
from .frames import read_frame, read_line, write_frame
from .image import envelope_nrmse, render_lines, write_pgm, write_png
from .kernel import build_kernel_tables, save_table, kernel_cache_key
from .phantom import load_phantom, make_reflector_phantom, make_speckle_phantom


def _parse_size(text):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise ConfigError(f"size: expected WIDTHxHEIGHT, got {text!r}") from None


def _parse_sets(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set: expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _pipeline(args) -> Pipeline:
    cfg, geom = load_config(args.config, _parse_sets(args.set))
    return Pipeline(cfg, geom, getattr(args, "cache_dir", None))


def _line_indices(args, pipe):
    count = len(pipe.cfg.directions)
    if args.line is None:
        return list(range(count))
    for i in args.line:
        if not 0 <= i < count:
            raise ConfigError(f"line: index {i} outside 0..{count - 1}")
    return list(args.line)


def _fan_out(fn, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _read_frames(paths):
    frames = []
    for p in paths:
        try:
            frames.append(read_frame(p))
        except OSError as exc:
            raise ConfigError(f"input: cannot read {p}: {exc.strerror}") from None
    return frames


def _check_frame(frame, pipe, path):
    if abs(frame.sample_rate - pipe.grid.sample_rate) > 1e-6 * pipe.grid.sample_rate:
        raise StructuralError(f"{path}: sample rate {frame.sample_rate:g} Hz does not match config")


def cmd_simulate(args, pipe):
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    sep = 2.0 * pipe.pulse.half_support

    def one(i):
        if args.phantom:
            phantom = load_phantom(args.phantom, pipe.geom, pipe.grid)
        else:
            phantom = make_reflector_phantom([args.seed, i, 0], args.reflectors, pipe.grid, sep)
            phantom = phantom + make_speckle_phantom([args.seed, i, 1], args.speckle,
                                                     args.speckle_std, pipe.grid,
                                                     pipe.geom.speed_of_sound)
        frame = pipe.simulate(phantom, float(pipe.cfg.thetas[i]), args.noise_snr,
                              seed=[args.seed, i, 2])
        write_frame(out / f"frame_{i:03d}.snqb", frame)

    _fan_out(one, _line_indices(args, pipe), args.threads)
    return 0


def cmd_kernel(args, pipe):
    eps_values = args.eps or [pipe.cfg.kernel_eps]
    indices = _line_indices(args, pipe)

    def one(i):
        theta = float(pipe.cfg.thetas[i])
        return i, build_kernel_tables(pipe.geom, pipe.grid, theta, pipe.kappa, eps_values,
                                      pipe.band)

    results = _fan_out(one, indices, args.threads)
    if args.action == "build":
        out = Path(args.cache_dir or "kernels")
        out.mkdir(parents=True, exist_ok=True)
        for _, tables in results:
            for table in tables.values():
                save_table(out / f"{table.key[:24]}.snqk", table)
        print(f"wrote {sum(len(t) for _, t in results)} tables to {out}")
        return 0
    mu = pipe.mu(args.m, args.mu) if args.m else None
    print("line,theta,eps,N,kappa,nu,ratio,reduction" + (",mu,nu_mu,reduction_mu" if mu is not None else ""))
    for i, tables in results:
        for eps, table in tables.items():
            s = table.stats()
            row = f"{i},{s['theta']:.6f},{eps:g},{s['N']},{s['kappa']},{s['nu']},{s['ratio']:.4f},{s['reduction']:.3f}"
            if mu is not None:
                sm = table.stats(mu)
                row += f",{sm['kappa']},{sm['nu']},{sm['reduction']:.3f}"
            print(row)
    return 0


def cmd_beamform(args, pipe):
    frames = _read_frames(args.inputs)
    for f, p in zip(frames, args.inputs):
        _check_frame(f, pipe, p)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)

    def one(item):
        path, frame = item
        if args.method == "time":
            return path, pipe.time_line(frame, args.upsample), None
        table = pipe.table(frame.theta)
        row = dict(table.stats(), kappa=int(pipe.kappa.size))
        return path, pipe.freq_line(frame, table), row

    results = _fan_out(one, list(zip(args.inputs, frames)), args.threads)
    rows = []
    for path, line, row in results:
        write_frame(out / (Path(path).stem + f".{args.method}.snqb"), line)
        if row is not None:
            rows.append(row)
    if args.budget_report:
        if args.method != "freq":
            raise ConfigError("--budget-report applies to --method freq only")
        Path(args.budget_report).write_text(_budget_csv(rows, include_mu=False))
    return 0


def cmd_recover(args, pipe):
    frames = _read_frames(args.inputs)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    mu = pipe.mu(args.m, args.mu)

    def one(item):
        path, frame = item
        _check_frame(frame, pipe, path)
        table = pipe.table(frame.theta)
        line, info = pipe.recover(frame, args.method, mu, args.L, args.eps, table=table)
        info["nu_mu"] = table.stats(mu)["nu"]
        info["nrmse_vs_time"] = envelope_nrmse(line, pipe.time_line(frame))
        info["theta"] = frame.theta
        return path, line, info

    for path, line, info in _fan_out(one, list(zip(args.inputs, frames)), args.threads):
        stem = Path(path).stem + f".{args.method}"
        write_frame(out / f"{stem}.snqb", line)
        (out / f"{stem}.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_render(args, pipe):
    lines = []
    for p in args.inputs:
        try:
            lines.append(read_line(p))
        except OSError as exc:
            raise ConfigError(f"input: cannot read {p}: {exc.strerror}") from None
    image = render_lines(lines, pipe.geom.speed_of_sound, _parse_size(args.size), args.dr)
    if str(args.output).lower().endswith(".png"):
        write_png(args.output, image)
    else:
        write_pgm(args.output, image)
    return 0


def cmd_experiment(args, pipe):
    spec = load_experiment(args.spec, args.output)
    if args.cache_dir is not None:
        from dataclasses import replace
        spec = replace(spec, cache_dir=Path(args.cache_dir))
    report = run_experiment(spec, threads=args.threads)
    budget = report.get("budget", {})
    if budget:
        print(json.dumps(budget, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scan configuration file (default: packaged setup)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config entry, e.g. --set lines=16")
    common.add_argument("--threads", type=int, default=1, help="directions processed in parallel")
    common.add_argument("--cache-dir", help="kernel table cache directory")
    common.add_argument("--print-grid", action="store_true",
                        help="print the derived sampling grid and band sizes, then continue")

    parser = argparse.ArgumentParser(prog="fdbeam", parents=[common],
                                     description="Frequency-domain beamforming toolkit.")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("simulate", parents=[common], help="simulate channel frames")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--phantom", help="TOML scatterer file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reflectors", type=int, default=10)
    p.add_argument("--speckle", type=float, default=5.0, help="speckle density per mm")
    p.add_argument("--speckle-std", type=float, default=0.1)
    p.add_argument("--noise-snr", type=float, help="channel SNR in dB")
    p.add_argument("--line", type=int, action="append", help="direction index (repeatable)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("kernel", parents=[common], help="build or inspect kernel tables")
    p.add_argument("action", choices=("build", "stats"))
    p.add_argument("--line", type=int, action="append", help="direction index (repeatable)")
    p.add_argument("--eps", type=float, action="append", help="energy threshold (repeatable)")
    p.add_argument("--m", type=int, help="also report nu for |mu| = m central bins")
    p.add_argument("--mu", default="central", choices=("central", "uniform"))
    p.set_defaults(func=cmd_kernel)

    p = sub.add_parser("beamform", parents=[common], help="beamform channel frames")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--method", choices=("time", "freq"), required=True)
    p.add_argument("--upsample", type=int, default=1, help="time method interpolation factor")
    p.add_argument("--budget-report", help="write the per-line sample budget CSV here")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_beamform)

    p = sub.add_parser("recover", parents=[common], help="recover lines from a sub-band")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--method", choices=("omp", "l1"), required=True)
    p.add_argument("--mu", choices=("central", "uniform"), default="central")
    p.add_argument("--m", type=int, default=100)
    p.add_argument("--L", type=int, default=25)
    p.add_argument("--eps", type=float)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("render", parents=[common], help="scan convert lines to an image")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--dr", type=float, default=60.0, help="dynamic range, dB")
    p.add_argument("--size", default="512x512")
    p.add_argument("-o", "--output", required=True, help=".pgm or .png path")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("experiment", parents=[common], help="run an experiment file")
    p.add_argument("spec")
    p.add_argument("-o", "--output", help="output directory (overrides the file)")
    p.set_defaults(func=cmd_experiment)
    return parser


def _print_grid(pipe):
    g = pipe.grid
    print(f"N = {g.num_samples}  fs = {g.sample_rate:g} Hz  T = {g.duration:.6g} s  "
          f"period = {g.period:.6g} s")
    print(f"kappa = {pipe.kappa[0]}..{pipe.kappa[-1]} ({pipe.kappa.size} bins, "
          f"{pipe.kappa.size / g.num_samples:.4f} of N)  channel band = {pipe.band[0]}..{pipe.band[1]}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError(f"threads: must be at least 1, got {args.threads}")
        if args.command is None and not args.print_grid:
            parser.print_help()
            return 2
        pipe = None
        if args.command != "experiment" or args.print_grid:
            pipe = _pipeline(args)
        if args.print_grid:
            _print_grid(pipe)
        if args.command is None:
            return 0
        return args.func(args, pipe)
    except (ConfigError, StructuralError) as exc:
        print(f"fdbeam: error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"fdbeam: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
