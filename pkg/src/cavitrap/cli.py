"""Command line interface: ``cavitrap run|preset|probe``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import re
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, StudyConfig, expand_cases, load_config
from .runner import (PRESET_WALL_TIME, PRESETS, BaselineCache, default_workers, preset, run_configs,
                     write_outputs, WORKERS_ENV)
from .solver import line_probe, load_field

_UNITS = {"m": 1.0, "mm": 1e-3, "um": 1e-6, "nm": 1e-9}


def parse_length(text: str, default_unit: str = "um") -> float:
    """'25', '25um', '0.025mm' or '2.5e-5m'; bare numbers use ``default_unit``."""
    m = re.fullmatch(r"\s*([-+0-9.eE]+)\s*([a-z]*)\s*", text)
    if not m or (m.group(2) and m.group(2) not in _UNITS):
        raise argparse.ArgumentTypeError(f"bad length {text!r}; use e.g. 25um or 0.025mm")
    try:
        v = float(m.group(1)) * _UNITS[m.group(2) or default_unit]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad length {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError("length must be positive")
    return v


def parse_line_spec(text: str) -> tuple[np.ndarray, np.ndarray, int]:
    """'x0,y0,z0:x1,y1,z1:n' in metres."""
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("line spec must be 'x0,y0,z0:x1,y1,z1:n'")
    try:
        a = np.array([float(v) for v in parts[0].split(",")])
        b = np.array([float(v) for v in parts[1].split(",")])
        n = int(parts[2])
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad line spec {text!r}") from None
    if a.size != 3 or b.size != 3 or n < 2:
        raise argparse.ArgumentTypeError("line spec needs two 3-vectors and n >= 2")
    return a, b, n


def _override(cfg: StudyConfig, args) -> StudyConfig:
    grid, solver = cfg.grid, cfg.solver
    if args.resolution is not None:
        grid = dataclasses.replace(grid, spacing=args.resolution)
    if args.tolerance is not None:
        solver = dataclasses.replace(solver, tolerance=args.tolerance)
    out = cfg.output
    if args.out is not None:
        out = dataclasses.replace(out, dir=str(args.out))
    return dataclasses.replace(cfg, grid=grid, solver=solver, output=out,
                               deterministic=cfg.deterministic or args.deterministic)


def _run(configs: list[StudyConfig], args, name: str) -> int:
    configs = [_override(c, args) for c in configs]
    for c in configs:
        for note in c.notes:
            print(f"note: {note}", file=sys.stderr)
    cases = []
    for c in configs:
        cases.extend(expand_cases(c))
    out_dir = Path(args.out or configs[0].output.dir)
    result = run_configs(cases, workers=args.workers, cache=BaselineCache(), out_dir=out_dir)
    deterministic = all(c.deterministic for c in configs)
    paths = write_outputs(result, out_dir, deterministic, name)
    for case in result.cases:
        status = "ok" if case.ok else f"FAILED ({case.error})"
        print(f"[{case.index:3d}] {case.label}: {status}")
    print(f"wrote {paths['csv']} and {len(paths['reports'])} case reports")
    return 0 if not result.failures else 2


def _probe(args) -> int:
    sol = load_field(args.dump)
    try:
        a, b, n = parse_line_spec(args.line)
    except argparse.ArgumentTypeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    rows = line_probe(sol, a, b, n)
    header = "x_m,y_m,z_m,Ex_V_per_m,Ey_V_per_m,Ez_V_per_m,absE_V_per_m"
    text = header + "\n" + "\n".join(",".join(repr(float(v)) for v in r) for r in rows) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cavitrap", description="Ion-trap fields with dielectric cavity mirrors.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--resolution", type=parse_length, default=None,
                        help="core grid spacing (bare numbers in um), e.g. 25 or 50um")
        sp.add_argument("--tolerance", type=float, default=None, help="relative residual tolerance of the solver")
        sp.add_argument("--workers", type=int, default=None,
                        help=f"parallel cases (default ${WORKERS_ENV} or 1, now {default_workers()})")
        sp.add_argument("--deterministic", action="store_true", help="omit timings so reruns are byte-identical")
        sp.add_argument("--out", type=Path, default=None, help="output directory")

    r = sub.add_parser("run", help="run a study config (TOML)")
    r.add_argument("config", type=Path)
    common(r)
    pr = sub.add_parser("preset", help="run a named study: " + ", ".join(f"{k} (~{v})" for k, v in PRESET_WALL_TIME.items()))
    pr.add_argument("name", choices=PRESETS)
    common(pr)
    pb = sub.add_parser("probe", help="sample E along a line of a field dump")
    pb.add_argument("dump", type=Path)
    pb.add_argument("line", help="x0,y0,z0:x1,y1,z1:n in metres")
    pb.add_argument("--out", type=Path, default=None, help="CSV file (default stdout)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            return _run([cfg], args, args.config.stem)
        if args.command == "preset":
            return _run(preset(args.name), args, args.name)
        return _probe(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
