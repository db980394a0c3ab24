"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
from scipy import stats

from . import kvtext
from .config import ConfigError, PipelineConfig
from .identify import AXES
from .mlmc import MomentEstimates, run
from .pipeline import RealizationModel, identify_volume, load_model, save_model, square_lattice
from .qoi import ElasticitySetup, LevelSpec, coarsen, evaluate_qoi
from .voxelgrid import (
    LayoutError,
    UnitCellLayout,
    VolumeFormatError,
    extract_cells,
    load_volume,
    porosity,
    save_volume,
    volume_stats,
)

log = logging.getLogger("latticerf")

USAGE_ERRORS = (ConfigError, LayoutError, VolumeFormatError, kvtext.KVSyntaxError)
MASS_LEVELS = (0.90, 0.95, 0.98, 0.99)


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _load_input(cfg: PipelineConfig):
    meta, raw = cfg.path(cfg.input.meta), cfg.path(cfg.input.raw)
    for p in (meta, raw):
        if not cfg.input.meta or not p.exists():
            raise ConfigError(f"input volume file not found: {p}")
    return load_volume(meta, raw)


def cmd_identify(cfg: PipelineConfig) -> int:
    grid = _load_input(cfg)
    model, layout = identify_volume(grid, cfg.cell_dims, cfg.n_lags, cfg.fit_mode)
    out = cfg.out
    save_model(out, model, layout, grid.spacing)
    for a, s in sorted(model.samples.items()):
        s.write_csv(out / f"cov_{AXES[a]}.csv")
    _dump_json(out / "fits.json", {
        "config_hash": cfg.digest(),
        "n_cells": layout.n_cells,
        "fits": [model.fits[a].to_dict() for a in sorted(model.fits)],
    })
    for a in sorted(model.fits):
        f = model.fits[a]
        print(f"axis {AXES[a]}: l = {f.length:.4g} +/- {f.length_std:.2g}, nu = {f.nu:.4g} +/- {f.nu_std:.2g}"
              f"{'  [ill-conditioned]' if f.ill_conditioned else ''}")
    return 0


def _histogram_rows(values, bins):
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return []
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        lo, hi = lo - 0.5 / max(bins, 1), hi + 0.5 / max(bins, 1)
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    width = edges[1] - edges[0]
    return [
        {"bin_lo": repr(float(edges[i])), "bin_hi": repr(float(edges[i + 1])), "count": int(counts[i]),
         "density": repr(float(counts[i] / (values.size * width)))}
        for i in range(bins)
    ]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _write_csv(path: Path, rows: list[dict], fieldnames) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_generate(cfg: PipelineConfig) -> int:
    stored = load_model(cfg.out)
    gen = stored.generator(cfg.generate.seed, cfg.generate.grid_dims)
    out = cfg.out / "realizations"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(cfg.generate.start_index, cfg.generate.start_index + cfg.generate.count):
        grid = gen(i)
        name = ""
        if cfg.generate.save_volumes:
            stem = f"realization_{i:06d}"
            save_volume(grid, out / f"{stem}.txt", out / f"{stem}.raw")
            name = f"{stem}.raw"
        rows.append({"index": i, "seed": cfg.generate.seed, "nugget": repr(gen.state.nugget),
                     "porosity": repr(porosity(grid)), "file": name})
    _write_csv(out / "manifest.csv", rows, ["index", "seed", "nugget", "porosity", "file"])
    phi = np.array([float(r["porosity"]) for r in rows])
    _write_csv(out / "porosity_hist.csv", _histogram_rows(phi, cfg.generate.hist_bins),
               ["bin_lo", "bin_hi", "count", "density"])
    summary = {
        "config_hash": cfg.digest(),
        "seed": cfg.generate.seed,
        "count": len(rows),
        "grid_dims": list(gen.layout.grid_dims),
        "nuggets": list(gen.state.nuggets),
        "porosity_mean": float(phi.mean()) if phi.size else None,
        "porosity_std": float(phi.std(ddof=1)) if phi.size > 1 else None,
    }
    _dump_json(out / "summary.json", summary)
    if phi.size:
        print(f"{len(rows)} realizations, porosity {phi.mean():.4f} +/- {summary['porosity_std'] or 0:.4f}")
    return 0


def normal_fit_rows(mean: float, std: float):
    rows = []
    for mass in MASS_LEVELS:
        if std > 0:
            lo, hi = stats.norm.interval(mass, loc=mean, scale=std)
        else:
            lo = hi = mean
        rows.append({"mass": mass, "lo": repr(float(lo)), "hi": repr(float(hi))})
    return rows


def _results_record(est: MomentEstimates, cfg: PipelineConfig) -> dict:
    def clean(v):
        return None if isinstance(v, float) and not math.isfinite(v) else v

    return {
        "config_hash": cfg.digest(),
        "qoi": cfg.qoi.kind,
        "rel_tol": cfg.mlmc.rel_tol,
        "moments": {k: clean(getattr(est, k)) for k in ("mean", "variance", "std", "skewness", "kurtosis")},
        "mse": est.mse,
        "relative_error": {k: clean(v) for k, v in est.relative_errors().items()},
        "levels": [{k: clean(v) for k, v in row.items()} for row in est.levels],
        "flags": est.flags,
        "partial": bool(est.flags.get("budget_exhausted")),
    }


def cmd_uq(cfg: PipelineConfig) -> int:
    stored = load_model(cfg.out)
    gen = stored.generator(cfg.generate.seed, cfg.generate.grid_dims)
    setup = cfg.qoi.setup() if cfg.qoi.kind == "youngs_modulus" else None
    model = RealizationModel(gen, cfg.qoi.kind, cfg.qoi.levels, setup)
    est = run(model, cfg.mlmc.config())
    rec = _results_record(est, cfg)
    out = cfg.out / "uq"
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "results.json", rec)
    _write_csv(out / "levels.csv", [{k: _fmt(v) for k, v in row.items()} for row in est.levels], list(est.levels[0]))
    _write_csv(out / "normal_fit.csv", normal_fit_rows(est.mean, est.std), ["mass", "lo", "hi"])
    print(f"mean {est.mean:.6g}  std {est.std:.6g}  skewness {est.skewness:.3g}  kurtosis {est.kurtosis:.3g}")
    print("levels N = " + ", ".join(str(r["N"]) for r in est.levels))
    if rec["partial"]:
        print("warning: sample budget exhausted, estimates are partial", file=sys.stderr)
        return 1
    return 0


def cmd_solve(args) -> int:
    grid = load_volume(args.meta, args.raw)
    if args.config:
        setup = PipelineConfig.load(args.config).qoi.setup()
    else:
        setup = ElasticitySetup(E_material=args.E, poisson=args.poisson, load_axis=args.axis)
    g = coarsen(grid, args.factor)
    level = LevelSpec(0, 1, g.dims)
    value, seconds = evaluate_qoi(g, setup, level, args.kind)
    print(json.dumps({"kind": args.kind, "value": value, "factor": args.factor, "dims": list(g.dims),
                      "seconds": seconds}))
    return 0


def cmd_inspect(args) -> int:
    grid = load_volume(args.meta, args.raw)
    info = volume_stats(grid)
    if args.cell_dims:
        layout = UnitCellLayout(tuple(args.cell_dims), grid.dims)
        cells = extract_cells(grid, layout)
        per_cell = 1.0 - cells.reshape(layout.n_cells, -1).mean(axis=1)
        info["n_cells"] = layout.n_cells
        info["cell_porosity_mean"] = float(per_cell.mean())
        info["cell_porosity_std"] = float(per_cell.std())
    print(json.dumps(info, indent=2))
    return 0


def cmd_synth(args) -> int:
    grid = square_lattice(counts=(args.counts[0], args.counts[1], 1), cell=args.cell, strut=args.strut,
                          depth=args.depth, seed=args.seed)
    save_volume(grid, args.meta, args.raw)
    print(json.dumps(volume_stats(grid)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latticerf", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("identify", "learn thresholds and correlation parameters"),
                           ("generate", "write realizations, manifest and porosity histogram"),
                           ("uq", "multilevel Monte Carlo moments of the QoI")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("config", help="pipeline config file")

    sp = sub.add_parser("solve", help="QoI of a single volume")
    sp.add_argument("meta")
    sp.add_argument("raw")
    sp.add_argument("--kind", choices=["porosity", "youngs_modulus"], default="youngs_modulus")
    sp.add_argument("--config", help="take the elasticity setup from a pipeline config")
    sp.add_argument("--E", type=float, default=1.0)
    sp.add_argument("--poisson", type=float, default=0.3)
    sp.add_argument("--axis", type=int, choices=[0, 1, 2], default=0)
    sp.add_argument("--factor", type=int, default=1, help="coarsening factor (power of two)")

    sp = sub.add_parser("inspect", help="volume statistics")
    sp.add_argument("meta")
    sp.add_argument("raw")
    sp.add_argument("--cell-dims", type=int, nargs=3)

    sp = sub.add_parser("synth", help="write a synthetic square-lattice volume")
    sp.add_argument("meta")
    sp.add_argument("raw")
    sp.add_argument("--counts", type=int, nargs=2, default=[10, 10])
    sp.add_argument("--cell", type=int, default=40)
    sp.add_argument("--strut", type=float, default=6.5)
    sp.add_argument("--depth", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command in ("identify", "generate", "uq"):
            cfg = PipelineConfig.load(args.config)
            return {"identify": cmd_identify, "generate": cmd_generate, "uq": cmd_uq}[args.command](cfg)
        return {"solve": cmd_solve, "inspect": cmd_inspect, "synth": cmd_synth}[args.command](args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
