"""Command-line entry point: ``dalab <verb> [<sub>] ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .config import ExperimentConfig, ModelSpec, theoremB_config, theoremC_config
from .cones import verify_invariance
from .foliation import (angle_scan, fidelity_horizon, integrate_leaf_patch, quasi_isometry_scan,
                        sample_leaf, shadowing_check, volume_growth_probe)
from .linear import build_An, build_theoremC_matrix, solve_spectrum, spectrum_row
from .lyapunov import OrbitPlan, center_sum, jacobian_integral_quadrature, theoremA_gap
from .pipeline import (build_model, csv_text, dumps_json, emit_plots, load_model, model_document,
                       run_theoremB_pipeline, run_theoremC_pipeline)
from .semiconj import load_field, plaque_mass_probe, solve_semiconjugacy


def _emit(text: str, out: str | None):
    if out:
        d = os.path.dirname(out)
        if d:
            os.makedirs(d, exist_ok=True)
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_model_build(args):
    if args.config:
        spec = ExperimentConfig.load(args.config).model
    elif args.spec:
        with open(args.spec) as fh:
            spec = ModelSpec(**json.load(fh))
    else:
        spec = ModelSpec(family=args.family, n=args.n, strength=args.strength, mix_c1=args.mix_c1,
                         bump=not args.no_bump, realization=args.realization)
    model = build_model(spec)
    _emit(dumps_json(model_document(spec, model)), args.out)


def cmd_spectrum(args):
    A = build_An(args.n) if args.family == "an" else build_theoremC_matrix()
    row = spectrum_row(solve_spectrum(A), args.n if args.family == "an" else None)
    _emit(csv_text(list(row), [list(row.values())]), args.out)


def cmd_cones(args):
    model, _ = load_model(args.model)
    rep = verify_invariance(model, splitting=args.splitting, samples=args.samples, seed=args.seed)
    _emit(dumps_json(rep), args.out)
    return 0 if rep["pass"] else 1


def cmd_lyapunov(args):
    model, _ = load_model(args.model)
    plan = OrbitPlan(orbits=args.orbits, T=args.T, burn_in=args.burn_in, seed=args.seed)
    rep = center_sum(model, plan, args.splitting)
    rows = [[i, *map(float, rep.exponents[i]), float(rep.center_birkhoff[i])] for i in range(rep.orbits)]
    header = ["orbit_id"] + [f"lambda{j + 1}" for j in range(model.dim)] + ["center_sum"]
    _emit(csv_text(header, rows), args.out)
    doc = {"report": rep.summary(), "theoremA": theoremA_gap(model, plan, args.splitting, report=rep)}
    if args.quadrature:
        doc["quadrature"] = jacobian_integral_quadrature(model, args.splitting, args.quadrature)
    if args.summary:
        _emit(dumps_json(doc), args.summary)


def cmd_leaf_probe(args):
    model, _ = load_model(args.model)
    z = np.asarray(args.base, dtype=float)
    patch = integrate_leaf_patch(model, z, args.edge, args.resolution)
    n_max = args.n_max if args.n_max is not None else fidelity_horizon(model)
    gap = args.gap
    if gap is None:
        gap = jacobian_integral_quadrature(model, "E", 6)["gap"]
    study = volume_growth_probe(model, patch, n_max, gap=gap, seed=args.seed)
    _emit(csv_text(["n", "measured", "upper", "lower", "containment"], [r.row() for r in study.reports]),
          args.out)
    if args.summary:
        s = study.summary()
        s.pop("rows")
        _emit(dumps_json(s), args.summary)


def cmd_leaf_geom(args):
    model, _ = load_model(args.model)
    z = np.asarray(args.base, dtype=float)
    patch = sample_leaf(model, z, args.diameter, args.count, seed=args.seed)
    qi = quasi_isometry_scan(patch, pairs=args.pairs, seed=args.seed)
    doc = {"patch": patch.summary(), "quasi_isometry": qi.to_dict(), "angle": angle_scan(patch),
           "shadowing": shadowing_check(patch)}
    _emit(dumps_json(doc), args.out)


def cmd_semiconj_solve(args):
    model, _ = load_model(args.model)
    h = solve_semiconjugacy(model, args.grid, args.tol)
    paths = h.write(args.out)
    sys.stdout.write(dumps_json({"field": paths[0], "header": paths[1], **h.header()}))


def cmd_semiconj_probe(args):
    model, _ = load_model(args.model)
    h = load_field(model, args.field)
    res = plaque_mass_probe(h, np.asarray(args.base, dtype=float), args.box, args.samples, args.bins,
                            args.plaques, args.seed)
    rows = [[r["plaque_id"], r["n_samples"], r["max_bin_mass"], r["tv_distance"]] for r in res["rows"]]
    _emit(csv_text(["plaque_id", "n_samples", "max_bin_mass", "tv_distance"], rows), args.out)


def cmd_pipeline(args):
    cfg = ExperimentConfig.load(args.config) if args.config else (
        theoremB_config() if args.which == "thmB" else theoremC_config())
    if args.seed is not None:
        cfg.seed = args.seed
    out = args.out or cfg.output_dir
    run = run_theoremB_pipeline if args.which == "thmB" else run_theoremC_pipeline
    summary = run(cfg, out)
    sys.stdout.write(dumps_json(summary))
    return 0 if summary.get("failed_stage") is None else 2


def cmd_plots(args):
    res = emit_plots(args.summaries, args.out)
    sys.stdout.write(dumps_json(res))
    return 0 if not res["missing"] else 1


def cmd_config(args):
    cfg = theoremC_config() if args.which == "thmC" else theoremB_config()
    _emit(cfg.dumps(), args.out)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dalab", description="DA diffeomorphisms of T^4: models, cones, "
                                 "Lyapunov gaps, centre-leaf geometry and semiconjugacies.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    def out_arg(p, required=False):
        p.add_argument("--out", required=required, help="output file (default stdout)")

    # model build
    p = sub.add_parser("model", help="model files")
    msub = p.add_subparsers(dest="sub", required=True)
    b = msub.add_parser("build", help="build a model and write its JSON description")
    b.add_argument("--config", help="experiment config; its model section is used")
    b.add_argument("--spec", help="model description JSON (ModelSpec fields)")
    b.add_argument("--family", choices=["an", "thmC"], default="an")
    b.add_argument("--n", type=int, default=100)
    b.add_argument("--strength", type=float, default=0.042)
    b.add_argument("--mix-c1", type=float, default=0.0)
    b.add_argument("--no-bump", action="store_true")
    b.add_argument("--realization", choices=["twist", "flow"], default="twist")
    out_arg(b)
    b.set_defaults(func=cmd_model_build)

    p = sub.add_parser("spectrum", help="CSV row of eigenvalues and domination ratios")
    p.add_argument("--family", choices=["an", "thmC"], default="an")
    p.add_argument("--n", type=int, default=100)
    out_arg(p)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("cones", help="cone-field checks")
    csub = p.add_subparsers(dest="sub", required=True)
    c = csub.add_parser("verify")
    c.add_argument("--model", required=True)
    c.add_argument("--splitting", choices=["E", "F"], default="E")
    c.add_argument("--samples", type=int, default=10_000)
    c.add_argument("--seed", type=int, default=0)
    out_arg(c)
    c.set_defaults(func=cmd_cones)

    p = sub.add_parser("lyapunov", help="centre sum, gap and verdict")
    p.add_argument("--model", required=True)
    p.add_argument("--orbits", type=int, default=32)
    p.add_argument("--T", type=int, default=10_000)
    p.add_argument("--burn-in", type=int, default=1000)
    p.add_argument("--splitting", choices=["E", "F"], default="E")
    p.add_argument("--quadrature", type=int, default=0, help="grid resolution (0 = skip)")
    p.add_argument("--summary", help="JSON file for the gap and verdict")
    p.add_argument("--seed", type=int, default=0)
    out_arg(p)
    p.set_defaults(func=cmd_lyapunov)

    p = sub.add_parser("leaf", help="centre-leaf patches")
    lsub = p.add_subparsers(dest="sub", required=True)
    lp = lsub.add_parser("probe", help="volume growth CSV")
    lp.add_argument("--model", required=True)
    lp.add_argument("--base", type=float, nargs=4, default=[0.3, 0.1, 0.7, 0.2])
    lp.add_argument("--edge", type=float, default=10.0)
    lp.add_argument("--resolution", "--res", type=int, default=32)
    lp.add_argument("--n-max", "--iters", type=int)
    lp.add_argument("--gap", type=float)
    lp.add_argument("--summary", help="JSON file for constants and verdicts")
    lp.add_argument("--seed", type=int, default=0)
    out_arg(lp)
    lp.set_defaults(func=cmd_leaf_probe)
    lg = lsub.add_parser("geom", help="R_c, Q, angle and projection table")
    lg.add_argument("--model", required=True)
    lg.add_argument("--base", type=float, nargs=4, default=[0.3, 0.1, 0.7, 0.2])
    lg.add_argument("--diameter", type=float, default=50.0)
    lg.add_argument("--count", type=int, default=10_000)
    lg.add_argument("--pairs", type=int, default=24)
    lg.add_argument("--seed", type=int, default=0)
    out_arg(lg)
    lg.set_defaults(func=cmd_leaf_geom)

    p = sub.add_parser("semiconj", help="semiconjugacy to the linear part")
    ssub = p.add_subparsers(dest="sub", required=True)
    s = ssub.add_parser("solve")
    s.add_argument("--model", required=True)
    s.add_argument("--grid", type=int, default=32)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--out", required=True, help="binary field path; header goes to <out>.json")
    s.set_defaults(func=cmd_semiconj_solve)
    s = ssub.add_parser("probe")
    s.add_argument("--model", required=True)
    s.add_argument("--field", required=True)
    s.add_argument("--base", type=float, nargs=4, default=[0.3, 0.1, 0.7, 0.2])
    s.add_argument("--box", type=float, default=0.5)
    s.add_argument("--samples", type=int, default=200_000)
    s.add_argument("--bins", type=int, default=4)
    s.add_argument("--plaques", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    out_arg(s)
    s.set_defaults(func=cmd_semiconj_probe)

    p = sub.add_parser("pipeline", help="end-to-end runs")
    psub = p.add_subparsers(dest="which", required=True)
    for which in ("thmB", "thmC"):
        q = psub.add_parser(which)
        q.add_argument("--config")
        q.add_argument("--seed", type=int)
        q.add_argument("--out", help="output directory (default from config)")
        q.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("plots", help="plot-data files from pipeline summaries")
    p.add_argument("summaries", nargs="*")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plots)

    p = sub.add_parser("config", help="write a default configuration")
    p.add_argument("which", choices=["thmB", "thmC"])
    out_arg(p)
    p.set_defaults(func=cmd_config)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    rc = args.func(args)
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
