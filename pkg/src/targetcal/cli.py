"""Command-line interface: simulate, refine, match, correct, calibrate, evaluate.

Exit status is 0 on success, 1 on bad input (flags, missing or malformed
files) and 2 on numerical failure.  Set TARGETCAL_LOG to debug, info,
warning or error for log output on stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import io
from .errors import InputError, NumericalError
from .matching import CHI2_P, CameraSet, count_outcomes, metrics_from_counts
from .eccentricity import MIN_CONVERGENCE_DEG, CorrectionReport
from .pipeline import (
    PipelineOptions,
    PipelineResult,
    calibrate_pipeline,
    correct_stage,
    initial_pairs,
    match_stage,
    refine_stage,
    stage_rng,
)
from .synthetic import SceneSpec, generate_scene, oblique_scene_spec, perturb_cameras, render_observations

log = logging.getLogger("targetcal")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(f"{self.prog}: {message}")


def _terms(v: str):
    if v == "auto":
        return v
    try:
        n = int(v)
    except ValueError:
        raise argparse.ArgumentTypeError("expected 'auto' or an integer") from None
    if not 0 <= n <= 5:
        raise argparse.ArgumentTypeError("term count must lie in 0..5")
    return n


def _fmt(x) -> str:
    return "null" if x is None else f"{x:.12g}"


def _options(args) -> PipelineOptions:
    return PipelineOptions(
        seed=args.seed,
        chi2_p=getattr(args, "chi2_p", CHI2_P),
        min_convergence_deg=getattr(args, "min_convergence_deg", MIN_CONVERGENCE_DEG),
        max_outer_iters=getattr(args, "max_outer_iters", 10),
        inlier_multiplier=getattr(args, "inlier_multiplier", 2.5),
        distortion_terms=getattr(args, "distortion_terms", "auto"),
        verify=not getattr(args, "no_verify", False),
    )


def _files(args) -> io.ProjectFiles:
    return io.ProjectFiles(Path(args.dir))


def _input(args, name: str) -> Path:
    p = getattr(args, f"{name}_file", None)
    return Path(p) if p else _files(args).path(name)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    base = oblique_scene_spec if args.oblique else SceneSpec
    kw = dict(n_targets=args.targets, n_cameras=args.cameras, noise=args.noise, spurious_rate=args.spurious_rate,
              mismatch_rate=args.mismatch_rate, feature_outlier_rate=args.feature_outlier_rate, seed=args.seed)
    if args.kappa is not None:
        kw["kappa"] = tuple(args.kappa)
    spec = base(**kw)
    truth = generate_scene(spec)
    rendered = render_observations(truth)
    K0, E0 = perturb_cameras(truth, args.seed)
    f = _files(args)
    io.write_cameras(f.path("truth"), truth.interior, truth.exteriors)
    io.write_cameras(f.path("cameras"), K0, E0)
    io.write_detections(f.path("detections"), rendered.detections)
    io.write_features(f.path("features"), rendered.features)
    io.write_labels(f.path("labels"), rendered.labels)
    n_det = sum(len(v) for v in rendered.detections.values())
    print(f"simulated {len(truth.exteriors)} images, {len(truth.circles)} targets, {n_det} ellipses, "
          f"{len(rendered.features)} feature tracks -> {f.root}")
    return 0


def cmd_refine(args) -> int:
    f = _files(args)
    interior, exteriors = io.read_cameras(_input(args, "cameras"))
    features = io.read_features(_input(args, "features"))
    opts = _options(args)
    ref = refine_stage(features, interior, exteriors, opts)
    io.write_cameras(f.path("refined"), ref.interior, {**exteriors, **ref.exteriors})
    io.write_pairs(f.path("pairs"), ref.pairs)
    print(f"refined {len(ref.exteriors)} cameras, {len(ref.pairs)} image pairs, "
          f"rmse {_fmt(ref.rmse_before)} -> {_fmt(ref.rmse_after)} px")
    return 0


def _refined_cameras(args):
    p = Path(args.cameras_file) if args.cameras_file else _files(args).path("refined")
    if not p.is_file():
        raise InputError(f"{p}: cameras file not found (run refine or pass --cameras)")
    return io.read_cameras(p)


def cmd_match(args) -> int:
    f = _files(args)
    interior, exteriors = _refined_cameras(args)
    detections = io.read_detections(_input(args, "detections"))
    pairs = io.read_pairs(_input(args, "pairs"))
    missing = sorted(set(detections) - set(exteriors))
    if missing:
        raise InputError(f"no camera for image(s) {missing}")
    cams = CameraSet(interior, exteriors)
    pairs = initial_pairs(cams, sorted(detections), pairs)
    pms, tracks = match_stage(detections, pairs, cams, _options(args))
    io.write_matches(f.path("matches"), pms)
    io.write_tracks(f.path("tracks"), tracks)
    print(f"matched {sum(len(p.matches) for p in pms)} ellipse pairs into {len(tracks)} tracks")
    return 0


def cmd_correct(args) -> int:
    f = _files(args)
    interior, exteriors = _refined_cameras(args)
    detections = io.read_detections(_input(args, "detections"))
    pairs = io.read_pairs(_input(args, "pairs"))
    tracks = io.read_tracks(_input(args, "tracks"), detections)
    cams = CameraSet(interior, exteriors)
    pairs = initial_pairs(cams, sorted(detections), pairs)
    report = CorrectionReport()
    out = correct_stage(tracks, pairs, cams, _options(args), stage_rng(args.seed, 1), report)
    io.write_tracks(f.path("tracks"), out)
    print(f"corrected {report.corrected} views ({report.no_partner} without partner, {report.failed} failed); "
          f"{len(out)} tracks kept")
    return 0


def report_records(result: PipelineResult, opts: PipelineOptions) -> list[dict]:
    sol = result.solution
    recs = [{"type": "options", **asdict(opts)}]
    recs.append({"type": "summary", "iterations": result.iterations, "converged": result.converged,
                 "tracks": len(result.tracks), "observations": int(np.sum(sol.observations.weight > 0)),
                 "rmse": sol.rmse, "variance_factor": sol.variance_factor, "redundancy": sol.redundancy,
                 "n_radial": sol.interior.n_radial, "decentering": sol.interior.decentering is not None})
    recs.append(io.interior_record(sol.interior))
    recs.append({"type": "interior_std", **{k: sol.interior_std[k] for k in sol.iop_names}})
    recs.append({"type": "iop_correlation", "names": sol.iop_names, "matrix": sol.iop_correlation})
    for h in result.history:
        recs.append({"type": "iteration", **asdict(h)})
    if result.selection is not None:
        for st in result.selection.trace:
            recs.append({"type": "selection", **asdict(st)})
    for i in sorted(sol.exteriors):
        recs.append(io.exterior_record(i, sol.exteriors[i]))
    r, vr = sol.radial_profile()
    for a, b in zip(r, vr):
        recs.append({"type": "profile", "r": a, "v_r": b})
    return recs


def write_profile_svg(path, r, vr, width: int = 640, height: int = 360) -> None:
    """Scatter of radial residual against radial distance."""
    r, vr = np.asarray(r, float), np.asarray(vr, float)
    pad = 40
    rmax = float(r.max()) if r.size and r.max() > 0 else 1.0
    vmax = float(np.abs(vr).max()) if vr.size and np.abs(vr).max() > 0 else 1.0
    sx = lambda x: pad + (width - 2 * pad) * x / rmax
    sy = lambda y: height / 2 - (height / 2 - pad) * y / vmax
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<line x1="{pad}" y1="{height / 2}" x2="{width - pad}" y2="{height / 2}" stroke="gray"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="gray"/>',
           f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle">r (px), max {rmax:.6g}</text>',
           f'<text x="8" y="{pad - 12}">v_r (px), max |v_r| {vmax:.6g}</text>']
    for a, b in zip(r, vr):
        out.append(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="1.5" fill="black"/>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def cmd_calibrate(args) -> int:
    f = _files(args)
    interior, exteriors = io.read_cameras(_input(args, "cameras"))
    detections = io.read_detections(_input(args, "detections"))
    features = io.read_features(_input(args, "features"))
    opts = _options(args)
    result = calibrate_pipeline(detections, interior, exteriors, opts, features=features)
    sol = result.solution
    io.write_cameras(f.path("calibrated"), sol.interior, sol.exteriors)
    io.write_tracks(f.path("tracks"), result.tracks)
    io.write_pairs(f.path("pairs"), result.pairs)
    io.write_jsonl(f.path("report"), "report", report_records(result, opts))
    if args.svg:
        write_profile_svg(args.svg, *sol.radial_profile())
    K = sol.interior
    print(f"calibrated in {result.iterations} iteration(s), converged {result.converged}, "
          f"rmse {_fmt(sol.rmse)} px")
    print(f"c {_fmt(K.c)}  xp {_fmt(K.xp)}  yp {_fmt(K.yp)}  radial [{', '.join(_fmt(k) for k in K.radial)}]")
    return 0


def cmd_evaluate(args) -> int:
    f = _files(args)
    detections = io.read_detections(_input(args, "detections"))
    labels = io.read_labels(_input(args, "labels"))
    tracks = io.read_tracks(_input(args, "tracks"), detections)
    c = count_outcomes(tracks, labels)
    m = metrics_from_counts(c.tp, c.fp, c.fn, c.tn)
    recs = [{"type": "matching", **m}]
    truth_p, cal_p = f.path("truth"), f.path("calibrated")
    if truth_p.is_file() and cal_p.is_file():
        T, _ = io.read_cameras(truth_p)
        K, _ = io.read_cameras(cal_p)
        n = max(T.n_radial, K.n_radial)
        kt, kk = T.with_terms(n).radial, K.with_terms(n).radial
        recs.append({"type": "interior_error", "c_rel": (K.c - T.c) / T.c, "xp": K.xp - T.xp, "yp": K.yp - T.yp,
                     "radial": [a - b for a, b in zip(kk, kt)], "n_radial_true": T.n_radial,
                     "n_radial_estimated": K.n_radial})
    io.write_jsonl(f.path("metrics"), "metrics", recs)
    print("precision {} recall {} accuracy {} f_measure {}".format(
        *(_fmt(m[k]) for k in ("precision", "recall", "accuracy", "f_measure"))))
    if len(recs) > 1:
        e = recs[1]
        print(f"c rel err {_fmt(e['c_rel'])}  xp err {_fmt(e['xp'])}  yp err {_fmt(e['yp'])}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="targetcal", description="Circular-target camera self-calibration")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("-d", "--dir", default=".", help="project directory (default: current)")
        if seed:
            sp.add_argument("--seed", type=int, default=0, help="seed for all randomized steps")

    def files(sp, *names):
        for n in names:
            sp.add_argument(f"--{n}", dest=f"{n}_file", metavar="PATH", help=f"{n} file (default: in --dir)")

    s = sub.add_parser("simulate", help="generate a synthetic project")
    common(s)
    s.add_argument("--targets", type=int, default=30)
    s.add_argument("--cameras", type=int, default=20)
    s.add_argument("--noise", type=float, default=0.0, help="ellipse center noise (px)")
    s.add_argument("--spurious-rate", type=float, default=0.0)
    s.add_argument("--mismatch-rate", type=float, default=0.0)
    s.add_argument("--feature-outlier-rate", type=float, default=0.0)
    s.add_argument("--kappa", type=float, nargs="*", help="radial terms for coordinates divided by c")
    s.add_argument("--oblique", action="store_true", help="few large oblique targets")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("refine", help="refine cameras from feature tracks")
    common(s)
    files(s, "cameras", "features")
    s.add_argument("--inlier-multiplier", type=float, default=2.5)
    s.add_argument("--distortion-terms", type=_terms, default="auto")
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("match", help="match ellipses across images")
    common(s)
    files(s, "cameras", "detections", "pairs")
    s.add_argument("--chi2-p", type=float, default=CHI2_P)
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("correct", help="correct target centers and verify tracks")
    common(s)
    files(s, "cameras", "detections", "pairs", "tracks")
    s.add_argument("--min-convergence-deg", type=float, default=MIN_CONVERGENCE_DEG)
    s.add_argument("--inlier-multiplier", type=float, default=2.5)
    s.add_argument("--no-verify", action="store_true", help="skip robust track verification")
    s.set_defaults(func=cmd_correct)

    s = sub.add_parser("calibrate", help="full self-calibration loop")
    common(s)
    files(s, "cameras", "detections", "features")
    s.add_argument("--chi2-p", type=float, default=CHI2_P)
    s.add_argument("--min-convergence-deg", type=float, default=MIN_CONVERGENCE_DEG)
    s.add_argument("--max-outer-iters", type=int, default=10)
    s.add_argument("--inlier-multiplier", type=float, default=2.5)
    s.add_argument("--distortion-terms", type=_terms, default="auto")
    s.add_argument("--no-verify", action="store_true", help="skip robust track verification")
    s.add_argument("--svg", metavar="PATH", help="write a radial residual scatter plot")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("evaluate", help="matching metrics against labels")
    common(s, seed=False)
    files(s, "detections", "labels", "tracks")
    s.set_defaults(func=cmd_evaluate)
    return p


def _setup_logging() -> None:
    name = os.environ.get("TARGETCAL_LOG", "warning").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
