"""Command-line interface: simulate, track, strain, metrics, render.

Exit codes: 0 success, 1 usage or validation error, 2 tracking finished
without meeting the step tolerance (outputs are still written).
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from contextlib import contextmanager

import numpy as np

from . import config as cfg
from . import fileio, metrics, phantom, render, solver
from .initializers import ParameterError, dp_initialize, ncc_track
from .strain import compute_strains, epr_map
from .types import DisplacementField, EprField, RfFrame, StrainTensorField, ValidationError

log = logging.getLogger("elasto")

EXIT_OK, EXIT_USAGE, EXIT_NOT_CONVERGED = 0, 1, 2

GEOMETRY_KEYS = ("axial_spacing_mm", "lateral_pitch_mm", "center_frequency_mhz",
                 "sampling_frequency_mhz")


class UsageError(Exception):
    pass


@contextmanager
def _thread_limit():
    """Cap BLAS/OpenMP pools at ELASTO_THREADS when set."""
    value = os.environ.get("ELASTO_THREADS")
    if not value:
        yield
        return
    try:
        limit = int(value)
        if limit < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"ELASTO_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=limit):
        yield


# --- helpers --------------------------------------------------------------

def _load_config(args) -> cfg.RunConfig:
    if args.config:
        return cfg.load(args.config, preset=args.preset)
    return cfg.default(args.preset)


def _resolve(arg_value, conf: cfg.RunConfig, key: str, required=True):
    path = arg_value or conf.io.get(key)
    if path is None:
        if required:
            raise UsageError(f"missing {key} path (argument or io.{key} in the config)")
        return None
    if not os.path.exists(path):
        raise UsageError(f"{key} path does not exist: {path}")
    return path


def _out_dir(args, conf: cfg.RunConfig) -> str:
    return args.out or conf.io.get("out") or "."


def _geometry_of(path, conf: cfg.RunConfig) -> dict:
    meta = fileio.sidecar_path(path)
    geo = conf.phantom.geometry()
    if os.path.exists(meta):
        side = fileio.read_sidecar(meta)
        geo.update({k: float(side[k]) for k in GEOMETRY_KEYS if k in side})
    return geo


def _save(path, obj, geometry=None) -> str:
    if isinstance(obj, RfFrame):
        fileio.save_frame(path, obj)
    else:
        fileio.save_field(path, obj)
        if geometry is not None:
            fileio.write_sidecar(fileio.sidecar_path(path), geometry)
    return path


def _fmt(value) -> str:
    return repr(float(value))


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def _component(obj, name: str | None):
    """Matrix selected from a loaded field; defaults to its first component."""
    options = {
        DisplacementField: ("axial", "lateral"),
        StrainTensorField: ("s_yy", "s_xx"),
        EprField: ("nu",),
        RfFrame: ("samples",),
    }[type(obj)]
    name = name or options[0]
    if name not in options:
        raise UsageError(f"component {name!r} not available; file holds {options}")
    return name, getattr(obj, name)


def _load_any(path):
    kind = fileio.peek_kind(path)
    if kind == "frame":
        return fileio.load_frame(path)
    return fileio.load_field(path, kind, validate=False)


# --- subcommands ----------------------------------------------------------

def cmd_simulate(args, conf: cfg.RunConfig) -> int:
    spec = conf.phantom
    if args.seed is not None:
        spec = phantom.PhantomSpec(**{**spec.__dict__, "rng_seed": args.seed})
    sim = phantom.simulate_pair(spec, conf.deformation)
    out = _out_dir(args, conf)
    os.makedirs(out, exist_ok=True)
    geo = spec.geometry()
    mask = sim["pre"].with_samples(sim["valid"].astype(np.float64))
    written = [
        _save(os.path.join(out, "pre.efr"), sim["pre"]),
        _save(os.path.join(out, "post.efr"), sim["post"]),
        _save(os.path.join(out, "truth_displacement.edf"), sim["displacement"], geo),
        _save(os.path.join(out, "truth_strain.esf"), sim["strains"], geo),
        _save(os.path.join(out, "truth_epr.epf"), sim["epr"], geo),
        _save(os.path.join(out, "valid.efr"), mask),
    ]
    for path in written:
        print(path)
    return EXIT_OK


def cmd_track(args, conf: cfg.RunConfig) -> int:
    method = cfg.normalize_method(args.method) if args.method else conf.method
    pre_path = _resolve(args.pre, conf, "pre")
    post_path = _resolve(args.post, conf, "post")
    pre = fileio.load_frame(pre_path)
    post = fileio.load_frame(post_path)
    if pre.shape != post.shape:
        raise UsageError(f"frame shapes differ: {pre.shape} vs {post.shape}")
    geo = pre.geometry()
    out = _out_dir(args, conf)

    if method in ("dp", "ncc"):
        if method == "dp":
            disp = dp_initialize(pre, post, conf.dp)
        else:
            disp = ncc_track(pre, post, conf.ncc)
        os.makedirs(out, exist_ok=True)
        print(_save(os.path.join(out, "displacement.edf"), disp, geo))
        return EXIT_OK

    result = solver.run_tracking(pre, post, method, conf.solver, dp_params=conf.dp,
                                 lsq=conf.strain)
    os.makedirs(out, exist_ok=True)
    print(_save(os.path.join(out, "displacement.edf"), result.displacement, geo))
    print(_save(os.path.join(out, "strain.esf"), result.strains, geo))
    print(_save(os.path.join(out, "epr.epf"), result.epr, geo))
    trace = os.path.join(out, "costs.csv")
    rows = [(k + 1, _fmt(b), _fmt(c), _fmt(s)) for k, (b, c, s) in
            enumerate(zip(result.costs_before, result.costs, result.step_sizes))]
    _write_csv(trace, ("iteration", "cost_before", "cost_after", "step"), rows)
    print(trace)
    if not result.converged:
        print(f"warning: {method} did not reach the step tolerance in "
              f"{result.iterations} iterations", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_strain(args, conf: cfg.RunConfig) -> int:
    path = _resolve(args.displacement, conf, "estimate")
    disp = fileio.load_field(path, "displacement")
    lsq = conf.strain.fitted(disp.shape)
    strains = compute_strains(disp, lsq)
    p = conf.solver
    epr = epr_map(strains, p.s_floor, (p.nu_min, p.nu_max), default=p.nu_init)
    geo = _geometry_of(path, conf)
    out = _out_dir(args, conf)
    os.makedirs(out, exist_ok=True)
    print(_save(os.path.join(out, "strain.esf"), strains, geo))
    print(_save(os.path.join(out, "epr.epf"), epr, geo))
    return EXIT_OK


def metrics_tables(estimate, truth, spec: cfg.MetricsSpec, spacings, label: str):
    """Per-window rows and the summary row for the metrics CSV files."""
    margin = spec.margin
    mask = np.zeros(estimate.shape, dtype=bool)
    mask[margin:estimate.shape[0] - margin, margin:estimate.shape[1] - margin] = True
    result = metrics.evaluate(estimate, spec.sweep, spacings, truth=truth,
                              mask=mask if truth is not None else None)
    rep = result.report
    n_t = len(result.target_windows)
    header = (["kind", "index", "row", "col", "rows", "cols", "mean", "std", "snr"]
              + [f"cnr_target{k}" for k in range(n_t)])
    rows = []
    for k, box in enumerate(result.background_windows):
        vals = metrics._values(np.asarray(estimate), box)
        cnrs = [_fmt(c) for c in rep.cnr_values[k * n_t:(k + 1) * n_t]]
        rows.append(["background", k, *box, _fmt(vals.mean()), _fmt(vals.std()),
                     _fmt(rep.snr_values[k]), *cnrs])
    for k, box in enumerate(result.target_windows):
        vals = metrics._values(np.asarray(estimate), box)
        rows.append(["target", k, *box, _fmt(vals.mean()), _fmt(vals.std()), ""]
                    + [""] * n_t)
    summary_header = ["component"]
    summary = [label]
    if rep.rmse is not None:
        summary_header += ["rmse", "psnr_db"]
        summary += [_fmt(rep.rmse), format_psnr(rep.psnr_db)]
    if spec.sweep is not None:
        for name, (mean, std, excluded), values in (("snr", rep.snr_summary, rep.snr_values),
                                                    ("cnr", rep.cnr_summary, rep.cnr_values)):
            summary_header += [f"{name}_mean", f"{name}_std", f"{name}_count",
                               f"{name}_excluded"]
            summary += [_fmt(mean), _fmt(std), len(values), excluded]
    return (header, rows), (summary_header, summary)


def format_psnr(value: float) -> str:
    return "inf" if np.isinf(value) else f"{value:.2f}"


def cmd_metrics(args, conf: cfg.RunConfig) -> int:
    est_path = _resolve(args.estimate, conf, "estimate")
    truth_path = _resolve(args.truth, conf, "truth", required=False)
    est_obj = _load_any(est_path)
    label, estimate = _component(est_obj, conf.metrics.component)
    truth = None
    if truth_path is not None:
        truth_obj = _load_any(truth_path)
        if type(truth_obj) is not type(est_obj):
            raise UsageError("estimate and truth files hold different kinds of field")
        truth = getattr(truth_obj, label)
        if truth.shape != estimate.shape:
            raise UsageError(f"shapes differ: {estimate.shape} vs {truth.shape}")
    geo = _geometry_of(est_path, conf)
    spacings = (geo["axial_spacing_mm"], geo["lateral_pitch_mm"])
    windows, summary = metrics_tables(estimate, truth, conf.metrics, spacings, label)
    out = _out_dir(args, conf)
    os.makedirs(out, exist_ok=True)
    win_path = os.path.join(out, "metrics_windows.csv")
    sum_path = os.path.join(out, "metrics_summary.csv")
    _write_csv(win_path, *windows)
    _write_csv(sum_path, summary[0], [summary[1]])
    for key, value in zip(*summary):
        print(f"{key}: {value}")
    return EXIT_OK


def cmd_render(args, conf: cfg.RunConfig) -> int:
    path = _resolve(args.field, conf, "field")
    obj = _load_any(path)
    _, values = _component(obj, conf.render.component)
    spec = conf.render
    ext = ".pgm" if spec.colormap == "gray" else ".ppm"
    target = args.out or conf.io.get("out") or "."
    if os.path.isdir(target) or target.endswith(os.sep) or not os.path.splitext(target)[1]:
        os.makedirs(target, exist_ok=True)
        stem = os.path.splitext(os.path.basename(path))[0]
        target = os.path.join(target, stem + ext)
    render.write_image(target, values, spec.colormap, spec.range)
    print(target)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "track": cmd_track,
    "strain": cmd_strain,
    "metrics": cmd_metrics,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--preset", choices=sorted(cfg.PRESETS),
                        help="parameter preset (overrides the config's preset)")
    common.add_argument("--out", help="output directory (render: file or directory)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="elasto", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="synthesize a phantom frame pair")
    p.add_argument("--seed", type=int, help="scatterer seed (overrides phantom.rng_seed)")

    p = sub.add_parser("track", parents=[common], help="estimate displacement")
    p.add_argument("pre", nargs="?")
    p.add_argument("post", nargs="?")
    p.add_argument("--method", help="soul, l1-soul, mechsoul, l1-mechsoul, ncc or dp")

    p = sub.add_parser("strain", parents=[common], help="strains and EPR from displacement")
    p.add_argument("displacement", nargs="?")

    p = sub.add_parser("metrics", parents=[common], help="RMSE/PSNR and SNR/CNR sweep")
    p.add_argument("estimate", nargs="?")
    p.add_argument("truth", nargs="?")

    p = sub.add_parser("render", parents=[common], help="write a PGM/PPM image")
    p.add_argument("field", nargs="?")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not hasattr(args, "seed"):
        args.seed = None
    try:
        conf = _load_config(args)
        if getattr(args, "method", None):
            cfg.normalize_method(args.method)
        with _thread_limit():
            return COMMANDS[args.command](args, conf)
    except (UsageError, ValidationError, ParameterError, fileio.FormatError,
            phantom.WarpError, solver.SolverError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
