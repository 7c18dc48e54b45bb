"""Command-line interface.

Subcommands: ``simulate``, ``build-prior``, ``align``, ``evaluate``,
``select-k`` and ``diagnose``. Settings resolve as flags > ``--config`` JSON >
built-in defaults; the fully resolved settings are written to
``resolved-config.json`` in the output directory and can be fed back through
``--config`` to replay a run.

Exit codes: 0 success, 1 invalid input or usage, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .align import ENGINES, AlignmentConfig, run_engine
from .data import PromisesError, ValidationError, load_coords, load_manifest, load_matrix, save_manifest, save_matrix
from .diagnostics import loading_locality, order_sensitivity, reference_rotation_sensitivity
from .evaluation import Alignment, SegmentSpec, loso_linear_classify, segment_correlation_classify
from .modelsel import SelectionError, parse_grid, select_k
from .prior import LocationMatrix, build_location_matrix, check_full_rank
from .simulate import SynthSpec, derive_rng, synth_cohort

logger = logging.getLogger("promises")

THREADS_ENV = "PROMISES_THREADS"

# settings that never influence numeric output and are left out of resolved-config.json
_RUNTIME_KEYS = {"out", "threads", "config", "verbose", "command", "func"}

_ALIGN_DEFAULTS = {
    "engine": "promises",
    "k": 1.0,
    "prior": "euclidean",
    "prior_file": None,
    "units": None,
    "tol": 1e-6,
    "max_iter": 30,
    "center": False,
    "scale": False,
    "format": "dmat",
    "seed": 0,
}

DEFAULTS = {
    "simulate": {
        "m": 6, "t": 40, "v": 27, "grid": "3,3,3", "noise": 1.0, "n_classes": None,
        "rotation_locality": 1.0, "class_strength": 1.0, "seed": 0, "format": "dmat",
    },
    "build-prior": {"coords": None, "manifest": None, "kind": "euclidean", "units": None, "format": "dmat"},
    "align": dict(_ALIGN_DEFAULTS, order=None),
    "evaluate": dict(_ALIGN_DEFAULTS, protocol="linear", k_grid=None, ridge=1.0, segment_length=6,
                     stride=6, split=None),
    "select-k": dict(_ALIGN_DEFAULTS, grid="1:100", evaluator="linear", ridge=1.0, segment_length=6,
                     stride=6, split=None),
    "diagnose": dict(_ALIGN_DEFAULTS, engine="hyper", n=20, metric="output-distance", voxel_sample=50,
                     ridge=1.0),
}


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_common(p, manifest=True):
    S = argparse.SUPPRESS
    if manifest:
        p.add_argument("--manifest", required=True, help="cohort manifest JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file of settings (overridden by flags)")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads for per-subject solves (fallback: ${THREADS_ENV})")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--format", choices=["dmat", "csv"], default=S, help="matrix output format")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_alignment(p, engines=ENGINES):
    S = argparse.SUPPRESS
    p.add_argument("--engine", choices=engines, default=S)
    p.add_argument("--k", type=float, default=S, help="concentration parameter")
    p.add_argument("--prior", choices=["euclidean", "identity", "file"], default=S)
    p.add_argument("--prior-file", dest="prior_file", default=S)
    p.add_argument("--units", choices=["voxel-index", "millimeter"], default=S)
    p.add_argument("--tol", type=float, default=S)
    p.add_argument("--max-iter", dest="max_iter", type=int, default=S)
    p.add_argument("--center", action="store_const", const=True, default=S, help="center columns first")
    p.add_argument("--scale", action="store_const", const=True, default=S, help="scale to unit Frobenius norm first")


def _add_segment(p):
    S = argparse.SUPPRESS
    p.add_argument("--ridge", type=float, default=S, help="ridge penalty of the linear classifier")
    p.add_argument("--segment-length", dest="segment_length", type=int, default=S)
    p.add_argument("--stride", type=int, default=S)
    p.add_argument("--split", default=S, help="train/test rows as 'a:b,c:d' (default: halves)")


def build_parser():
    S = argparse.SUPPRESS
    parser = _Parser(prog="promises", description="Procrustes functional alignment with a von Mises-Fisher prior")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic cohort with ground truth")
    _add_common(p, manifest=False)
    for name, typ in (("m", int), ("t", int), ("v", int), ("noise", float), ("n-classes", int),
                      ("rotation-locality", float), ("class-strength", float)):
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=typ, default=S)
    p.add_argument("--grid", default=S, help="grid dims 'nx,ny,nz' (product must equal v)")

    p = sub.add_parser("build-prior", help="build the location matrix F")
    _add_common(p, manifest=False)
    p.add_argument("--coords", default=S)
    p.add_argument("--manifest", default=S)
    p.add_argument("--kind", choices=["euclidean", "identity"], default=S)
    p.add_argument("--units", choices=["voxel-index", "millimeter"], default=S)

    p = sub.add_parser("align", help="align a cohort")
    _add_common(p)
    _add_alignment(p)
    p.add_argument("--order", default=S, help="subject order for hyper: comma list of indices or 'random'")

    p = sub.add_parser("evaluate", help="leave-one-subject-out evaluation")
    _add_common(p)
    _add_alignment(p, ENGINES + ("none",))
    p.add_argument("--protocol", choices=["linear", "segment"], default=S)
    p.add_argument("--k-grid", dest="k_grid", default=S, help="select k per fold from this grid (nested CV)")
    _add_segment(p)

    p = sub.add_parser("select-k", help="choose k by LOSO cross-validation")
    _add_common(p)
    _add_alignment(p)
    p.add_argument("--grid", default=S, help="'1:100', 'lo:hi:step' or comma list")
    p.add_argument("--evaluator", choices=["linear", "segment"], default=S)
    _add_segment(p)

    p = sub.add_parser("diagnose", help="uniqueness and locality diagnostics")
    p.add_argument("kind", choices=["order-sensitivity", "rotation-sensitivity", "locality"])
    _add_common(p)
    _add_alignment(p)
    p.add_argument("--n", type=int, default=S, help="number of trials")
    p.add_argument("--metric", choices=["output-distance", "reference-distance", "accuracy"], default=S)
    p.add_argument("--voxel-sample", dest="voxel_sample", type=int, default=S)
    p.add_argument("--ridge", type=float, default=S)
    return parser


def resolve_settings(args):
    """Merge defaults, the JSON config file and explicit flags (in rising priority)."""
    cmd = args.command
    settings = dict(DEFAULTS[cmd])
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from None
        unknown = set(doc) - set(settings) - {"manifest", "command", "kind", "version"}
        if unknown:
            raise ValidationError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        settings.update({k: v for k, v in doc.items() if k not in ("command", "version")})
    settings.update({k: v for k, v in vars(args).items() if k not in ("config", "func")})
    threads = args.threads if args.threads is not None else os.environ.get(THREADS_ENV, 1)
    try:
        settings["threads"] = int(threads)
    except ValueError:
        raise ValidationError(f"{THREADS_ENV} must be an integer, got {threads!r}") from None
    return settings


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _out_dir(s):
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _write_rows(path, rows, fields):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


def _write_resolved(out, s):
    doc = {k: v for k, v in s.items() if k not in _RUNTIME_KEYS}
    doc["command"] = s["command"]
    doc["version"] = __version__
    _write_json(out / "resolved-config.json", doc)


def _alignment_config(s):
    return AlignmentConfig(
        k=float(s["k"]), max_iter=int(s["max_iter"]), tol=float(s["tol"]),
        center_columns=bool(s["center"]), scale_unit_frobenius=bool(s["scale"]),
        reduced=s["engine"] == "promises-efficient", threads=int(s["threads"]),
    )


def _load_cohort(s):
    return load_manifest(s["manifest"], units=s.get("units"))


def _prior_for(s, cohort, needed=None):
    """Location matrix for the resolved settings, or None when unused."""
    needs = s["engine"] in ("promises", "promises-efficient", "opp") and float(s["k"]) > 0
    if needed is not None:
        needs = needed
    kind = s["prior"]
    if kind == "file":
        if not s.get("prior_file"):
            raise ValidationError("--prior file requires --prior-file")
        return LocationMatrix.custom(load_matrix(s["prior_file"]))
    if kind == "identity":
        return LocationMatrix.identity(cohort.v)
    if cohort.coords is None:
        if needs:
            raise ValidationError("--prior euclidean needs voxel coordinates in the manifest")
        return None
    return build_location_matrix(cohort.coords)


def _parse_split(text):
    if text is None:
        return None
    try:
        a, b = text.split(",")
        return tuple(tuple(int(x) for x in part.split(":")) for part in (a, b))
    except ValueError:
        raise ValidationError(f"split must look like 'a:b,c:d', got {text!r}") from None


def _parse_order(text, m, seed):
    if text is None:
        return None
    if text == "random":
        return [int(i) for i in derive_rng(seed, 0).permutation(m)]
    try:
        return [int(i) for i in str(text).split(",")]
    except ValueError:
        raise ValidationError(f"order must be 'random' or a comma list of indices, got {text!r}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(s):
    out = _out_dir(s)
    grid = tuple(int(x) for x in str(s["grid"]).split(","))
    spec = SynthSpec(m=int(s["m"]), t=int(s["t"]), v=int(s["v"]), noise_sigma=float(s["noise"]), grid_dims=grid,
                     n_classes=s["n_classes"], rotation_locality=float(s["rotation_locality"]),
                     class_strength=float(s["class_strength"]), seed=int(s["seed"]))
    sc = synth_cohort(spec)
    save_manifest(sc.cohort, out, s["format"])
    truth = out / "truth"
    (truth / "transforms").mkdir(parents=True, exist_ok=True)
    save_matrix(sc.true_reference, truth / f"reference.{s['format']}")
    for tr in sc.true_transforms:
        save_matrix(tr.values, truth / "transforms" / f"{tr.subject_id}.{s['format']}")
    _write_json(out / "report.json", {"m": spec.m, "t": spec.t, "v": spec.v, "grid_dims": list(spec.grid_dims)})
    _write_resolved(out, s)


def cmd_build_prior(s):
    out = _out_dir(s)
    if s.get("coords"):
        coords = load_coords(s["coords"], s.get("units") or "voxel-index")
    elif s.get("manifest"):
        coords = load_manifest(s["manifest"], units=s.get("units")).coords
    else:
        raise ValidationError("build-prior needs --coords or --manifest")
    if coords is None:
        raise ValidationError("manifest has no coordinates")
    f = build_location_matrix(coords, "identity" if s["kind"] == "identity" else "euclidean-similarity")
    save_matrix(f.values, out / f"prior.{s['format']}")
    sv = np.linalg.svd(f.values, compute_uv=False)
    _write_json(out / "report.json", {"kind": f.kind, "v": f.v, "full_rank": check_full_rank(f.values),
                                      "condition_number": float(sv[0] / sv[-1])})
    _write_resolved(out, s)


def cmd_align(s):
    cohort = _load_cohort(s)
    out = _out_dir(s)
    cfg = _alignment_config(s)
    f = _prior_for(s, cohort)
    order = _parse_order(s.get("order"), cohort.m, int(s["seed"]))
    res = run_engine(s["engine"], cohort, f, cfg, order=order)
    fmt = s["format"]
    for sub in ("transforms", "aligned"):
        (out / sub).mkdir(exist_ok=True)
    for i, sid in enumerate(res.subject_ids):
        save_matrix(res.transforms[i].values, out / "transforms" / f"{sid}.{fmt}")
        save_matrix(res.aligned[i], out / "aligned" / f"{sid}.{fmt}")
    if res.projections is not None:
        (out / "projections").mkdir(exist_ok=True)
        for sid, q in zip(res.subject_ids, res.projections):
            save_matrix(q, out / "projections" / f"{sid}.{fmt}")
    save_matrix(res.reference, out / f"reference.{fmt}")
    _write_rows(out / "convergence.csv", (r._asdict() for r in res.trace),
                ["iteration", "objective", "reference_delta"])
    _write_json(out / "report.json", {
        "method": res.method, "k": res.k, "iterations_run": res.iterations_run, "converged": res.converged,
        "final_objective": res.final_objective, "unique": res.unique, "notes": res.notes,
        "subjects": res.subject_ids,
    })
    _write_resolved(out, s)


def _alignment_spec(s, cohort, k_grid=None):
    engine = s["engine"]
    cfg = _alignment_config(dict(s, engine=engine))
    f = None
    if engine != "none":
        f = _prior_for(s, cohort, needed=True if k_grid and engine.startswith("promises") else None)
    return Alignment(engine, cfg, f, k_grid)


def cmd_evaluate(s):
    cohort = _load_cohort(s)
    out = _out_dir(s)
    k_grid = parse_grid(s["k_grid"]) if s.get("k_grid") else None
    spec = _alignment_spec(s, cohort, k_grid)
    if s["protocol"] == "linear":
        if cohort.labels is None:
            raise ValidationError("linear protocol needs labels in the manifest")
        rep = loso_linear_classify(cohort, spec, alpha=float(s["ridge"]))
        if rep.coefficient_maps:
            (out / "coefficients").mkdir(exist_ok=True)
            for (a, b), w in rep.coefficient_maps.items():
                save_matrix(w[None, :], out / "coefficients" / f"{a}-{b}.{s['format']}")
    else:
        seg = SegmentSpec(int(s["segment_length"]), int(s["stride"]))
        rep = segment_correlation_classify(cohort, seg, spec, _parse_split(s.get("split")))
    _write_json(out / "report.json", rep.to_dict())
    _write_resolved(out, s)


def cmd_select_k(s):
    cohort = _load_cohort(s)
    out = _out_dir(s)
    grid = parse_grid(s["grid"])
    spec = _alignment_spec(s, cohort, grid)
    if s["evaluator"] == "linear":
        if cohort.labels is None:
            raise ValidationError("linear evaluator needs labels in the manifest")
        rep = select_k(cohort, grid, "linear", spec, alpha=float(s["ridge"]))
    else:
        rep = select_k(cohort, grid, "segment", spec,
                       segment=SegmentSpec(int(s["segment_length"]), int(s["stride"])),
                       split=_parse_split(s.get("split")))
    _write_json(out / "report.json", rep.to_dict())
    _write_rows(out / "scores.csv", ({"k": k, "mean_accuracy": m} for k, m, _ in rep.per_k_scores),
                ["k", "mean_accuracy"])
    _write_resolved(out, s)


def cmd_diagnose(s):
    cohort = _load_cohort(s)
    out = _out_dir(s)
    cfg = _alignment_config(s)
    f = _prior_for(s, cohort)
    kind = s["kind"]
    if kind == "order-sensitivity":
        rep = order_sensitivity(cohort, int(s["n"]), s["engine"], s["metric"], int(s["seed"]), f, cfg,
                                alpha=float(s["ridge"]))
    elif kind == "rotation-sensitivity":
        rep = reference_rotation_sensitivity(cohort, int(s["n"]), int(s["seed"]), s["engine"], f, cfg)
    else:
        res = run_engine(s["engine"], cohort, f, cfg)
        rep = loading_locality(res, cohort.coords, voxel_sample=int(s["voxel_sample"]), seed=int(s["seed"]))
        _write_rows(out / "bins.csv", rep.bin_rows(), ["bin_lo", "bin_hi", "count", "q25", "median", "q75"])
        _write_rows(out / "cumulative.csv", rep.cumulative_rows(), ["distance", "median_cumulative"])
        _write_json(out / "report.json", rep.to_dict())
        _write_resolved(out, s)
        return
    fields = ["trial", "metric"] + (["objective"] if rep.objectives is not None else [])
    _write_rows(out / "trials.csv", rep.rows(), fields)
    _write_json(out / "report.json", rep.to_dict())
    _write_resolved(out, s)


COMMANDS = {
    "simulate": cmd_simulate,
    "build-prior": cmd_build_prior,
    "align": cmd_align,
    "evaluate": cmd_evaluate,
    "select-k": cmd_select_k,
    "diagnose": cmd_diagnose,
}


def run(argv=None):
    """Run the CLI and return the exit code."""
    try:
        args = build_parser().parse_args(argv)
        s = resolve_settings(args)
        logging.basicConfig(level=logging.INFO if s.get("verbose") else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if s["command"] in ("align", "evaluate", "select-k", "diagnose") and s["engine"] not in ENGINES + ("none",):
            raise ValidationError(f"unknown engine {s['engine']!r}")
        COMMANDS[s["command"]](s)
    except (SelectionError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"promises: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (PromisesError, OSError) as exc:
        print(f"promises: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
