"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py`` (lines appear in the terminal
summary) or directly with ``python tests/test_acceptance.py``.
"""

import hashlib
import os
import sys
import time

import numpy as np
import pytest

from promises.align import (
    ENGINES,
    AlignmentConfig,
    efficient_promises_align,
    gpa_align,
    group_mean,
    hyperalign,
    opp_solve,
    promises_align,
    run_engine,
    signal_scale,
)
from promises.cli import run as cli_run
from promises.data import Cohort
from promises.diagnostics import loading_locality
from promises.evaluation import Alignment, SegmentSpec, binomial_band, loso_linear_classify, segment_correlation_classify
from promises.prior import build_location_matrix
from promises.simulate import SynthSpec, derive_rng, grid_coords, haar_orthogonal, synth_cohort

RESULTS = {}


def report(number, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {name}: {detail}"
    RESULTS[number] = line
    print(line)
    return ok


def cohort_from(seed, m, t, v):
    rng = derive_rng(seed, 0)
    return Cohort.from_arrays([rng.standard_normal((t, v)) for _ in range(m)], coords=grid_coords((v, 1, 1)))


def max_frob_diff(a, b):
    return max(np.linalg.norm(x - y) for x, y in zip(a, b))


# ---------------------------------------------------------------------------

def criterion_1():
    start = time.perf_counter()
    worst, runs = 0.0, 0
    for s in range(200):
        rng = derive_rng(1001, s)
        engine = ENGINES[s % len(ENGINES)]
        v = int(rng.integers(2, 21))
        m = int(rng.integers(2, 7))
        t = int(rng.integers(1, v)) if engine == "promises-efficient" else int(rng.integers(2, 25))
        k = float(rng.choice([0.0, 0.5, 5.0]))
        c = cohort_from(s, m, t, v)
        f = build_location_matrix(c.coords)
        res = run_engine(engine, c, f, AlignmentConfig(k=k))
        for tr in res.transforms:
            r = tr.values
            worst = max(worst, float(np.linalg.norm(r.T @ r - np.eye(r.shape[0]))))
        runs += 1
    elapsed = time.perf_counter() - start
    ok = runs == 200 and worst < 1e-8 and elapsed < 60
    return report(1, "orthogonality", ok, f"{runs} runs, max ||R^T R - I||_F = {worst:.2e}, {elapsed:.1f}s")


def criterion_2():
    start = time.perf_counter()
    th = np.arange(0.0, 2 * np.pi, 1e-6)
    cos, sin = np.cos(th), np.sin(th)
    worst_gap, beaten = 0.0, 0
    for s in range(100):
        rng = derive_rng(2002, s)
        k = (0.0, 0.5, 3.0)[s % 3]
        x, m = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
        pts = rng.uniform(-2, 2, size=(2, 3))
        f = build_location_matrix(pts)
        a = x.T @ m + k * f.values
        r = opp_solve(x, m, k, f).values
        got = float(np.sum(a * r))
        rot = (a[0, 0] + a[1, 1]) * cos + (a[1, 0] - a[0, 1]) * sin
        ref = (a[0, 0] - a[1, 1]) * cos + (a[0, 1] + a[1, 0]) * sin
        best = max(rot.max(), ref.max())
        beaten += got < best - 1e-12
        worst_gap = max(worst_gap, abs(got - best))
    elapsed = time.perf_counter() - start
    ok = worst_gap < 1e-6 and beaten == 0 and elapsed < 60
    return report(2, "OPP vs angle grid", ok,
                  f"100 instances, max |criterion gap| = {worst_gap:.2e}, grid beat solver {beaten}x, {elapsed:.1f}s")


def criterion_3():
    start = time.perf_counter()
    worst, sweeps = -np.inf, 0
    for s in range(50):
        rng = derive_rng(3003, s)
        m, v = int(rng.integers(2, 7)), int(rng.integers(2, 13))
        t = int(rng.integers(2, 20))
        k = float(rng.choice([0.01, 0.5, 3.0, 30.0]))
        c = cohort_from(3000 + s, m, t, v)
        res = promises_align(c, build_location_matrix(c.coords), AlignmentConfig(k=k, tol=1e-12, max_iter=100))
        obj = np.array([row.objective for row in res.trace])
        sweeps += len(obj)
        if len(obj) > 1:
            worst = max(worst, float(np.max(np.diff(obj))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 60
    return report(3, "monotone descent", ok,
                  f"50 runs, {sweeps} sweeps, largest objective increase = {worst:.2e}, {elapsed:.1f}s")


def criterion_4():
    mismatches = 0
    for s in range(20):
        rng = derive_rng(4004, s)
        c = cohort_from(4000 + s, int(rng.integers(2, 7)), int(rng.integers(3, 15)), int(rng.integers(2, 10)))
        a = promises_align(c, None, AlignmentConfig(k=0.0))
        b = gpa_align(c, AlignmentConfig())
        same = a.trace == b.trace and a.reference.tobytes() == b.reference.tobytes()
        same &= all(x.tobytes() == y.tobytes() for x, y in zip(a.aligned, b.aligned))
        same &= all(x.values.tobytes() == y.values.tobytes() for x, y in zip(a.transforms, b.transforms))
        mismatches += not same
    return report(4, "k = 0 reduction", mismatches == 0, f"20 cohorts, {mismatches} not bitwise identical")


def criterion_5():
    worst_promises, hyper_hits, gpa_ok = 0.0, 0, 0
    gpa_worst_gap, gpa_min_spread = 0.0, np.inf
    tight = AlignmentConfig(tol=1e-15, max_iter=5000)
    for s in range(20):
        rng = derive_rng(5005, s)
        m, v, t = int(rng.integers(3, 7)), int(rng.integers(3, 9)), int(rng.integers(6, 16))
        c = cohort_from(5000 + s, m, t, v)
        f = build_location_matrix(c.coords)
        orders = [list(range(m))] + [list(derive_rng(5005, s, i).permutation(m)) for i in range(1, 10)]

        base = promises_align(c, f, AlignmentConfig(k=5.0))
        for o in orders[1:]:
            res = promises_align(c.subset(o), f, AlignmentConfig(k=5.0))
            d = max(np.linalg.norm(x - res.aligned[res.index_of(sid)]) for sid, x in zip(base.subject_ids, base.aligned))
            worst_promises = max(worst_promises, float(d))

        refs = [hyperalign(c, o).reference for o in orders]
        spread = max(np.linalg.norm(a - b) for i, a in enumerate(refs) for b in refs[i + 1:])
        hyper_hits += spread > 1e-6

        m0 = group_mean(c.arrays)
        g_base = gpa_align(c, tight)
        objs, dists = [g_base.final_objective], []
        for i in range(1, 11):
            g = haar_orthogonal(v, rng=derive_rng(5005, s, 100 + i))
            res = gpa_align(c, tight, initial_reference=m0 @ g)
            objs.append(res.final_objective)
            dists.append(max_frob_diff(res.aligned, g_base.aligned))
        gap = max(abs(o - objs[0]) for o in objs) / abs(objs[0])
        gpa_worst_gap = max(gpa_worst_gap, gap)
        gpa_min_spread = min(gpa_min_spread, max(dists))
        gpa_ok += gap < 1e-8 and max(dists) > 1e-6
    ok = worst_promises < 1e-9 and hyper_hits >= 18 and gpa_ok == 20
    return report(5, "uniqueness / order invariance", ok,
                  f"promises max order diff {worst_promises:.1e}; hyper order-dependent on {hyper_hits}/20; "
                  f"gpa rotations: {gpa_ok}/20 cohorts with outputs apart (min spread {gpa_min_spread:.2e}) "
                  f"and objectives equal (max rel gap {gpa_worst_gap:.1e})")


def criterion_6():
    start = time.perf_counter()
    worst, worst_k = 0.0, 0.0
    cfg = AlignmentConfig(k=0.0, tol=1e-15, max_iter=20000)
    for s in range(30):
        rng = derive_rng(6006, s)
        t = int(rng.integers(2, 9))
        v = int(rng.integers(t + 1, 41))
        m = int(rng.integers(2, 6))
        c = cohort_from(6000 + s, m, t, v)
        full = promises_align(c, None, cfg).final_objective
        red = efficient_promises_align(c, None, cfg).final_objective
        worst = max(worst, abs(red - full) / abs(full))
        if s < 5:
            # informational: with k > 0 the reduced prior Q_i^T F Q_M defines another criterion
            f = build_location_matrix(c.coords)
            a = promises_align(c, f, cfg.replace(k=1.0)).final_objective
            b = efficient_promises_align(c, f, cfg.replace(k=1.0)).final_objective
            worst_k = max(worst_k, abs(a - b) / abs(a))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-8 and elapsed < 120
    return report(6, "efficient == full", ok,
                  f"30 cohorts (k = 0), max rel objective gap {worst:.1e}, {elapsed:.1f}s "
                  f"[info: k = 1 gap {worst_k:.1e}]")


def criterion_7():
    lines, ok = [], True
    for s in range(5):
        c = synth_cohort(SynthSpec(4, 12, 9, grid_dims=(3, 3, 1), seed=7000 + s)).cohort
        f = build_location_matrix(c.coords)
        scale = signal_scale(c)
        dev = []
        for mult in (1e2, 1e4, 1e6):
            res = promises_align(c, f, AlignmentConfig(k=mult * scale))
            dev.append(max(float(np.linalg.norm(t.values - np.eye(c.v))) for t in res.transforms))
        ok &= dev[0] >= dev[1] >= dev[2] and dev[2] < 1e-4
        lines.append("/".join(f"{d:.1e}" for d in dev))
    return report(7, "prior-dominated limit", ok, "max ||R - I||_F at 1e2/1e4/1e6 x scale: " + ", ".join(lines))


def criterion_8():
    sc = synth_cohort(SynthSpec(4, 100, 100, noise_sigma=1.5, grid_dims=(10, 10, 1), rotation_locality=0.3, seed=0))
    c = sc.cohort
    f = build_location_matrix(c.coords)
    d50 = {}
    for k in (0.01, 1.0, 100.0):
        res = promises_align(c, f, AlignmentConfig(k=k))
        d50[k] = loading_locality(res, c.coords, voxel_sample=50, seed=0).distance_at(0.5)
    ok = d50[100.0] < d50[0.01]
    return report(8, "loading locality", ok,
                  "distance at 50% cumulative squared loading: "
                  + ", ".join(f"k={k:g}: {d:.3f}" for k, d in d50.items()))


def criterion_9():
    start = time.perf_counter()
    sc = synth_cohort(SynthSpec(8, 80, 40, noise_sigma=1.0, grid_dims=(8, 5, 1), n_classes=4,
                                rotation_locality=1.0, seed=1))
    c = sc.cohort
    f = build_location_matrix(c.coords)
    base = loso_linear_classify(c, Alignment("none")).mean_accuracy
    nested = Alignment("promises", AlignmentConfig(), f, k_grid=(1.0, 10.0, 100.0))
    rep = loso_linear_classify(c, nested)
    elapsed = time.perf_counter() - start
    gain = rep.mean_accuracy - base
    ok = 0.25 <= base <= 0.45 and gain >= 0.15 and elapsed < 300
    return report(9, "detection power", ok,
                  f"unaligned {base:.3f}, promises (nested k from {{1, 10, 100}}) {rep.mean_accuracy:.3f}, "
                  f"gain {gain:+.3f}, chosen k {sorted(set(rep.chosen_k))}, {elapsed:.1f}s")


def criterion_10():
    correct = total = 0
    inside = 0
    chance = None
    for s in range(50):
        rng = derive_rng(10010, s)
        c = Cohort.from_arrays([rng.standard_normal((96, 10)) for _ in range(4)], coords=grid_coords((10, 1, 1)))
        f = build_location_matrix(c.coords)
        rep = segment_correlation_classify(c, SegmentSpec(), Alignment("promises", AlignmentConfig(k=1.0), f))
        chance = rep.chance
        n = sum(rep.n_predictions)
        hits = sum(a * p for a, p in zip(rep.per_subject_accuracy, rep.n_predictions))
        correct += hits
        total += n
        lo, hi = binomial_band(chance, n)
        inside += lo <= rep.mean_accuracy <= hi
    acc = correct / total
    lo, hi = binomial_band(chance, total)
    ok = lo <= acc <= hi
    return report(10, "chance-level segments", ok,
                  f"pooled accuracy {acc:.4f} over {total} segments, band [{lo:.4f}, {hi:.4f}] around {chance:.3f}; "
                  f"{inside}/50 trials inside their own band")


def _hash_tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in sorted(files):
            p = os.path.join(dirpath, name)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = hashlib.sha256(fh.read()).hexdigest()
    return out


def _pipeline(root, threads):
    # relative paths, so resolved-config.json records the same manifest path in every run
    os.makedirs(root, exist_ok=True)
    here = os.getcwd()
    os.chdir(root)
    try:
        man = os.path.join("sim", "manifest.json")
        steps = [
            ["simulate", "--out", "sim", "--m", "5", "--t", "24", "--v", "12", "--grid", "4,3,1",
             "--n-classes", "3", "--rotation-locality", "0.5", "--seed", "11"],
        ]
        for engine in ("promises", "gpa", "hyper", "opp"):
            steps.append(["align", "--manifest", man, "--out", f"align-{engine}", "--engine", engine, "--k", "4"])
        steps += [
            ["simulate", "--out", "sim-wide", "--m", "4", "--t", "6", "--v", "12", "--grid", "4,3,1", "--seed", "12"],
            ["align", "--manifest", os.path.join("sim-wide", "manifest.json"), "--out", "align-eff",
             "--engine", "promises-efficient", "--k", "4", "--format", "csv"],
            ["align", "--manifest", man, "--out", "align-hyper-random", "--engine", "hyper", "--order", "random"],
            ["evaluate", "--manifest", man, "--out", "eval", "--k-grid", "1,10"],
            ["evaluate", "--manifest", man, "--out", "seg", "--protocol", "segment", "--segment-length", "4",
             "--stride", "4"],
            ["select-k", "--manifest", man, "--out", "sel", "--grid", "0.5,5,50"],
            ["diagnose", "order-sensitivity", "--manifest", man, "--out", "ord", "--n", "5"],
            ["diagnose", "rotation-sensitivity", "--manifest", man, "--out", "rot", "--n", "4", "--engine", "gpa"],
            ["diagnose", "locality", "--manifest", man, "--out", "loc", "--engine", "promises"],
            ["build-prior", "--manifest", man, "--out", "prior"],
        ]
        codes = [cli_run(step + ["--threads", str(threads)]) for step in steps]
    finally:
        os.chdir(here)
    return codes, _hash_tree(root)


def criterion_11(tmp):
    runs = [_pipeline(os.path.join(tmp, name), th) for name, th in (("a", 1), ("b", 1), ("c", 4))]
    codes_ok = all(all(c == 0 for c in codes) for codes, _ in runs)
    hashes = [h for _, h in runs]
    same = hashes[0] == hashes[1] == hashes[2]
    return report(11, "determinism", codes_ok and same,
                  f"{len(hashes[0])} output files hashed over 3 runs (threads 1, 1, 4): "
                  f"{'identical' if same else 'DIFFERENT'}; exit codes {'all 0' if codes_ok else 'non-zero'}")


# ---------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.parametrize("number", range(1, 11))
def test_acceptance(number):
    assert globals()[f"criterion_{number}"]()


@pytest.mark.slow
def test_acceptance_determinism(tmp_path):
    assert criterion_11(str(tmp_path))


if __name__ == "__main__":
    import tempfile

    failed = 0
    for i in range(1, 11):
        failed += not globals()[f"criterion_{i}"]()
    with tempfile.TemporaryDirectory() as d:
        failed += not criterion_11(d)
    sys.exit(1 if failed else 0)
