"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The empirical criteria train full 5-fold runs on 200-subject cohorts, so this
module takes several minutes.
"""

import math
import time

import numpy as np
import pytest

import gradsuite
from neurofuse import encoders as enc
from neurofuse.attribution import (branch_overlap, class_average_map, cv_maps, gradcam_imaging,
                                   gradcam_roi, joint_map)
from neurofuse.cli import main
from neurofuse.cohort import Volume, generate_cohort, stratified_split
from neurofuse.config import TrainConfig
from neurofuse.metrics import Prediction, auc, auc_bruteforce
from neurofuse.objective import info_nce
from neurofuse.roigraph import build_graph
from neurofuse.trainer import prepare_inputs, run_cv
from test_attribution import _oracle_imaging

N_SUBJECTS = 200
SEEDS = (0, 1, 2)


@pytest.fixture
def report(capsys):
    def emit(cid, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {cid:>2}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def _cv(mode, seed, **cfg):
    cohort = generate_cohort(N_SUBJECTS, mode=mode, seed=seed)
    return run_cv(cohort, TrainConfig(seed=seed, **cfg))


def test_c01_gradient_suite(report):
    t0 = time.perf_counter()
    reports = gradsuite.full_suite(0)
    elapsed = time.perf_counter() - t0
    worst = max(reports, key=lambda r: r.max_rel_error)
    ops = {r.op.split("/")[0] for r in reports}
    assert {"objective", "L_cls", "L_con"} <= ops
    ok = worst.max_rel_error < 1e-4 and elapsed < 120
    report(1, ok, f"{len(reports)} checks, max rel error {worst.max_rel_error:.2e} ({worst.op}), "
                  f"{sum(r.skipped for r in reports)} kink coordinates skipped, {elapsed:.1f}s")


def test_c02_info_nce_values(report):
    e1 = abs(info_nce(np.array([[0.3]]))[0])
    eu = max(abs(info_nce(np.full((b, b), 0.8))[0] - math.log(b)) for b in range(2, 9))
    ed = abs(info_nce(np.array([[2.0, 0.0], [0.0, 2.0]]))[0] - math.log1p(math.exp(-2)))
    ok = e1 < 1e-12 and eu < 1e-9 and ed < 1e-9
    report(2, ok, f"B=1 err {e1:.1e}, uniform err {eu:.1e}, [[2,0],[0,2]] err {ed:.1e}")


def test_c03_auc_oracle(report):
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        labels = rng.permutation(np.r_[0, 1, rng.integers(0, 2, n - 2)])
        scores = rng.integers(0, max(2, n // 3), n) / 10.0       # many ties
        preds = [Prediction(str(i), s, 0, int(y)) for i, (s, y) in enumerate(zip(scores, labels))]
        mismatches += auc(preds) != auc_bruteforce(preds)
    report(3, mismatches == 0, f"1000 tied instances, {mismatches} mismatches")


def test_c04_stratification(report):
    rng = np.random.default_rng(7)
    bad = 0
    for trial in range(200):
        k = int(rng.integers(2, 11))
        n_pos, n_neg = int(rng.integers(k, 80)), int(rng.integers(k, 80))
        labels = rng.permutation([1] * n_pos + [0] * n_neg)
        ids = [f"s{i:03d}" for i in range(labels.size)]
        folds = stratified_split(ids, labels, k, seed=trial)
        lab = dict(zip(ids, labels))
        tests = [t for _, t in folds]
        partition = (sorted(x for t in tests for x in t) == ids
                     and all(not set(tr) & set(te) and len(tr) + len(te) == len(ids)
                             for tr, te in folds))
        balanced = all(abs(sum(lab[x] == c for x in t) - n_c / k) <= 1
                       for t in tests for c, n_c in ((1, n_pos), (0, n_neg)))
        bad += not (partition and balanced)
    report(4, bad == 0, f"200 random cohorts (k in 2..10), {bad} violations")


def test_c05_roi_blindness(report):
    cfg = TrainConfig()
    params = enc.init_params(cfg, 16, seed=11)
    failures, checked = [], 0
    for mode in ("easy", "img_only", "roi_only", "complementary"):
        cohort = generate_cohort(6, mode=mode, seed=3)
        rng = np.random.default_rng(5)
        for s in cohort.subjects:
            flat = s.volume.data.ravel(order="F").copy()
            for roi in range(1, 17):
                idx = cohort.atlas.roi_indices(roi)
                flat[idx] = flat[rng.permutation(idx)]
            perm = Volume(flat.reshape(s.volume.dims, order="F"))
            g0, g1 = build_graph(s.volume, cohort.atlas), build_graph(perm, cohort.atlas)
            same_graph = all(np.array_equal(getattr(g0, f), getattr(g1, f))
                             for f in ("node_features", "descriptors", "adjacency", "prop_matrix"))
            same_gcn = np.array_equal(enc.encode_roi_gcn(g0, params), enc.encode_roi_gcn(g1, params))
            img_changed = not np.array_equal(enc.encode_image(s.volume, params),
                                             enc.encode_image(perm, params))
            checked += 1
            if not (same_graph and same_gcn and img_changed):
                failures.append((mode, s.id))
    report(5, not failures, f"{checked} subjects permuted within ROIs, failures {failures}")


@pytest.mark.parametrize("mode,strong,weak", [("img_only", "img", "roi"),
                                              ("roi_only", "roi", "img")])
@pytest.mark.slow
def test_c06_view_specificity(report, mode, strong, weak):
    t0 = time.perf_counter()
    acc = {b: _cv(mode, 0, branches=b).mean("acc") for b in ("img", "roi")}
    elapsed = time.perf_counter() - t0
    ok = acc[strong] >= 0.80 and acc[weak] <= 0.60 and elapsed < 900
    report(6, ok, f"{mode}: {strong}-only acc {acc[strong]:.3f} (>= 0.80), "
                  f"{weak}-only acc {acc[weak]:.3f} (<= 0.60), {elapsed:.0f}s")


@pytest.mark.slow
def test_c07_complementarity(report):
    lines, margins = [], []
    for seed in SEEDS:
        acc = {b: _cv("complementary", seed, branches=b, fusion="contra").mean("acc")
               for b in ("img", "roi", "joint")}
        margin = acc["joint"] - max(acc["img"], acc["roi"])
        margins.append(margin)
        lines.append(f"seed {seed}: joint {acc['joint']:.3f} img {acc['img']:.3f} "
                     f"roi {acc['roi']:.3f}")
    ok = min(margins) >= 0.10
    report(7, ok, "; ".join(lines) + f"; min margin {100 * min(margins):.1f} points, "
                  f"mean {100 * np.mean(margins):.1f}")


@pytest.mark.slow
def test_c08_alignment(report):
    cohort = generate_cohort(N_SUBJECTS, mode="easy", seed=0)
    inputs = prepare_inputs(cohort)
    with_con = run_cv(cohort, TrainConfig(lam=1.0), inputs=inputs)
    without = run_cv(cohort, TrainConfig(lam=0.0), inputs=inputs)
    gap = float(np.mean([r.alignment_gap for r in with_con.reports]))
    gap0 = float(np.mean([r.alignment_gap for r in without.reports]))
    report(8, gap >= 0.2, f"held-out gap {gap:.3f} with lam=1 (>= 0.2); {gap0:.3f} with lam=0")


@pytest.mark.slow
def test_c09_missing_view(report):
    cohort = generate_cohort(N_SUBJECTS, mode="easy", seed=0)
    inputs = prepare_inputs(cohort)
    base = TrainConfig()
    full = run_cv(cohort, base, inputs=inputs, keep_params=True)
    zero = run_cv(cohort, base.replace(mask_branch="img", mask_rate=0.0), inputs=inputs,
                  keep_params=True)
    bitwise = (full.aggregate == zero.aggregate
               and all(np.array_equal(a[k], b[k]) for a, b in zip(full.params, zero.params)
                       for k in a)
               and all(ra.cls_trace == rb.cls_trace for ra, rb in zip(full.reports, zero.reports)))
    means = {}
    for branch in ("img", "roi"):
        accs = [_cv("easy", s, mask_branch=branch, mask_rate=0.5).mean("acc") for s in SEEDS]
        means[branch] = float(np.mean(accs))
    ok = bitwise and min(means.values()) >= 0.65
    report(9, ok, f"rate 0 bitwise equal: {bitwise}; 50% masked acc img {means['img']:.3f}, "
                  f"roi {means['roi']:.3f} (>= 0.65)")


def test_c10_attribution(report):
    cohort = generate_cohort(40, r=8, dims=(8, 8, 8), mode="complementary", seed=1)
    cfg = TrainConfig(epochs=10, batch_size=8, k_folds=4)
    all_maps, averages = [], []
    for branches in ("joint", "img", "roi"):
        maps, _ = cv_maps(cohort, cfg.replace(branches=branches))
        all_maps += maps
        averages += [class_average_map(maps, c) for c in ("control", "disorder")]
    g = build_graph(cohort.subjects[0].volume, cohort.atlas)
    p = enc.init_params(cfg, 8, seed=2)
    all_maps += [gradcam_roi(p, g, 1), gradcam_roi(p, g, 0, "mlp")]

    def valid(m):
        s = m.scores
        return np.all((s >= 0) & (s <= 1)) and ((s.min() == 0 and s.max() == 1) or np.all(s == 0))
    invariant = all(valid(m) for m in all_maps + averages)

    rng = np.random.default_rng(3)
    worst = 0.0
    for seed in range(5):
        q = {k: v + 0.05 * rng.standard_normal(v.shape) for k, v in enc.init_params(cfg, 8, seed).items()}
        s = cohort.subjects[seed]
        for t in (0, 1):
            got = gradcam_imaging(q, s.volume, cohort.atlas, t).scores
            worst = max(worst, float(np.max(np.abs(got - _oracle_imaging(q, s.volume.data,
                                                                          cohort.atlas, t)))))
    joint = joint_map(gradcam_imaging(p, cohort.subjects[0].volume, cohort.atlas, 1),
                      gradcam_roi(p, g, 1))
    self_overlap = branch_overlap(joint, joint, 0.25)
    ok = invariant and worst < 1e-8 and self_overlap == 1.0
    report(10, ok, f"{len(all_maps) + len(averages)} maps valid: {invariant}; closed-form "
                   f"oracle max deviation {worst:.1e}; joint self-overlap {self_overlap}")


TINY = ["--n", "24", "--rois", "8", "--dims", "8,8,8", "--set", "epochs=3",
        "--set", "batch_size=6", "--set", "k_folds=3"]


def test_c11_cli_determinism(report, tmp_path, monkeypatch):
    monkeypatch.setenv("NEUROFUSE_SEED", "4")
    commands = {
        "gen": ["gen", "--mode", "complementary", "--n", "24", "--seed", "3"],
        "cv": ["cv", *TINY, "--checkpoints"],
        "ablate": ["ablate", *TINY],
        "missing": ["missing", *TINY],
        "attribute": ["attribute", *TINY, "--mode", "complementary"],
    }
    differing = []
    n_files = 0
    for name, args in commands.items():
        outs = []
        for run in ("a", "b"):
            d = tmp_path / f"{name}_{run}"
            assert main(args + ["--out", str(d)]) == 0
            outs.append({p.relative_to(d).as_posix(): p.read_bytes()
                         for p in sorted(d.rglob("*")) if p.is_file()})
        n_files += len(outs[0])
        if outs[0] != outs[1]:
            differing.append(name)
    report(11, not differing, f"5 subcommands, {n_files} files re-generated, "
                              f"differing: {differing or 'none'}")
