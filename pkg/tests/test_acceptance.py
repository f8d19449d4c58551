"""Acceptance suite: one test per release criterion, each at its stated
tolerance and runtime budget."""

import filecmp
import time
from pathlib import Path

import numpy as np
import pytest

from aucues import swin, training
from aucues.alignment import SimilarityTransform, estimate_similarity, warp_crop
from aucues.association import VideoAggregate, fit_glmm
from aucues.catalog import AU_IDS, DatasetCoverage, N_AUS, build_mask, fill_dummy
from aucues.cli import EXIT_OK, main
from aucues.data import SampleRecord, merge_datasets, parse_merged_manifest, subject_split
from aucues.losses import masked_bce, masked_bce_grad
from aucues.metrics import (confusion, inclusion_filter, mean_metrics,
                            report_from_counts, round_display)
from aucues.phenotypes import (AssessmentEvent, PainEvent, PatientStay,
                               TherapyInterval, label_patient)
from aucues.synthetic import SYNTH_A_AUS, SYNTH_B_AUS, write_dataset, write_pipeline_fixture
from conftest import INCLUDED_AUS, random_masked_batch
from test_association import irls_logistic
from test_losses import brute_force_bce

H = 3600.0


def _random_batches(seed, n=100):
    rng = np.random.default_rng(seed)
    return [random_masked_batch(rng) for _ in range(n)]


def test_01_masked_loss_oracle_equivalence():
    t0 = time.monotonic()
    for logits, labels, mask in _random_batches(101):
        expected, count = brute_force_bce(logits, labels, mask)
        out = masked_bce(logits, labels, mask)
        assert out.unmasked_count == count
        if count:
            assert abs(out.value - expected) <= 1e-12 * max(abs(expected), 1e-300)
        else:
            assert out.value == 0.0
    assert time.monotonic() - t0 < 5.0


def test_02_exact_gradient_masking():
    step = 1e-5
    for logits, labels, mask in _random_batches(101):
        grad = masked_bce_grad(logits, labels, mask)
        assert (grad[mask == 0] == 0.0).all()  # bitwise zero
        if mask.sum() == 0:
            continue
        # central differences, vectorized one column at a time
        for j in range(N_AUS):
            rows = np.flatnonzero(mask[:, j])
            if not len(rows):
                continue
            for i in rows:
                lp, lm = logits.copy(), logits.copy()
                lp[i, j] += step
                lm[i, j] -= step
                fd = (masked_bce(lp, labels, mask).value
                      - masked_bce(lm, labels, mask).value) / (2 * step)
                # absolute floor = FD round-off, eps * |loss| / step ~ 1e-10
                assert (abs(fd - grad[i, j])
                        <= 1e-6 * max(abs(fd), abs(grad[i, j])) + 1e-10)


def test_03_full_model_gradient_check():
    t0 = time.monotonic()
    config = swin.ModelConfig()
    params = swin.init_params(config, seed=0)
    rng = np.random.default_rng(3)
    images = rng.normal(size=(2, 32, 32, 1))
    labels = rng.integers(0, 2, size=(2, N_AUS))
    labels[rng.random((2, N_AUS)) < 0.3] = -1
    mask = build_mask(labels)

    def loss_at(p):
        return masked_bce(swin.forward(images, p, config), labels, mask).value

    upstream = masked_bce_grad(swin.forward(images, params, config), labels, mask)
    grads = swin.backward(images, params, upstream, config)

    step = 1e-6
    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_at(params)
            flat[i] = orig - step
            down = loss_at(params)
            flat[i] = orig
            fd = (up - down) / (2 * step)
            # absolute floor = FD round-off, eps * |loss| / step ~ 1e-10
            err = abs(fd - g[i]) - 2e-9
            worst = max(worst, err / max(abs(fd), abs(g[i]), 1e-12))
            assert err <= 1e-4 * max(abs(fd), abs(g[i])), (name, i, fd, g[i])
    elapsed = time.monotonic() - t0
    assert elapsed < 120.0, f"gradient sweep took {elapsed:.1f}s"


def test_04_data_parallel_equivalence():
    config = swin.ModelConfig()
    rng = np.random.default_rng(4)
    images = rng.normal(size=(512, 32, 32, 1))
    labels = rng.integers(0, 2, size=(512, N_AUS))
    labels[rng.random((512, N_AUS)) < 0.4] = -1
    masks = build_mask(labels)
    params = swin.init_params(config, seed=0)

    # per-step reduced gradients: K-shard reduction vs the whole batch
    for start in range(0, 192, 64):
        sl = slice(start, start + 64)
        bi, bl, bm = images[sl], labels[sl], masks[sl]
        upstream = masked_bce_grad(swin.forward(bi, params, config), bl, bm)
        whole = swin.backward(bi, params, upstream, config)
        for workers in (2, 4):
            shard_grads, shard_counts = [], []
            for s in np.array_split(np.arange(64), workers):
                si, slb, sm = bi[s], bl[s], bm[s]
                up = masked_bce_grad(swin.forward(si, params, config), slb, sm)
                shard_grads.append(swin.backward(si, params, up, config))
                shard_counts.append(int(sm.sum()))
            reduced, _ = training.parallel_gradient_reduce(shard_grads, shard_counts)
            for k in whole:
                # near-zero gradients (e.g. the key bias, which cancels in
                # softmax) get an absolute floor instead of a relative bound
                scale = max(float(np.abs(whole[k]).max()), 1e-8)
                assert np.abs(reduced[k] - whole[k]).max() <= 1e-10 * scale, k

    # end-to-end: K=2 and K=4 reach the K=1 parameters within 1e-8 inf-norm
    finals = {}
    for workers in (1, 2, 4):
        cfg = training.TrainConfig(learning_rate=1e-3, epochs=2, batch_size=64,
                                   workers=workers, early_stop_patience=10, seed=0)
        p0 = swin.init_params(config, seed=0)
        finals[workers], _ = training.train(config, p0, (images, labels),
                                            (images[:64], labels[:64]), cfg)
    for workers in (2, 4):
        for k in finals[1]:
            diff = np.abs(finals[workers][k] - finals[1][k]).max()
            assert diff <= 1e-8, (workers, k, diff)


def test_05_table2_arithmetic_reproduction(table2_report):
    mean_f1, mean_acc = mean_metrics(table2_report)
    assert round_display(mean_f1, 2) == 0.57
    assert round_display(mean_acc, 2) == 0.89
    assert inclusion_filter(table2_report) == {1, 2, 6, 7, 10, 12, 17, 23, 25, 26, 43}
    assert inclusion_filter(table2_report) == INCLUDED_AUS


def test_06_mask_construction_fixture():
    # published masked-loss illustration: four dataset rows over eight AUs
    fig_aus = [1, 4, 6, 9, 14, 20, 27, 43]
    grid_rows = [
        [-1, 1, 0, 0, -1, 0, 1, 0],   # ICU cohort
        [0, 0, 1, -1, 0, -1, -1, -1],  # BP4D
        [1, 0, 1, 0, -1, 1, -1, -1],   # DISFA
        [-1, 0, 0, -1, -1, 0, -1, 1],  # UNBC
    ]
    mask_rows = [
        [0, 1, 1, 1, 0, 1, 1, 1],
        [1, 1, 1, 0, 1, 0, 0, 0],
        [1, 1, 1, 1, 0, 1, 0, 0],
        [0, 1, 1, 0, 0, 1, 0, 1],
    ]
    cols = [AU_IDS.index(a) for a in fig_aus]
    for grid, expected in zip(grid_rows, mask_rows):
        labels = np.full(N_AUS, -1)
        labels[cols] = grid
        assert build_mask(labels)[cols].tolist() == expected


def test_07_subject_disjoint_split_property():
    rng = np.random.default_rng(7)
    cov = DatasetCoverage("FULL", frozenset(AU_IDS))
    for trial in range(500):
        n_subjects = int(rng.integers(2, 21))
        records = [
            SampleRecord(f"s{i}-{j}", "FULL", f"subj{i}", f"s{i}-{j}.npy",
                         fill_dummy({}, cov))
            for i in range(n_subjects)
            for j in range(int(rng.integers(1, 5)))
        ]
        fraction = float(rng.uniform(0.1, 0.9))
        seed = int(rng.integers(0, 2**31))
        train, test = subject_split(records, fraction, seed)
        assert {r.subject_id for r in train} & {r.subject_id for r in test} == set()
        assert len(train) + len(test) == len(records)
        again = subject_split(records, fraction, seed)
        assert [r.sample_id for r in again[0]] == [r.sample_id for r in train]
        assert [r.sample_id for r in again[1]] == [r.sample_id for r in test]


def test_08_synthetic_multi_dataset_training(tmp_path):
    t0 = time.monotonic()
    from aucues.data import parse_dataset_manifest
    from aucues.catalog import load_coverage
    from aucues.synthetic import write_coverage
    from aucues.cli import _load_records_arrays

    rng = np.random.default_rng(8)
    manifest_a = write_dataset(tmp_path, "SYNTHA", SYNTH_A_AUS, 8, 25, rng)
    manifest_b = write_dataset(tmp_path, "SYNTHB", SYNTH_B_AUS, 8, 25, rng)
    coverage = load_coverage(write_coverage(tmp_path))
    merged = merge_datasets([
        (parse_dataset_manifest(manifest_a, coverage["SYNTHA"]), coverage["SYNTHA"]),
        (parse_dataset_manifest(manifest_b, coverage["SYNTHB"]), coverage["SYNTHB"]),
    ])
    train_recs, test_recs = subject_split(merged, 0.3, seed=0)
    config = swin.ModelConfig(channels=3)
    train_set = _load_records_arrays(train_recs, 3)
    test_set = _load_records_arrays(test_recs, 3)
    cfg = training.TrainConfig(learning_rate=3e-3, epochs=10, batch_size=32,
                               early_stop_patience=10, seed=0)
    params, history = training.train(config, swin.init_params(config, seed=0),
                                     train_set, test_set, cfg)
    assert len(history) <= 10
    logits = swin.forward(test_set[0], params, config)
    preds = (1.0 / (1.0 + np.exp(-logits)) >= 0.5).astype(int)
    report = report_from_counts(
        confusion(preds, test_set[1], build_mask(test_set[1])))
    mean_f1, _ = mean_metrics(report)
    elapsed = time.monotonic() - t0
    assert mean_f1 >= 0.9, f"mean F1 {mean_f1:.3f}"
    assert elapsed < 300.0, f"training took {elapsed:.1f}s"


def test_09_glmm_correctness():
    t0 = time.monotonic()
    # (a) sigma = 0 equals an independent IRLS logistic fit
    rng = np.random.default_rng(9)
    aggs = []
    for i in range(20):
        for j in range(6):
            x = rng.uniform(0, 1)
            p = 1.0 / (1.0 + np.exp(-(-0.5 + 1.2 * x)))
            aggs.append(VideoAggregate(f"v{i}-{j}", f"p{i}",
                                       int(rng.random() < p), {12: x}))
    fit0 = fit_glmm(aggs, [12], sigma_fixed=0.0)
    X = np.array([[1.0, a.au_predictors[12]] for a in aggs])
    y = np.array([a.outcome for a in aggs], float)
    beta_ref, _ = irls_logistic(X, y)
    assert np.abs(fit0.beta - beta_ref).max() <= 1e-6

    # (b) 200 patients x 20 videos, beta1 = 1.5, sigma = 1: slope recovered
    rng = np.random.default_rng(90)
    sim = []
    for i in range(200):
        u = rng.normal(0, 1.0)
        for j in range(20):
            x = rng.uniform(0, 1)
            p = 1.0 / (1.0 + np.exp(-(-0.5 + 1.5 * x + u)))
            sim.append(VideoAggregate(f"v{i}-{j}", f"p{i}",
                                      int(rng.random() < p), {12: x}))
    fit = fit_glmm(sim, [12])
    assert abs(fit.beta[1] - 1.5) <= 3 * fit.se[1]
    elapsed = time.monotonic() - t0
    assert elapsed < 30.0, f"GLMM suite took {elapsed:.1f}s"


def test_10_alignment_recovery():
    rng = np.random.default_rng(10)
    for _ in range(1000):
        n = int(rng.integers(3, 8))
        src = rng.normal(0, 10, (n, 2))
        truth = SimilarityTransform(
            scale=float(rng.uniform(0.5, 3.0)),
            theta=float(rng.uniform(-np.pi, np.pi)),
            tx=float(rng.uniform(-20, 20)),
            ty=float(rng.uniform(-20, 20)))
        est = estimate_similarity(src, truth.apply(src))
        assert abs(est.scale - truth.scale) <= 1e-9
        dtheta = (est.theta - truth.theta + np.pi) % (2 * np.pi) - np.pi
        assert abs(dtheta) <= 1e-9
        assert abs(est.tx - truth.tx) <= 1e-9
        assert abs(est.ty - truth.ty) <= 1e-9
    image = rng.normal(size=(32, 32))
    out = warp_crop(image, SimilarityTransform(1.0, 0.0, 0.0, 0.0), 32)
    np.testing.assert_array_equal(out, image)


def test_11_phenotype_vignettes():
    day = 24 * H

    def vent(pid, s, e):
        return TherapyInterval(pid, "mechanical_ventilation", s, e)

    # 10 hand-built stays; expected labels derived by hand from the rules
    cases = [
        # (stay, therapies, assessments, pains,
        #  expected acuity, expected abd, expected pain)
        (PatientStay("p0", 0.0, day), [], [], [],
         ["stable"] * 6, ["unlabeled"] * 2, []),
        (PatientStay("p1", 0.0, day), [vent("p1", 0.0, day)],
         [AssessmentEvent("p1", 1 * H, rass=-5)],
         [PainEvent("p1", 12 * H, 0)],
         ["unstable"] * 6, ["coma", "unlabeled"], ["low"]),
        (PatientStay("p2", 0.0, day),
         [TherapyInterval("p2", "vasopressor", 10 * H, 11 * H)],
         [AssessmentEvent("p2", 13 * H, cam="positive")],
         [PainEvent("p2", 6 * H, 4)],
         ["stable", "stable", "unstable", "stable", "stable", "stable"],
         ["unlabeled", "delirium"], ["high"]),
        (PatientStay("p3", 0.0, day), [vent("p3", 4 * H, 8 * H)],
         [AssessmentEvent("p3", 0.0, gcs=8),
          AssessmentEvent("p3", 13 * H, cam="negative")],
         [PainEvent("p3", 3 * H, 3), PainEvent("p3", 20 * H, 10)],
         ["stable", "unstable", "stable", "stable", "stable", "stable"],
         ["coma", "normal"], ["low", "high"]),
        (PatientStay("p4", 0.0, day),
         [TherapyInterval("p4", "CRRT", 7 * H, 9 * H)],
         [AssessmentEvent("p4", 1 * H, cam="positive"),
          AssessmentEvent("p4", 2 * H, rass=-4)],
         [PainEvent("p4", 12 * H, 7)],
         ["stable", "unstable", "unstable", "stable", "stable", "stable"],
         ["coma", "unlabeled"], ["high"]),  # coma outranks the positive CAM
        (PatientStay("p5", 0.0, day),
         [TherapyInterval("p5", "blood_transfusion", 4 * H, 4 * H)],
         [AssessmentEvent("p5", 1 * H, cam="unassessable")], [],
         ["stable"] * 6,  # zero-length therapy overlaps nothing
         ["normal", "unlabeled"], []),
        (PatientStay("p6", 0.0, day),
         [vent("p6", 0.0, 2 * H),
          TherapyInterval("p6", "vasopressor", 21 * H, 22 * H)],
         [AssessmentEvent("p6", 5 * H, cam="positive"),
          AssessmentEvent("p6", 15 * H, cam="positive")],
         [],
         ["unstable", "stable", "stable", "stable", "stable", "unstable"],
         ["delirium", "delirium"], []),
        (PatientStay("p7", 0.0, day), [vent("p7", 23 * H, 30 * H)],
         [AssessmentEvent("p7", 23 * H, rass=-4)],
         [PainEvent("p7", 22 * H, 5)],
         ["stable"] * 5 + ["unstable"],
         ["unlabeled", "coma"], ["high"]),
        (PatientStay("p8", 0.0, 18 * H), [], [], [],
         ["stable"] * 5, ["unlabeled"] * 2, []),  # last intervals partial
        (PatientStay("p9", 0.0, day), [vent("p9", 0.0, day)],
         [AssessmentEvent("p9", 1 * H, cam="positive"),
          AssessmentEvent("p9", 13 * H, rass=-5)],
         [PainEvent("p9", 6 * H, 2), PainEvent("p9", 18 * H, 8)],
         ["unstable"] * 6, ["delirium", "coma"], ["low", "high"]),
    ]
    assert len(cases) == 10
    for stay, therapies, assessments, pains, want_ac, want_abd, want_pain in cases:
        out = label_patient(stay, therapies, assessments, pains)
        by_kind = {k: [iv for iv in out if iv.kind == k]
                   for k in ("acuity", "abd", "pain")}
        assert [iv.label for iv in by_kind["acuity"]] == want_ac, stay.patient_id
        assert [iv.label for iv in by_kind["abd"]] == want_abd, stay.patient_id
        assert [iv.label for iv in by_kind["pain"]] == want_pain, stay.patient_id
        # tiling: gap-free, overlap-free, spans the stay exactly
        for kind in ("acuity", "abd"):
            ivs = by_kind[kind]
            assert ivs[0].start == stay.admission
            assert ivs[-1].end == stay.discharge
            for a, b in zip(ivs, ivs[1:]):
                assert a.end == b.start


def test_12_end_to_end_determinism(tmp_path):
    config = write_pipeline_fixture(tmp_path, seed=0)
    commands = ("merge", "split", "train", "eval", "infer", "phenotype",
                "associate")
    for out in ("run1", "run2"):
        out_dir = str(tmp_path / out)
        for command in commands:
            rc = main(["--config", str(config), "--out", out_dir, command])
            assert rc == EXIT_OK, (out, command)
    reports = ("merged.csv", "train.csv", "test.csv", "model.npz",
               "metrics.csv", "detections.csv", "intervals.csv",
               "association.csv", "presence_ratios.csv")
    for name in reports:
        a, b = tmp_path / "run1" / name, tmp_path / "run2" / name
        assert a.read_bytes() == b.read_bytes(), f"{name} differs between runs"
