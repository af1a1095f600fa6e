"""Acceptance suite: one test per criterion, summarised as PASS/FAIL lines at the end of the run.

Run alone with ``pytest tests/test_acceptance.py -v``. The desk-scale
end-to-end criterion trains nine small models and dominates the runtime.
"""

import itertools
import os
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from astro_outliers.attention import CbamBlock, ChannelAttention, SpatialAttention, hidden_width
from astro_outliers.cae import CaeSpec, TrainConfig, build_cae
from astro_outliers.datasets import (
    SUBSETS,
    Category,
    ImageDirectory,
    build_subset,
    category_counts,
    plan_subset,
    preprocess,
    preprocess_windows,
    read_catalog,
    stratified_split_indices,
)
from astro_outliers.knn import KnnConfig, knn_scores, round_half_up, top_m_flagged
from astro_outliers.metrics import ConfusionCounts, auc_rank, confusion, fraction_sweep, prf_metrics, roc_auc
from astro_outliers.nn import ConvLayer, ops
from astro_outliers.pipeline import ExperimentConfig, run_experiment

criterion = pytest.mark.criterion


@pytest.fixture
def detail(request):
    def note(text):
        request.node.acceptance_detail = text
        print(text)
    return note


# --- gradient integrity ----------------------------------------------------------


@criterion("gradient integrity: complete attCAE, every parameter, FD h=1e-5 float64, rel err <= 1e-4, < 2 min")
def test_gradient_integrity(detail):
    start = time.perf_counter()
    # every stage of the model is present (4 conv stages with CBAM, dense stack,
    # embedding, mirrored decoder, softmax head); widths are reduced so that
    # central differences over every parameter fit in the time budget
    spec = CaeSpec(input_dims=(16, 16, 3), encoder_conv_filters=(8, 8, 8, 8), encoder_dense_units=(16, 8, 8),
                   embedding_dim=4, use_attention=True)
    m = build_cae(spec, seed=0, precision="float64")
    rng = np.random.default_rng(1)
    for name, arr in m.parameters().items():
        if name.endswith("bias"):
            arr[...] = rng.uniform(-0.2, 0.2, arr.shape)
    x = np.random.default_rng(0).uniform(size=(2, 16, 16, 3))
    _, grads = m.loss_and_grads(x)
    num = oracles.finite_difference_grads(lambda: oracles.bce_terms(m.reconstruct(x), x), m.parameters(), h=1e-5)
    worst = {k: float(oracles.relative_error(grads[k], num[k]).max()) for k in grads}
    elapsed = time.perf_counter() - start
    name = max(worst, key=worst.get)
    detail(f"{m.n_parameters()} params, worst rel err {worst[name]:.2e} ({name}), {elapsed:.1f}s")
    assert worst[name] <= 1e-4
    assert elapsed < 120


# --- kernel oracles -----------------------------------------------------------------


def _kernel_case(rng, kind):
    b = int(rng.integers(1, 3))
    h, w, c = (int(v) for v in rng.integers(1, [9, 9, 5]))
    if kind == "conv":
        k = int(rng.choice([1, 3, 5]))
        padding = str(rng.choice(["same", "valid"]))
        if padding == "valid":
            h, w = max(h, k), max(w, k)
        x = rng.standard_normal((b, h, w, c))
        kern = rng.standard_normal((k, k, c, int(rng.integers(1, 5))))
        bias = rng.standard_normal(kern.shape[3])
        return ops.conv2d_forward(x, kern, bias, padding)[0], oracles.conv2d_loops(x, kern, bias, padding)
    if kind == "pool":
        x = rng.standard_normal((b, 2 * ((h + 1) // 2), 2 * ((w + 1) // 2), c))
        return ops.maxpool2(x)[0], oracles.maxpool_loops(x)
    if kind == "upsample":
        x = rng.standard_normal((b, h, w, c))
        return ops.upsample2(x), oracles.upsample_loops(x)
    if kind == "dense":
        d_in = h * w * c
        x, wt, bias = rng.standard_normal((b, d_in)), rng.standard_normal((d_in, 8)), rng.standard_normal(8)
        return ops.dense_forward(x, wt, bias), oracles.dense_loops(x, wt, bias)
    if kind == "softmax":
        x = 3 * rng.standard_normal((b, h, w, c))
        return ops.softmax_channels(x), oracles.softmax_loops(x)
    x = rng.standard_normal((b, h, w, c))
    r, k = int(rng.integers(1, 4)), int(rng.choice([3, 5, 7]))
    hid = hidden_width(c, r)
    ch = ChannelAttention(rng.standard_normal((c, hid)), rng.standard_normal((hid, c)), r)
    sp = SpatialAttention(ConvLayer(rng.standard_normal((k, k, 2, 1)), rng.standard_normal(1)))
    got = CbamBlock(ch, sp).forward(x)[0]
    gated = oracles.channel_attention_loops(x, ch.mlp_in, ch.mlp_out)
    return got, oracles.spatial_attention_loops(gated, sp.conv.kernels, sp.conv.bias)


@criterion("kernel oracles: 1000 random conv/pool/upsample/dense/softmax/attention cases within 1e-12, < 1 min")
def test_kernel_oracles(detail):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    kinds = ["conv", "pool", "upsample", "dense", "softmax", "attention"]
    worst = 0.0
    for i in range(1000):
        got, want = _kernel_case(rng, kinds[i % len(kinds)])
        assert got.shape == want.shape
        worst = max(worst, float(np.abs(got - want).max()))
    elapsed = time.perf_counter() - start
    detail(f"max abs diff {worst:.1e}, {elapsed:.1f}s")
    assert worst <= 1e-12 and elapsed < 60


# --- k-NN and selection ------------------------------------------------------------------


@criterion("k-NN and selection oracles: 100 instances exact vs full sort (n<=200, d<=16), top-m ties, < 1 min")
def test_knn_and_selection_oracles(detail):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    for _ in range(100):
        n, d = int(rng.integers(2, 201)), int(rng.integers(1, 17))
        x = rng.standard_normal((n, d))
        if rng.random() < 0.3:
            x = np.round(x, 1)  # duplicate and equidistant points
        k = int(rng.integers(1, min(n - 1, 10) + 1))
        mode = str(rng.choice(["kth_distance", "mean_k_distance"]))
        assert np.array_equal(knn_scores(x, KnnConfig(k, mode)), oracles.kth_distance_sort(x, k, mode))
    for _ in range(100):
        scores = rng.integers(0, 6, size=int(rng.integers(1, 300))).astype(float).tolist()
        m = int(rng.integers(0, len(scores) + 1))
        assert top_m_flagged(scores, m) == oracles.top_m_sort(scores, m)
    elapsed = time.perf_counter() - start
    detail(f"{elapsed:.1f}s")
    assert elapsed < 60


# --- AUC -------------------------------------------------------------------------------------


@criterion("AUC oracle: rank AUC vs pairwise within 1e-12 on 100 tied instances; trapezoid area equals AUC")
def test_auc_oracle(detail):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 300))
        scores = rng.integers(0, int(rng.integers(2, 20)), size=n).astype(float)
        truth = rng.random(n) < rng.uniform(0.05, 0.5)
        truth[0], truth[1] = True, False
        auc = auc_rank(scores, truth)
        worst = max(worst, abs(auc - oracles.auc_pairwise(scores, truth)),
                    abs(roc_auc(scores, truth).trapezoid_area() - auc))
    detail(f"max deviation {worst:.1e}")
    assert worst <= 1e-12


# --- metric identities -----------------------------------------------------------------------


@criterion("metric identities: recall = precision = f1 when flagged count equals outlier count; formulas on small matrices")
def test_metric_identities():
    for tp, fp, tn, fn in itertools.product(range(6), repeat=4):
        if tp + fp + tn + fn == 0:
            continue
        m = prf_metrics(ConfusionCounts(tp, fp, tn, fn))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        assert m["precision"] == p and m["recall"] == r
        assert m["accuracy"] == (tp + tn) / (tp + fp + tn + fn)
        assert abs(m["f1"] - (2 * p * r / (p + r) if p + r else 0.0)) <= 1e-15
    rng = np.random.default_rng(3)
    for _ in range(500):
        n = int(rng.integers(2, 200))
        truth = rng.random(n) < rng.uniform(0.01, 0.9)
        flagged = rng.choice(n, size=int(truth.sum()), replace=False).tolist()
        m = prf_metrics(confusion(flagged, truth))
        assert m["recall"] == m["precision"] == m["f1"]


# --- protocol arithmetic ------------------------------------------------------------------------


@criterion("protocol arithmetic: subset compositions (17778 = 16000+1778, 445/445/444/444) and 533 test outliers")
def test_protocol_arithmetic(detail):
    assert SUBSETS["subset5"].counts == {0: 16000, 1: 445, 2: 445, 3: 444, 4: 444}
    pools = {c: [f"{c}-{i}" for i in range(n)] for c, n in {0: 8436, 1: 8069, 2: 579, 3: 3903, 4: 7806}.items()}
    tests = []
    for name, spec in sorted(SUBSETS.items()):
        plan = plan_subset(pools, spec, seed=0)
        got = {}
        for p in plan:
            got[p.category] = got.get(p.category, 0) + 1
        assert got == spec.counts and len(plan) == 17778 == 16000 + 1778
        labels = np.array([p.category != 0 for p in plan])
        _, test = stratified_split_indices(labels, 0.7, seed=0)
        tests.append((len(test), int(labels[test].sum())))
        assert labels[test].sum() == 533
        assert round_half_up(0.10 * len(test)) == 533
    detail(f"test split sizes/outliers {sorted(set(tests))}")


# --- preprocessing --------------------------------------------------------------------------------


@criterion("preprocessing chain: 424->170->80->64 windows exact; constant images unchanged up to 1/255")
def test_preprocessing_chain():
    assert preprocess_windows() == (127, 8)
    for value in (0, 1, 37, 128, 200, 255):
        out = preprocess(np.full((424, 424, 3), value, np.uint8))
        assert out.shape == (64, 64, 3)
        assert np.abs(out - value / 255).max() <= 1e-12


# --- desk-scale end to end -----------------------------------------------------------------------

DESK_SEEDS = (0, 1, 2)


def desk_config(method, seed, out):
    return ExperimentConfig(method=method, subset="subset1", source="synthetic", noise=0.05, embedding_dim=20,
                            output_head="sigmoid", train=TrainConfig(batch_size=32, epochs=5),
                            fractions=(0.05, 0.10, 0.15), seed=seed, out=str(out / f"{method}-{seed}"))


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    runs, wall = {}, {}
    for method in ("attcae_knn", "cae_knn", "knn_raw"):
        start = time.perf_counter()
        runs[method] = [run_experiment(desk_config(method, s, out)) for s in DESK_SEEDS]
        wall[method] = time.perf_counter() - start
    return runs, wall


def _at(report, fraction):
    return next(r for r in report.metrics if abs(r.fraction - fraction) < 1e-12)


@criterion("desk-scale end to end: attcae_knn 3 seeds AUC >= 0.85, recall@10% >= 0.5, < 10 min; ordering vs cae_knn and knn_raw")
def test_desk_scale_end_to_end(desk_runs, detail):
    runs, wall = desk_runs
    att = runs["attcae_knn"]
    assert att[0].n_train + att[0].n_test == 1778 and att[0].n_test_outliers == 53
    mean_auc = {k: float(np.mean([r.auc for r in v])) for k, v in runs.items()}
    att_recall = float(np.mean([_at(r, 0.10).recall for r in att]))
    detail(f"AUC att {mean_auc['attcae_knn']:.3f} cae {mean_auc['cae_knn']:.3f} raw {mean_auc['knn_raw']:.3f}; "
           f"att recall@10% {att_recall:.3f}; att wall {wall['attcae_knn']:.0f}s (cae {wall['cae_knn']:.0f}s)")
    assert mean_auc["attcae_knn"] >= 0.85
    assert att_recall >= 0.5
    assert wall["attcae_knn"] < 600
    assert mean_auc["attcae_knn"] >= mean_auc["cae_knn"] - 0.02
    assert mean_auc["attcae_knn"] > mean_auc["knn_raw"] and mean_auc["cae_knn"] > mean_auc["knn_raw"]


@criterion("fraction sweep: AUC identical across 5/10/15%, recall nondecreasing, precision nonincreasing")
def test_fraction_sweep_behavior(desk_runs, detail):
    runs, _ = desk_runs
    checked = 0
    for reports in runs.values():
        for rep in reports:
            rows = [_at(rep, f) for f in (0.05, 0.10, 0.15)]
            assert len({r.auc for r in rows}) == 1
            assert rows[0].recall <= rows[1].recall <= rows[2].recall
            assert rows[0].precision >= rows[1].precision >= rows[2].precision
            checked += 1
    rng = np.random.default_rng(5)
    for _ in range(200):
        truth = rng.random(500) < 0.1
        scores = rng.standard_normal(500) + rng.uniform(0, 4) * truth
        rows = fraction_sweep(scores, truth, [0.05, 0.10, 0.15])
        assert len({r.auc for r in rows}) == 1
        assert rows[0].recall <= rows[1].recall <= rows[2].recall
    detail(f"{checked} pipeline runs plus 200 random scored sets")


# --- optional full-data check ------------------------------------------------------------------------

KAGGLE = os.environ.get("ASTRO_OUTLIERS_KAGGLE_DIR")


@criterion("full data (optional): categorizer counts 8436/8069/579/3903/7806; subset1 AUC >= 0.90, recall >= 0.60")
@pytest.mark.skipif(not KAGGLE, reason="set ASTRO_OUTLIERS_KAGGLE_DIR to the Galaxy Zoo training data")
def test_full_data(tmp_path, detail):
    root = Path(KAGGLE)
    catalog = read_catalog(root / "training_solutions_rev1.csv")
    counts = category_counts(catalog)
    assert [counts[c] for c in Category] == [8436, 8069, 579, 3903, 7806]
    ds_dir = tmp_path / "subset1"
    from astro_outliers.datasets import save_dataset

    save_dataset(build_subset(catalog, ImageDirectory(root / "images_training_rev1"), SUBSETS["subset1"], 0), ds_dir)
    report = run_experiment(ExperimentConfig(method="attcae_knn", source="cache", dataset_dir=str(ds_dir),
                                             out=str(tmp_path / "run")))
    detail(f"AUC {report.auc:.3f} recall {_at(report, 0.10).recall:.3f}")
    assert report.auc >= 0.90 and _at(report, 0.10).recall >= 0.60
