import json

import numpy as np
import pytest

from astro_outliers.cae import TrainConfig
from astro_outliers.exceptions import ConfigError, DataError, StateError
from astro_outliers.metrics import read_roc
from astro_outliers.persistence import load_model
from astro_outliers.pipeline import (
    ExperimentConfig,
    directory_lock,
    emit_report,
    load_config,
    run_experiment,
    strip_timings,
)

FAST = dict(scale=0.02, noise=0.05, output_head="sigmoid", train=TrainConfig(batch_size=32, epochs=1))


def config(tmp_path, name, **kw):
    return ExperimentConfig(**{**FAST, "out": str(tmp_path / name), **kw})


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("runs")
    fr = (0.05, 0.10, 0.15)
    return {
        "att": run_experiment(config(base, "att", method="attcae_knn", fractions=fr)),
        "att_again": run_experiment(config(base, "att", method="attcae_knn", fractions=fr)),
        "cae": run_experiment(config(base, "cae", method="cae_knn")),
        "raw": run_experiment(config(base, "raw", method="knn_raw")),
    }


def test_artifacts_present_and_loadable(runs):
    for key in ("att", "cae"):
        art = runs[key].artifacts
        assert set(art) == {"config", "scores", "roc", "model", "report"}
        model = load_model(art["model"])
        assert model.spec.use_attention == (key == "att")
    assert "model" not in runs["raw"].artifacts
    assert runs["raw"].embedding_dim == 64 * 64 * 3


def test_report_contents(runs):
    rep = json.loads(open(runs["cae"].artifacts["report"]).read())
    assert list(rep) == ["config", "data", "embedding_dim", "metrics", "loss_history", "timings", "artifacts"]
    assert len(rep["metrics"]) == 1 and rep["metrics"][0]["fraction"] == 0.1
    assert rep["data"]["n_test"] == 107 and rep["data"]["n_test_outliers"] == 11
    assert len(rep["metrics"][0]["flagged"]) == 11
    assert set(rep["timings"]) >= {"prepare", "train", "score", "evaluate"}
    assert len(rep["loss_history"]) == 1


def test_fraction_rows_share_auc(runs):
    rows = runs["att"].metrics
    assert [r.fraction for r in rows] == [0.05, 0.10, 0.15]
    assert len({r.auc for r in rows}) == 1
    assert rows[0].recall <= rows[1].recall <= rows[2].recall


def test_determinism_modulo_timings(runs):
    a, b = runs["att"].to_dict(), runs["att_again"].to_dict()
    assert a["timings"] != {} and strip_timings(a) == strip_timings(b)


def test_roc_file_reintegrates(runs):
    for key in ("att", "raw"):
        fpr, tpr = read_roc(runs[key].artifacts["roc"])
        area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
        assert abs(area - runs[key].auc) <= 1e-9


def test_raw_scoring_is_slower(runs):
    raw = runs["raw"]
    assert raw.metrics[0].wall_time == raw.timings["score"]
    for key in ("att", "cae"):
        assert raw.metrics[0].wall_time > runs[key].timings["score"]


def test_lock_file(tmp_path):
    cfg = config(tmp_path, "locked", method="knn_raw")
    with directory_lock(cfg.out):
        with pytest.raises(StateError):
            run_experiment(cfg)
    assert not (tmp_path / "locked" / ".lock").exists()


def test_errors_carry_phase(tmp_path):
    cfg = ExperimentConfig(method="knn_raw", source="cache", dataset_dir=str(tmp_path / "none"),
                           out=str(tmp_path / "o"))
    with pytest.raises(DataError) as info:
        run_experiment(cfg)
    assert info.value.phase == "prepare"


def test_emit_report_checks_artifacts(runs, tmp_path):
    rep = runs["raw"]
    broken = type(rep)(**{**rep.__dict__, "artifacts": {"scores": str(tmp_path / "gone.csv")}})
    with pytest.raises(StateError):
        emit_report(broken, tmp_path / "r.json")


@pytest.mark.parametrize("bad", [
    dict(method="svm"), dict(subset="subset9"), dict(fractions=()), dict(fractions=(1.5,)),
    dict(split_ratio=1.0), dict(source="catalog"), dict(source="cache"), dict(noise=-1.0),
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig(**bad)


def test_config_file_roundtrip(tmp_path):
    cfg = ExperimentConfig(method="cae_knn", fractions=(0.05, 0.1), train=TrainConfig(epochs=3))
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert load_config(p) == cfg
    p.write_text(json.dumps({"methd": "cae_knn"}))
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("{")
    with pytest.raises(ConfigError):
        load_config(p)


def test_scaled_sizes():
    assert ExperimentConfig().subset_spec.counts == {0: 1600, 2: 178}
    assert ExperimentConfig(source="cache", dataset_dir="x").effective_scale == 1.0
