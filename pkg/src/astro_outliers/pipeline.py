"""Experiment orchestration: data -> split -> (train, embed) -> score -> evaluate -> artifacts."""

import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import datasets
from .cae import CaeSpec, TrainConfig, build_cae, train_cae
from .exceptions import ConfigError, DataError, StateError
from .knn import KnnConfig, knn_scores, read_scores, round_half_up, top_m_flagged, write_scores
from .metrics import fraction_sweep, roc_auc, write_roc
from .persistence import save_model

logger = logging.getLogger(__name__)

METHODS = ("knn_raw", "cae_knn", "attcae_knn")
SOURCES = ("synthetic", "catalog", "cache")
SYNTHETIC_SCALE = 0.1


@dataclass
class ExperimentConfig:
    method: str = "attcae_knn"
    subset: str = "subset1"
    source: str = "synthetic"
    scale: float = None
    noise: float = 0.02
    catalog_path: str = None
    image_dir: str = None
    dataset_dir: str = None
    embedding_dim: int = 20
    output_head: str = "softmax3"
    train: TrainConfig = field(default_factory=TrainConfig)
    knn: KnnConfig = field(default_factory=KnnConfig)
    fractions: tuple = (0.10,)
    split_ratio: float = 0.7
    seed: int = 0
    out: str = "runs/experiment"

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if isinstance(self.knn, dict):
            self.knn = KnnConfig(**self.knn)
        self.fractions = tuple(float(f) for f in self.fractions)
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.subset not in datasets.SUBSETS:
            raise ConfigError(f"subset must be one of {tuple(datasets.SUBSETS)}, got {self.subset!r}")
        if self.source not in SOURCES:
            raise ConfigError(f"source must be one of {SOURCES}")
        if self.source == "catalog" and not (self.catalog_path and self.image_dir):
            raise ConfigError("catalog source needs catalog_path and image_dir")
        if self.source == "cache" and not self.dataset_dir:
            raise ConfigError("cache source needs dataset_dir")
        if not self.fractions or any(not 0 < f < 1 for f in self.fractions):
            raise ConfigError("fractions must be a nonempty list of values in (0, 1)")
        if not 0 < self.split_ratio < 1:
            raise ConfigError("split_ratio must lie in (0, 1)")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")

    @property
    def effective_scale(self):
        if self.scale is not None:
            return self.scale
        return SYNTHETIC_SCALE if self.source == "synthetic" else 1.0

    @property
    def subset_spec(self):
        spec = datasets.SUBSETS[self.subset]
        scale = self.effective_scale
        return spec if scale == 1.0 else spec.scaled(scale)

    def cae_spec(self):
        return CaeSpec(embedding_dim=self.embedding_dim, output_head=self.output_head,
                       use_attention=self.method == "attcae_knn")

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["train"] = asdict(self.train)
        d["knn"] = asdict(self.knn)
        d["fractions"] = list(self.fractions)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path):
    try:
        return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e


@dataclass
class RunReport:
    config: dict
    metrics: list
    loss_history: list
    embedding_dim: int
    timings: dict
    artifacts: dict
    n_train: int = 0
    n_test: int = 0
    n_test_outliers: int = 0
    flagged: dict = field(default_factory=dict)

    @property
    def auc(self):
        return self.metrics[0].auc

    def to_dict(self):
        metrics = []
        for m in self.metrics:
            block = m.to_dict()
            if m.fraction in self.flagged:
                block["flagged"] = list(self.flagged[m.fraction])
            metrics.append(block)
        return {
            "config": self.config,
            "data": {"n_train": self.n_train, "n_test": self.n_test,
                     "n_test_outliers": self.n_test_outliers},
            "embedding_dim": self.embedding_dim,
            "metrics": metrics,
            "loss_history": list(self.loss_history),
            "timings": self.timings,
            "artifacts": self.artifacts,
        }


@contextmanager
def _phase(name, timings):
    start = time.perf_counter()
    try:
        yield
    except Exception as e:
        if not hasattr(e, "phase"):
            e.phase = name
        raise
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - start


@contextmanager
def directory_lock(directory):
    """Exclusive lock file guarding one experiment per output directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StateError(f"{directory} is locked by another experiment ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)


def prepare_dataset(config):
    if config.source == "synthetic":
        return datasets.synth_dataset(config.subset_spec, config.seed, config.noise)
    if config.source == "cache":
        return datasets.load_dataset(config.dataset_dir)
    catalog = datasets.read_catalog(config.catalog_path)
    return datasets.build_subset(catalog, datasets.ImageDirectory(config.image_dir),
                                 config.subset_spec, config.seed)


def train_model(config, train_images):
    model = build_cae(config.cae_spec(), config.seed, config.train.precision)
    train_cfg = TrainConfig(**{**asdict(config.train), "seed": config.seed})
    return train_cae(model, train_images, train_cfg)


def embed(model, images):
    return model.encode(images).astype(np.float64)


def flatten_images(images):
    return np.asarray(images, dtype=np.float64).reshape(len(images), -1)


def score_points(points, knn_config):
    return knn_scores(points, knn_config)


def evaluate_scores(scores, labels, fractions):
    reports = fraction_sweep(scores, labels, fractions)
    flagged = {f: top_m_flagged(scores, round_half_up(f * len(scores))) for f in fractions}
    return reports, flagged, roc_auc(scores, labels)


def run_experiment(config):
    """Run one configured experiment end to end and write its artifacts.

    Exceptions propagate unchanged with a ``phase`` attribute naming the
    step that failed (prepare, train, embed, score, evaluate, persist).
    """
    timings = {"prepare": 0.0, "train": 0.0, "embed": 0.0, "score": 0.0, "evaluate": 0.0}
    with directory_lock(config.out) as out:
        with _phase("prepare", timings):
            dataset = prepare_dataset(config)
            if dataset.labels.all() or not dataset.labels.any():
                raise DataError("dataset needs both inliers and outliers")
            train_ds, test_ds = datasets.split(dataset, config.split_ratio, config.seed)
        model, history = None, []
        if config.method == "knn_raw":
            with _phase("score", timings):
                scores = score_points(flatten_images(test_ds.images), config.knn)
            emb_dim = int(np.prod(test_ds.images.shape[1:]))
        else:
            with _phase("train", timings):
                model, hist = train_model(config, train_ds.images)
                history = hist.epoch_losses
            with _phase("embed", timings):
                points = embed(model, test_ds.images)
            with _phase("score", timings):
                scores = score_points(points, config.knn)
            emb_dim = config.embedding_dim
        with _phase("evaluate", timings):
            reports, flagged, curve = evaluate_scores(scores, test_ds.labels, config.fractions)
        method_time = timings["train"] + timings["embed"] + timings["score"]
        for r in reports:
            r.wall_time = method_time
        timings["total"] = sum(timings.values())
        with _phase("persist", timings):
            artifacts = _write_artifacts(out, config, model, scores, test_ds, curve)
        flagged_ids = {f: [test_ds.ids[i] for i in idx] for f, idx in flagged.items()}
        report = RunReport(config.to_dict(), reports, history, emb_dim, timings, artifacts,
                           len(train_ds), len(test_ds), int(test_ds.labels.sum()), flagged_ids)
        emit_report(report, out / "report.json")
    return report


def _write_artifacts(out, config, model, scores, test_ds, curve):
    artifacts = {}
    cfg_path = out / "config.json"
    cfg_path.write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    artifacts["config"] = str(cfg_path)
    scores_path = out / "scores.csv"
    write_scores(scores_path, scores, test_ds.ids)
    artifacts["scores"] = str(scores_path)
    roc_path = out / "roc.csv"
    write_roc(roc_path, curve)
    artifacts["roc"] = str(roc_path)
    if model is not None:
        artifacts["model"] = str(save_model(model, out / "model.bin"))
    artifacts["report"] = str(out / "report.json")
    return artifacts


TIMING_FIELDS = ("timings", "wall_time")


def emit_report(report, path):
    """Write the report as JSON with a fixed key order (timing fields included)."""
    d = report.to_dict()
    path = Path(path)
    path.write_text(json.dumps(d, indent=2) + "\n")
    missing = [p for k, p in report.artifacts.items() if k != "report" and not Path(p).exists()]
    if missing:
        raise StateError(f"report references missing artifacts: {missing}")
    return path


def strip_timings(obj):
    """Copy of a report dict with every timing field removed (for determinism checks)."""
    if isinstance(obj, dict):
        return {k: strip_timings(v) for k, v in obj.items() if k not in TIMING_FIELDS}
    if isinstance(obj, list):
        return [strip_timings(v) for v in obj]
    return obj


def load_scores_for(dataset, scores_path):
    """Align a scores file with a dataset's labels by sample id."""
    ids, scores = read_scores(scores_path)
    index = {sid: i for i, sid in enumerate(dataset.ids)}
    try:
        rows = [index[sid] for sid in ids]
    except KeyError as e:
        raise DataError(f"scores file names unknown sample {e}") from None
    return scores, dataset.labels[rows]
