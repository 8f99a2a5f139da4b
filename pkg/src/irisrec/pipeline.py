"""End-to-end experiment orchestration and the three accuracy sweeps.

A run is: split the dataset, extract one feature vector per image (CNN
layer tap with spatial averaging, or scattering statistics), z-score with
training statistics, fit PCA (on training features by default, or on all
features to mirror the fit-on-everything protocol), project, train the
multi-class SVM on the training half, and score the test half.

Extracted features are cached on disk keyed by a content hash of the
feature/preprocessing config and the dataset index, so the expensive
extraction step runs once per (dataset, feature source) across sweeps.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import cnn, pca, scattering, svm
from .dataset import (
    DatasetIndex,
    SplitSpec,
    index_dataset,
    load_image,
    resize_bilinear,
    split_dataset,
    to_network_input,
)
from .report import Report, SweepRecord, write_report

log = logging.getLogger(__name__)

# Conventional per-channel means of the pretrained 16-layer network's
# training corpus; overridable in the config (use zeros for tiny test nets).
VGG_MEANS = (123.68, 116.779, 103.939)


class PipelineError(Exception):
    pass


class ConfigError(PipelineError):
    pass


class FeatureExtractionError(PipelineError):
    pass


class LengthMismatchError(PipelineError):
    pass


class EmptyError(PipelineError):
    pass


def _take(doc: dict, allowed: dict, context: str) -> dict:
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    merged = dict(allowed)
    merged.update(doc)
    return merged


@dataclass(frozen=True)
class CnnFeatures:
    weights: str
    spec: str = "vgg16"
    tap: str = "fc6"
    pre_relu: bool = False

    kind = "cnn"


@dataclass(frozen=True)
class ScatteringFeatures:
    J: int = 3
    L: int = 6
    size: tuple = (128, 128)

    kind = "scattering"


@dataclass(frozen=True)
class Preprocessing:
    means: tuple = VGG_MEANS
    resize: tuple | None = None  # default: network input dims / scattering size


@dataclass(frozen=True)
class PcaSettings:
    k: int
    fit_scope: str = "train_only"  # or "all"


@dataclass(frozen=True)
class SvmSettings:
    c: float = 1.0
    strategy: str = "ova"
    standardize: bool = True


@dataclass(frozen=True)
class RunConfig:
    dataset_root: str
    features: object  # CnnFeatures | ScatteringFeatures
    pca: PcaSettings
    svm: SvmSettings
    split: SplitSpec
    preprocessing: Preprocessing = Preprocessing()
    output_dir: str = "out"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        top = _take(
            doc,
            {
                "dataset_root": None,
                "features": None,
                "preprocessing": {},
                "pca": None,
                "svm": {},
                "split": None,
                "output_dir": "out",
            },
            "config",
        )
        for key in ("dataset_root", "features", "pca", "split"):
            if top[key] is None:
                raise ConfigError(f"config: missing required key {key!r}")

        feat_doc = dict(top["features"])
        kind = feat_doc.pop("kind", None)
        if kind == "cnn":
            feat = _take(
                feat_doc,
                {"weights": None, "spec": "vgg16", "tap": "fc6", "pre_relu": False},
                "features(cnn)",
            )
            if feat["weights"] is None:
                raise ConfigError("features(cnn): missing required key 'weights'")
            features = CnnFeatures(**feat)
        elif kind == "scattering":
            feat = _take(feat_doc, {"J": 3, "L": 6, "size": [128, 128]}, "features(scattering)")
            features = ScatteringFeatures(
                J=int(feat["J"]), L=int(feat["L"]), size=tuple(int(v) for v in feat["size"])
            )
        else:
            raise ConfigError(f"features: kind must be 'cnn' or 'scattering', got {kind!r}")

        pre = _take(top["preprocessing"], {"means": list(VGG_MEANS), "resize": None}, "preprocessing")
        preprocessing = Preprocessing(
            means=tuple(float(v) for v in pre["means"]),
            resize=tuple(int(v) for v in pre["resize"]) if pre["resize"] else None,
        )
        pca_doc = _take(top["pca"], {"k": None, "fit_scope": "train_only"}, "pca")
        if pca_doc["k"] is None:
            raise ConfigError("pca: missing required key 'k'")
        pca_settings = PcaSettings(k=int(pca_doc["k"]), fit_scope=pca_doc["fit_scope"])
        svm_doc = _take(top["svm"], {"c": 1.0, "strategy": "ova", "standardize": True}, "svm")
        svm_settings = SvmSettings(
            c=float(svm_doc["c"]),
            strategy=svm_doc["strategy"],
            standardize=bool(svm_doc["standardize"]),
        )
        split_doc = _take(
            top["split"], {"train_per_subject": None, "seed": 0, "mode": "first_n"}, "split"
        )
        if split_doc["train_per_subject"] is None:
            raise ConfigError("split: missing required key 'train_per_subject'")
        split = SplitSpec(
            train_per_subject=int(split_doc["train_per_subject"]),
            seed=int(split_doc["seed"]),
            mode=split_doc["mode"],
        )
        config = cls(
            dataset_root=top["dataset_root"],
            features=features,
            preprocessing=preprocessing,
            pca=pca_settings,
            svm=svm_settings,
            split=split,
            output_dir=top["output_dir"],
        )
        config.validate()
        return config

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def validate(self) -> None:
        if not Path(self.dataset_root).is_dir():
            raise ConfigError(f"dataset_root {self.dataset_root!r} is not a directory")
        if self.features.kind == "cnn":
            if not Path(self.features.weights).is_file():
                raise ConfigError(f"weights file {self.features.weights!r} does not exist")
            if self.features.spec != "vgg16" and not Path(self.features.spec).is_file():
                raise ConfigError(f"network spec {self.features.spec!r} does not exist")
        if self.pca.k < 1:
            raise ConfigError("pca.k must be >= 1")
        if self.pca.fit_scope not in ("train_only", "all"):
            raise ConfigError(f"pca.fit_scope must be train_only or all, got {self.pca.fit_scope!r}")
        if self.svm.c <= 0:
            raise ConfigError("svm.c must be > 0")
        if self.svm.strategy not in ("ova", "ovo"):
            raise ConfigError(f"svm.strategy must be ova or ovo, got {self.svm.strategy!r}")

    def to_dict(self) -> dict:
        features: dict = {"kind": self.features.kind}
        if self.features.kind == "cnn":
            features.update(
                weights=self.features.weights,
                spec=self.features.spec,
                tap=self.features.tap,
                pre_relu=self.features.pre_relu,
            )
        else:
            features.update(J=self.features.J, L=self.features.L, size=list(self.features.size))
        return {
            "dataset_root": self.dataset_root,
            "features": features,
            "preprocessing": {
                "means": list(self.preprocessing.means),
                "resize": list(self.preprocessing.resize) if self.preprocessing.resize else None,
            },
            "pca": {"k": self.pca.k, "fit_scope": self.pca.fit_scope},
            "svm": {
                "c": self.svm.c,
                "strategy": self.svm.strategy,
                "standardize": self.svm.standardize,
            },
            "split": {
                "train_per_subject": self.split.train_per_subject,
                "seed": self.split.seed,
                "mode": self.split.mode,
            },
            "output_dir": self.output_dir,
        }


def accuracy(predictions, truth) -> Fraction:
    """Exact top-1 accuracy as a rational; reports convert to 4 decimals."""
    predictions = list(predictions)
    truth = list(truth)
    if len(predictions) != len(truth):
        raise LengthMismatchError(f"{len(predictions)} predictions vs {len(truth)} labels")
    if not truth:
        raise EmptyError("cannot score an empty prediction set")
    correct = sum(1 for p, t in zip(predictions, truth) if p == t)
    return Fraction(correct, len(truth))


def _to_grayscale(img):
    if img.channels == 1:
        return img
    from .dataset import ImageTensor

    return ImageTensor(img.data.mean(axis=2, keepdims=True))


def extract_features(config: RunConfig, index: DatasetIndex):
    """One FeatureVector per image, in index order, with subject ids attached."""
    if not len(index):
        raise EmptyError("cannot extract features from an empty index")
    if config.features.kind == "cnn":
        spec = cnn.load_network_spec(config.features.spec)
        weights = cnn.load_weights(config.features.weights, spec)
        target = config.preprocessing.resize or spec.input_shape[:2]
        tap = config.features.tap
        spec.layer_index(tap)  # raises UnknownTapError early

        def one(path):
            img = resize_bilinear(load_image(path), target[0], target[1])
            img = to_network_input(img, config.preprocessing.means)
            taps = cnn.forward(spec, weights, img, {tap}, pre_relu=config.features.pre_relu)
            return cnn.spatial_average(taps[tap])

    else:
        size = config.preprocessing.resize or config.features.size
        bank = scattering.build_filter_bank(config.features.J, config.features.L, size)

        def one(path):
            img = _to_grayscale(load_image(path))
            img = resize_bilinear(img, size[0], size[1])
            return scattering.scattering_features(scattering.scatter(img, bank))

    out = []
    for subject, path in index.entries:
        try:
            vector = one(path)
        except Exception as exc:
            raise FeatureExtractionError(f"{path}: {exc}") from exc
        out.append(replace(vector, subject_id=subject))
    return out


def _feature_cache_key(config: RunConfig, index: DatasetIndex) -> str:
    doc = {
        "features": config.to_dict()["features"],
        "preprocessing": config.to_dict()["preprocessing"],
        "entries": list(index.entries),
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def extract_features_cached(config: RunConfig, index: DatasetIndex):
    """Disk-cached extract_features; returns (vectors, cache path)."""
    cache_dir = Path(config.output_dir) / "cache"
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"features-{_feature_cache_key(config, index)}.npz"
    if path.is_file():
        stored = np.load(path, allow_pickle=False)
        values = stored["values"]
        subjects = stored["subjects"]
        source = str(stored["source_layer"])
        vectors = [
            cnn.FeatureVector(values=values[i], source_layer=source, subject_id=str(subjects[i]))
            for i in range(values.shape[0])
        ]
        return vectors, path
    vectors = extract_features(config, index)
    np.savez(
        path,
        values=np.stack([v.values for v in vectors]),
        subjects=np.array([v.subject_id for v in vectors]),
        source_layer=np.str_(vectors[0].source_layer),
    )
    return vectors, path


def _matrices(vectors, index: DatasetIndex):
    by_path = {path: vec for (_, path), vec in zip(index.entries, vectors)}

    def select(sub_index: DatasetIndex):
        x = np.stack([by_path[path].values for _, path in sub_index.entries])
        labels = np.array([subject for subject, _ in sub_index.entries])
        return x, labels

    return select


@dataclass(frozen=True)
class FittedModels:
    scaler: object  # svm.Standardizer | None
    pca_model: pca.PcaModel
    svm_model: svm.MultiSvmModel
    k_used: int


def _fit_and_score(config, x_train, y_train, x_test, y_test, k, pca_model=None):
    """Standardize, project to k dims, train, and score the test half."""
    scaler = None
    if config.svm.standardize:
        scaler = svm.Standardizer.fit(x_train)
        x_train = scaler.transform(x_train)
        x_test = scaler.transform(x_test)
    if pca_model is None:
        fit_x = x_train if config.pca.fit_scope == "train_only" else np.vstack([x_train, x_test])
        # Dead feature-map channels can leave zero-variance directions;
        # degenerate components project to constants, which the SVM ignores.
        pca_model = pca.fit(fit_x, k, allow_degenerate=True)
    else:
        pca_model = pca.truncate(pca_model, k)
    z_train = pca.transform(pca_model, x_train)
    z_test = pca.transform(pca_model, x_test)
    model = svm.train_multiclass(z_train, y_train, config.svm.c, config.svm.strategy)
    predictions = svm.predict(model, z_test)
    confusion: dict = {}
    for pred, true in zip(predictions, y_test):
        correct, total = confusion.get(true, (0, 0))
        confusion[true] = (correct + (pred == true), total + 1)
    return FittedModels(scaler, pca_model, model, k), predictions, confusion


def _fit_budget(config, n_train: int, n_all: int, d: int) -> int:
    n_fit = n_train if config.pca.fit_scope == "train_only" else n_all
    return min(d, n_fit - 1)


def run_experiment(config: RunConfig, basename: str = "run"):
    """Full single run; writes <basename>.{csv,json,png} to the output dir.

    Returns (report, fitted models) so callers can persist the models.
    """
    started = time.perf_counter()
    index = index_dataset(config.dataset_root)
    train_index, test_index = split_dataset(index, config.split)
    vectors, _ = extract_features_cached(config, index)
    select = _matrices(vectors, index)
    x_train, y_train = select(train_index)
    x_test, y_test = select(test_index)

    k = config.pca.k
    budget = _fit_budget(config, len(y_train), len(vectors), x_train.shape[1])
    if k > budget:
        raise pca.BadKError(f"pca.k={k} exceeds fit limit min(d, N_fit-1)={budget}")
    models, predictions, confusion = _fit_and_score(config, x_train, y_train, x_test, y_test, k)
    acc = accuracy(predictions, y_test)
    record = SweepRecord(
        sweep_var="run",
        value=1,
        accuracy=acc,
        correct=sum(c for c, _ in confusion.values()),
        total=len(y_test),
        train_size=len(y_train),
        test_size=len(y_test),
        wall_ms=(time.perf_counter() - started) * 1000.0,
        extras={"pca_k": models.k_used},
    )
    report = Report(config_echo=config.to_dict(), records=(record,), confusion=confusion)
    write_report(report, config.output_dir, basename)
    return report, models


def sweep_pca(config: RunConfig, k_values) -> Report:
    """Accuracy against the projection dimension, one PCA fit truncated per k.

    Truncating a single max-k fit is identical to refitting at each k
    because the component set is nested.
    """
    k_values = [int(k) for k in k_values]
    if not k_values:
        raise pca.BadKError("k_values must be nonempty")
    index = index_dataset(config.dataset_root)
    train_index, test_index = split_dataset(index, config.split)
    vectors, _ = extract_features_cached(config, index)
    select = _matrices(vectors, index)
    x_train, y_train = select(train_index)
    x_test, y_test = select(test_index)

    budget = _fit_budget(config, len(y_train), len(vectors), x_train.shape[1])
    if max(k_values) > budget:
        raise pca.BadKError(f"max(k_values)={max(k_values)} exceeds fit limit {budget}")

    base_config = replace(config, pca=replace(config.pca, k=max(k_values)))
    scaler = svm.Standardizer.fit(x_train) if config.svm.standardize else None
    s_train = scaler.transform(x_train) if scaler else x_train
    s_test = scaler.transform(x_test) if scaler else x_test
    fit_x = s_train if config.pca.fit_scope == "train_only" else np.vstack([s_train, s_test])
    full_model = pca.fit(fit_x, max(k_values), allow_degenerate=True)

    records = []
    confusion: dict = {}
    for k in k_values:
        started = time.perf_counter()
        sub = pca.truncate(full_model, k)
        z_train = pca.transform(sub, s_train)
        z_test = pca.transform(sub, s_test)
        model = svm.train_multiclass(z_train, y_train, config.svm.c, config.svm.strategy)
        predictions = svm.predict(model, z_test)
        confusion = {}
        for pred, true in zip(predictions, y_test):
            correct, total = confusion.get(true, (0, 0))
            confusion[true] = (correct + (pred == true), total + 1)
        acc = accuracy(predictions, y_test)
        records.append(
            SweepRecord(
                sweep_var="pca_k",
                value=k,
                accuracy=acc,
                correct=sum(c for c, _ in confusion.values()),
                total=len(y_test),
                train_size=len(y_train),
                test_size=len(y_test),
                wall_ms=(time.perf_counter() - started) * 1000.0,
            )
        )
    report = Report(config_echo=base_config.to_dict(), records=tuple(records), confusion=confusion)
    write_report(report, config.output_dir, "sweep_pca")
    return report


def sweep_layers(config: RunConfig, taps) -> Report:
    """Accuracy per tapped layer, features capped at min(256, dim) by PCA."""
    if config.features.kind != "cnn":
        raise ConfigError("sweep_layers requires cnn features")
    spec = cnn.load_network_spec(config.features.spec)
    for tap in taps:
        spec.layer_index(tap)  # raises UnknownTapError

    index = index_dataset(config.dataset_root)
    train_index, test_index = split_dataset(index, config.split)

    records = []
    confusion: dict = {}
    for tap in taps:
        started = time.perf_counter()
        tap_config = replace(config, features=replace(config.features, tap=tap))
        vectors, _ = extract_features_cached(tap_config, index)
        select = _matrices(vectors, index)
        x_train, y_train = select(train_index)
        x_test, y_test = select(test_index)
        budget = _fit_budget(config, len(y_train), len(vectors), x_train.shape[1])
        k = min(256, x_train.shape[1], budget)
        _, predictions, confusion = _fit_and_score(
            tap_config, x_train, y_train, x_test, y_test, k
        )
        acc = accuracy(predictions, y_test)
        records.append(
            SweepRecord(
                sweep_var="layer",
                value=tap,
                accuracy=acc,
                correct=sum(c for c, _ in confusion.values()),
                total=len(y_test),
                train_size=len(y_train),
                test_size=len(y_test),
                wall_ms=(time.perf_counter() - started) * 1000.0,
                extras={"pca_k": k},
            )
        )
    report = Report(config_echo=config.to_dict(), records=tuple(records), confusion=confusion)
    write_report(report, config.output_dir, "sweep_layers")
    return report


def sweep_train_count(config: RunConfig, counts) -> Report:
    """Accuracy against per-subject training-set size, same seed per point.

    pca.k is clamped to the per-count fit limit min(d, N_fit-1) so small
    training sets stay runnable; the effective k is recorded per point.
    """
    counts = [int(c) for c in counts]
    index = index_dataset(config.dataset_root)
    vectors, _ = extract_features_cached(config, index)
    select = _matrices(vectors, index)

    records = []
    confusion: dict = {}
    for count in counts:
        started = time.perf_counter()
        split = replace(config.split, train_per_subject=count)
        train_index, test_index = split_dataset(index, split)
        x_train, y_train = select(train_index)
        x_test, y_test = select(test_index)
        budget = _fit_budget(config, len(y_train), len(vectors), x_train.shape[1])
        k = min(config.pca.k, budget)
        _, predictions, confusion = _fit_and_score(config, x_train, y_train, x_test, y_test, k)
        acc = accuracy(predictions, y_test)
        records.append(
            SweepRecord(
                sweep_var="train_per_subject",
                value=count,
                accuracy=acc,
                correct=sum(c for c, _ in confusion.values()),
                total=len(y_test),
                train_size=len(y_train),
                test_size=len(y_test),
                wall_ms=(time.perf_counter() - started) * 1000.0,
                extras={"pca_k": k},
            )
        )
    report = Report(config_echo=config.to_dict(), records=tuple(records), confusion=confusion)
    write_report(report, config.output_dir, "sweep_train_count")
    return report
