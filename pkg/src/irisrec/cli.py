"""Command-line interface.

The --config JSON file is authoritative; the per-field flags override
single values inside it.  Reports (CSV + JSON sidecar + rendered figure)
land in the configured output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import fixtures, pca, pipeline, svm
from .dataset import index_dataset, split_dataset


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="run config JSON (authoritative)")
    parser.add_argument("--pca-k", type=int, help="override pca.k")
    parser.add_argument("--svm-c", type=float, help="override svm.c")
    parser.add_argument("--tap", help="override features.tap (cnn only)")
    parser.add_argument("--train-per-subject", type=int, help="override split.train_per_subject")
    parser.add_argument("--seed", type=int, help="override split.seed")
    parser.add_argument(
        "--pca-fit-on-all",
        action="store_true",
        help="fit PCA on train+test features (mirrors the fit-on-everything protocol)",
    )
    parser.add_argument("--strategy", choices=("ova", "ovo"), help="override svm.strategy")
    parser.add_argument(
        "--features", choices=("cnn", "scattering"), help="override features.kind"
    )
    parser.add_argument("--out", help="override output_dir")


def _load_config(args) -> pipeline.RunConfig:
    doc = json.loads(Path(args.config).read_text())
    if args.features:
        doc.setdefault("features", {})["kind"] = args.features
    if args.tap is not None:
        doc.setdefault("features", {})["tap"] = args.tap
    if args.pca_k is not None:
        doc.setdefault("pca", {})["k"] = args.pca_k
    if args.pca_fit_on_all:
        doc.setdefault("pca", {})["fit_scope"] = "all"
    if args.svm_c is not None:
        doc.setdefault("svm", {})["c"] = args.svm_c
    if args.strategy is not None:
        doc.setdefault("svm", {})["strategy"] = args.strategy
    if args.train_per_subject is not None:
        doc.setdefault("split", {})["train_per_subject"] = args.train_per_subject
    if args.seed is not None:
        doc.setdefault("split", {})["seed"] = args.seed
    if args.out is not None:
        doc["output_dir"] = args.out
    return pipeline.RunConfig.from_dict(doc)


def _cmd_index(args) -> int:
    index = index_dataset(args.root)
    print(f"{len(index.subjects)} subjects, {len(index)} images")
    for subject, paths in index.by_subject().items():
        print(f"  {subject}: {len(paths)} images")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as fh:
            fh.write("subject_id,image_path\n")
            for subject, path in index.entries:
                fh.write(f"{subject},{path}\n")
        print(f"wrote {out}")
    return 0


def _cmd_extract(args) -> int:
    config = _load_config(args)
    index = index_dataset(config.dataset_root)
    vectors, cache_path = pipeline.extract_features_cached(config, index)
    print(f"extracted {len(vectors)} vectors of dim {vectors[0].dim} -> {cache_path}")
    return 0


def _cmd_train(args) -> int:
    config = _load_config(args)
    report, models = pipeline.run_experiment(config, basename="train")
    out_dir = Path(config.output_dir)
    pca.save_pca(out_dir / "pca.pcam", models.pca_model)
    svm.save_multiclass(out_dir / "svm.svmm", models.svm_model)
    if models.scaler is not None:
        (out_dir / "scaler.json").write_text(
            json.dumps(
                {"mean": models.scaler.mean.tolist(), "scale": models.scaler.scale.tolist()}
            )
            + "\n"
        )
    print(f"train accuracy on held-out split: {float(report.accuracy):.4f}")
    print(f"models and report written to {out_dir}")
    return 0


def _cmd_evaluate(args) -> int:
    import numpy as np

    config = _load_config(args)
    models_dir = Path(args.models) if args.models else Path(config.output_dir)
    pca_model = pca.load_pca(models_dir / "pca.pcam")
    svm_model = svm.load_multiclass(models_dir / "svm.svmm")
    scaler = None
    scaler_path = models_dir / "scaler.json"
    if scaler_path.is_file():
        doc = json.loads(scaler_path.read_text())
        scaler = svm.Standardizer(mean=np.array(doc["mean"]), scale=np.array(doc["scale"]))

    index = index_dataset(config.dataset_root)
    _, test_index = split_dataset(index, config.split)
    vectors, _ = pipeline.extract_features_cached(config, index)
    select = pipeline._matrices(vectors, index)
    x_test, y_test = select(test_index)
    if scaler is not None:
        x_test = scaler.transform(x_test)
    z_test = pca.transform(pca_model, x_test)
    predictions = svm.predict(svm_model, z_test)
    acc = pipeline.accuracy(predictions, y_test)
    confusion: dict = {}
    for pred, true in zip(predictions, y_test):
        correct, total = confusion.get(true, (0, 0))
        confusion[true] = (correct + (pred == true), total + 1)
    from .report import Report, SweepRecord, write_report

    record = SweepRecord(
        sweep_var="evaluate",
        value=1,
        accuracy=acc,
        correct=sum(c for c, _ in confusion.values()),
        total=len(y_test),
        train_size=0,
        test_size=len(y_test),
        wall_ms=0.0,
    )
    report = Report(config_echo=config.to_dict(), records=(record,), confusion=confusion)
    write_report(report, config.output_dir, "evaluate")
    print(f"accuracy: {float(acc):.4f} ({record.correct}/{record.total})")
    return 0


def _cmd_sweep_pca(args) -> int:
    config = _load_config(args)
    report = pipeline.sweep_pca(config, args.k_values)
    for rec in report.records:
        print(f"k={rec.value}: accuracy {float(rec.accuracy):.4f}")
    return 0


def _cmd_sweep_layers(args) -> int:
    config = _load_config(args)
    report = pipeline.sweep_layers(config, args.taps)
    for rec in report.records:
        print(f"{rec.value}: accuracy {float(rec.accuracy):.4f}")
    return 0


def _cmd_sweep_train_count(args) -> int:
    config = _load_config(args)
    report = pipeline.sweep_train_count(config, args.counts)
    for rec in report.records:
        print(f"train_per_subject={rec.value}: accuracy {float(rec.accuracy):.4f}")
    return 0


def _cmd_make_fixtures(args) -> int:
    out = Path(args.out)
    dataset_root = fixtures.make_synthetic_dataset(
        out / "dataset",
        subjects=args.subjects,
        images_per_subject=args.images_per_subject,
        size=args.size,
        seed=args.seed,
    )
    spec_path, weights_path = fixtures.make_tiny_network(out, seed=args.seed)
    print(f"synthetic dataset: {dataset_root}")
    print(f"tiny network: {spec_path}, {weights_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="irisrec",
        description="Iris recognition experiments: CNN/scattering features, PCA, linear SVM.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="index a dataset directory")
    p.add_argument("root")
    p.add_argument("--out", help="write the index as CSV")
    p.set_defaults(func=_cmd_index)

    p = sub.add_parser("extract", help="extract features into the cache")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("train", help="run the pipeline and save PCA/SVM models")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate saved models on the test split")
    _add_config_flags(p)
    p.add_argument("--models", help="directory with pca.pcam/svm.svmm (default: output_dir)")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("sweep-pca", help="accuracy vs number of PCA features")
    _add_config_flags(p)
    p.add_argument("--k-values", nargs="+", type=int, required=True)
    p.set_defaults(func=_cmd_sweep_pca)

    p = sub.add_parser("sweep-layers", help="accuracy vs tapped network layer")
    _add_config_flags(p)
    p.add_argument("--taps", nargs="+", required=True)
    p.set_defaults(func=_cmd_sweep_layers)

    p = sub.add_parser("sweep-train-count", help="accuracy vs training samples per subject")
    _add_config_flags(p)
    p.add_argument("--counts", nargs="+", type=int, required=True)
    p.set_defaults(func=_cmd_sweep_train_count)

    p = sub.add_parser("make-fixtures", help="write the synthetic dataset and tiny network")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=fixtures.DEFAULT_SEED)
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--images-per-subject", type=int, default=10)
    p.add_argument("--size", type=int, default=128)
    p.set_defaults(func=_cmd_make_fixtures)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
