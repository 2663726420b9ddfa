"""Command-line pipeline: featurize, fit, predict, evaluate, contrast, synthesize.

All randomness flows from ``--seed`` and outputs carry the effective
configuration, so identical invocations on identical inputs produce
byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from ._container import ContainerError
from .density import KdeConfig
from .encoder import (
    baseline_mean_map,
    load_model,
    model_from_lad,
    model_from_ridge,
    predict_density,
    save_model,
    with_background,
)
from .evaluation import (
    ModelSpec,
    shuffle_split_cv,
    term_contrast,
    write_report_json,
    write_scores_csv,
)
from .lad_solver import default_lambda_grid, fit_lad, select_lambda
from .ridge_solver import fit_label_constrained, fit_volume_ridge
from .synth import (
    NoiseModel,
    SynthSpec,
    block_atlas,
    generate_corpus,
    make_vocabulary,
    planted_coefficients,
    save_ground_truth,
)
from .targets import build_targets, training_documents
from .text_features import (
    assemble_features,
    corpus_fingerprint,
    load_corpus,
    load_features,
    load_vocabulary,
    save_corpus,
    save_features,
    save_vocabulary,
)
from .volume_space import (
    DensityVolume,
    build_voxel_partition,
    load_atlas_partition,
    read_volume,
    write_nifti,
    write_volume,
)

THREADS_ENV = "TEXTVOL_THREADS"


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# Shared argument groups
# ---------------------------------------------------------------------------


def _add_partition_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("partition (voxel grid or atlas)")
    group.add_argument("--voxel-size", type=float, metavar="MM",
                       help="edge length of cubic voxels in mm (voxel grid)")
    group.add_argument("--box", metavar="X0,Y0,Z0,X1,Y1,Z1",
                       help="bounding box corners in mm (voxel grid)")
    group.add_argument("--mask", metavar="VOLUME",
                       help="volume file; nonzero voxels are in-brain (voxel grid)")
    group.add_argument("--atlas", metavar="VOLUME",
                       help="integer label volume file (atlas)")
    group.add_argument("--atlas-labels", metavar="TXT",
                       help="one region name per line, aligned with atlas labels 1..m")


def _partition_from_args(args) -> "Partition":
    if args.atlas:
        if not args.atlas_labels:
            raise ValueError("--atlas requires --atlas-labels")
        label_volume = read_volume(args.atlas)
        names = Path(args.atlas_labels).read_text(encoding="utf-8").splitlines()
        names = [line for line in names if line.strip()]
        return load_atlas_partition(label_volume, names)
    if args.voxel_size is None or args.box is None:
        raise ValueError("either --atlas/--atlas-labels or --voxel-size/--box is required")
    corners = [float(v) for v in args.box.split(",")]
    if len(corners) != 6:
        raise ValueError("--box needs six comma-separated mm values: X0,Y0,Z0,X1,Y1,Z1")
    box = np.array(corners).reshape(2, 3)
    mask = read_volume(args.mask) if args.mask else None
    return build_voxel_partition(box, args.voxel_size, mask=mask)


def _add_kde_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("kernel density estimation")
    group.add_argument("--h", type=float, default=1.0, metavar="H",
                       help="bandwidth multiplier; kernel std is H x voxel size (default 1)")
    group.add_argument("--truncation", type=float, default=5.0, metavar="R",
                       help="zero the kernel beyond R standard deviations (default 5)")


def _kde_from_args(args) -> KdeConfig:
    return KdeConfig(bandwidth=args.h, truncation_radius=args.truncation)


def _parse_lambda_grid(text: str) -> tuple[float, ...]:
    values = tuple(float(v) for v in text.split(","))
    if not values:
        raise ValueError("empty lambda grid")
    return values


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_features(args) -> int:
    corpus = load_corpus(args.corpus)
    vocab = load_vocabulary(args.vocab)
    features = assemble_features(
        [d.text for d in corpus],
        vocab,
        doc_ids=tuple(d.doc_id for d in corpus),
        scale_mode=args.scale_mode,
    )
    save_features(features, args.output, corpus_fingerprint(corpus), vocab.fingerprint)
    print(f"wrote {features.n} x {features.d} feature cache to {args.output}")
    return 0


def _effective_config(args, skip=("func",)) -> dict:
    return {
        key: value
        for key, value in sorted(vars(args).items())
        if key not in skip and not callable(value)
    }


def _cmd_fit(args) -> int:
    corpus = load_corpus(args.corpus)
    vocab = load_vocabulary(args.vocab)
    partition = _partition_from_args(args)
    kde = _kde_from_args(args)

    docs = training_documents(corpus, partition)
    if not docs:
        raise ValueError("no document has in-brain coordinates; nothing to fit")
    dropped = len(corpus) - len(docs)
    if dropped:
        print(f"dropped {dropped} documents without in-brain coordinates", file=sys.stderr)

    if args.features:
        features = load_features(args.features, corpus_fingerprint(docs), vocab.fingerprint)
    else:
        features = assemble_features(
            [d.text for d in docs], vocab, doc_ids=tuple(d.doc_id for d in docs)
        )
    targets = build_targets(docs, partition, kde, n_threads=args.threads)

    lam = args.lam
    if lam is None and args.loss != "mean":
        grid = _parse_lambda_grid(args.lambda_grid) if args.lambda_grid else tuple(
            default_lambda_grid(features.n, targets.m)
        )
        lam = select_lambda(
            features, targets, grid, args.inner_folds,
            loss=args.loss, vocabulary=vocab, seed=args.seed,
        )
        print(f"selected lambda = {lam:g}")

    if args.loss == "lad":
        beta, _, report = fit_lad(features, targets, lam)
        if not report.converged:
            print("warning: solver did not reach the convergence tolerance", file=sys.stderr)
        model = model_from_lad(beta, features, targets, vocab, lam, kde)
    elif args.loss == "ridge":
        model = model_from_ridge(
            fit_volume_ridge(features, targets, lam), features, vocab, partition, kde
        )
    elif args.loss == "label":
        model = model_from_ridge(
            fit_label_constrained(features, targets, partition, lam, vocab),
            features, vocab, partition, kde,
        )
    else:
        model = baseline_mean_map(targets, vocab, kde)

    save_model(model, args.output, extra_meta=_effective_config(args))
    print(f"wrote {args.loss} model ({features.d} terms x {targets.m} regions) to {args.output}")
    return 0


def _cmd_predict(args) -> int:
    vocab = load_vocabulary(args.vocab)
    partition = _partition_from_args(args)
    model = load_model(args.model, vocab, partition)
    text = Path(args.text).read_text(encoding="utf-8")
    q = predict_density(model, text)
    if args.background:
        q = with_background(q, partition)
    write_volume(q, args.output, extra_meta=_effective_config(args))
    if args.nifti:
        write_nifti(q, args.nifti)
    print(f"wrote predicted density to {args.output}")
    return 0


def _spec_from_json(entry: dict, base_dir: Path) -> ModelSpec:
    part_cfg = entry["partition"]
    kind = part_cfg["kind"]
    if kind == "voxel":
        mask = None
        if part_cfg.get("mask"):
            mask = read_volume(base_dir / part_cfg["mask"])
        partition = build_voxel_partition(
            np.asarray(part_cfg["box_mm"], dtype=float),
            part_cfg["voxel_size_mm"],
            mask=mask,
        )
    elif kind == "atlas":
        label_volume = read_volume(base_dir / part_cfg["volume"])
        names = (base_dir / part_cfg["labels"]).read_text(encoding="utf-8").splitlines()
        partition = load_atlas_partition(label_volume, [n for n in names if n.strip()])
    else:
        raise ValueError(f"unknown partition kind {kind!r} in spec {entry.get('name')!r}")
    kde = KdeConfig(
        bandwidth=entry.get("h", 1.0),
        truncation_radius=entry.get("truncation_radius", 5.0),
    )
    grid = entry.get("lambda_grid")
    return ModelSpec(
        name=entry["name"],
        loss=entry["loss"],
        partition=partition,
        kde=kde,
        lam=entry.get("lam"),
        lambda_grid=tuple(grid) if grid else None,
        inner_folds=entry.get("inner_folds", 3),
    )


def _cmd_evaluate(args) -> int:
    corpus = load_corpus(args.corpus)
    vocab = load_vocabulary(args.vocab)
    specs_path = Path(args.specs)
    entries = json.loads(specs_path.read_text(encoding="utf-8"))
    specs = [_spec_from_json(entry, specs_path.parent) for entry in entries]

    scorable = [d for d in corpus if d.n_coordinates > 0]
    dropped = len(corpus) - len(scorable)
    if dropped:
        print(f"dropped {dropped} text-only documents", file=sys.stderr)

    reports = shuffle_split_cv(
        scorable, vocab, specs,
        n_folds=args.folds, test_fraction=args.test_fraction,
        seed=args.seed, n_threads=args.threads,
    )
    write_report_json(reports, args.output, config=_effective_config(args))
    if args.csv:
        write_scores_csv(reports, args.csv)
    for report in reports:
        mean = float(np.mean(report.fold_means))
        print(f"{report.name}: mean log-likelihood {mean:.4f} (chance {report.chance:.4f})")
    return 0


def _cmd_contrast(args) -> int:
    vocab = load_vocabulary(args.vocab)
    partition = _partition_from_args(args)
    model = load_model(args.model, vocab, partition)
    corpus = load_corpus(args.corpus)
    contrast = term_contrast(model, [d.text for d in corpus], args.term)
    write_volume(contrast, args.output, extra_meta=_effective_config(args))
    if args.nifti:
        write_nifti(contrast, args.nifti)
    print(f"wrote contrast map for {args.term!r} to {args.output}")
    return 0


def _cmd_synth(args) -> int:
    cfg = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    d = int(cfg["d"])
    vocab = make_vocabulary(d)
    blocks = tuple(cfg.get("atlas_blocks", [2, 2, 2]))
    m = int(np.prod(blocks))
    if m > d:
        raise ValueError(f"{blocks} blocks need {m} labels but the vocabulary has {d} phrases")
    partition = block_atlas(
        np.asarray(cfg["box_mm"], dtype=float),
        cfg["voxel_size_mm"],
        blocks,
        vocab.phrases[:m],
    )
    noise_cfg = cfg.get("noise", {})
    spec = SynthSpec(
        partition=partition,
        vocabulary=vocab,
        beta_star=np.asarray(cfg["beta_star"], dtype=float)
        if "beta_star" in cfg
        else planted_coefficients(d, m),
        n_docs=int(cfg.get("n_docs", 100)),
        coords_per_doc=int(cfg.get("coords_per_doc", 20)),
        tokens_per_doc=tuple(cfg.get("tokens_per_doc", [10, 30])),
        terms_per_doc=tuple(cfg.get("terms_per_doc", [1, 3])),
        noise=NoiseModel(
            kind=noise_cfg.get("kind", "none"),
            scale_mm=noise_cfg.get("scale_mm", 0.0),
            outlier_fraction=noise_cfg.get("outlier_fraction", 0.0),
        ),
        seed=int(seed),
    )
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    docs = generate_corpus(spec)
    save_corpus(docs, out / "corpus.jsonl")
    save_vocabulary(vocab, out / "vocabulary.txt")
    label_field = DensityVolume(
        values=partition.region_of_voxel.astype(np.float64), affine=partition.affine
    )
    write_volume(label_field, out / "atlas.bin", extra_meta={"labels": list(partition.labels)})
    (out / "atlas_labels.txt").write_text("\n".join(partition.labels) + "\n", encoding="utf-8")
    save_ground_truth(spec, out / "truth.json")
    print(f"wrote {len(docs)} synthetic documents to {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="textvol",
        description="Learn and evaluate linear text-to-volume density encoders.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="vectorize a corpus into a cached feature file")
    p.add_argument("--corpus", required=True, metavar="JSONL", help="corpus records file")
    p.add_argument("--vocab", required=True, metavar="TXT", help="one phrase per line")
    p.add_argument("--scale-mode", choices=["n_variance", "std"], default="n_variance",
                   help="column scale: n x variance (default) or standard deviation")
    p.add_argument("--output", required=True, metavar="FILE", help="feature cache path")
    p.set_defaults(func=_cmd_features)

    p = sub.add_parser("fit", help="fit an encoder model")
    p.add_argument("--corpus", required=True, metavar="JSONL")
    p.add_argument("--vocab", required=True, metavar="TXT")
    p.add_argument("--features", metavar="FILE", help="optional feature cache from 'features'")
    p.add_argument("--loss", choices=["lad", "ridge", "label", "mean"], default="lad",
                   help="least deviations, volume-rescaled ridge, label-constrained, or mean map")
    p.add_argument("--lambda", dest="lam", type=float, metavar="L",
                   help="penalty strength; omit to select by cross-validation")
    p.add_argument("--lambda-grid", metavar="L1,L2,...",
                   help="decreasing candidate penalties for selection")
    p.add_argument("--inner-folds", type=int, default=3, metavar="K",
                   help="folds for penalty selection (default 3)")
    p.add_argument("--seed", type=int, default=0, help="seed for penalty-selection folds")
    p.add_argument("--threads", type=int, default=_default_threads(), metavar="N",
                   help=f"worker threads for target building (default ${THREADS_ENV} or 1)")
    _add_partition_args(p)
    _add_kde_args(p)
    p.add_argument("--output", required=True, metavar="FILE", help="model file path")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("predict", help="predict a density volume from a text file")
    p.add_argument("--model", required=True, metavar="FILE")
    p.add_argument("--vocab", required=True, metavar="TXT")
    p.add_argument("--text", required=True, metavar="TXT", help="input document text")
    p.add_argument("--background", action="store_true",
                   help="write the background-mixed pdf q' instead of the raw prediction")
    p.add_argument("--nifti", metavar="NII", help="also export as NIfTI-1")
    _add_partition_args(p)
    p.add_argument("--output", required=True, metavar="FILE", help="volume file path")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="compare model specs by held-out log-likelihood")
    p.add_argument("--corpus", required=True, metavar="JSONL")
    p.add_argument("--vocab", required=True, metavar="TXT")
    p.add_argument("--specs", required=True, metavar="JSON", help="list of model specs")
    p.add_argument("--folds", type=int, default=100, metavar="N",
                   help="shuffle-split folds (default 100)")
    p.add_argument("--test-fraction", type=float, default=0.1, metavar="F",
                   help="held-out fraction per fold (default 0.1)")
    p.add_argument("--seed", type=int, default=0, help="split seed shared by all specs")
    p.add_argument("--threads", type=int, default=_default_threads(), metavar="N",
                   help=f"worker threads (default ${THREADS_ENV} or 1)")
    p.add_argument("--csv", metavar="FILE", help="also write the per-document score table")
    p.add_argument("--output", required=True, metavar="JSON", help="report path")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("contrast", help="term-contrast map from text-only documents")
    p.add_argument("--model", required=True, metavar="FILE")
    p.add_argument("--vocab", required=True, metavar="TXT")
    p.add_argument("--corpus", required=True, metavar="JSONL", help="documents (text used only)")
    p.add_argument("--term", required=True, metavar="PHRASE", help="vocabulary phrase to contrast")
    p.add_argument("--nifti", metavar="NII", help="also export as NIfTI-1")
    _add_partition_args(p)
    p.add_argument("--output", required=True, metavar="FILE", help="volume file path")
    p.set_defaults(func=_cmd_contrast)

    p = sub.add_parser("synth", help="generate a synthetic planted-association corpus")
    p.add_argument("--spec", required=True, metavar="JSON", help="generator settings")
    p.add_argument("--seed", type=int, metavar="S", help="override the spec seed")
    p.add_argument("--output-dir", required=True, metavar="DIR",
                   help="writes corpus.jsonl, vocabulary.txt, atlas.bin, atlas_labels.txt, truth.json")
    p.set_defaults(func=_cmd_synth)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, TypeError, ContainerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
