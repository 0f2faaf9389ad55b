"""Command-line entry points: corpus generation, training, evaluation,
one-shot generation, bundle assembly and the HTTP service."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import training
from .corpus import ProceduralCategory, ProceduralSpec, make_procedural_corpus
from .data import load_dataset, save_dataset, save_schemas, split_dataset
from .evaluation import SmallCNNExtractor, evaluate
from .labelmap import label_map_png_bytes, rgb_png_bytes, save_label_map
from .pipeline import PipelineBundle, assemble_bundle, session_snapshot


def _cmd_make_corpus(args) -> int:
    cats = tuple(
        ProceduralCategory(
            name=f"critter{i}",
            n_parts=args.parts,
            adjacency=args.adjacency,
            present_prob=args.present_prob,
        )
        for i in range(args.categories)
    )
    spec = ProceduralSpec(
        categories=cats,
        samples_per_category=args.samples,
        mask_resolution=args.mask_resolution,
    )
    samples, schemas = make_procedural_corpus(spec, np.random.default_rng(args.seed))
    out = Path(args.out)
    save_dataset(samples, schemas, out)
    save_schemas(schemas, out / "schema.json")
    print(f"wrote {len(samples)} samples across {len(schemas)} categories to {out}")
    return 0


def _schema_path(args) -> Path:
    return Path(args.schema) if args.schema else Path(args.data) / "schema.json"


def _cmd_train(args) -> int:
    samples, schemas, p = load_dataset(args.data, _schema_path(args))
    if args.config:
        config = training.TrainingConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        config = training.default_config(args.stage)
    if config.stage != args.stage:
        print(f"error: config stage {config.stage!r} != --stage {args.stage!r}", file=sys.stderr)
        return 2
    overrides = json.loads(args.model_overrides) if args.model_overrides else None
    if args.no_split:
        train, val = samples, samples
    else:
        train, val, _test = split_dataset(
            samples, rng=np.random.default_rng(config.seed)
        )
        val = val or train
    result = training.train_stage(
        args.stage, train, val, schemas, p, config, args.out, overrides
    )
    print(f"stage {args.stage}: best checkpoint at {result.checkpoint_dir}")
    return 0


def _cmd_bundle(args) -> int:
    samples, schemas, p = load_dataset(args.data, _schema_path(args))
    train, _val, _test = (
        (samples, [], []) if args.no_split
        else split_dataset(samples, rng=np.random.default_rng(args.seed))
    )
    assemble_bundle(args.out, args.box, args.labelmap, args.label2obj, schemas, train or samples)
    print(f"bundle assembled at {args.out}")
    return 0


def _cmd_generate(args) -> int:
    bundle = PipelineBundle.load(args.checkpoints)
    parts = args.parts.split(",") if args.parts else None
    session = bundle.generate(args.category, parts, seed=args.seed, session_id="cli")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snap = session_snapshot(session, bundle.schemas)
    (out / "boxes.json").write_text(json.dumps(snap, indent=1, sort_keys=True) + "\n")
    save_label_map(session.label_map, out / "label_map.png")
    (out / "sprite.png").write_bytes(rgb_png_bytes(session.image))
    print(f"wrote boxes.json, label_map.png, sprite.png to {out}")
    return 0


def _cmd_evaluate(args) -> int:
    bundle = PipelineBundle.load(args.checkpoints)
    samples, _schemas, _p = load_dataset(args.data, _schema_path(args))
    extractor = SmallCNNExtractor(seed=args.extractor_seed)
    report = evaluate(bundle, samples, extractor, n_per_category=args.n, seed=args.seed)
    report.save(args.out)
    print(json.dumps(report.to_dict(), indent=1))
    return 0


def _cmd_serve(args) -> int:
    from .service import serve

    serve(args.checkpoints, args.store, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partgen")
    sub = parser.add_subparsers(dest="command", required=True)

    mc = sub.add_parser("make-corpus", help="generate the procedural sprite corpus")
    mc.add_argument("--out", required=True)
    mc.add_argument("--categories", type=int, default=2)
    mc.add_argument("--parts", type=int, default=4)
    mc.add_argument("--samples", type=int, default=8)
    mc.add_argument("--seed", type=int, default=7)
    mc.add_argument("--adjacency", choices=("star", "chain"), default="star")
    mc.add_argument("--present-prob", type=float, default=1.0)
    mc.add_argument("--mask-resolution", type=int, default=64)
    mc.set_defaults(func=_cmd_make_corpus)

    tr = sub.add_parser("train", help="train one pipeline stage")
    tr.add_argument("--stage", choices=training.STAGES, required=True)
    tr.add_argument("--config", help="JSON file mirroring TrainingConfig")
    tr.add_argument("--data", required=True)
    tr.add_argument("--schema", help="defaults to <data>/schema.json")
    tr.add_argument("--out", required=True)
    tr.add_argument("--model-overrides", help="JSON dict of model config overrides")
    tr.add_argument("--no-split", action="store_true", help="train and validate on all data")
    tr.set_defaults(func=_cmd_train)

    bd = sub.add_parser("bundle", help="assemble stage checkpoints into a bundle")
    bd.add_argument("--box", required=True)
    bd.add_argument("--labelmap", required=True)
    bd.add_argument("--label2obj", required=True)
    bd.add_argument("--data", required=True)
    bd.add_argument("--schema")
    bd.add_argument("--seed", type=int, default=0)
    bd.add_argument("--no-split", action="store_true")
    bd.add_argument("--out", required=True)
    bd.set_defaults(func=_cmd_bundle)

    ge = sub.add_parser("generate", help="run the chained pipeline once")
    ge.add_argument("--checkpoints", required=True, help="bundle directory")
    ge.add_argument("--category", required=True)
    ge.add_argument("--parts", help="comma-separated part names (or slots)")
    ge.add_argument("--seed", type=int, default=0)
    ge.add_argument("--out", required=True)
    ge.set_defaults(func=_cmd_generate)

    ev = sub.add_parser("evaluate", help="frechet-distance evaluation protocol")
    ev.add_argument("--checkpoints", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--schema")
    ev.add_argument("--n", type=int, default=100)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--extractor-seed", type=int, default=0)
    ev.add_argument("--out", required=True, help="report path prefix (.json/.csv)")
    ev.set_defaults(func=_cmd_evaluate)

    sv = sub.add_parser("serve", help="run the interactive editing service")
    sv.add_argument("--checkpoints", required=True)
    sv.add_argument("--store", required=True)
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8008)
    sv.set_defaults(func=_cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
