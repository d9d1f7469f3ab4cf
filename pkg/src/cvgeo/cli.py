"""Command line entry point: ``cvgeo <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

logger = logging.getLogger("cvgeo")


def _config(path, data=None):
    from .config import load_config, toy_config

    config = load_config(path) if path else toy_config()
    if data:
        config = config.replace(**{"data.root": str(data)})
    return config


def cmd_make_toy(args):
    from .synthetic import make_toy_dataset

    make_toy_dataset(args.out, n_locations=args.locations, seed=args.seed)
    print(f"wrote toy dataset to {args.out}")


def cmd_prepare_grem(args):
    from .data import Source, View, scan_dataset
    from .grem import audit, build_extractor, run_grem, scan_pool, write_assignments

    config = _config(args.config, args.data)
    if not config.data.root:
        raise SystemExit("prepare-grem needs --data or data.root in the config")
    anchors = [r for r in scan_dataset(config.data.root, "train", config.data.invert_altitude)
               if r.view is View.STREET and r.source is Source.ORIGINAL]
    extractor = build_extractor(args.extractor or config.data.grem_extractor,
                                args.weights or config.data.grem_weights)
    assignments, records = run_grem(anchors, scan_pool(args.pool), extractor,
                                    args.scope or config.data.grem_scope)
    sidecar = write_assignments(assignments, records, args.out, append=True)
    stats = audit(assignments)
    print("\t".join(f"{k}={v}" for k, v in stats.items()))
    print(f"manifest: {args.out}\tassignments: {sidecar}")


def cmd_train(args):
    from .train import Checkpoint, Trainer, load_training_records

    config = _config(args.config, args.data)
    if args.epochs:
        config = config.replace(**{"train.epochs": args.epochs})
    records = load_training_records(config, args.manifest or ())
    run_dir = Path(args.run_dir)
    trainer = Trainer(config, records, run_dir)
    config.dump(run_dir / "config.txt")
    if args.resume:
        trainer.restore(Checkpoint.load(args.resume))
    means = trainer.fit()
    for epoch, m in enumerate(means, trainer.epoch - len(means) + 1):
        print(f"epoch\t{epoch}\tmean_l_total\t{m:.6f}")
    final = run_dir / "final.pt"
    trainer.checkpoint().save(final)
    print(f"checkpoint\t{final}")
    if args.plot:
        from .plotting import plot_training

        print(f"figure\t{plot_training(trainer.history, run_dir / 'training.png')}")


def _load_model(config, checkpoint):
    from .train import Checkpoint, GeoModel

    ckpt = Checkpoint.load(checkpoint)
    if ckpt.fingerprint != config.fingerprint():
        logger.warning("%s was trained under a different configuration fingerprint", checkpoint)
    model = GeoModel(config, config.bridge3d.encoder_channels)
    model.load_state_dict(ckpt.model_state)
    return model


def cmd_embed(args):
    from .data import View, scan_dataset
    from .evaluate import Pipeline, embed_records, write_embeddings

    config = _config(args.config, args.data)
    if not config.data.root:
        raise SystemExit("embed needs --data or data.root in the config")
    model = _load_model(config, args.checkpoint)
    default_view = {"test_query": "street", "test_gallery": "satellite", "train": "street"}[args.split]
    view = View(args.view or default_view)
    records = [r for r in scan_dataset(config.data.root, args.split) if r.view is view]
    if not records:
        raise SystemExit(f"no {view.value} images in split {args.split}")
    vecs = embed_records(records, Pipeline(model, config.backbone.backend),
                         config.backbone.input_size, use_tta=not args.no_tta)
    write_embeddings(args.out, [r.image_id for r in records], [r.location_id for r in records], vecs)
    print(f"embeddings\t{args.out}\tcount={len(records)}\tdim={vecs.shape[1]}")


def _image_paths(args) -> dict:
    from .data import read_manifest, scan_dataset

    paths = {}
    for m in args.manifest or ():
        paths.update({r.image_id: r.path for r in read_manifest(m)})
    if args.data:
        for split in ("test_query", "test_gallery"):
            paths.update({r.image_id: r.path for r in scan_dataset(args.data, split)})
    return paths


def cmd_evaluate(args):
    from .evaluate import compute_metrics, rank, read_embeddings

    qids, qlabels, q = read_embeddings(args.query)
    gids, glabels, g = read_embeddings(args.gallery)
    results = rank(q, g, qids, gids, qlabels, glabels)
    report = compute_metrics(results, ap_mode=args.ap_mode)
    print("\t".join(["metric", "value"]))
    for k, v in sorted(report.recall_at.items()):
        print(f"R@{k}\t{v:.2f}")
    print(f"AP\t{report.ap:.2f}\nqueries\t{report.n_queries}\texcluded\t{len(report.excluded)}")
    record = {**report.to_json(), "ap_mode": args.ap_mode, "query": str(args.query),
              "gallery": str(args.gallery)}
    out = Path(args.out) if args.out else Path(args.query).with_suffix(".metrics.json")
    out.write_text(json.dumps(record, indent=2) + "\n")
    print(f"record\t{out}")
    if args.plot:
        from .plotting import plot_recall, plot_retrieval_grid

        plot_dir = Path(args.plot)
        print(f"figure\t{plot_recall({'street->satellite': report}, plot_dir / 'recall.png')}")
        paths = _image_paths(args)
        if paths:
            shown = [r for r in results if r.query_id in paths and all(
                gid in paths for gid, _ in r.ranked[:5])]
            print(f"figure\t{plot_retrieval_grid(shown, paths, plot_dir / 'retrieval.png')}")
        else:
            logger.warning("no --data or --manifest given; skipping the retrieval grid")


def cmd_ablate(args):
    from .ablation import COLUMNS, run_ablation

    base = None
    if args.config:
        from .config import load_config

        base = load_config(args.config)
    out = Path(args.out)
    data = args.data or (base.data.root if base else None)
    if args.full:
        if base is None or base.backbone.backend == "toy" or not base.backbone.weights_path:
            raise SystemExit("--full needs --config with a foundation backbone.backend and "
                             "backbone.weights_path")
        if not data:
            raise SystemExit("--full needs --data (or data.root) pointing at a real dataset")
    if data is None:
        from .synthetic import make_toy_dataset

        data = out / "toy_data"
        if not (data / "train").is_dir():
            make_toy_dataset(data)
    rows = run_ablation(args.suite, data, out, base, full=args.full, plot=not args.no_plot)
    print("\t".join(COLUMNS))
    for row in rows:
        print("\t".join(str(c) for c in row.cells()))
    print(f"table\t{out / f'ablation_{args.suite}.tsv'}")
    if not args.no_plot:
        print(f"figure\t{out / f'ablation_{args.suite}.png'}")
    return 1 if any(r.status != "ok" for r in rows) else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cvgeo", description="Cross-view street -> satellite geo-localization")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-toy", help="write the synthetic 32-location dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--locations", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_toy)

    s = sub.add_parser("prepare-grem", help="enrich the street pool from an auxiliary image pool")
    s.add_argument("--pool", required=True, help="candidate images, one subdirectory per location")
    s.add_argument("--out", required=True, help="JSONL manifest the GREM records are appended to")
    s.add_argument("--config")
    s.add_argument("--data", help="dataset root holding the original street images")
    s.add_argument("--scope", choices=("location", "global"))
    s.add_argument("--extractor", choices=("meanpool", "resnet50"))
    s.add_argument("--weights", help="local ResNet-50 state dict")
    s.set_defaults(func=cmd_prepare_grem)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", required=True)
    s.add_argument("--data")
    s.add_argument("--manifest", action="append", help="training manifest(s); default: scan data.root")
    s.add_argument("--run-dir", default="runs/latest")
    s.add_argument("--epochs", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--plot", action="store_true", help="render loss and lr curves")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("embed", help="dump embeddings of one split")
    s.add_argument("--split", required=True, choices=("train", "test_query", "test_gallery"))
    s.add_argument("--out", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--view", choices=("street", "satellite", "drone"))
    s.add_argument("--no-tta", action="store_true")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("evaluate", help="rank a query dump against a gallery dump")
    s.add_argument("--query", required=True)
    s.add_argument("--gallery", required=True)
    s.add_argument("--ap-mode", choices=("standard", "first"), default="standard")
    s.add_argument("--out", help="metrics JSON (default: next to the query dump)")
    s.add_argument("--plot", metavar="DIR", help="write recall and retrieval-grid figures here")
    s.add_argument("--data", help="dataset root, for image paths in the retrieval grid")
    s.add_argument("--manifest", action="append", help="manifest(s) with image paths")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="run an ablation grid")
    s.add_argument("--suite", required=True, choices=("components", "heads", "lambda"))
    s.add_argument("--config", help="base config (default: desk-scale toy settings)")
    s.add_argument("--data", help="dataset root (default: generate the toy dataset)")
    s.add_argument("--out", default="ablation")
    s.add_argument("--full", action="store_true",
                   help="full-scale run; needs foundation weights and real data")
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return int(args.func(args) or 0)


if __name__ == "__main__":
    sys.exit(main())
