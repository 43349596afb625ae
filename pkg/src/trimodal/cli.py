"""Command-line entry point: ``trimodal {synth,train,eval,retrieve,gradcheck,ablate}``.

Exit codes: 0 success, 1 user error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .data import DataConfig, DatasetError
from .gradcheck import SCOPES, run_scope
from .metrics import evaluate, format_table, format_tables, rank_scores, table_json
from .trainer import (
    FUSION,
    MODALITIES,
    RECON,
    ConfigError,
    IncompatibleError,
    Model,
    NumericError,
    TrainConfig,
    ablate,
    check_dataset_compat,
    load_checkpoint,
    train,
)

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2

# full-scale values reported for the original setup; desk values are the defaults
FULL_SCALE_PRESET = {
    "train": {"epochs": 40, "batch": 1024, "lr": 5e-5, "N": 512, "D": 1024, "hidden": 1024, "beta": 0.5},
    "synth": {"n_points": 8192, "views": 6, "train_shapes": 11498, "test_shapes": 1434},
}


class UserError(Exception):
    pass


def _train_args(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--preset", choices=["desk", "paper"], default="desk", help="default values to start from")
    p.add_argument("--epochs", type=int, help=f"training epochs (desk {d.epochs})")
    p.add_argument("--batch", type=int, help=f"batch size (desk {d.batch})")
    p.add_argument("--lr", type=float, help=f"base learning rate (desk {d.lr})")
    p.add_argument("--beta1", type=float, default=d.beta1, help="AdamW first-moment decay")
    p.add_argument("--beta2", type=float, default=d.beta2, help="AdamW second-moment decay")
    p.add_argument("--eps", type=float, default=d.eps, help="AdamW epsilon")
    p.add_argument("--weight-decay", type=float, default=d.weight_decay, help="decoupled weight decay")
    p.add_argument("--modalities", choices=MODALITIES, default=d.modalities, help="visual inputs used")
    p.add_argument("--recon", choices=RECON, default=d.recon, help="reconstruction terms")
    p.add_argument("--fusion", choices=FUSION, default=d.fusion, help="point/view fusion scheme")
    p.add_argument("--loss", choices=["hn_nce", "info_nce"], default=d.loss, help="contrastive loss")
    p.add_argument("--hn-mirror", choices=["pool", "literal"], default=d.hn_mirror,
                   help="normalization of text-anchored hard-negative weights")
    p.add_argument("--beta", type=float, help=f"hard-negative concentration (desk {d.beta})")
    p.add_argument("--tau-floor", type=float, default=d.tau_floor, help="minimum temperature")
    p.add_argument("--precision", type=int, choices=[32, 64], default=d.precision, help="float width")
    p.add_argument("--eval-every", type=int, default=d.eval_every, help="epochs between evaluations")
    p.add_argument("--N", type=int, help=f"point features per shape (desk {d.N})")
    p.add_argument("--D", type=int, help=f"embedding width (desk {d.D})")
    p.add_argument("--hidden", type=int, help=f"MLP hidden width (desk {d.hidden})")
    p.add_argument("--seed", type=int, default=d.seed, help="initialization and batching seed")


def _train_config(args) -> TrainConfig:
    base = TrainConfig()
    preset = FULL_SCALE_PRESET["train"] if args.preset == "paper" else {}
    values = {}
    for key in ("epochs", "batch", "lr", "beta", "N", "D", "hidden"):
        v = getattr(args, key)
        values[key] = v if v is not None else preset.get(key, getattr(base, key))
    return TrainConfig(
        **values,
        beta1=args.beta1, beta2=args.beta2, eps=args.eps, weight_decay=args.weight_decay,
        modalities=args.modalities, recon=args.recon, fusion=args.fusion, loss=args.loss,
        hn_mirror=args.hn_mirror, tau_floor=args.tau_floor, precision=args.precision,
        eval_every=args.eval_every, seed=args.seed,
    )


def _manifest(data_dir, split: str) -> Path:
    path = Path(data_dir) / f"{split}.manifest.json"
    if not path.exists():
        raise UserError(f"no {split} split at {path}")
    return path


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="trimodal", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset", formatter_class=fmt)
    d = DataConfig()
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--preset", choices=["desk", "paper"], default="desk", help="default values to start from")
    p.add_argument("--train-shapes", type=int, help=f"training shapes (desk {d.train_shapes})")
    p.add_argument("--test-shapes", type=int, help=f"test shapes (desk {d.test_shapes})")
    p.add_argument("--seed", type=int, default=0, help="generation seed")
    p.add_argument("--n-points", type=int, help=f"points per cloud (desk {d.n_points})")
    p.add_argument("--views", type=int, help=f"view descriptors per shape (desk {d.views})")
    p.add_argument("--vocab", type=int, default=d.vocab, help="vocabulary size")
    p.add_argument("--force", action="store_true", help="overwrite existing files")

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint/log directory")
    _train_args(p)

    p = sub.add_parser("eval", help="six-metric evaluation of a checkpoint", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--split", default="test", help="split to evaluate")

    p = sub.add_parser("retrieve", help="top-k retrieval for one query", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--split", default="test", help="gallery split")
    q = p.add_mutually_exclusive_group(required=True)
    q.add_argument("--query-text", help="caption text; words outside the vocabulary are ignored")
    q.add_argument("--query-shape", type=int, help="shape id whose captions are ranked")
    p.add_argument("--topk", type=int, default=5, help="rows to print")

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit", formatter_class=fmt)
    p.add_argument("--scope", default="full", help=f"one of {', '.join(SCOPES)}")
    p.add_argument("--h", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--tol", type=float, default=None, help="max relative error (scope default if unset)")
    p.add_argument("--seed", type=int, default=0, help="instance seed")

    p = sub.add_parser("ablate", help="train a grid of arms over several seeds", formatter_class=fmt)
    p.add_argument("--grid", required=True, help="JSON file: {\"arms\": [...]} or {\"axes\": {...}}")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds (0..seeds-1)")
    p.add_argument("--data", default=None, help="dataset directory (synthesized in memory if unset)")
    p.add_argument("--data-seed", type=int, default=0, help="seed for synthesized data")
    p.add_argument("--json-out", default=None, help="write per-seed and median results here")
    _train_args(p)
    return parser


def cmd_synth(args) -> int:
    out = Path(args.out)
    targets = [out / f"{s}.{ext}" for s in ("train", "test") for ext in ("manifest.json", "blob")]
    if any(t.exists() for t in targets) and not args.force:
        raise UserError(f"{out} already holds a dataset; pass --force to overwrite")
    base = DataConfig()
    preset = FULL_SCALE_PRESET["synth"] if args.preset == "paper" else {}
    values = {}
    for key in ("train_shapes", "test_shapes", "n_points", "views"):
        v = getattr(args, key)
        values[key] = v if v is not None else preset.get(key, getattr(base, key))
    try:
        cfg = DataConfig(**values, vocab=args.vocab)
    except ValueError as exc:
        raise UserError(str(exc)) from None
    paths = data_mod.generate(cfg, args.seed, out)
    print(f"train: {cfg.train_shapes} shapes -> {paths['train']}")
    print(f"test: {cfg.test_shapes} shapes -> {paths['test']}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    train_ds = data_mod.load(_manifest(args.data, "train"))
    test_path = Path(args.data) / "test.manifest.json"
    test_ds = data_mod.load(test_path) if test_path.exists() else None
    cfg.encoder_config(train_ds.cfg)
    if len(train_ds) < cfg.batch:
        raise UserError(f"dataset of {len(train_ds)} shapes is smaller than batch {cfg.batch}")

    def show(entry):
        line = f"epoch {entry['epoch']:4d}  loss {entry['loss']:10.4f}  tau {entry['tau']:.4f}"
        if "metrics" in entry:
            m = entry["metrics"]
            line += f"  S2T RR@1 {m['S2T']['RR@1']:6.2f}  T2S RR@1 {m['T2S']['RR@1']:6.2f}"
        print(line, flush=True)

    res = train(cfg, train_ds, test_ds, out_dir=args.out, on_epoch=show)
    if res.final_metrics is not None:
        print(format_table(res.final_metrics, "final"))
    print(f"checkpoints in {args.out}")
    return EXIT_OK


def _load_model(args):
    ds = data_mod.load(_manifest(args.data, args.split))
    params, _, cfg = load_checkpoint(args.ckpt)
    check_dataset_compat(params, ds)
    return Model(params, cfg), ds


def cmd_eval(args) -> int:
    model, ds = _load_model(args)
    table = evaluate(model, ds)
    print(format_table(table, Path(args.ckpt).name))
    print(table_json(table))
    return EXIT_OK


def cmd_retrieve(args) -> int:
    model, ds = _load_model(args)
    if args.topk < 1:
        raise UserError("--topk must be >= 1")
    S, T, owner = model.embed(ds)
    unit = lambda x: x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)
    vocab = ds.vocabulary
    if args.query_text is not None:
        tokens = data_mod.tokenize(args.query_text, vocab)
        if not tokens:
            raise UserError("query text has no words from the dataset vocabulary")
        q = model.embed_text(tokens)
        ranked = rank_scores(-1, unit(S) @ unit(q))
        named = set(tokens)
        for rank, (sid, score) in enumerate(zip(ranked.ids[: args.topk], ranked.scores), start=1):
            concept = ds.record(int(sid)).concept
            match = all(
                named & set(data_mod.attribute_token_ids(ds.cfg, a, v))
                for a, v in enumerate(concept.as_tuple())
            )
            print(f"{rank:3d}  shape {int(sid):5d}  score {score:+.4f}  {'*' if match else ' '}")
        return EXIT_OK
    if not 0 <= args.query_shape < len(ds):
        raise UserError(f"shape id {args.query_shape} not in split of {len(ds)} shapes")
    ranked = rank_scores(args.query_shape, unit(T) @ unit(S[args.query_shape]))
    flat = [c for r in ds for c in r.captions]
    for rank, (cid, score) in enumerate(zip(ranked.ids[: args.topk], ranked.scores), start=1):
        mark = "*" if owner[cid] == args.query_shape else " "
        text = " ".join(vocab[t] for t in flat[cid])
        print(f"{rank:3d}  caption {int(cid):5d}  score {score:+.4f}  {mark}  {text}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.scope not in SCOPES:
        raise UserError(f"unknown scope {args.scope!r}; choose from {', '.join(SCOPES)}")
    report = run_scope(args.scope, h=args.h, tol=args.tol, seed=args.seed)
    print("\n".join(report.lines()))
    name, err = report.worst
    print(f"worst tensor: {name} ({err:.3e}), tolerance {report.tol:g}")
    if not report.passed:
        print(f"gradcheck FAILED for: {', '.join(report.failures)}")
        return EXIT_NUMERIC
    print("gradcheck passed")
    return EXIT_OK


def cmd_ablate(args) -> int:
    try:
        grid = json.loads(Path(args.grid).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UserError(f"cannot read grid {args.grid}: {exc}") from None
    if args.seeds < 1:
        raise UserError("--seeds must be >= 1")
    base = _train_config(args)
    splits = None
    data_cfg, data_seed = DataConfig(), args.data_seed
    if args.data is not None:
        splits = {s: data_mod.load(_manifest(args.data, s)) for s in ("train", "test")}
        data_cfg = splits["train"].cfg
        data_seed = splits["train"].meta.get("seed") or 0
    results = ablate(
        grid, base, data_cfg, data_seed, seeds=range(args.seeds), splits=splits,
        on_run=lambda name, seed, m: print(
            f"  {name} seed {seed}: S2T RR@1 {m['S2T']['RR@1']:.2f}  T2S RR@1 {m['T2S']['RR@1']:.2f}",
            flush=True,
        ),
    )
    print(format_tables([(r.name, r.median) for r in results]))
    if args.json_out:
        payload = [{"arm": r.name, "median": r.median, "per_seed": r.per_seed} for r in results]
        Path(args.json_out).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "retrieve": cmd_retrieve,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USER
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return COMMANDS[args.command](args)
    except (UserError, ConfigError, IncompatibleError, DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
