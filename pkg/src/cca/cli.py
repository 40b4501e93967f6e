"""Command-line entry point: ``cca {gen-data,train,eval,embed,gradcheck}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numeric
error. Logging verbosity comes from ``CCA_LOG`` (error, info, debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as dmod
from . import export, metrics
from .checkpoint import CheckpointError
from .config import EMBED_TYPES, ConfigError, EncoderConfig, TrainConfig, from_dict, load_json, to_dict
from .gradcheck import run_gradcheck
from .head import ConditionError
from .model import CCAModel, load_model, save_model
from .triplets import SamplingError, TrainingError, embed_items, sample_triplets, train, triplet_accuracy_from_table

log = logging.getLogger("cca")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cca", description="Conditional cross-attention embeddings.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON file with encoder/train/data sections")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path)
        sp.add_argument("--threads", type=int, default=1)

    g = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    common(g)
    g.add_argument("--items", type=int)
    g.add_argument("--classes", type=int, help="classes for every attribute")
    g.add_argument("--image-size", type=int)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    common(t)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--embed-type", choices=EMBED_TYPES)
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", type=Path, help="checkpoint with optimizer state to continue from")

    for name, helptext in (("eval", "retrieval report for a checkpoint"), ("embed", "export embeddings and attention")):
        e = sub.add_parser(name, help=helptext)
        common(e)
        e.add_argument("--data", type=Path, required=True)
        e.add_argument("--checkpoint", type=Path, required=True)
        e.add_argument("--embed-type", choices=EMBED_TYPES, help="must match the checkpoint if given")

    gc = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    common(gc)
    gc.add_argument("--embed-type", choices=EMBED_TYPES, default="type2")
    gc.add_argument("--precision", type=int, choices=(32, 64), default=64)
    return p


def _sections(args) -> dict:
    raw = load_json(args.config) if args.config else {}
    unknown = set(raw) - {"encoder", "train", "data"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    return {k: dict(raw.get(k, {})) for k in ("encoder", "train", "data")}


def _echo_config(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")


def _need_out(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    return args.out


# -- subcommands -------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    out = _need_out(args)
    sec = _sections(args)["data"]
    if args.seed is not None:
        sec["seed"] = args.seed
    if args.items is not None:
        sec["n_items"] = args.items
    if args.image_size is not None:
        sec["image_size"] = args.image_size
    if "attributes" in sec:
        sec["attributes"] = [tuple(a) for a in sec["attributes"]]
    cfg = from_dict(dmod.GenConfig, sec)
    if args.classes is not None:
        cfg.attributes = [(n, f, args.classes) for n, f, _ in cfg.attributes]
    try:
        manifest, images = dmod.generate(cfg, threads=args.threads)
    except dmod.DatasetError as exc:
        raise ConfigError(str(exc)) from None
    dmod.save(manifest, images, out)
    attrs = ", ".join(f"{a.name}:{a.num_classes}" for a in manifest.attributes)
    splits = " ".join(f"{s}={len(manifest.splits[s])}" for s in dmod.SPLITS)
    print(f"generated {len(manifest.items)} items, {len(manifest.attributes)} attributes ({attrs}), {splits} -> {out}")
    return 0


def _load_dataset(path) -> dmod.Dataset:
    try:
        return dmod.Dataset.load(path)
    except dmod.DatasetError as exc:
        raise ConfigError(f"invalid dataset: {exc}") from None


def cmd_train(args) -> int:
    out = _need_out(args)
    sec = _sections(args)
    ds = _load_dataset(args.data)
    enc = sec["encoder"]
    enc.setdefault("image_size", ds.manifest.image_size)
    enc.setdefault("num_conditions", ds.num_conditions)
    if args.embed_type:
        enc["embed_type"] = args.embed_type
    tr = sec["train"]
    if args.seed is not None:
        tr["seed"] = args.seed
    if args.epochs is not None:
        tr["epochs"] = args.epochs
    tcfg = from_dict(TrainConfig, tr)

    adam, start = None, 0
    if args.resume:
        model, adam, meta = load_model(args.resume)
        if adam is None:
            raise ConfigError(f"{args.resume} holds no optimizer state")
        start = int(meta.get("train.epoch", -1)) + 1
        ecfg = model.config
    else:
        ecfg = from_dict(EncoderConfig, enc)
        model = CCAModel(ecfg, seed=tcfg.seed)
    if ecfg.num_conditions != ds.num_conditions:
        raise ConfigError(f"model expects {ecfg.num_conditions} conditions, dataset has {ds.num_conditions}")
    _echo_config(out, {"encoder": to_dict(ecfg), "train": to_dict(tcfg), "data": str(args.data)})

    metrics_path = out / "metrics.tsv"
    if not args.resume and metrics_path.exists():
        metrics_path.unlink()

    def checkpoint_last(epoch, m, state):
        save_model(out / "last.ckpt", m, state, **{"train.epoch": epoch})

    result = train(model, ds, tcfg, log_path=metrics_path, adam=adam, start_epoch=start, on_epoch=checkpoint_last)
    save_model(out / "best.ckpt", model, params=result.params, **{"train.epoch": result.best_epoch})
    last_epoch = result.history[-1][0] if result.history else start - 1
    save_model(out / "last.ckpt", model, result.adam, **{"train.epoch": last_epoch})
    print(f"best epoch {result.best_epoch} val_triplet_acc {result.best_accuracy:.4f} -> {out / 'best.ckpt'}")
    return 0


def _model_for(args, ds: dmod.Dataset) -> CCAModel:
    model, _, _ = load_model(args.checkpoint)
    if args.embed_type and args.embed_type != model.config.embed_type:
        raise ConfigError(f"checkpoint is {model.config.embed_type!r}, --embed-type says {args.embed_type!r}")
    if model.config.num_conditions != ds.num_conditions:
        raise ConfigError(
            f"checkpoint has K={model.config.num_conditions} conditions, dataset has {ds.num_conditions} attributes"
        )
    if model.config.image_size != ds.manifest.image_size:
        raise ConfigError(f"checkpoint image_size {model.config.image_size} != dataset {ds.manifest.image_size}")
    return model


def evaluate(model: CCAModel, ds: dmod.Dataset, seed: int = 0, n_triplets: int = 2000) -> metrics.RetrievalReport:
    """mAP of query vs gallery per attribute plus triplet accuracy on held-out items."""
    q_ids, g_ids = ds.split("query"), ds.split("gallery")
    if not q_ids or not g_ids:
        raise ConfigError("dataset needs non-empty query and gallery splits")
    q_tab = embed_items(model, ds, q_ids)
    g_tab = embed_items(model, ds, g_ids)
    labels = {i: ds.label_table[ds.index[i]] for i in q_ids + g_ids}
    report = metrics.map_by_attribute(
        metrics.records_from_table(q_tab, q_ids), metrics.records_from_table(g_tab, g_ids), labels
    )
    test_ids = sorted(q_ids + g_ids)
    rng = np.random.default_rng([int(seed), 3, 1])
    trip = sample_triplets(test_ids, ds.labels_for(test_ids), n_triplets, rng, batch_size=1)
    table = np.concatenate([q_tab, g_tab], axis=1)
    index = {i: n for n, i in enumerate(q_ids + g_ids)}
    report.triplet_accuracy = triplet_accuracy_from_table(table, index, trip)
    return report


def cmd_eval(args) -> int:
    out = _need_out(args)
    ds = _load_dataset(args.data)
    model = _model_for(args, ds)
    seed = 0 if args.seed is None else args.seed
    report = evaluate(model, ds, seed)
    names = [a.name for a in ds.manifest.attributes]
    text = metrics.format_report([(model.config.embed_type, report)], names)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.tsv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_embed(args) -> int:
    out = _need_out(args)
    ds = _load_dataset(args.data)
    model = _model_for(args, ds)
    ids = ds.manifest.item_ids
    embs, attns = [], []
    for s in range(0, len(ids), 256):
        e, w = model.embed_all_conditions(ds.batch(ids[s : s + 256], model.config.dtype), attention=True)
        embs.append(e)
        attns.append(w)
    out.mkdir(parents=True, exist_ok=True)
    n = export.write_rows(out / "embeddings.tsv", export.table_rows(np.concatenate(embs, axis=1), ids))
    msg = f"wrote {n} embedding rows"
    if model.conditioned:
        n_att = export.write_rows(out / "attention.tsv", export.table_rows(np.concatenate(attns, axis=1), ids))
        msg += f", {n_att} attention rows"
    else:
        log.info("embed_type %s has no cross-attention; attention.tsv not written", model.config.embed_type)
    print(f"{msg} -> {out}")
    return 0


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    report = run_gradcheck(args.embed_type, args.precision, seed)
    print(f"gradcheck embed_type={args.embed_type} precision={args.precision}")
    print(report.summary())
    if not report.passed:
        print("failing parameters: " + ", ".join(report.failing()))
        return 2
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "embed": cmd_embed,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    level = os.environ.get("CCA_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, ConditionError, SamplingError, CheckpointError) as exc:
        print(f"cca {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, FloatingPointError, OSError, metrics.MetricError) as exc:
        print(f"cca {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
