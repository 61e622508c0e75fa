"""Command-line pipelines: gen, cluster, train, embed, eval, attack, rerun.

Every command writes ``manifest.json`` into its output directory. The
manifest records the parsed arguments and the fully resolved configuration,
so ``capembed rerun manifest.json --out other/`` repeats the run.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .advsim import AttackConfig, attack, default_masks, load_mask
from .capability import MinHasher, cluster_assign, CapabilityClusterMap
from .dataio import GeneratorConfig, StandardScaler, fit_scaler, generate_synthetic, load_dataset, save_dataset
from .nn import CHECKPOINT_FORMAT, DetectorNetwork, load_checkpoint
from .trainer import TrainConfig, pretrain_detection, train_metric, train_multi_objective
from .transfer import (
    EmbeddedDataset,
    GbtHead,
    GbtParams,
    auroc,
    eval_family,
    eval_tags,
    extract_embeddings,
    fit_gbt,
    from_dataset,
    write_csv,
)

log = logging.getLogger("capembed")

FORMATS = {
    "dataset": "jsonl/1",
    "clusters": "jsonl/1",
    "checkpoint": CHECKPOINT_FORMAT,
    "gbt": "capembed-gbt/1",
    "embeddings": "jsonl/1+le-binary/1",
}


class ConfigError(ValueError):
    """Bad user configuration; maps to exit code 2."""


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def write_manifest(out: Path, command: str, args: argparse.Namespace, config: dict,
                   inputs: list, outputs: list, started: float) -> None:
    record = {
        "command": command,
        "version": __version__,
        "args": {k: v for k, v in vars(args).items() if k not in ("func", "resolved")},
        "resolved_config": config,
        "seed": getattr(args, "seed", None),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "formats": FORMATS,
        "wall_clock_seconds": time.time() - started,
    }
    fd, tmp = tempfile.mkstemp(dir=out, prefix=".manifest-", suffix=".json")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
    os.replace(tmp, out / "manifest.json")


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# commands


def cmd_gen(args) -> None:
    started = time.time()
    raw = args.resolved if args.resolved is not None else _read_json(args.config)
    try:
        cfg = GeneratorConfig.from_dict(raw)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    out = _outdir(args)
    train, test = generate_synthetic(cfg, args.seed)
    save_dataset(train, out / "train.jsonl")
    save_dataset(test, out / "test.jsonl")
    write_manifest(out, "gen", args, asdict(cfg), [], [out / "train.jsonl", out / "test.jsonl"], started)


def cmd_cluster(args) -> None:
    started = time.time()
    try:
        hasher = MinHasher(args.num_perms, args.bands, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _outdir(args)
    dataset = load_dataset(args.dataset)
    cmap = cluster_assign(hasher, dataset)
    cmap.save(out / "clusters.jsonl")
    n_clusters = len(set(cmap.assignments.values()))
    log.info("%d samples in %d clusters", len(dataset), n_clusters)
    write_manifest(out, "cluster", args, asdict(hasher), [args.dataset], [out / "clusters.jsonl"], started)


_TRAIN_FLAGS = ("epochs", "lr", "C", "M", "seed", "embedding_dim", "dropout_p", "pretrain_epochs")
_LOSS_FLAGS = ("margin", "spearman_weight", "bce_weight", "regularization")


def resolve_train_config(args) -> TrainConfig:
    """JSON config file overlaid by explicit command-line flags."""
    if args.resolved is not None:
        raw = args.resolved
    else:
        raw = _read_json(args.config)
        loss = dict(raw.get("loss", {}))
        if args.loss is not None:
            loss["kind"] = args.loss
        for name in _LOSS_FLAGS:
            if getattr(args, name) is not None:
                loss[name] = getattr(args, name)
        if args.include_spearman:
            loss["include_spearman"] = True
        raw = {**raw, "loss": loss}
        for name in _TRAIN_FLAGS:
            if getattr(args, name) is not None:
                raw[name] = getattr(args, name)
        if args.hidden is not None:
            raw["hidden_dims"] = [int(h) for h in args.hidden.split(",") if h]
        if args.normalize:
            raw["normalize_embeddings"] = True
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(args) -> None:
    started = time.time()
    cfg = resolve_train_config(args)
    out = _outdir(args)
    dataset = load_dataset(args.dataset, "train")
    cmap = CapabilityClusterMap.load(args.clusters)
    missing = [s.id for s in dataset if s.id not in cmap.assignments]
    if missing:
        raise ConfigError(f"{len(missing)} samples have no cluster assignment (e.g. {missing[0]!r})")
    scaler = fit_scaler(dataset)
    scaler.save(out / "scaler.json")
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    if cfg.loss.kind == "bce":
        model, trace = pretrain_detection(dataset, replace(cfg, pretrain_epochs=cfg.epochs), scaler, ckpt_dir)
    elif cfg.loss.kind == "multi_objective":
        if cfg.pretrain_epochs > 0:
            pretrained, pre_trace = pretrain_detection(dataset, cfg, scaler)
        else:
            pretrained, pre_trace = cfg.network(dataset.d), None
        model, trace = train_multi_objective(dataset, cmap, cfg, pretrained, scaler, ckpt_dir)
        if pre_trace is not None:
            trace.records = pre_trace.records + trace.records
    else:
        model, trace = train_metric(dataset, cmap, cfg, scaler, checkpoint_dir=ckpt_dir)

    model.save(out / "model.npz")
    trace.save(out / "train_log.jsonl")
    log.info("trained %d batches (%d skipped)", len(trace.records), trace.skipped)
    write_manifest(out, "train", args, cfg.to_dict(), [args.dataset, args.clusters],
                   [out / "model.npz", out / "scaler.json", out / "train_log.jsonl"], started)


def _scaler_for(args) -> StandardScaler:
    path = args.scaler or Path(args.checkpoint).with_name("scaler.json")
    return StandardScaler.load(path)


def cmd_embed(args) -> None:
    started = time.time()
    out = _outdir(args)
    net = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset, "test")
    emb = extract_embeddings(net, _scaler_for(args), dataset)
    emb.save_jsonl(out / "embeddings.jsonl")
    nbytes = emb.save_binary(out / "embeddings.bin", args.dtype)
    log.info("embedded %d samples to %d dims (%d bytes)", len(emb), emb.dim, nbytes)
    write_manifest(out, "embed", args, {"dtype": args.dtype}, [args.checkpoint, args.dataset],
                   [out / "embeddings.jsonl", out / "embeddings.bin"], started)


def _scaled_raw(path, scaler=None):
    dataset = load_dataset(path)
    scaler = scaler or fit_scaler(dataset)
    return from_dataset(dataset, scaler.transform(dataset.feature_matrix())), scaler


def cmd_eval(args) -> None:
    started = time.time()
    out = _outdir(args)
    params = GbtParams(args.n_trees, args.max_depth, args.gbt_lr, args.min_leaf)
    if args.raw:
        train, scaler = _scaled_raw(args.train)
        test, _ = _scaled_raw(args.test, scaler)
        scaler.save(out / "scaler.json")
    else:
        train, test = EmbeddedDataset.load_jsonl(args.train), EmbeddedDataset.load_jsonl(args.test)

    if args.task == "detect":
        head = fit_gbt(train.embeddings, train.labels, params)
        rows = [{"task": "detect", "metric": "auroc",
                 "value": auroc(head.decision_function(test.embeddings), test.labels)}]
        if args.save_head:
            head.save(out / "gbt_head.json")
    elif args.task == "family":
        rows = [{"task": "family", "metric": f"accuracy_{args.k}nn",
                 "value": eval_family(train, test, args.k)}]
    else:
        tags = args.tags.split(",") if args.tags else sorted(set().union(*train.tags))
        rows = eval_tags([(train, test)], tags, params, threads=args.threads)
    write_csv(rows, out / "metrics.csv")
    write_manifest(out, "eval", args, asdict(params), [args.train, args.test], [out / "metrics.csv"], started)


def cmd_attack(args) -> None:
    started = time.time()
    out = _outdir(args)
    dataset = load_dataset(args.dataset, "test")
    head = GbtHead.load(args.head)
    scaler = _scaler_for(args) if (args.checkpoint or args.scaler) else None
    net = load_checkpoint(args.checkpoint) if args.checkpoint else None
    body = net.body if isinstance(net, DetectorNetwork) else net

    def score(x):
        z = scaler.transform(x) if scaler is not None else x
        if body is not None:
            z = body.embed(z)
        return head.predict_proba(z)

    if args.mask:
        mask = load_mask(args.mask, dataset.d)
    else:
        additive, shift = default_masks(dataset.d)
        mask = additive if args.mode == "additive_only" else shift
    try:
        cfg = AttackConfig(mask, args.mode, args.population, args.iterations, args.mutation_scale,
                           args.threshold, args.max_delta, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    malware = dataset.subset([i for i, s in enumerate(dataset) if s.is_malware])
    report = attack(score, malware.feature_matrix(), cfg, threads=args.threads)
    report.save(out / "attack_report.csv", out / "attack_summary.json")
    summary = report.summary()
    log.info("detection rate %.3f -> %.3f", summary["baseline_detection_rate"], summary["post_attack_detection_rate"])
    resolved = {k: v for k, v in asdict(cfg).items() if k != "manipulable_mask"}
    resolved["mask_indices"] = np.flatnonzero(mask).tolist()
    write_manifest(out, "attack", args, resolved, [args.dataset, args.head],
                   [out / "attack_report.csv", out / "attack_summary.json"], started)


def cmd_rerun(args) -> None:
    manifest = _read_json(args.manifest)
    if "command" not in manifest or manifest["command"] not in COMMANDS:
        raise ConfigError(f"{args.manifest} is not a run manifest")
    saved = dict(manifest["args"])
    if args.out is not None:
        saved["out"] = args.out
    if args.threads is not None:
        saved["threads"] = args.threads
    ns = argparse.Namespace(**saved)
    ns.resolved = manifest["resolved_config"] if manifest["command"] in ("gen", "train") else None
    COMMANDS[manifest["command"]](ns)


COMMANDS = {
    "gen": cmd_gen,
    "cluster": cmd_cluster,
    "train": cmd_train,
    "embed": cmd_embed,
    "eval": cmd_eval,
    "attack": cmd_attack,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="capembed", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--config", help="generator config JSON")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("cluster", parents=[common], help="MinHash-cluster capability sets")
    c.add_argument("--dataset", required=True)
    c.add_argument("--seed", type=int, default=0, help="MinHash master seed")
    c.add_argument("--num-perms", type=int, default=64)
    c.add_argument("--bands", type=int, default=1)
    c.set_defaults(func=cmd_cluster)

    t = sub.add_parser("train", parents=[common], help="train an embedding network")
    t.add_argument("--dataset", required=True)
    t.add_argument("--clusters", required=True)
    t.add_argument("--config", help="train config JSON; flags override it")
    t.add_argument("--loss", help="contrastive | spearman | mixed | bce | multi_objective")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--C", type=int)
    t.add_argument("--M", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--embedding-dim", type=int)
    t.add_argument("--hidden", help="comma-separated hidden widths")
    t.add_argument("--dropout-p", type=float)
    t.add_argument("--pretrain-epochs", type=int)
    t.add_argument("--margin", type=float)
    t.add_argument("--spearman-weight", type=float)
    t.add_argument("--bce-weight", type=float)
    t.add_argument("--regularization", type=float, help="soft-rank regularization strength")
    t.add_argument("--include-spearman", action="store_true")
    t.add_argument("--normalize", action="store_true", help="L2-normalize embeddings")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", parents=[common], help="extract embeddings")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--scaler", help="defaults to scaler.json beside the checkpoint")
    e.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    e.set_defaults(func=cmd_embed)

    v = sub.add_parser("eval", parents=[common], help="evaluate a transfer task")
    v.add_argument("--task", required=True, choices=("detect", "family", "tags"))
    v.add_argument("--train", required=True, help="train embeddings (or dataset with --raw)")
    v.add_argument("--test", required=True)
    v.add_argument("--raw", action="store_true", help="use scaled raw features of dataset files")
    v.add_argument("--tags", help="comma-separated tags (default: all seen in train)")
    v.add_argument("--k", type=int, default=1)
    v.add_argument("--n-trees", type=int, default=100)
    v.add_argument("--max-depth", type=int, default=4)
    v.add_argument("--gbt-lr", type=float, default=0.1)
    v.add_argument("--min-leaf", type=int, default=5)
    v.add_argument("--save-head", action="store_true", help="write gbt_head.json (detect)")
    v.set_defaults(func=cmd_eval)

    a = sub.add_parser("attack", parents=[common], help="black-box evasion attack")
    a.add_argument("--dataset", required=True)
    a.add_argument("--head", required=True, help="GBT head JSON")
    a.add_argument("--checkpoint", help="embedding checkpoint; omit for a raw-feature head")
    a.add_argument("--scaler")
    a.add_argument("--mask", help="file of manipulable feature indices")
    a.add_argument("--mode", default="additive_only", choices=("additive_only", "shift_like"))
    a.add_argument("--population", type=int, default=20)
    a.add_argument("--iterations", type=int, default=50)
    a.add_argument("--mutation-scale", type=float, default=0.5)
    a.add_argument("--max-delta", type=float)
    a.add_argument("--threshold", type=float, default=0.5)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_attack)

    r = sub.add_parser("rerun", help="repeat a run from its manifest")
    r.add_argument("manifest")
    r.add_argument("--out", help="output directory (default: the original)")
    r.add_argument("--threads", type=int)
    r.add_argument("-v", "--verbose", action="store_true")
    r.set_defaults(func=cmd_rerun)
    return p


_PATH_ARGS = ("out", "config", "dataset", "clusters", "checkpoint", "scaler", "train", "test",
              "head", "mask", "manifest")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.resolved = None
    for key in _PATH_ARGS:
        if getattr(args, key, None) is not None:
            setattr(args, key, os.path.abspath(getattr(args, key)))
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"capembed: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"capembed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
