"""Command-line entry point: gen-data, train, eval, probe, viz-attention.

Every option has one flat dotted config key (``--config run.json``) and one
flag; flags override the file, the file overrides defaults. The seed falls
back to ``CTX_FEWSHOT_SEED`` when neither sets it.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import probe as P
from . import trainer as tr
from .checkpoint import Checkpoint, CheckpointError
from .embedder import EmbedderConfig
from .episodes import (DatasetError, EpisodeError, SamplerConfig, load_dataset, make_synthetic_dataset,
                       sample_episode, save_dataset)
from .evaluator import evaluate, write_report
from .model import FewShotModel, HeadConfig

log = logging.getLogger("ctx_fewshot")


class ConfigError(ValueError):
    """Bad configuration; reported with exit status 2."""


def _pair(text):
    vals = [int(v) for v in str(text).split(",")]
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2:
        raise ValueError(f"expected 'lo,hi', got {text!r}")
    return tuple(vals)


def _ints(text):
    return tuple(int(v) for v in str(text).split(","))


def _positions(text):
    out = []
    for item in str(text).split(";"):
        r, c = item.split(",")
        out.append((int(r), int(c)))
    return tuple(out)


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


@dataclass(frozen=True)
class Opt:
    key: str
    type: object
    default: object
    help: str
    commands: tuple
    flag: str | None = None

    @property
    def option(self) -> str:
        return self.flag or "--" + self.key.split(".")[-1].replace("_", "-")

    @property
    def dest(self) -> str:
        return self.key.replace(".", "__")


MODEL_CMDS = ("train",)
DATA_CMDS = ("train", "eval", "probe", "viz-attention")
SAMPLER_CMDS = ("train", "eval", "viz-attention")
CKPT_CMDS = ("eval", "probe", "viz-attention")

OPTIONS = [
    Opt("seed", int, None, "random seed (fallback: $CTX_FEWSHOT_SEED, then 0)",
        ("gen-data", "train", "eval", "probe", "viz-attention")),
    # gen-data
    Opt("gen.out", str, None, "output dataset directory", ("gen-data",)),
    Opt("gen.classes", int, 60, "number of classes (>= 10)", ("gen-data",)),
    Opt("gen.per_class", int, 30, "images per class", ("gen-data",)),
    Opt("gen.image_size", int, 32, "square image side in pixels", ("gen-data",)),
    Opt("gen.hierarchy_depth", int, 1, "levels of class hierarchy above the leaves", ("gen-data",)),
    Opt("gen.splits", _ints, None, "train,val,test class counts (default 70/10/20 percent)", ("gen-data",)),
    Opt("gen.force", _bool, False, "overwrite an existing output directory", ("gen-data",)),
    # shared inputs
    Opt("data", str, None, "dataset directory written by gen-data", DATA_CMDS),
    Opt("checkpoint", str, None, "checkpoint file written by train", CKPT_CMDS),
    # model
    Opt("embedder.channels", _ints, (32, 64, 128, 128), "channels per stage; the last is the feature dim",
        MODEL_CMDS),
    Opt("embedder.final_stride", int, 1, "final stage stride (1 uses dilation 2)", MODEL_CMDS),
    Opt("embedder.bn_ema_decay", float, 0.9, "BN running-statistics decay", MODEL_CMDS),
    Opt("head.kind", str, "ctx", "classification head: ctx or proto", MODEL_CMDS, "--head"),
    Opt("head.metric", str, "sq-euclid", "proto head distance: sq-euclid or cosine", MODEL_CMDS),
    Opt("head.d_k", int, 128, "key/query dimension", MODEL_CMDS),
    Opt("head.d_v", int, 128, "value dimension", MODEL_CMDS),
    Opt("head.aux_loss", _bool, False, "add the global-class auxiliary loss", MODEL_CMDS),
    Opt("head.lr_combine", _bool, None, "add logistic-regression logits at test time (default: from model)",
        ("train", "eval")),
    # episodes
    Opt("sampler.ways", _pair, (5, 50), "ways range lo,hi", SAMPLER_CMDS),
    Opt("sampler.support", _pair, (50, 500), "support size range lo,hi", SAMPLER_CMDS),
    Opt("sampler.queries_per_class", int, 10, "queries per class", SAMPLER_CMDS),
    Opt("sampler.shots", int, None, "fixed shots per class", SAMPLER_CMDS),
    Opt("sampler.fine_grained_fraction", float, 0.5, "fraction of single-subtree episodes", SAMPLER_CMDS),
    Opt("sampler.simclr_fraction", float, 0.5, "fraction of SimCLR training episodes", ("train",)),
    # training
    Opt("train.out", str, None, "output directory for checkpoints and log", ("train",), "--out"),
    Opt("train.episodes", int, 2000, "training episodes", ("train",)),
    Opt("train.lr", float, 6e-4, "initial learning rate", ("train",)),
    Opt("train.lr_decay_factor", float, 0.915, "learning-rate decay factor", ("train",)),
    Opt("train.lr_decay_interval", int, 2000, "base decay interval in episodes", ("train",)),
    Opt("train.weight_decay", float, 8.86e-5, "decoupled weight decay", ("train",)),
    Opt("train.normalize_gradients", _bool, True, "scale gradients to unit global norm", ("train",)),
    Opt("train.val_interval", int, 500, "episodes between validations", ("train",)),
    Opt("train.val_episodes", int, 100, "episodes per validation", ("train",)),
    Opt("train.patience", int, None, "stop after this many validations without improvement", ("train",)),
    Opt("train.augment", _bool, False, "two-op augmentation on categorization episodes", ("train",)),
    # evaluation
    Opt("eval.out", str, None, "report path stem (writes .json and .csv)", ("eval",), "--out"),
    Opt("eval.episodes", int, 600, "evaluation episodes", ("eval",)),
    Opt("eval.five_shot", _bool, False, "5 shots per class with balanced queries", ("eval",)),
    Opt("eval.split", str, "test", "dataset split to evaluate on", ("eval",)),
    Opt("eval.bn_mode", str, "test-ema", "test-ema or test-support-stats", ("eval",)),
    # probe
    Opt("probe.out", str, None, "histogram CSV path", ("probe",), "--out"),
    Opt("probe.k", int, 9, "neighbours per query", ("probe",)),
    Opt("probe.fraction", float, 0.1, "share of each class's images in the pool", ("probe",)),
    Opt("probe.queries", int, 1000, "number of test-origin queries", ("probe",)),
    Opt("probe.test_split", str, "test", "split providing test-origin images", ("probe",)),
    # viz
    Opt("viz.out", str, None, "output directory for PGM maps", ("viz-attention",), "--out"),
    Opt("viz.positions", _positions, ((0, 0),), "query grid positions 'r,c;r,c'", ("viz-attention",)),
    Opt("viz.query_index", int, 0, "which query of the episode", ("viz-attention",)),
    Opt("viz.split", str, "test", "split to sample the episode from", ("viz-attention",)),
]
KEYS = {o.key: o for o in OPTIONS}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctx-fewshot", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in ("gen-data", "train", "eval", "probe", "viz-attention"):
        p = sub.add_parser(cmd, help=f"{cmd} command")
        p.add_argument("--config", help="JSON file of flat dotted keys (flags override)")
        for o in OPTIONS:
            if cmd not in o.commands:
                continue
            default = "" if o.default is None else f" [default: {o.default}]"
            extra = {"nargs": "?", "const": "true", "metavar": "BOOL"} if o.type is _bool else \
                {"metavar": o.key.upper().replace(".", "_")}
            p.add_argument(o.option, dest=o.dest, default=None,
                           help=f"{o.help} (config key '{o.key}'){default}", **extra)
    return parser


def resolve(args, cmd: str) -> dict:
    """Merge defaults, config file and flags into {key: value}; raises ConfigError."""
    file_values = {}
    if getattr(args, "config", None):
        try:
            file_values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config: cannot read {args.config}: {exc}") from None
        if not isinstance(file_values, dict):
            raise ConfigError("config: top level must be an object of dotted keys")
        unknown = sorted(set(file_values) - set(KEYS))
        if unknown:
            raise ConfigError(f"config: unknown keys {unknown}")
    cfg = {}
    for o in OPTIONS:
        if cmd not in o.commands:
            continue
        raw, source = getattr(args, o.dest), "flag"
        if raw is None and o.key in file_values:
            raw, source = file_values[o.key], "config"
        if raw is None:
            cfg[o.key] = o.default
            continue
        try:
            if isinstance(raw, list) and o.type in (_pair, _ints):
                raw = ",".join(str(v) for v in raw)
            cfg[o.key] = o.type(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{o.key} ({source}): {exc}") from None
    if cfg.get("seed") is None:
        env = os.environ.get("CTX_FEWSHOT_SEED")
        try:
            cfg["seed"] = int(env) if env is not None else 0
        except ValueError:
            raise ConfigError(f"seed: CTX_FEWSHOT_SEED={env!r} is not an integer") from None
    return cfg


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise ConfigError(f"{k}: required ({KEYS[k].option})")


def _checked(key, fn):
    try:
        return fn()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, (DatasetError, EpisodeError)):
            raise
        raise ConfigError(f"{key}: {exc}") from None


def _sampler(cfg, seed) -> SamplerConfig:
    return _checked("sampler", lambda: SamplerConfig(
        ways=cfg["sampler.ways"], support=cfg["sampler.support"],
        queries_per_class=cfg["sampler.queries_per_class"], shots=cfg["sampler.shots"],
        fine_grained_fraction=cfg["sampler.fine_grained_fraction"],
        simclr_fraction=cfg.get("sampler.simclr_fraction", 0.0), seed=seed).validate())


def _load_model(cfg):
    _require(cfg, "checkpoint")
    ckpt = Checkpoint.load(cfg["checkpoint"])
    model, _ = tr.restore(ckpt)
    return model, ckpt


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- commands -----------------------------------------------------------------------

def cmd_gen_data(cfg) -> int:
    _require(cfg, "gen.out")
    if cfg["gen.classes"] < 10:
        raise ConfigError(f"gen.classes: must be at least 10, got {cfg['gen.classes']}")
    out = Path(cfg["gen.out"])
    if out.exists() and any(out.iterdir()) and not cfg["gen.force"]:
        raise ConfigError(f"gen.out: {out} exists and is not empty (use --force)")
    ds = _checked("gen", lambda: make_synthetic_dataset(
        cfg["gen.classes"], cfg["gen.per_class"], cfg["gen.image_size"], cfg["gen.hierarchy_depth"],
        rng=cfg["seed"], split_counts=cfg["gen.splits"]))
    save_dataset(ds, out, force=cfg["gen.force"])
    counts = {s: len(ds.class_ids(s)) for s in ("train", "val", "test")}
    print(f"classes {len(ds.classes)} images_per_class {cfg['gen.per_class']} splits {counts}")
    print(f"manifest sha256 {hashlib.sha256(ds.manifest_bytes()).hexdigest()}")
    return 0


def cmd_train(cfg) -> int:
    _require(cfg, "data", "train.out")
    seed = cfg["seed"]
    data = load_dataset(cfg["data"])
    h, w, ch = data.image_shape
    channels = cfg["embedder.channels"]
    stride = cfg["embedder.final_stride"]
    emb = EmbedderConfig(input_size=h, in_channels=ch, channels=channels, final_stage_stride=stride,
                         final_stage_dilation=2 if stride == 1 else 1, feature_dim=channels[-1],
                         bn_ema_decay=cfg["embedder.bn_ema_decay"])
    _checked("embedder", emb.validate)
    head = HeadConfig(kind=cfg["head.kind"], metric=cfg["head.metric"], d_k=cfg["head.d_k"],
                      d_v=cfg["head.d_v"], aux_loss=cfg["head.aux_loss"],
                      lr_combine=bool(cfg["head.lr_combine"]))
    _checked("head", head.validate)
    sampler = _sampler(cfg, seed)
    tc = tr.TrainConfig(initial_lr=cfg["train.lr"], lr_decay_factor=cfg["train.lr_decay_factor"],
                        lr_decay_interval_episodes=cfg["train.lr_decay_interval"],
                        weight_decay=cfg["train.weight_decay"],
                        normalize_gradients=cfg["train.normalize_gradients"],
                        max_episodes=cfg["train.episodes"], val_interval=cfg["train.val_interval"],
                        val_episodes=cfg["train.val_episodes"], patience=cfg["train.patience"],
                        augment=cfg["train.augment"], seed=seed)
    _checked("train", tc.validate)
    if not data.class_ids("val"):
        raise ConfigError("data: dataset has no validation classes")
    train_data = data.split("train")
    aux = train_data.class_ids() if head.aux_loss else []
    model = FewShotModel(emb, head, seed=seed, aux_classes=aux)
    out = Path(cfg["train.out"])
    out.mkdir(parents=True, exist_ok=True)
    progress = lambda i, row: log.info("episode %d loss %.4f val %.2f", i, row["loss"], row["val_acc"])
    try:
        result = tr.train(model, train_data, data.split("val"), tc, sampler, progress=progress)
    except tr.TrainingDiverged as exc:
        if exc.checkpoint is not None:
            exc.checkpoint.save(out / "last_good.ctxf")
        print(f"error: {exc} {json.dumps(exc.diagnostic)}", file=sys.stderr)
        return 1
    best = result.best.save(out / "best.ctxf")
    last = result.last.save(out / "last.ctxf")
    tr.write_log(result.log, out / "log.csv")
    kinds = [r["kind"] for r in result.log]
    print(f"episodes {len(kinds)} simclr {kinds.count('simclr')} best_val_acc {result.best_val_acc}")
    print(f"best {best} sha256 {_sha(best)}")
    print(f"last {last} sha256 {_sha(last)}")
    print(f"log sha256 {_sha(out / 'log.csv')}")
    return 0


def cmd_eval(cfg) -> int:
    _require(cfg, "data", "eval.out")
    if cfg["eval.bn_mode"] not in ("test-ema", "test-support-stats"):
        raise ConfigError(f"eval.bn_mode: must be test-ema or test-support-stats, got {cfg['eval.bn_mode']!r}")
    if cfg["eval.episodes"] < 1:
        raise ConfigError("eval.episodes: must be at least 1")
    data = load_dataset(cfg["data"])
    model, ckpt = _load_model(cfg)
    if cfg["head.lr_combine"] is not None:
        model.head_config.lr_combine = cfg["head.lr_combine"]
    split = _checked("eval.split", lambda: data.split(cfg["eval.split"]))
    sampler = _sampler(cfg, cfg["seed"])
    mode = "five_shot" if cfg["eval.five_shot"] else "standard"
    entry = evaluate(model, split, cfg["eval.episodes"], mode, cfg["eval.bn_mode"], sampler,
                     seed=cfg["seed"], method=model.kind, dataset_name=f"{data.name}-{cfg['eval.split']}")
    jpath, cpath = write_report([entry], cfg["eval.out"])
    for w in entry.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"{entry.method} {entry.dataset} {entry.mode}: {entry.mean:.2f} +- {entry.ci95:.2f} (n={entry.n})")
    print(f"report {jpath} sha256 {_sha(jpath)}")
    return 0


def cmd_probe(cfg) -> int:
    _require(cfg, "data", "probe.out")
    if not 0 < cfg["probe.fraction"] <= 1:
        raise ConfigError("probe.fraction: must lie in (0, 1]")
    data = load_dataset(cfg["data"])
    model, _ = _load_model(cfg)
    rng = np.random.default_rng(cfg["seed"])
    test = _checked("probe.test_split", lambda: data.split(cfg["probe.test_split"]))
    pool = P.build_pool(model, data.split("train"), test, cfg["probe.fraction"], rng)
    test_idx = np.flatnonzero(pool.origin == "test")
    n = min(cfg["probe.queries"], len(test_idx))
    if cfg["probe.k"] < 1 or cfg["probe.k"] > len(pool) - 1:
        raise ConfigError(f"probe.k: must lie in [1, {len(pool) - 1}]")
    chosen = np.sort(rng.choice(test_idx, n, replace=False))
    stats = P.collapse_stats(pool.embeddings[chosen], pool.labels[chosen], pool, cfg["probe.k"],
                             query_pool_index=chosen)
    path = P.write_histograms(stats, cfg["probe.out"])
    print(json.dumps(stats.summary, sort_keys=True))
    print(f"histograms {path} sha256 {_sha(path)}")
    return 0


def cmd_viz(cfg) -> int:
    _require(cfg, "data", "viz.out")
    data = load_dataset(cfg["data"])
    model, _ = _load_model(cfg)
    split = _checked("viz.split", lambda: data.split(cfg["viz.split"]))
    sampler = _sampler(cfg, cfg["seed"])
    episode = sample_episode(split, sampler, np.random.default_rng(cfg["seed"]))
    grid = model.embedder_config.grid_size
    for r, c in cfg["viz.positions"]:
        if not (0 <= r < grid and 0 <= c < grid):
            raise ConfigError(f"viz.positions: ({r}, {c}) outside the {grid}x{grid} query grid")
    if not 0 <= cfg["viz.query_index"] < episode.n_query:
        raise ConfigError(f"viz.query_index: must lie in [0, {episode.n_query})")
    files = P.export_attention(episode, model, cfg["viz.positions"], cfg["viz.out"], cfg["viz.query_index"])
    digest = hashlib.sha256(b"".join(Path(f).read_bytes() for f in files)).hexdigest()
    print(f"wrote {len(files)} files to {cfg['viz.out']} sha256 {digest}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "probe": cmd_probe,
            "viz-attention": cmd_viz}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve(args, args.command)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"ctx-fewshot {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, DatasetError, EpisodeError, CheckpointError, RuntimeError, ValueError,
            FloatingPointError) as exc:
        print(f"ctx-fewshot {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
