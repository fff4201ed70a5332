"""Episodic training: losses, normalized-gradient ADAM, schedule, checkpoints."""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .episodes.augment import TransformSpec, apply_bohb_lite
from .episodes.sampler import Episode, SamplerConfig, sample_episode, to_simclr_episode
from .evaluator import evaluate
from .model import FewShotModel
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint=None, diagnostic=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.diagnostic = diagnostic or {}


@dataclass
class TrainConfig:
    initial_lr: float = 6e-4
    lr_decay_factor: float = 0.915
    lr_decay_interval_episodes: int = 2000
    weight_decay: float = 8.86e-5
    normalize_gradients: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_episodes: int = 20000
    val_interval: int = 1000
    val_episodes: int = 100
    patience: int | None = None  # validation rounds without improvement before stopping
    augment: bool = False  # BOHB-style augmentation of categorization episodes
    seed: int = 0

    def validate(self):
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_interval_episodes < 1 or self.val_interval < 1 or self.val_episodes < 1:
            raise ValueError("intervals and val_episodes must be positive")
        if self.weight_decay < 0 or self.max_episodes < 0:
            raise ValueError("weight_decay and max_episodes must be non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ValueError("adam betas must lie in [0, 1) and eps > 0")
        return self


def decay_interval(config: TrainConfig, simclr: bool = False, augment: bool = False) -> int:
    """Base interval, doubled with SimCLR episodes and again with augmentation."""
    return config.lr_decay_interval_episodes * (2 if simclr else 1) * (2 if augment else 1)


def lr_at(episode_index: int, config: TrainConfig, interval: int | None = None) -> float:
    if episode_index < 0:
        raise ValueError("episode index must be non-negative")
    interval = config.lr_decay_interval_episodes if interval is None else interval
    return config.initial_lr * config.lr_decay_factor ** (episode_index // interval)


# -- losses ---------------------------------------------------------------------

def episode_loss(episode: Episode, model: FewShotModel, bn_mode: str = "train-ema") -> Tensor:
    """Mean query cross-entropy over negative-distance logits, plus the aux loss."""
    try:
        logits, support = model.forward(episode, bn_mode)
        loss = T.cross_entropy(logits, episode.query_labels)
        aux = model.aux_loss(episode, support)
        if aux is not None:
            loss = T.add(loss, aux)
    except NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite loss on episode {episode.digest()}: {exc}",
                               diagnostic={"episode": episode.digest()}) from exc
    return loss


def contrastive_loss(query_emb, support_emb, positives) -> np.ndarray:
    """Per-query instance-discrimination loss over cosine similarities.

    ``-log(exp(cos(q, s_pos)) / sum_i exp(cos(q, s_i)))`` at unit temperature,
    computed in float64 straight from the embeddings.
    """
    q = np.asarray(query_emb, dtype=np.float64)
    s = np.asarray(support_emb, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    s = s / np.linalg.norm(s, axis=1, keepdims=True)
    sim = q @ s.T
    top = sim.max(axis=1, keepdims=True)
    lse = np.log(np.exp(sim - top).sum(axis=1)) + top[:, 0]
    return lse - sim[np.arange(len(q)), np.asarray(positives)]


# -- optimizer --------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    skipped_normalizations: int = 0


def step(params: dict, state: AdamState, config: TrainConfig, lr: float) -> AdamState:
    """One ADAM update on ``params`` (name -> Tensor) from their ``.grad``.

    With ``normalize_gradients`` the concatenated gradient is first scaled to
    unit global L2 norm (rounded to float32); a zero gradient is applied
    unnormalized. Weight decay
    is decoupled: ``p -= lr * weight_decay * p``.
    """
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name}")
        grads[name] = g
    if config.normalize_gradients:
        norm = np.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
                           for g in grads.values()))
        if norm > 0:
            # the unit direction is stored on the float32 grid; with a float64
            # backward pass this absorbs scale-dependent rounding in the gradient
            grads = {n: (g.astype(np.float64) / norm).astype(np.float32).astype(params[n].data.dtype)
                     for n, g in grads.items()}
        else:
            state.skipped_normalizations += 1
            log.debug("zero gradient norm; applying raw gradient")
    state.t += 1
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    c1, c2 = 1 - b1 ** state.t, 1 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m.astype(p.data.dtype), v.astype(p.data.dtype)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update - lr * config.weight_decay * p.data).astype(p.data.dtype)
        p.grad = None
    return state


# -- checkpoints -------------------------------------------------------------------

def capture(model: FewShotModel, state: AdamState, episode: int, extra_config: dict | None = None,
            extra: dict | None = None) -> Checkpoint:
    tensors = {}
    for name, p in model.parameters().items():
        tensors[f"param/{name}"] = p.data.copy()
    for name in model.embedder.bn.mean:
        tensors[f"bn_mean/{name}"] = model.embedder.bn.mean[name].copy()
        tensors[f"bn_var/{name}"] = model.embedder.bn.var[name].copy()
    for name in state.m:
        tensors[f"adam_m/{name}"] = state.m[name].copy()
        tensors[f"adam_v/{name}"] = state.v[name].copy()
    config = {"model": model.config_dict(), **(extra_config or {})}
    rng_state = {"scheme": "default_rng([seed, episode])", "next_episode": int(episode),
                 "adam_t": state.t}
    return Checkpoint(tensors, config, episode, rng_state, dict(extra or {}))


def restore(checkpoint: Checkpoint, model: FewShotModel | None = None):
    """Rebuild (model, optimizer state) from a checkpoint."""
    if model is None:
        model = model_from_config(checkpoint.config["model"])
    params = model.parameters()
    loaded = checkpoint.section("param")
    if set(loaded) != set(params):
        raise ValueError(f"checkpoint parameters {sorted(loaded)} do not match model {sorted(params)}")
    for name, arr in loaded.items():
        if arr.shape != params[name].shape:
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {params[name].shape}")
        params[name].data = arr.copy()
        params[name].grad = None
    for name, arr in checkpoint.section("bn_mean").items():
        model.embedder.bn.mean[name] = arr.copy()
    for name, arr in checkpoint.section("bn_var").items():
        model.embedder.bn.var[name] = arr.copy()
    state = AdamState(checkpoint.section("adam_m"), checkpoint.section("adam_v"),
                      int(checkpoint.rng_state.get("adam_t", 0)))
    state.m = {k: v.copy() for k, v in state.m.items()}
    state.v = {k: v.copy() for k, v in state.v.items()}
    return model, state


def model_from_config(cfg: dict) -> FewShotModel:
    from .embedder import EmbedderConfig
    from .model import HeadConfig
    return FewShotModel(EmbedderConfig(**cfg["embedder"]), HeadConfig(**cfg["head"]),
                        seed=cfg["seed"], aux_classes=list(cfg.get("aux_classes", [])))


# -- training loop -------------------------------------------------------------------

def make_training_episode(dataset, sampler: SamplerConfig, index: int, seed: int,
                          rho: TransformSpec, augment: TransformSpec | None) -> Episode:
    """Episode ``index`` of a run; depends only on (dataset, configs, seed, index)."""
    rng = np.random.default_rng([seed, index])
    simclr = rng.random() < sampler.simclr_fraction
    if simclr:
        # conversion keeps per-class query counts, so each class needs that many support images
        episode = sample_episode(dataset, sampler, rng, min_shots=sampler.queries_per_class)
        return to_simclr_episode(episode, rho, rng)
    episode = sample_episode(dataset, sampler, rng)
    if augment is not None:
        episode.support_images = np.stack([apply_bohb_lite(x, augment, rng) for x in episode.support_images])
        episode.query_images = np.stack([apply_bohb_lite(x, augment, rng) for x in episode.query_images])
    return episode


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    log: list
    best_val_acc: float | None
    stopped_early: bool = False


def write_log(rows, path):
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["episode", "kind", "loss", "lr", "val_acc"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in writer.fieldnames})


def train(model: FewShotModel, train_data, val_data, config: TrainConfig, sampler: SamplerConfig,
          rho: TransformSpec | None = None, augment_spec: TransformSpec | None = None,
          resume: Checkpoint | None = None, val_sampler: SamplerConfig | None = None,
          progress=None) -> TrainResult:
    """Run the episodic loop and keep the checkpoint with the best val accuracy."""
    config.validate()
    sampler.validate()
    if val_data is None or not val_data.class_ids():
        raise ValueError("train: validation split is empty")
    rho = TransformSpec().validate() if rho is None else rho.validate()
    augment = (augment_spec or TransformSpec(kind="bohb-lite")).validate() if config.augment else None
    interval = decay_interval(config, sampler.simclr_fraction > 0, config.augment)
    run_config = {"train": asdict(config), "sampler": asdict(sampler)}
    state = AdamState()
    start = 0
    if resume is not None:
        model, state = restore(resume, model)
        start = resume.episode
    val_sampler = val_sampler or sampler

    def validate_now():
        entry = evaluate(model, val_data, config.val_episodes, "standard", "test-ema",
                         val_sampler, seed=config.seed + 1, method="val")
        return entry.mean

    best = capture(model, state, start, run_config)
    best_acc, stale, stopped = None, 0, False
    rows = []
    params = model.parameters()
    for i in range(start, config.max_episodes):
        episode = make_training_episode(train_data, sampler, i, config.seed, rho, augment)
        lr = lr_at(i, config, interval)
        try:
            loss = episode_loss(episode, model, "train-ema")
            loss.backward()
            state = step(params, state, config, lr)
        except (TrainingDiverged, NonFiniteError) as exc:
            raise TrainingDiverged(f"training diverged at episode {i}: {exc}", checkpoint=best,
                                   diagnostic={"episode": i, "digest": episode.digest()}) from exc
        row = {"episode": i, "kind": episode.kind, "loss": loss.item(), "lr": lr, "val_acc": None}
        done = i + 1
        if done % config.val_interval == 0 or done == config.max_episodes:
            acc = validate_now()
            row["val_acc"] = acc
            if best_acc is None or acc > best_acc:
                best_acc, stale = acc, 0
                best = capture(model, state, done, run_config, {"val_acc": acc})
            else:
                stale += 1
            if progress is not None:
                progress(done, row)
            if config.patience is not None and stale >= config.patience:
                rows.append(row)
                stopped = True
                break
        rows.append(row)
    if state.skipped_normalizations:
        log.warning("%d zero-gradient steps applied unnormalized", state.skipped_normalizations)
    last = capture(model, state, start + len(rows), run_config)
    return TrainResult(best, last, rows, best_acc, stopped)


def clone_model(model: FewShotModel) -> FewShotModel:
    return copy.deepcopy(model)
