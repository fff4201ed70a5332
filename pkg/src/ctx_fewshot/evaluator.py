"""Episode accuracy, confidence intervals and average ranks."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .episodes.sampler import SamplerConfig, sample_episode

MODES = ("standard", "five_shot")


@dataclass
class EvalEntry:
    method: str
    dataset: str
    mean: float  # percent
    ci95: float  # percent
    n: int
    mode: str = "standard"
    warnings: list = field(default_factory=list)
    accuracies: list = field(default_factory=list, repr=False)

    def row(self) -> dict:
        return {"method": self.method, "dataset": self.dataset, "mode": self.mode,
                "mean": self.mean, "ci95": self.ci95, "n": self.n}


def confidence_interval(accuracies) -> tuple:
    """Mean and 1.96 * sample std / sqrt(n), in the units of the input."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size == 0:
        raise ValueError("confidence_interval: no accuracies")
    if acc.size == 1 or np.all(acc == acc[0]):
        return float(acc.mean()), 0.0
    return float(acc.mean()), float(1.96 * acc.std(ddof=1) / np.sqrt(acc.size))


def episode_accuracy(logits, labels) -> float:
    # np.argmax returns the first maximum, so ties go to the lowest class index
    pred = np.argmax(np.asarray(logits), axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def eval_sampler(base: SamplerConfig | None, mode: str) -> SamplerConfig:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    cfg = SamplerConfig() if base is None else base
    cfg = replace(cfg, simclr_fraction=0.0)
    if mode == "five_shot":
        cfg = replace(cfg, shots=5)
    return cfg.validate()


def evaluate(model, dataset, n_episodes: int = 600, mode: str = "standard",
             bn_mode: str = "test-ema", sampler: SamplerConfig | None = None, seed: int = 0,
             method: str = "model", dataset_name: str | None = None) -> EvalEntry:
    """Accuracy over ``n_episodes`` sampled episodes.

    ``model`` is anything with ``logits(episode, bn_mode) -> (Q, C) array``.
    Episode ``i`` uses the generator ``default_rng([seed, i])``.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    cfg = eval_sampler(sampler, mode)
    warnings = []
    q = cfg.queries_per_class
    need = q + (cfg.shots or 1)
    available = sum(dataset.count(c) >= need for c in dataset.class_ids())
    if available < cfg.ways[1]:
        warnings.append(f"ways clamped: {available} classes available, range {cfg.ways}")
    accs = []
    for i in range(n_episodes):
        episode = sample_episode(dataset, cfg, np.random.default_rng([seed, i]))
        accs.append(episode_accuracy(model.logits(episode, bn_mode), episode.query_labels))
    mean, ci = confidence_interval(accs)
    return EvalEntry(method, dataset_name or dataset.name, 100 * mean, 100 * ci, n_episodes,
                     mode, warnings, accs)


def average_rank(table) -> dict:
    """Average rank per method from ``{method: [accuracy per dataset]}``.

    Rank 1 is best; tied methods share the mean of their ranks.
    """
    methods = list(table)
    acc = np.array([table[m] for m in methods], dtype=np.float64)
    if acc.ndim != 2:
        raise ValueError("average_rank: every method needs the same number of datasets")
    ranks = np.stack([rankdata(-acc[:, j], method="average") for j in range(acc.shape[1])], axis=1)
    return {m: float(r) for m, r in zip(methods, ranks.mean(axis=1))}


def write_report(entries, path_stem) -> tuple:
    """Write ``<stem>.json`` and ``<stem>.csv``; ranks included when >1 method."""
    stem = Path(path_stem)
    rows = [e.row() for e in entries]
    by_method: dict = {}
    datasets = sorted({e.dataset for e in entries})
    for e in entries:
        by_method.setdefault(e.method, {})[e.dataset] = e.mean
    ranks = {}
    if len(by_method) > 1 and all(len(v) == len(datasets) for v in by_method.values()):
        ranks = average_rank({m: [v[d] for d in datasets] for m, v in by_method.items()})
    payload = {"entries": [{k: v for k, v in asdict(e).items() if k != "accuracies"}
                           for e in entries],
               "average_rank": ranks}
    jpath = stem.with_suffix(".json")
    jpath.write_text(json.dumps(payload, indent=1, sort_keys=True))
    cpath = stem.with_suffix(".csv")
    with cpath.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["method", "dataset", "mode", "mean", "ci95", "n"])
        writer.writeheader()
        writer.writerows(rows)
    return jpath, cpath
