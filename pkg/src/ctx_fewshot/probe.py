"""Nearest-neighbour collapse statistics and attention-map export."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedder import global_pool
from .netpbm import write_pnm

ORIGINS = ("train", "test")


@dataclass
class RetrievalPool:
    embeddings: np.ndarray  # (n, D)
    labels: np.ndarray  # dataset class ids
    origin: np.ndarray  # "train" / "test" per item

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        self.origin = np.asarray(self.origin)
        n = len(self.embeddings)
        if self.embeddings.ndim != 2 or len(self.labels) != n or len(self.origin) != n:
            raise ValueError("pool: embeddings (n, D), labels (n,) and origin (n,) must agree")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("pool: embeddings must be finite")
        bad = set(self.origin.tolist()) - set(ORIGINS)
        if bad:
            raise ValueError(f"pool: unknown origins {sorted(bad)}")

    def __len__(self):
        return len(self.embeddings)

    def permuted(self, order) -> "RetrievalPool":
        order = np.asarray(order)
        return RetrievalPool(self.embeddings[order], self.labels[order], self.origin[order])


def _sq_dists(query, emb):
    diff = emb - np.asarray(query, dtype=np.float64)[None, :]
    return np.einsum("nd,nd->n", diff, diff)


def topk_neighbors(query, pool: RetrievalPool, k: int = 9, exclude: int | None = None) -> list:
    """The ``k`` nearest pool items as (index, squared distance), nearest first.

    Ties go to the lower pool index. ``exclude`` is the query's own pool index.
    """
    if len(pool) == 0:
        raise ValueError("topk_neighbors: empty pool")
    available = len(pool) - (exclude is not None)
    if not 1 <= k <= available:
        raise ValueError(f"topk_neighbors: k={k} outside [1, {available}]")
    d = _sq_dists(query, pool.embeddings)
    idx = np.arange(len(pool))
    if exclude is not None:
        d = d.copy()
        d[exclude] = np.inf
    # lexsort sorts by the last key first
    order = np.lexsort((idx, d))[:k]
    return [(int(i), float(d[i])) for i in order]


def chance_train_fraction(n_train: int, n_test: int) -> float:
    """Expected share of train-origin neighbours for an embedding that ignores class."""
    if n_train < 0 or n_test < 0 or n_train + n_test == 0:
        raise ValueError("chance_train_fraction: counts must be non-negative and not both zero")
    return n_train / (n_train + n_test)


@dataclass
class CollapseStats:
    k: int
    same_class: np.ndarray  # per query: neighbours sharing the query's class
    from_train: np.ndarray  # per query: neighbours of train origin
    max_train_class: np.ndarray  # per query: largest neighbour count of one train class
    chance_train_fraction: float
    summary: dict = field(default_factory=dict)

    def histograms(self) -> dict:
        bins = self.k + 1
        return {"A": np.bincount(self.same_class, minlength=bins),
                "B": np.bincount(self.from_train, minlength=bins),
                "C": np.bincount(self.max_train_class, minlength=bins)}


def collapse_stats(query_embeddings, query_labels, pool: RetrievalPool, k: int = 9,
                   query_pool_index=None) -> CollapseStats:
    """Per-query neighbour histograms over a mixed train/test pool.

    ``query_pool_index[i]`` is query i's position in the pool (or -1), so it
    is not its own neighbour.
    """
    q = np.asarray(query_embeddings, dtype=np.float64)
    labels = np.asarray(query_labels)
    if q.ndim != 2 or len(labels) != len(q):
        raise ValueError("collapse_stats: queries must be (n, D) with one label each")
    pidx = np.full(len(q), -1) if query_pool_index is None else np.asarray(query_pool_index)
    is_train = pool.origin == "train"
    same, train, top = (np.zeros(len(q), dtype=np.int64) for _ in range(3))
    for i in range(len(q)):
        nb = np.array([j for j, _ in topk_neighbors(q[i], pool, k, None if pidx[i] < 0 else int(pidx[i]))])
        same[i] = np.sum(pool.labels[nb] == labels[i])
        train[i] = np.sum(is_train[nb])
        tl = pool.labels[nb][is_train[nb]]
        top[i] = np.unique(tl, return_counts=True)[1].max() if tl.size else 0
    n_train, n_test = int(is_train.sum()), int((~is_train).sum())
    chance = chance_train_fraction(n_train, n_test)
    summary = {"n_queries": int(len(q)), "k": k,
               "frac_zero_same_class": float(np.mean(same == 0)) if len(q) else 0.0,
               "frac_two_from_one_train_class": float(np.mean(top >= 2)) if len(q) else 0.0,
               "mean_train_fraction": float(train.mean() / k) if len(q) else 0.0,
               "chance_train_fraction": chance}
    return CollapseStats(k, same, train, top, chance, summary)


def write_histograms(stats: CollapseStats, path) -> Path:
    path = Path(path)
    h = stats.histograms()
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "same_class", "from_train", "max_train_class"])
        for b in range(stats.k + 1):
            writer.writerow([b, int(h["A"][b]), int(h["B"][b]), int(h["C"][b])])
    return path


def pooled_embeddings(model, images, bn_mode: str = "test-ema", batch: int = 256) -> np.ndarray:
    """Globally pooled features using frozen BN statistics."""
    out = []
    for s in range(0, len(images), batch):
        fm = model.embedder.embed(images[s:s + batch], bn_mode)
        out.append(global_pool(fm).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, model.embedder_config.feature_dim))


def build_pool(model, train_data, test_data, fraction: float, rng, bn_mode: str = "test-ema"):
    """Sample ``fraction`` of each class's images from both datasets into a pool."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    images, labels, origin = [], [], []
    for data, name in ((train_data, "train"), (test_data, "test")):
        for cid in data.class_ids():
            n = data.count(cid)
            take = np.sort(rng.choice(n, max(1, int(round(fraction * n))), replace=False))
            images.append(data.images[cid][take])
            labels += [cid] * len(take)
            origin += [name] * len(take)
    emb = pooled_embeddings(model, np.concatenate(images), bn_mode)
    return RetrievalPool(emb, np.array(labels), np.array(origin))


# -- attention export ---------------------------------------------------------------

def _upsample(grid: np.ndarray, size: int) -> np.ndarray:
    h, w = grid.shape
    rows = np.arange(size) * h // size
    cols = np.arange(size) * w // size
    return grid[rows][:, cols]


def export_attention(episode, model, query_positions, out_dir, query_index: int = 0,
                     bn_mode: str = "test-ema") -> list:
    """Write one PGM per (query position, support image) plus ``attention.json``.

    Intensities are the weights for one query position, nearest-neighbour
    upsampled and divided by their maximum over the class's support images.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = model.embedder_config.grid_size
    size = episode.support_images.shape[1]
    for r, c in query_positions:
        if not (0 <= r < grid and 0 <= c < grid):
            raise ValueError(f"query position ({r}, {c}) outside the {grid}x{grid} grid")
    if not 0 <= query_index < episode.n_query:
        raise ValueError(f"query index {query_index} outside [0, {episode.n_query})")
    per_class = model.attention(episode, query_index, bn_mode)
    members = [np.flatnonzero(episode.support_labels == cls) for cls in range(episode.n_classes)]
    written, sidecar = [], []
    for r, c in query_positions:
        p = r * grid + c
        entry = {"row": int(r), "col": int(c), "supports": []}
        for cls, weights in enumerate(per_class):
            w = weights[p].astype(np.float64)  # (N_c, M)
            peak = w.max()
            for n, sidx in enumerate(members[cls]):
                cell = w[n].reshape(grid, grid)
                norm = cell / peak if peak > 0 else np.zeros_like(cell)
                img = np.rint(_upsample(norm, size) * 255).astype(np.uint8)
                path = out / f"q{query_index}_r{r}_c{c}_s{int(sidx):03d}.pgm"
                write_pnm(path, img)
                written.append(path)
                entry["supports"].append({"support_index": int(sidx), "class": cls,
                                          "weights": cell.tolist(), "file": path.name})
        sidecar.append(entry)
    meta = {"query_index": query_index, "grid": grid, "image_size": size, "positions": sidecar}
    side = out / "attention.json"
    side.write_text(json.dumps(meta, indent=1))
    written.append(side)
    return written
