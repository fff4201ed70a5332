"""Episode construction: categorization sampling and SimCLR conversion."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .augment import TransformSpec, transform
from .dataset import Dataset

KINDS = ("categorization", "simclr")


class EpisodeError(ValueError):
    pass


@dataclass
class Episode:
    """Support and query images with episode-local labels.

    ``class_ids[c]`` is the dataset class behind episode class ``c``; for a
    SimCLR episode each class is one support image, so this is that image's
    original class. ``support_refs``/``query_refs`` hold (class id, image
    index) pairs identifying the source images.
    """
    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    class_ids: tuple
    kind: str = "categorization"
    support_refs: list = field(default_factory=list)
    query_refs: list = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    @property
    def n_support(self) -> int:
        return len(self.support_labels)

    @property
    def n_query(self) -> int:
        return len(self.query_labels)

    def shots(self) -> np.ndarray:
        return np.bincount(self.support_labels, minlength=self.n_classes)

    def query_counts(self) -> np.ndarray:
        return np.bincount(self.query_labels, minlength=self.n_classes)

    def validate(self):
        if self.kind not in KINDS:
            raise EpisodeError(f"unknown episode kind {self.kind!r}")
        shots = self.shots()
        if len(shots) != self.n_classes or np.any(shots == 0):
            raise EpisodeError("every class needs at least one support image")
        if self.query_labels.size and (self.query_labels.min() < 0
                                       or self.query_labels.max() >= self.n_classes):
            raise EpisodeError("query label outside the support classes")
        if self.kind == "categorization":
            counts = self.query_counts()
            if len(set(counts.tolist())) > 1:
                raise EpisodeError(f"query set is not class balanced: {counts.tolist()}")
        elif np.any(shots != 1):
            raise EpisodeError("simclr episodes need singleton classes")
        return self

    def digest(self) -> str:
        h = hashlib.sha256(self.kind.encode())
        h.update(np.asarray(self.support_labels, np.int64).tobytes())
        h.update(np.asarray(self.query_labels, np.int64).tobytes())
        h.update(np.ascontiguousarray(self.support_images).tobytes())
        h.update(np.ascontiguousarray(self.query_images).tobytes())
        return h.hexdigest()[:16]


@dataclass
class SamplerConfig:
    ways: tuple = (5, 50)
    support: tuple = (50, 500)
    queries_per_class: int = 10
    fine_grained_fraction: float = 0.5
    simclr_fraction: float = 0.5
    shots: int | None = None  # fixed shots per class when set
    seed: int = 0

    def __post_init__(self):
        self.ways = tuple(int(v) for v in self.ways)
        self.support = tuple(int(v) for v in self.support)

    def validate(self):
        if len(self.ways) != 2 or not 1 < self.ways[0] <= self.ways[1]:
            raise ValueError(f"ways range {self.ways} must be nonempty with at least 2 ways")
        if len(self.support) != 2 or not 1 <= self.support[0] <= self.support[1]:
            raise ValueError(f"support range {self.support} must be nonempty")
        if self.queries_per_class < 1:
            raise ValueError("queries_per_class must be positive")
        for name in ("fine_grained_fraction", "simclr_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.shots is not None and self.shots < 1:
            raise ValueError("shots must be positive when set")
        return self


def _choose_classes(dataset: Dataset, eligible: list, ways: int, fine: bool, lo: int, rng):
    if fine:
        allowed = set(eligible)
        nodes = []
        for members in dataset.hierarchy().values():
            inside = [c for c in members if c in allowed]
            if len(inside) >= min(lo, len(eligible)):
                nodes.append(inside)
        if nodes:
            pool = nodes[int(rng.integers(len(nodes)))]
            ways = min(ways, len(pool))
            return [int(c) for c in rng.choice(pool, size=ways, replace=False)]
    return [int(c) for c in rng.choice(eligible, size=ways, replace=False)]


def _apportion_shots(caps: np.ndarray, config: SamplerConfig, min_shots: int, rng) -> np.ndarray:
    ways = len(caps)
    if config.shots is not None:
        return np.minimum(caps, config.shots)
    lo, hi = config.support
    upper = max(1, hi // ways)
    shots = rng.integers(1, upper + 1, size=ways)
    shots = np.minimum(np.maximum(shots, min_shots), caps)
    total = shots.sum()
    if total < lo:
        shots = np.minimum(caps, np.ceil(shots * (lo / total)).astype(np.int64))
    elif total > hi:
        shots = np.maximum(min_shots, np.floor(shots * (hi / total)).astype(np.int64))
    # fix residual rounding one image at a time
    while shots.sum() > hi and np.any(shots > min_shots):
        room = np.flatnonzero(shots > min_shots)
        shots[room[int(rng.integers(len(room)))]] -= 1
    while shots.sum() < lo and np.any(shots < caps):
        room = np.flatnonzero(shots < caps)
        shots[room[int(rng.integers(len(room)))]] += 1
    return shots


def sample_episode(dataset: Dataset, config: SamplerConfig, rng, min_shots: int = 1) -> Episode:
    """Sample a categorization episode from all classes of ``dataset``.

    Pass a single-split view (``dataset.split("train")``) to sample from one
    split. Ways are clamped to the classes that have enough images.
    """
    q = config.queries_per_class
    need = q + max(min_shots, config.shots or 1)
    ids = dataset.class_ids()
    eligible = [c for c in ids if dataset.count(c) >= need]
    if len(eligible) < 2:
        raise EpisodeError(f"need at least 2 classes with >= {need} images, found {len(eligible)}")
    lo, hi = config.ways
    ways = min(int(rng.integers(lo, hi + 1)), len(eligible))
    fine = rng.random() < config.fine_grained_fraction
    classes = _choose_classes(dataset, eligible, ways, fine, lo, rng)
    caps = np.array([dataset.count(c) - q for c in classes])
    shots = _apportion_shots(caps, config, min_shots, rng)

    s_imgs, s_lab, s_refs, q_imgs, q_lab, q_refs = [], [], [], [], [], []
    for label, (cid, k) in enumerate(zip(classes, shots)):
        order = rng.permutation(dataset.count(cid))
        arr = dataset.images[cid]
        for idx in order[:q]:
            q_imgs.append(arr[idx])
            q_lab.append(label)
            q_refs.append((cid, int(idx)))
        for idx in order[q:q + k]:
            s_imgs.append(arr[idx])
            s_lab.append(label)
            s_refs.append((cid, int(idx)))
    return Episode(np.stack(s_imgs), np.array(s_lab), np.stack(q_imgs), np.array(q_lab),
                   tuple(classes), "categorization", s_refs, q_refs)


def to_simclr_episode(episode: Episode, spec: TransformSpec, rng) -> Episode:
    """Turn every support image into its own class and re-draw the queries.

    Query sources are distinct support images whose original classes follow
    the per-class counts of the original query set; the original queries are
    discarded. Support views are transformed without blur, query views with.
    """
    if episode.kind != "categorization":
        raise EpisodeError("only categorization episodes can be converted")
    if episode.n_query > episode.n_support:
        raise EpisodeError(f"{episode.n_query} queries cannot be drawn without repeats "
                           f"from {episode.n_support} support images")
    labels = episode.support_labels
    pools, counts = {}, episode.query_counts()
    for c in range(episode.n_classes):
        members = np.flatnonzero(labels == c)
        if counts[c] > len(members):
            raise EpisodeError(f"class {c} has {counts[c]} queries but only {len(members)} "
                               "support images")
        pools[c] = list(rng.permutation(members)[:counts[c]])
    sources = np.array([pools[int(c)].pop() for c in episode.query_labels], dtype=np.int64)

    support = np.stack([transform(img, spec, rng, is_query=False) for img in episode.support_images])
    queries = np.stack([transform(episode.support_images[s], spec, rng, is_query=True)
                        for s in sources])
    class_ids = tuple(episode.class_ids[c] for c in labels)
    refs = list(episode.support_refs)
    return Episode(support, np.arange(episode.n_support), queries, sources, class_ids, "simclr",
                   refs, [refs[s] for s in sources] if refs else [])
