"""Embedder plus classification head, evaluated one episode at a time."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import heads
from . import tensor as T
from .embedder import Embedder, EmbedderConfig, global_pool
from .episodes.sampler import Episode
from .tensor import Tensor

HEAD_KINDS = ("proto", "ctx")


@dataclass
class HeadConfig:
    kind: str = "ctx"
    metric: str = "sq-euclid"  # proto head only
    d_k: int = 128
    d_v: int = 128
    aux_loss: bool = False
    lr_combine: bool = False
    lr_lambda: float = 5.0
    lr_c: float = 10.0

    def validate(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"head kind must be one of {HEAD_KINDS}, got {self.kind!r}")
        if self.metric not in heads.METRICS:
            raise ValueError(f"metric must be one of {heads.METRICS}, got {self.metric!r}")
        if self.d_k <= 0 or self.d_v <= 0:
            raise ValueError("d_k and d_v must be positive")
        if self.lr_lambda < 0 or self.lr_c <= 0:
            raise ValueError("lr_lambda must be >= 0 and lr_c > 0")
        return self


@dataclass
class FewShotModel:
    embedder_config: EmbedderConfig
    head_config: HeadConfig
    seed: int = 0
    aux_classes: list = field(default_factory=list)  # dataset class ids, index = aux label

    def __post_init__(self):
        self.head_config.validate()
        ss = np.random.SeedSequence(self.seed)
        emb_seq, head_seq, aux_seq = ss.spawn(3)
        self.embedder = Embedder(self.embedder_config, np.random.default_rng(emb_seq))
        d = self.embedder_config.feature_dim
        self.head = None
        if self.head_config.kind == "ctx":
            self.head = heads.HeadParams.init(d, self.head_config.d_k, self.head_config.d_v,
                                              np.random.default_rng(head_seq))
        self.aux_weight = self.aux_bias = None
        if self.head_config.aux_loss and self.aux_classes:
            rng = np.random.default_rng(aux_seq)
            k = len(self.aux_classes)
            self.aux_weight = Tensor(rng.normal(0, 1 / np.sqrt(d), (d, k)), requires_grad=True)
            self.aux_bias = Tensor(np.zeros(k), requires_grad=True)
        self._aux_index = {cid: i for i, cid in enumerate(self.aux_classes)}

    @property
    def kind(self) -> str:
        return self.head_config.kind

    def parameters(self) -> dict:
        params = dict(self.embedder.params)
        if self.head is not None:
            params.update(self.head.tensors())
        if self.aux_weight is not None:
            params["aux.weight"] = self.aux_weight
            params["aux.bias"] = self.aux_bias
        return params

    def config_dict(self) -> dict:
        return {"embedder": asdict(self.embedder_config), "head": asdict(self.head_config),
                "seed": self.seed, "aux_classes": list(self.aux_classes)}

    # -- forward ---------------------------------------------------------------
    def embed_episode(self, episode: Episode, bn_mode: str):
        images = np.concatenate([episode.support_images, episode.query_images], axis=0)
        ns = episode.n_support
        rows = ns if bn_mode == "test-support-stats" else None
        fms = self.embedder.embed(images, bn_mode, stats_rows=rows)
        support = T.take(fms, np.arange(ns))
        query = T.take(fms, np.arange(ns, ns + episode.n_query))
        return support, query

    def logits_from_maps(self, support_fms: Tensor, support_labels, query_fms: Tensor,
                         n_classes: int) -> Tensor:
        if self.kind == "ctx":
            return heads.ctx_logits(support_fms, support_labels, query_fms, self.head, n_classes)
        protos = heads.class_prototypes(global_pool(support_fms), support_labels, n_classes)
        return heads.proto_logits(global_pool(query_fms), protos, self.head_config.metric)

    def forward(self, episode: Episode, bn_mode: str = "train-ema"):
        """Return (logits, support feature maps) as tensors."""
        support, query = self.embed_episode(episode, bn_mode)
        logits = self.logits_from_maps(support, episode.support_labels, query, episode.n_classes)
        return logits, support

    def aux_loss(self, episode: Episode, support_fms: Tensor) -> Tensor | None:
        if self.aux_weight is None or episode.kind != "categorization":
            return None
        try:
            labels = [self._aux_index[episode.class_ids[c]] for c in episode.support_labels]
        except KeyError as exc:
            raise ValueError(f"aux loss: class {exc.args[0]} is not a training class") from None
        return heads.aux_global_loss(global_pool(support_fms), labels, self.aux_weight, self.aux_bias)

    def logits(self, episode: Episode, bn_mode: str = "test-ema") -> np.ndarray:
        """Classification logits as an array, combined with LR logits when enabled."""
        support, query = self.embed_episode(episode, bn_mode)
        out = self.logits_from_maps(support, episode.support_labels, query, episode.n_classes)
        if not self.head_config.lr_combine:
            return out.data
        return heads.global_lr_combine(out.data, global_pool(support).data, episode.support_labels,
                                       global_pool(query).data, self.head_config.lr_lambda,
                                       self.head_config.lr_c)

    def attention(self, episode: Episode, query_index: int, bn_mode: str = "test-ema") -> list:
        """Per-class CTX attention weights (P, N_c, M) for one query image."""
        if self.kind != "ctx":
            raise ValueError("attention maps exist only for the ctx head")
        support, query = self.embed_episode(episode, bn_mode)
        qfm = T.take(query, [query_index])
        out = []
        for c in range(episode.n_classes):
            rows = np.flatnonzero(episode.support_labels == c)
            att = heads.ctx_attention(qfm, T.take(support, rows), self.head)
            out.append(att.weights.data[0])
        return out
