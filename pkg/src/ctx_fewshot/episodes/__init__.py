from .augment import TransformSpec, apply_bohb_lite, apply_rho, transform
from .dataset import ClassRecord, Dataset, DatasetError, load_dataset, save_dataset
from .sampler import Episode, EpisodeError, SamplerConfig, sample_episode, to_simclr_episode
from .synthetic import GlyphStyle, make_synthetic_dataset

__all__ = [
    "ClassRecord", "Dataset", "DatasetError", "Episode", "EpisodeError", "GlyphStyle",
    "SamplerConfig", "TransformSpec", "apply_bohb_lite", "apply_rho", "load_dataset",
    "make_synthetic_dataset", "sample_episode", "save_dataset", "to_simclr_episode", "transform",
]
