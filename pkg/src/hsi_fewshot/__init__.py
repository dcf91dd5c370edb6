"""Cross-domain few-shot hyperspectral classification with multi-level relation learning."""

from hsi_fewshot.scene_store import HsiScene, load_scene, save_scene, normalize_scene, labeled_pixel_index
from hsi_fewshot.sampling import PatchBatch, Episode, SamplerConfig
from hsi_fewshot.objectives import ObjectiveConfig, LossReport

__all__ = [
    "HsiScene",
    "load_scene",
    "save_scene",
    "normalize_scene",
    "labeled_pixel_index",
    "PatchBatch",
    "Episode",
    "SamplerConfig",
    "ObjectiveConfig",
    "LossReport",
]

__version__ = "0.1.0"
