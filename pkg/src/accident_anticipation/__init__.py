"""Accident anticipation and localization from dashcam features.

Two-stage model: dual vision attention plus dynamic object attention feed an
anticipation head (per-frame accident probability), and a localization head
scores which objects are involved. A prompt builder turns the outputs into
verbal alerts.
"""

from .dataset import ClipPack, read_clip_pack, write_clip_pack
from .model import AccidentModel, ModelConfig
from .synth import ScenarioParams, generate_dataset, generate_scenario

__all__ = [
    "AccidentModel",
    "ClipPack",
    "ModelConfig",
    "ScenarioParams",
    "generate_dataset",
    "generate_scenario",
    "read_clip_pack",
    "write_clip_pack",
]
__version__ = "0.1.0"
