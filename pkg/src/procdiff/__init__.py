"""Procedural image generation with procedural-prompt memory nets.

Modules map one-to-one onto the pipeline: :mod:`procedure` (recipes and
prompt scenarios), :mod:`pipeline` (video to manifest), :mod:`encoders`,
:mod:`memory` (TMN/IMN/MMN), :mod:`diffusion`, :mod:`controlnet`,
:mod:`metrics` and the :mod:`cli`.
"""

from .encoders import ToyEncoder, clip_score
from .memory import AttentionBlock, FusionHead, MemoryNet, TokenMixer, fuse_with_time
from .procedure import PromptScenario, Recipe, Step, load_manifest, make_prompt_sequence

__version__ = "0.1.0"

__all__ = [
    "AttentionBlock",
    "FusionHead",
    "MemoryNet",
    "PromptScenario",
    "Recipe",
    "Step",
    "TokenMixer",
    "ToyEncoder",
    "clip_score",
    "fuse_with_time",
    "load_manifest",
    "make_prompt_sequence",
]
