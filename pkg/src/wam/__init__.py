"""Desk-scale world-action model: joint video and action flow matching under a blockwise causal mask."""
from .model import ModelConfig, WorldActionModel

__all__ = ["ModelConfig", "WorldActionModel"]
__version__ = "0.1.0"
