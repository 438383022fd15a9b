"""Persona-aware dialogue generation: the AR baseline and the AR+ variant."""

from .config import ModelConfig, RunConfig, TOGGLES, tiny_config
from .model import PersonaDialogueModel, count_parameters

__all__ = ["ModelConfig", "RunConfig", "TOGGLES", "tiny_config", "PersonaDialogueModel", "count_parameters"]
__version__ = "0.1.0"
