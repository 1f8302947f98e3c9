"""Multimodal adapter summarisation of long dialogues, on a numpy autodiff core."""

__version__ = "0.1.0"
