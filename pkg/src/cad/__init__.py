"""Desk-scale audio-visual deepfake detection with a modality-shared alignment
path and a modality-specific distillation path."""

__version__ = "0.1.0"
