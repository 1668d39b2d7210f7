"""Desk-scale end-to-end speech translation with a trainable window-level
query connector and LoRA adapters over frozen encoders and a frozen LM."""

__version__ = "0.1.0"
