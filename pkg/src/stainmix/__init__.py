"""Unpaired H&E-to-IHC stain translation with mix-domain patch contrastive learning."""

__version__ = "0.1.0"
