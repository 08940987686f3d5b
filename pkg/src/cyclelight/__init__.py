"""Unsupervised low-light enhancement via cycle training with
illumination-aware image prompts, plus an enhance-then-test evaluation
harness for frozen downstream models."""

__version__ = "0.1.0"

from . import adapter, backbone, config, evalkit, fixtures, imaging, losses, trainer  # noqa: F401
