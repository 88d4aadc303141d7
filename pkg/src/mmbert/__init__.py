"""Multimodal mixture-of-experts encoder with staged training.

Subpackages are imported lazily by the CLI so that thread-count environment
variables can be applied before numpy loads. Import the submodules you need
directly, e.g. ``from mmbert import autograd``.
"""

__version__ = "0.1.0"
