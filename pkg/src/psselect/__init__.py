"""Persistent-scatterer pixel selection on interferogram stacks.

The package bundles a classical phase-stability selector, two neural
segmenters (a 3D convolutional network and a convolutional LSTM) built on a
small reverse-mode autodiff core, a synthetic scene generator with ground
truth, and STIP-based quality evaluation.
"""

__version__ = "0.1.0"

from psselect.stack import (
    FormatError,
    InterferogramStack,
    PatchSet,
    PixelMask,
    chunk,
    read_mask,
    read_stack,
    stitch,
    wrap,
    write_mask,
    write_stack,
)

__all__ = [
    "FormatError",
    "InterferogramStack",
    "PatchSet",
    "PixelMask",
    "chunk",
    "read_mask",
    "read_stack",
    "stitch",
    "wrap",
    "write_mask",
    "write_stack",
    "__version__",
]
