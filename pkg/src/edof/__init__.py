"""Extended depth-of-field fusion for microscopy z-stacks."""

from .imaging import Image, ZStack, load_pgm, load_stack, save_pgm, to_unit
from .wavelet import HAAR, SYM8, fuse_wavelet

__all__ = ["Image", "ZStack", "load_pgm", "load_stack", "save_pgm", "to_unit",
           "HAAR", "SYM8", "fuse_wavelet"]
