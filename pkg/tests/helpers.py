import numpy as np

from geotransfer.imagemask import BinaryMask, Image

# filled by test_acceptance, printed by conftest's terminal summary
ACCEPTANCE_LINES = []


def block_mask(h, w, y0, x0, size):
    bits = np.zeros((h, w), dtype=np.uint8)
    bits[y0:y0 + size, x0:x0 + size] = 1
    return BinaryMask(bits)


def gray(h, w, v=0.5):
    return Image(np.full((h, w, 3), v))
