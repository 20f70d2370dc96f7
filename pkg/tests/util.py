import numpy as np


def rel_error(a, b):
    """Norm-wise relative error, guarded for all-zero gradients."""
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)
    return np.linalg.norm(a - b) / denom
