"""Small numeric helpers shared by the attack code.

Tensors are plain ``numpy.ndarray`` objects in float64.  Functions prefixed
with ``batch_`` treat axis 0 as the example axis and reduce over the rest.
"""

import numpy as np


def as_tensor(values, shape=None):
    """Return a float64 copy of ``values``, optionally reshaped.

    Raises ``ValueError`` if any element is NaN or infinite.
    """
    t = np.array(values, dtype=np.float64)
    if shape is not None:
        t = t.reshape(shape)
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor contains non-finite values")
    return t


def l1_norm(t):
    return float(np.sum(np.abs(t)))


def l2_norm(t):
    return float(batch_l2(np.asarray(t, dtype=np.float64).reshape(1, -1))[0])


def linf_norm(t):
    t = np.asarray(t)
    return float(np.max(np.abs(t))) if t.size else 0.0


def sign(t):
    # np.sign maps 0 -> 0; copy so callers never alias the input
    return np.sign(np.asarray(t, dtype=np.float64))


def cosine_similarity(a, b):
    """Cosine of the angle between ``a`` and ``b``; 0.0 if either is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    cos, _ = batch_cosine(a.reshape(1, -1), b.reshape(1, -1))
    return float(cos[0])


def _flat(t):
    t = np.asarray(t, dtype=np.float64)
    return t.reshape(t.shape[0], -1)


def batch_l1(t):
    return np.sum(np.abs(_flat(t)), axis=1)


def _rescaled(f):
    """Rows divided by their max magnitude (zero rows kept), and those maxima."""
    m = np.max(np.abs(f), axis=1) if f.shape[1] else np.zeros(f.shape[0])
    safe = np.where(m > 0, m, 1.0)
    return f / safe[:, None], m


def batch_l2(t):
    # scaling first avoids underflow/overflow when squaring
    f, m = _rescaled(_flat(t))
    return m * np.sqrt(np.sum(f * f, axis=1))


def batch_linf(t):
    f = _flat(t)
    if f.shape[1] == 0:
        return np.zeros(f.shape[0])
    return np.max(np.abs(f), axis=1)


def batch_cosine(a, b):
    """Row-wise cosine similarity.

    Returns ``(cos, degenerate)`` where ``degenerate`` marks rows in which
    either vector is zero; those rows get cosine 0.
    """
    fa, fb = _flat(a), _flat(b)
    if fa.shape != fb.shape:
        raise ValueError(f"shape mismatch: {fa.shape} vs {fb.shape}")
    fa, _ = _rescaled(fa)
    fb, _ = _rescaled(fb)
    na = np.sqrt(np.sum(fa * fa, axis=1))
    nb = np.sqrt(np.sum(fb * fb, axis=1))
    degenerate = (na == 0.0) | (nb == 0.0)
    denom = np.where(degenerate, 1.0, na * nb)
    cos = np.where(degenerate, 0.0, np.sum(fa * fb, axis=1) / denom)
    return np.clip(cos, -1.0, 1.0), degenerate


def expand_to(v, like):
    """Reshape a per-example vector so it broadcasts against ``like``."""
    return np.asarray(v).reshape((-1,) + (1,) * (np.ndim(like) - 1))
