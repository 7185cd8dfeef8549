"""Dense array helpers shared by every other module.

Images are plain numpy arrays shaped ``(C, H, W)``; batches add a leading
axis ``(B, C, H, W)``.  Production paths run in float32, gradient checks in
float64.
"""

import numpy as np

from .errors import ConfigError, NonFiniteError, ShapeError

DTYPE = np.float32
LOSS_FLOOR = 1e-12


def _check_same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def _check_ref_shape(x_ref, cand):
    # a single reference image may serve a whole batch of candidates
    if np.shape(x_ref) != np.shape(cand) and np.shape(x_ref) != np.shape(cand)[1:]:
        raise ShapeError(f"shape mismatch: {np.shape(x_ref)} vs {np.shape(cand)}")


def as_image(x, dtype=DTYPE):
    """Return ``x`` as a contiguous array of ``dtype`` (no copy if already so)."""
    return np.ascontiguousarray(x, dtype=dtype)


def sign(a):
    # np.sign already maps 0 -> 0; keep dtype of the input
    return np.sign(a).astype(np.result_type(a, np.float32), copy=False)


def clamp01(a):
    return np.clip(a, 0.0, 1.0)


def elementwise(op, a, b=None):
    """Apply one of ``add, sub, scale, clamp01, sign``.

    ``b`` is a same-shaped array for ``add``/``sub`` (a scalar is also
    accepted) and a scalar for ``scale``; unary ops ignore it.
    """
    a = np.asarray(a)
    if op == "sign":
        return sign(a)
    if op == "clamp01":
        return clamp01(a)
    if op == "scale":
        if np.ndim(b) != 0:
            raise ShapeError("scale expects a scalar factor")
        return (a * b).astype(a.dtype, copy=False)
    if op in ("add", "sub"):
        if np.ndim(b) != 0:
            _check_same_shape(a, b)
        out = a + b if op == "add" else a - b
        return out.astype(a.dtype, copy=False)
    raise ValueError(f"unknown elementwise op {op!r}")


def project_linf(x_ref, cand, eps):
    """Project ``cand`` onto the L-inf ball of radius ``eps`` around ``x_ref``
    intersected with the pixel box [0, 1]."""
    if not eps > 0:
        raise ConfigError(f"eps must be > 0, got {eps}")
    _check_ref_shape(x_ref, cand)
    cand = np.asarray(cand)
    out = np.clip(cand, x_ref - eps, x_ref + eps)
    return clamp01(out).astype(cand.dtype, copy=False)


def _sample_norms(delta):
    """L2 norm per image: whole array for ndim <= 3, per leading index for batches."""
    if delta.ndim <= 3:
        return np.sqrt(np.sum(np.square(delta, dtype=np.float64)))
    flat = delta.reshape(delta.shape[0], -1)
    return np.sqrt(np.sum(np.square(flat, dtype=np.float64), axis=1))


def project_l2(x_ref, cand, eps):
    """Rescale ``cand - x_ref`` to L2 length at most ``eps``, then clamp to [0, 1]."""
    if not eps > 0:
        raise ConfigError(f"eps must be > 0, got {eps}")
    _check_ref_shape(x_ref, cand)
    cand = np.asarray(cand)
    delta = cand - x_ref
    norms = _sample_norms(delta)
    factor = np.minimum(1.0, eps / np.maximum(norms, 1e-30))
    if delta.ndim > 3:
        factor = factor.reshape((-1,) + (1,) * (delta.ndim - 1))
    out = np.where(factor < 1.0, x_ref + delta * factor, cand)
    return clamp01(out).astype(cand.dtype, copy=False)


def softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_ce_batch(logits, labels):
    """Per-row cross-entropy and softmax for ``logits`` of shape (B, K)."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"logits must be (B, K>=2), got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError("one label per logit row required")
    k = logits.shape[1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    probs = softmax(logits)
    picked = probs[np.arange(len(labels)), labels]
    losses = -np.log(np.maximum(picked, LOSS_FLOOR))
    return losses, probs


def softmax_ce(logits, label):
    """Cross-entropy of a single logit vector against class ``label``.

    Returns ``(loss, probs)``.
    """
    logits = np.asarray(logits)
    if logits.ndim != 1:
        raise ShapeError("softmax_ce expects a 1-D logit vector")
    if not 0 <= int(label) < logits.shape[0]:
        raise ValueError(f"label {label} out of range for K={logits.shape[0]}")
    losses, probs = softmax_ce_batch(logits[None, :], np.array([label]))
    return float(losses[0]), probs[0]


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x``, evaluated in float64."""
    if not h > 0:
        raise ConfigError("h must be > 0")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"f is not finite near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(a, b, floor=1e-8):
    """Largest ``|a-b| / max(|a|, |b|, floor)`` over all entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
