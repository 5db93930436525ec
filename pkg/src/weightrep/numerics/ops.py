"""Differentiable building blocks layered on :mod:`weightrep.numerics.tensor`."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, kernel, stride=1, pad=0):
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``kernel[F,C,k,k]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"input has {c} channels but kernel expects {kc}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ValueError("kernel larger than padded input")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # cols[n, c, i, j, u, v] = xp[n, c, i*stride + u, j*stride + v]
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = cols[:, :, :ho, :wo]
    out = np.tensordot(cols, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    kdata = kernel.data

    def backward(g):
        gx = gk = None
        if kernel.requires_grad:
            gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            # dcols[n, c, i, j, u, v]
            dcols = np.tensordot(g, kdata, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += dcols[..., u, v]
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gk

    return Tensor._make(np.ascontiguousarray(out), (x, kernel), backward, "conv2d")


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward, "log_softmax")


def softmax(x, axis=-1):
    return log_softmax(x, axis).exp()


def kl_divergence(teacher_logits, student_logits, temperature=1.0):
    """Batch mean of KL(softmax(teacher/T) || softmax(student/T))."""
    teacher_logits, student_logits = as_tensor(teacher_logits), as_tensor(student_logits)
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(f"logit shapes differ: {teacher_logits.shape} vs {student_logits.shape}")
    log_p = log_softmax(teacher_logits * (1.0 / temperature))
    log_q = log_softmax(student_logits * (1.0 / temperature))
    per_sample = (log_p.exp() * (log_p - log_q)).sum(axis=-1)
    return per_sample.mean()


def cross_entropy(logits, labels):
    labels = np.asarray(labels, dtype=np.intp)
    logp = log_softmax(logits)
    return -logp[np.arange(len(labels)), labels].mean()


def global_avg_pool(x):
    return x.mean(axis=(2, 3))


def sample_norms(x):
    """Per-sample L2 norm over all trailing axes, with zero gradient at the origin."""
    x = as_tensor(x)
    flat = x.data.reshape(x.shape[0], -1)
    norms = np.sqrt(np.sum(flat * flat, axis=1))
    shape = x.shape

    def backward(g):
        safe = np.where(norms > 0, norms, 1.0)
        scale = np.where(norms > 0, g / safe, 0.0).astype(x.data.dtype)
        return ((flat * scale[:, None]).reshape(shape),)

    return Tensor._make(norms, (x,), backward, "sample_norms")


def l2_norm(x):
    """Norm of the whole tensor, with zero gradient at the origin."""
    x = as_tensor(x)
    return sample_norms(x.reshape(1, -1)).reshape(())
