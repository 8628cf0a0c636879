"""Differentiable layers: activations, same-padded convolution, batch norm,
dropout and the per-pixel dense head.

Arrays are channels-last: ``(N, *spatial, C)``. Convolution is the usual
deep-learning cross-correlation with zero "same" padding and stride 1.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from psselect.autodiff.tensor import Tensor, _result, as_tensor

COL_BUDGET = 1 << 22


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def backward(g):
        x._accumulate(g * pos)

    return _result(np.where(pos, x.data, 0.0), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # tanh form keeps sigmoid(x) + sigmoid(-x) == 1 to rounding
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        x._accumulate(g * s * (1.0 - s))

    return _result(s, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - t * t))

    return _result(t, (x,), backward)


def _slabs(xp, kshape, spatial, kc):
    """Yield (h0, h1, cols) with im2col columns for output rows h0:h1 of the first spatial axis.

    Slabs keep each column buffer near ``COL_BUDGET`` entries.
    """
    n, rank = xp.shape[0], len(kshape)
    rest = int(np.prod(spatial[1:])) if rank > 1 else 1
    hs = max(1, COL_BUDGET // max(1, n * rest * kc))
    # window view is (n, *S, cin, *K); move the kernel axes in front of cin
    perm = (0,) + tuple(range(1, rank + 1)) + tuple(range(rank + 2, 2 * rank + 2)) + (rank + 1,)
    for h0 in range(0, spatial[0], hs):
        h1 = min(spatial[0], h0 + hs)
        view = sliding_window_view(xp[:, h0:h1 + kshape[0] - 1], kshape, axis=tuple(range(1, rank + 1)))
        yield h0, h1, np.ascontiguousarray(view.transpose(perm)).reshape(-1, kc)


def _correlate(xd, w):
    """Plain same-padded cross-correlation on arrays."""
    rank = w.ndim - 2
    kshape, cout = w.shape[:rank], w.shape[-1]
    n, spatial = xd.shape[0], xd.shape[1:-1]
    xp = np.pad(xd, [(0, 0)] + [(k // 2, k // 2) for k in kshape] + [(0, 0)])
    kc = int(np.prod(kshape)) * w.shape[-2]
    w2 = w.reshape(kc, cout)
    out = np.empty((n,) + tuple(spatial) + (cout,))
    for h0, h1, cols in _slabs(xp, kshape, spatial, kc):
        out[:, h0:h1] = (cols @ w2).reshape((n, h1 - h0) + tuple(spatial[1:]) + (cout,))
    return out, xp


def conv(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded, stride-1 convolution over 2 or 3 spatial axes.

    Parameters
    ----------
    x : Tensor, shape (N, *S, Cin)
    kernel : Tensor, shape (*K, Cin, Cout), odd K
    bias : Tensor, shape (Cout,), optional

    Returns
    -------
    Tensor, shape (N, *S, Cout)
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    rank = kernel.ndim - 2
    if rank not in (1, 2, 3) or x.ndim != rank + 2:
        raise ValueError(f"kernel {kernel.shape} does not match input {x.shape}")
    kshape = kernel.shape[:rank]
    cin, cout = kernel.shape[rank:]
    if x.shape[-1] != cin:
        raise ValueError(f"input has {x.shape[-1]} channels, kernel expects {cin}")
    if any(k % 2 == 0 for k in kshape):
        raise ValueError("kernel extents must be odd")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"bias shape {bias.shape} != ({cout},)")
    spatial = x.shape[1:-1]
    w = kernel.data
    out, xp = _correlate(x.data, w)
    if bias is not None:
        out += bias.data
    kc = int(np.prod(kshape)) * cin

    def backward(g):
        if kernel.requires_grad:
            gw = np.zeros((kc, cout))
            for h0, h1, cols in _slabs(xp, kshape, spatial, kc):
                gw += cols.T @ g[:, h0:h1].reshape(-1, cout)
            kernel._accumulate(gw.reshape(kernel.shape))
        if x.requires_grad:
            # adjoint of a same-padded odd correlation: flip the kernel, swap channel axes
            flipped = np.flip(w, axis=tuple(range(rank))).swapaxes(-1, -2)
            x._accumulate(_correlate(g, np.ascontiguousarray(flipped))[0])
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.reshape(-1, cout).sum(axis=0))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, backward)


class BatchNormState:
    """Running mean/variance for one batch-norm layer."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)


def batchnorm(x: Tensor, scale: Tensor, shift: Tensor, state: BatchNormState | None = None,
              mode: str = "train", eps: float = 1e-5, momentum: float = 0.9) -> Tensor:
    """Per-channel normalisation over every axis but the last.

    Train mode uses batch statistics (biased variance) and, when ``state`` is
    given, updates its running moments as ``m <- momentum*m + (1-momentum)*batch``
    (running variance uses the unbiased batch estimate). Infer mode uses the
    running moments.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    c = x.shape[-1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ValueError("scale/shift must have one entry per channel")
    axes = tuple(range(x.ndim - 1))
    m = x.size // c
    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if state is not None:
            state.mean = momentum * state.mean + (1 - momentum) * mu
            unbiased = var * m / (m - 1) if m > 1 else var
            state.var = momentum * state.var + (1 - momentum) * unbiased
    elif mode == "infer":
        if state is None:
            raise ValueError("infer mode needs running statistics")
        mu, var = state.mean, state.var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * scale.data + shift.data

    def backward(g):
        if scale.requires_grad:
            scale._accumulate((g * xhat).sum(axis=axes))
        if shift.requires_grad:
            shift._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gx = g * scale.data
            if mode == "train":
                s1 = gx.sum(axis=axes)
                s2 = (gx * xhat).sum(axis=axes)
                x._accumulate(inv * (gx - s1 / m - xhat * (s2 / m)))
            else:
                x._accumulate(gx * inv)

    return _result(out, (x, scale, shift), backward)


def dropout(x: Tensor, rate: float, mode: str = "train", seed=None) -> Tensor:
    """Inverted dropout; identity in infer mode or at rate 0.

    ``seed`` may be an int, a SeedSequence or a ``numpy.random.Generator``.
    """
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must lie in [0, 1)")
    x = as_tensor(x)
    if mode == "infer" or rate == 0:
        return x
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(g):
        x._accumulate(g * keep)

    return _result(x.data * keep, (x,), backward)


def pixel_dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Shared affine map from each pixel's feature vector to one logit.

    ``x`` is ``(N, H, W, *F)``; the trailing feature axes are flattened
    (C-order) and dotted with ``weights`` of length ``prod(F)``. Output is
    ``(N, H, W, 1)``.
    """
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if x.ndim < 4:
        raise ValueError("pixel_dense expects (N, H, W, features...)")
    lead = x.shape[:3]
    nf = int(np.prod(x.shape[3:]))
    if weights.shape != (nf,):
        raise ValueError(f"weights shape {weights.shape} != ({nf},)")
    if bias.size != 1:
        raise ValueError("bias must be a single value")
    flat = x.data.reshape(-1, nf)
    out = (flat @ weights.data + bias.data.reshape(())).reshape(lead + (1,))

    def backward(g):
        g1 = g.reshape(-1)
        if weights.requires_grad:
            weights._accumulate(flat.T @ g1)
        if bias.requires_grad:
            bias._accumulate(np.full(bias.shape, g1.sum()))
        if x.requires_grad:
            x._accumulate(np.outer(g1, weights.data).reshape(x.shape))

    return _result(out, (x, weights, bias), backward)
