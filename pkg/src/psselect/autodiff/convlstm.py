"""Convolutional LSTM cell with convolutional peepholes.

Gates::

    i_t = sig(Wxi*X_t + Wyi*Y_{t-1} + Wsi*S_{t-1} + b_i)
    f_t = sig(Wxf*X_t + Wyf*Y_{t-1} + Wsf*S_{t-1} + b_f)
    S_t = f_t o S_{t-1} + i_t o tanh(Wxs*X_t + Wys*Y_{t-1} + b_s)
    o_t = sig(Wxo*X_t + Wyo*Y_{t-1} + Wso*S_t + b_o)
    Y_t = o_t o tanh(S_t)

``*`` is a same-padded 2-D convolution, ``o`` the elementwise product. The
input and hidden kernels of the four gates are stored stacked along the
output-channel axis in the order (i, f, s, o).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from psselect.autodiff.ops import conv, sigmoid, tanh
from psselect.autodiff.tensor import Tensor


@dataclass
class ConvLstmState:
    cell: Tensor
    hidden: Tensor

    def __post_init__(self):
        if self.cell.shape != self.hidden.shape:
            raise ValueError("cell and hidden state must share a shape")

    @classmethod
    def zeros(cls, n: int, height: int, width: int, channels: int) -> "ConvLstmState":
        shape = (n, height, width, channels)
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


@dataclass
class ConvLstmParams:
    w_x: Tensor  # (k, k, Cin, 4*Ch)
    w_y: Tensor  # (k, k, Ch, 4*Ch)
    w_s_if: Tensor  # (k, k, Ch, 2*Ch) peepholes on S_{t-1} for i and f
    w_so: Tensor  # (k, k, Ch, Ch) peephole on S_t for o
    bias: Tensor  # (4*Ch,)

    @property
    def channels(self) -> int:
        return self.w_y.shape[-2]

    @property
    def in_channels(self) -> int:
        return self.w_x.shape[-2]

    def tensors(self) -> dict:
        return {"w_x": self.w_x, "w_y": self.w_y, "w_s_if": self.w_s_if,
                "w_so": self.w_so, "bias": self.bias}

    @classmethod
    def init(cls, in_channels: int, channels: int, kernel: int = 3, rng=None,
             forget_bias: float = 1.0) -> "ConvLstmParams":
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        k = kernel

        def uni(shape, fan_in):
            lim = 1.0 / np.sqrt(fan_in)
            return Tensor(rng.uniform(-lim, lim, size=shape), requires_grad=True)

        gate_fan = k * k * (in_channels + 2 * channels)
        bias = np.zeros(4 * channels)
        bias[channels:2 * channels] = forget_bias
        return cls(
            w_x=uni((k, k, in_channels, 4 * channels), gate_fan),
            w_y=uni((k, k, channels, 4 * channels), gate_fan),
            w_s_if=uni((k, k, channels, 2 * channels), gate_fan),
            w_so=uni((k, k, channels, channels), gate_fan),
            bias=Tensor(bias, requires_grad=True),
        )


def convlstm_step(x_t: Tensor | None, prev: ConvLstmState, params: ConvLstmParams,
                  x_proj: Tensor | None = None) -> ConvLstmState:
    """Advance the cell one time step.

    ``x_proj`` may carry a precomputed ``W_x * X_t`` (all four gates) so the
    input convolution can be batched over the whole sequence; ``x_t`` is then
    ignored.
    """
    ch = params.channels
    if prev.hidden.shape[-1] != ch:
        raise ValueError(f"state has {prev.hidden.shape[-1]} channels, cell expects {ch}")
    if x_proj is None:
        if x_t is None:
            raise ValueError("need x_t or x_proj")
        if x_t.shape[:-1] != prev.hidden.shape[:-1]:
            raise ValueError(f"input {x_t.shape} and state {prev.hidden.shape} disagree spatially")
        x_proj = conv(x_t, params.w_x)
    elif x_proj.shape[:-1] != prev.hidden.shape[:-1] or x_proj.shape[-1] != 4 * ch:
        raise ValueError("x_proj shape does not match the state")
    z = x_proj + conv(prev.hidden, params.w_y) + params.bias
    zs = conv(prev.cell, params.w_s_if)
    i = sigmoid(z[..., 0:ch] + zs[..., 0:ch])
    f = sigmoid(z[..., ch:2 * ch] + zs[..., ch:2 * ch])
    cell = f * prev.cell + i * tanh(z[..., 2 * ch:3 * ch])
    o = sigmoid(z[..., 3 * ch:4 * ch] + conv(cell, params.w_so))
    hidden = o * tanh(cell)
    return ConvLstmState(cell, hidden)


def convlstm_sequence(x: Tensor, params: ConvLstmParams, state: ConvLstmState | None = None) -> list:
    """Run over ``x`` of shape (N, T, H, W, Cin); returns the T hidden states."""
    n, t, h, w, cin = x.shape
    if cin != params.in_channels:
        raise ValueError(f"input has {cin} channels, cell expects {params.in_channels}")
    # one batched input convolution for every time step
    proj = conv(x.reshape(n * t, h, w, cin), params.w_x).reshape(n, t, h, w, 4 * params.channels)
    if state is None:
        state = ConvLstmState.zeros(n, h, w, params.channels)
    hidden = []
    for step in range(t):
        state = convlstm_step(None, state, params, x_proj=proj[:, step])
        hidden.append(state.hidden)
    return hidden
