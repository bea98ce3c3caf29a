"""Dense tensor primitives: convolution, ReLU, 2x2 max pooling, Adam.

All operations are pure functions over numpy arrays and never mutate their
inputs.  Forward passes are paired with reverse passes that propagate
gradients to the *input* only (network weights stay frozen everywhere in
this package).  Accumulation happens in float64 so the reverse passes can
be validated against central finite differences.

Layout conventions:

- images / feature maps are ``H x W x C`` (row-major, channel-interleaved)
- convolution kernels are ``k x k x C_in x C_out``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------------------
# Convolution (same padding, stride 1)
# ---------------------------------------------------------------------------

def conv2d_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray,
                   exact: bool = False) -> np.ndarray:
    """Same-padding stride-1 cross-correlation of ``x`` with ``kernels``.

    Parameters
    ----------
    x : (H, W, C_in) array
    kernels : (k, k, C_in, C_out) array, k odd
    bias : (C_out,) array
    exact : accumulate in fixed (dy, dx, c_in) order so the result is
        bit-identical to a nested-loop evaluation; the default im2col/BLAS
        path is much faster but may round differently in the last ulps.

    Returns
    -------
    (H, W, C_out) array; spatial size is preserved, zeros outside bounds.
    """
    _check(x.ndim == 3, f"input must be H x W x C, got shape {x.shape}")
    _check(kernels.ndim == 4, f"kernels must be k x k x Cin x Cout, got shape {kernels.shape}")
    k = kernels.shape[0]
    _check(kernels.shape[1] == k, f"kernel must be square, got {kernels.shape[:2]}")
    _check(k % 2 == 1, f"kernel size must be odd, got {k}")
    _check(
        kernels.shape[2] == x.shape[2],
        f"kernel C_in {kernels.shape[2]} != input channels {x.shape[2]}",
    )
    c_out = kernels.shape[3]
    _check(bias.shape == (c_out,), f"bias shape {bias.shape} != ({c_out},)")

    h, w, c_in = x.shape
    p = k // 2
    xp = np.pad(np.asarray(x, dtype=np.float64), ((p, p), (p, p), (0, 0)))
    kern = np.asarray(kernels, dtype=np.float64)

    if exact:
        out = np.empty((h, w, c_out))
        out[:] = np.asarray(bias, dtype=np.float64)
        for dy in range(k):
            for dx in range(k):
                for ci in range(c_in):
                    shifted = xp[dy : dy + h, dx : dx + w, ci]
                    out += shifted[:, :, None] * kern[dy, dx, ci, :]
        return out

    # windows: (H, W, 1, k, k, C_in) -> (H*W, k*k*C_in), matching the
    # row-major (dy, dx, c_in) reshape of the kernel tensor.
    win = sliding_window_view(xp, (k, k, c_in))
    cols = win.reshape(h * w, k * k * c_in)
    kmat = kern.reshape(k * k * c_in, c_out)
    out = cols @ kmat + np.asarray(bias, dtype=np.float64)
    return out.reshape(h, w, c_out)


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(grad_out * conv2d_forward(x, ...))`` w.r.t. ``x``.

    Only the input gradient is produced; weights are frozen.  For a
    same-padding stride-1 correlation this is the same-padding correlation
    of ``grad_out`` with the spatially flipped, channel-transposed kernel.
    """
    _check(grad_out.ndim == 3, f"grad_out must be H x W x C, got shape {grad_out.shape}")
    k = kernels.shape[0]
    expected = (x.shape[0], x.shape[1], kernels.shape[3])
    _check(
        grad_out.shape == expected,
        f"grad_out shape {grad_out.shape} != forward output shape {expected}",
    )
    flipped = kernels[::-1, ::-1].transpose(0, 1, 3, 2)  # k x k x C_out x C_in
    zero_bias = np.zeros(kernels.shape[2])
    return conv2d_forward(grad_out, flipped, zero_bias)


# ---------------------------------------------------------------------------
# ReLU
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Pass gradient where x > 0; zero elsewhere (tie at 0 gets zero)."""
    _check(grad_out.shape == x.shape, f"grad shape {grad_out.shape} != input shape {x.shape}")
    return np.where(x > 0.0, grad_out, 0.0)


# ---------------------------------------------------------------------------
# 2x2 max pooling, stride 2
# ---------------------------------------------------------------------------

def maxpool2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2/stride-2 max pool; odd trailing row/column is truncated.

    Returns
    -------
    y : (H//2, W//2, C) pooled values
    argmax : same shape as ``y``, flat row-major indices into the H x W
        input plane; ties resolve to the first element in (dy, dx) order.
    """
    _check(x.ndim == 3, f"input must be H x W x C, got shape {x.shape}")
    h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    _check(h2 >= 1 and w2 >= 1, f"spatial extent too small to pool: {x.shape}")
    xt = x[: h2 * 2, : w2 * 2, :]
    win = xt.reshape(h2, 2, w2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h2, w2, 4, c)
    local = win.argmax(axis=2)  # first max in (dy, dx) order
    y = np.take_along_axis(win, local[:, :, None, :], axis=2)[:, :, 0, :]
    rows = 2 * np.arange(h2)[:, None, None] + local // 2
    cols = 2 * np.arange(w2)[None, :, None] + local % 2
    argmax = rows * w + cols
    return y, argmax


def maxpool2_backward(grad_out: np.ndarray, argmax: np.ndarray, input_shape: tuple[int, int, int]) -> np.ndarray:
    """Route each output gradient to its stored argmax position."""
    _check(grad_out.shape == argmax.shape, f"grad shape {grad_out.shape} != argmax shape {argmax.shape}")
    h, w, c = input_shape
    grad_in = np.zeros((h * w, c))
    flat_idx = argmax.reshape(-1, c)
    flat_g = np.asarray(grad_out, dtype=np.float64).reshape(-1, c)
    for ch in range(c):
        np.add.at(grad_in[:, ch], flat_idx[:, ch], flat_g[:, ch])
    return grad_in.reshape(h, w, c)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    """Optimizer state for one parameter tensor; moments start at zero."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def init(cls, shape, learning_rate: float = 0.02, beta1: float = 0.9,
             beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(
            first_moment=np.zeros(shape),
            second_moment=np.zeros(shape),
            step_count=0,
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns the new parameter and state."""
    _check(param.shape == grad.shape, f"param shape {param.shape} != grad shape {grad.shape}")
    _check(param.shape == state.first_moment.shape,
           f"param shape {param.shape} != state shape {state.first_moment.shape}")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_param = param - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(
        first_moment=m,
        second_moment=v,
        step_count=t,
        learning_rate=state.learning_rate,
        beta1=state.beta1,
        beta2=state.beta2,
        epsilon=state.epsilon,
    )
    return new_param, new_state
