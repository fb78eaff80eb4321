"""Neural-network layers on top of :mod:`avfg.tensor`.

Convolutions are cross-correlations over 1 or 3 trailing axes of a
``(N, C, *spatial)`` tensor.  The forward pass unfolds the padded input into
a column matrix (one row per output position) and multiplies by the flattened
kernel; the input gradient folds the column gradient back offset by offset.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, axis_matmul

__all__ = [
    "ConvSpec",
    "conv_output_extent",
    "conv_forward",
    "conv1d_forward",
    "conv3d_forward",
    "relu",
    "sigmoid",
    "softplus",
    "softmax",
    "softmax_grid",
    "maxpool",
    "batchnorm",
    "BatchNormState",
    "linear",
    "adaptive_pool_matrix",
    "adaptive_avg_pool_spatial",
    "interpolation_matrix",
    "kaiming_uniform",
]


def conv_output_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


@dataclass
class ConvSpec:
    """Convolution geometry plus its parameters.

    ``weight`` has shape ``(out_channels, in_channels, *kernel)``.
    """

    weight: Tensor
    bias: Tensor | None = None
    stride: tuple[int, ...] = ()
    padding: tuple[int, ...] = ()

    def __post_init__(self):
        if self.weight.ndim not in (3, 5):
            raise ShapeError(f"conv weight must be rank 3 or 5, got {self.weight.shape}")
        d = self.weight.ndim - 2
        self.stride = _expand(self.stride or 1, d)
        self.padding = _expand(self.padding or 0, d)
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ShapeError(f"conv bias shape {self.bias.shape} does not match {self.out_channels} filters")

    @property
    def dims(self) -> int:
        return self.weight.ndim - 2

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> tuple[int, ...]:
        return tuple(self.weight.shape[2:])

    def output_shape(self, in_shape) -> tuple[int, ...]:
        n, c, *spatial = in_shape
        if c != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} input channels, got {c} (input {tuple(in_shape)})")
        out = tuple(
            conv_output_extent(s, k, st, p) for s, k, st, p in zip(spatial, self.kernel, self.stride, self.padding)
        )
        if any(o < 1 for o in out):
            raise ShapeError(f"conv output extent {out} < 1 for input {tuple(in_shape)}")
        return (n, self.out_channels, *out)


def _expand(v, d):
    if isinstance(v, int):
        return (v,) * d
    v = tuple(int(x) for x in v)
    if len(v) != d:
        raise ShapeError(f"expected {d} values, got {v}")
    return v


def _window(offset, stride, count):
    return tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, count))


def conv_forward(x: Tensor, spec: ConvSpec) -> Tensor:
    """Cross-correlation of ``x`` (N, C, *spatial) with ``spec.weight``."""
    d = spec.dims
    if x.ndim != d + 2:
        raise ShapeError(f"conv{d}d expects rank-{d + 2} input, got {x.shape}")
    n, cout, *out_sp = spec.output_shape(x.shape)
    out_sp = tuple(out_sp)
    kernel, stride = spec.kernel, spec.stride
    cin = x.shape[1]
    # channels-last padded input: (N, *S, C)
    xl = np.moveaxis(x.data, 1, -1)
    if any(spec.padding):
        xl = np.pad(xl, ((0, 0),) + tuple((p, p) for p in spec.padding) + ((0, 0),))
    sp_axes = tuple(range(1, d + 1))
    win = sliding_window_view(xl, kernel, axis=sp_axes)  # (N, *S', C, *K)
    win = win[(slice(None),) + tuple(slice(None, None, st) for st in stride)]
    win = win[(slice(None),) + tuple(slice(0, o) for o in out_sp)]
    cols = np.ascontiguousarray(win).reshape(n * int(np.prod(out_sp)), -1)  # (N*P, C*K)
    wmat = spec.weight.data.astype(x.dtype, copy=False).reshape(cout, -1)
    out = cols @ wmat.T
    if spec.bias is not None:
        out += spec.bias.data
    out = np.ascontiguousarray(np.moveaxis(out.reshape(n, *out_sp, cout), -1, 1))

    parents = [x, spec.weight] + ([spec.bias] if spec.bias is not None else [])
    padded_shape = xl.shape
    offsets = list(itertools.product(*(range(k) for k in kernel)))

    def bw(g):
        g2 = np.moveaxis(g, 1, -1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(spec.weight.shape) if spec.weight.requires_grad else None
        gx = None
        if x.requires_grad:
            # fold back in channels-first layout so the innermost axis stays long
            wk = np.ascontiguousarray(wmat.reshape(cout, cin, -1).transpose(2, 1, 0))[:, None]  # (K, 1, C, C')
            dcols = (wk @ g.reshape(n, cout, -1)[None]).reshape(len(offsets), n, cin, *out_sp)
            gxp = np.zeros((n, cin, *padded_shape[1:-1]), dtype=g.dtype)
            for i, off in enumerate(offsets):
                gxp[(slice(None), slice(None)) + _window(off, stride, out_sp)] += dcols[i]
            if any(spec.padding):
                gxp = gxp[(slice(None), slice(None)) + tuple(slice(p, p + s) for p, s in zip(spec.padding, x.shape[2:]))]
            gx = gxp
        grads = [gx, gw]
        if spec.bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return Tensor._from_op(out, parents, bw, f"conv{d}d")


def conv1d_forward(x: Tensor, spec: ConvSpec) -> Tensor:
    if spec.dims != 1:
        raise ShapeError("conv1d_forward needs a 1-D ConvSpec")
    return conv_forward(x, spec)


def conv3d_forward(x: Tensor, spec: ConvSpec) -> Tensor:
    if spec.dims != 3:
        raise ShapeError("conv3d_forward needs a 3-D ConvSpec")
    return conv_forward(x, spec)


# -- activations -----------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(np.asarray(x.data))
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) without overflow."""
    xd = x.data
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))
    return Tensor._from_op(out, (x,), lambda g: (g * _stable_sigmoid(xd),), "softplus")


def softmax(x: Tensor, axes) -> Tensor:
    """Softmax normalised jointly over ``axes`` (max-subtracted)."""
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % x.ndim for a in axes)
    # non-finite logits propagate as NaN; the training loop reports them
    with np.errstate(invalid="ignore"):
        z = x.data - x.data.max(axis=axes, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=axes, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axes, keepdims=True)),)

    return Tensor._from_op(out, (x,), bw, "softmax")


def softmax_grid(z: Tensor) -> Tensor:
    """Softmax over the two trailing (spatial) axes; leading axes are batch."""
    if z.ndim < 2:
        raise ShapeError(f"softmax_grid expects at least 2 axes, got {z.shape}")
    return softmax(z, (-2, -1))


# -- pooling ---------------------------------------------------------------


def maxpool(x: Tensor, window, stride=None) -> Tensor:
    """Max pooling over the trailing spatial axes of (N, C, *spatial).

    Gradient goes to the first maximum in row-major window order, i.e. the
    lowest linear input index among ties.
    """
    d = x.ndim - 2
    window = _expand(window, d)
    stride = _expand(stride if stride is not None else window, d)
    spatial = x.shape[2:]
    if any(w > s for w, s in zip(window, spatial)):
        raise ShapeError(f"pooling window {window} exceeds input extents {spatial}")
    out_sp = tuple((s - w) // st + 1 for s, w, st in zip(spatial, window, stride))
    offsets = list(itertools.product(*(range(w) for w in window)))
    base = (slice(None), slice(None))
    stacked = np.stack([x.data[base + _window(off, stride, out_sp)] for off in offsets], axis=-1)
    arg = stacked.argmax(axis=-1)
    out = np.take_along_axis(stacked, arg[..., None], axis=-1)[..., 0]
    src_shape, dtype = x.shape, x.dtype

    def bw(g):
        gx = np.zeros(src_shape, dtype=dtype)
        for k, off in enumerate(offsets):
            gx[base + _window(off, stride, out_sp)] += g * (arg == k)
        return (gx,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), bw, "maxpool")


def adaptive_pool_matrix(size: int, out: int) -> np.ndarray:
    """Row ``i`` averages the input bin ``[floor(i*size/out), floor((i+1)*size/out))``."""
    if not 1 <= out <= size:
        raise ShapeError(f"adaptive pool output {out} must lie in [1, {size}]")
    mat = np.zeros((out, size))
    for i in range(out):
        lo, hi = (i * size) // out, ((i + 1) * size) // out
        mat[i, lo:hi] = 1.0 / (hi - lo)
    return mat


def adaptive_avg_pool_spatial(f: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average-pool the two trailing axes to ``(out_h, out_w)``."""
    h, w = f.shape[-2:]
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ShapeError(f"pooled size ({out_h}, {out_w}) must lie within input extents ({h}, {w})")
    if (out_h, out_w) == (h, w):
        return f
    f = axis_matmul(f, adaptive_pool_matrix(h, out_h), -2)
    return axis_matmul(f, adaptive_pool_matrix(w, out_w), -1)


def interpolation_matrix(size: int, out: int) -> np.ndarray:
    """Linear interpolation with aligned end points, mapping ``size`` samples to ``out``."""
    mat = np.zeros((out, size))
    if size == 1 or out == 1:
        mat[:, 0] = 1.0
        return mat
    pos = np.arange(out) * (size - 1) / (out - 1)
    lo = np.minimum(np.floor(pos).astype(int), size - 2)
    frac = pos - lo
    mat[np.arange(out), lo] = 1 - frac
    mat[np.arange(out), lo + 1] += frac
    return mat


# -- normalisation ---------------------------------------------------------


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    training: bool = True

    @classmethod
    def create(cls, channels: int, dtype=np.float64) -> BatchNormState:
        return cls(
            scale=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            shift=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


def batchnorm(x: Tensor, state: BatchNormState) -> Tensor:
    """Batch normalisation over every axis except the channel axis 1."""
    c = x.shape[1]
    if state.scale.shape != (c,):
        raise ShapeError(f"batchnorm has {state.scale.shape[0]} channels, input has {c}")
    red = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    gamma = state.scale.data.reshape(bshape)
    beta = state.shift.data.reshape(bshape)

    if not state.training:
        inv = (1.0 / np.sqrt(state.running_var + state.eps)).astype(x.dtype).reshape(bshape)
        mean = state.running_mean.astype(x.dtype).reshape(bshape)
        xhat = (x.data - mean) * inv
        out = xhat * gamma + beta

        def bw_eval(g):
            return g * gamma * inv, (g * xhat).sum(axis=red), g.sum(axis=red)

        return Tensor._from_op(out, (x, state.scale, state.shift), bw_eval, "batchnorm_eval")

    count = x.size // c
    if count < 2:
        raise ValueError("batchnorm in training mode needs at least 2 values per channel")
    mean = x.data.mean(axis=red, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=red, keepdims=True)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv
    out = xhat * gamma + beta

    m = state.momentum
    state.running_mean[:] = (1 - m) * state.running_mean + m * mean.reshape(c)
    state.running_var[:] = (1 - m) * state.running_var + m * var.reshape(c) * count / (count - 1)

    def bw(g):
        gxhat = g * gamma
        gx = inv * (gxhat - gxhat.mean(axis=red, keepdims=True) - xhat * (gxhat * xhat).mean(axis=red, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor._from_op(out, (x, state.scale, state.shift), bw, "batchnorm")


# -- dense -----------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ W.T + b`` for ``x`` of shape (D,) or (N, D), ``W`` (K, D), ``b`` (K,)."""
    if x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: input {x.shape}, weight {weight.shape}, bias {bias.shape} disagree")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def bw(g):
        g2 = g.reshape(-1, wd.shape[0])
        x2 = xd.reshape(-1, wd.shape[1])
        return (g @ wd, g2.T @ x2, g2.sum(axis=0))

    return Tensor._from_op(out, (x, weight, bias), bw, "linear")


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)

