"""Differentiable layer kernels on BCHW float64 tensors."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from ..tensor import ShapeError, Tensor, as_tensor, concat, make_result

__all__ = [
    "ConvSpec",
    "conv2d",
    "prelu",
    "relu",
    "batch_norm",
    "bilinear_upsample",
    "max_pool",
    "max_pool2",
    "adaptive_avg_pool",
    "concat_channels",
    "linear",
    "softmax",
    "log_softmax",
    "sigmoid",
    "count_macs",
]

_mac_log: list | None = None


@contextlib.contextmanager
def count_macs():
    """Collect multiply-accumulate counts of every conv/linear call in the block."""
    global _mac_log
    prev = _mac_log
    _mac_log = log = []
    try:
        yield log
    finally:
        _mac_log = prev


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    bias: bool = True

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel", "stride", "dilation"):
            if getattr(self, name) < 1:
                raise ValueError(f"ConvSpec.{name} must be positive: {self}")
        if self.padding < 0:
            raise ValueError(f"ConvSpec.padding must be non-negative: {self}")

    @property
    def extent(self) -> int:
        """Effective kernel extent k + (k-1)(r-1)."""
        return self.kernel + (self.kernel - 1) * (self.dilation - 1)

    def output_size(self, size: int) -> int:
        return (size + 2 * self.padding - self.extent) // self.stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """Cross-correlation with taps spaced ``dilation`` pixels apart."""
    B, C, H, W = x.shape
    O, Cw, k, k2 = weight.shape
    if Cw != C or k != k2:
        raise ShapeError("conv2d", x.shape, weight.shape)
    spec = ConvSpec(C, O, k, stride, dilation, padding, bias is not None)
    Ho, Wo = spec.output_size(H), spec.output_size(W)
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d: non-positive output size {Ho}x{Wo} for input {H}x{W} with {spec}")
    if _mac_log is not None:
        _mac_log.append(("conv2d", B * O * Ho * Wo * k * k * C))

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Hp, Wp = xd.shape[2], xd.shape[3]
    taps = [(i, j) for i in range(k) for j in range(k)]

    if k == 1 and stride == 1:
        cols = xd.reshape(B, C, Ho * Wo)
    else:
        cols = np.empty((B, C, k * k, Ho, Wo))
        for t, (i, j) in enumerate(taps):
            r0, c0 = i * dilation, j * dilation
            cols[:, :, t] = xd[:, :, r0:r0 + stride * (Ho - 1) + 1:stride,
                               c0:c0 + stride * (Wo - 1) + 1:stride]
        cols = cols.reshape(B, C * k * k, Ho * Wo)
    wmat = weight.data.reshape(O, C * k * k)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(B, O, Ho, Wo)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.reshape(B, O, Ho * Wo)
        gw = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            if k == 1 and stride == 1:
                gxp = gcols.reshape(B, C, Hp, Wp)
            else:
                gcols = gcols.reshape(B, C, k * k, Ho, Wo)
                gxp = np.zeros((B, C, Hp, Wp))
                for t, (i, j) in enumerate(taps):
                    r0, c0 = i * dilation, j * dilation
                    gxp[:, :, r0:r0 + stride * (Ho - 1) + 1:stride,
                        c0:c0 + stride * (Wo - 1) + 1:stride] += gcols[:, :, t]
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result(out, parents, back)


def prelu(x: Tensor, a: Tensor) -> Tensor:
    """x where x >= 0, a*x elsewhere; ``a`` is a 0-d learnable slope.

    At x == 0 the x >= 0 branch (slope 1) is taken for the subgradient.
    """
    pos = x.data >= 0
    av = a.data
    out = np.where(pos, x.data, av * x.data)

    def back(g):
        gx = np.where(pos, g, av * g)
        ga = np.asarray(np.sum(np.where(pos, 0.0, g * x.data))).reshape(a.shape)
        return gx, ga

    return make_result(out, (x, a), back)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_result(np.where(pos, x.data, 0.0), (x,), lambda g: (np.where(pos, g, 0.0),))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (batch, height, width), then affine.

    In training mode the running buffers are updated in place (unbiased
    variance, like most frameworks); eval mode reads them only.
    """
    B, C, H, W = x.shape
    n = B * H * W
    shape = (1, C, 1, 1)
    if training:
        if n < 2:
            raise ValueError(f"batch_norm: train mode needs >= 2 values per channel, got input {x.shape}")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mu, var = running_mean.copy(), running_var.copy()
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * invstd.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def back(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(shape)
        if training:
            gx = (invstd.reshape(shape) / n) * (
                n * gxhat
                - gxhat.sum(axis=(0, 2, 3)).reshape(shape)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
            )
        else:
            gx = gxhat * invstd.reshape(shape)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), back)


def interp_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Rows of 1-D linear interpolation weights, half-pixel centres (align_corners=False)."""
    m = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for o in range(out_size):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize; sample o reads source coordinate (o+0.5)*in/out-0.5, clamped at 0."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_upsample: output size must be positive, got {out_h}x{out_w}")
    H, W = x.shape[-2:]
    if (H, W) == (out_h, out_w):
        return make_result(x.data.copy(), (x,), lambda g: (g,))
    ah = interp_matrix(H, out_h)
    aw = interp_matrix(W, out_w)
    out = np.matmul(np.matmul(ah, x.data), aw.T)
    return make_result(out, (x,), lambda g: (np.matmul(np.matmul(ah.T, g), aw),))


def max_pool(x: Tensor, kernel: int = 2, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max pooling; on ties the gradient goes to the first tap in row-major window order."""
    stride = stride or kernel
    B, C, H, W = x.shape
    Ho = (H + 2 * padding - kernel) // stride + 1
    Wo = (W + 2 * padding - kernel) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"max_pool: input {x.shape} too small for kernel {kernel}")
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    taps = [(i, j) for i in range(kernel) for j in range(kernel)]
    stack = np.stack([
        xd[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]
        for i, j in taps
    ])
    arg = stack.argmax(axis=0)
    out = np.take_along_axis(stack, arg[None], axis=0)[0]

    def back(g):
        gxp = np.zeros(xd.shape)
        for t, (i, j) in enumerate(taps):
            gxp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += \
                np.where(arg == t, g, 0.0)
        if padding:
            gxp = gxp[:, :, padding:padding + H, padding:padding + W]
        return (gxp,)

    return make_result(out, (x,), back)


def max_pool2(x: Tensor) -> Tensor:
    return max_pool(x, 2, 2)


def adaptive_avg_pool(x: Tensor, out_size: tuple[int, int] = (1, 1)) -> Tensor:
    """Average over adaptive bins; bin i spans [floor(i*H/oh), ceil((i+1)*H/oh))."""
    B, C, H, W = x.shape
    oh, ow = out_size
    rows = [(i * H // oh, -(-(i + 1) * H // oh)) for i in range(oh)]
    cols = [(j * W // ow, -(-(j + 1) * W // ow)) for j in range(ow)]
    out = np.empty((B, C, oh, ow))
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def back(g):
        gx = np.zeros(x.shape)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                gx[:, :, r0:r1, c0:c1] += g[:, :, i:i + 1, j:j + 1] / area
        return (gx,)

    return make_result(out, (x,), back)


def concat_channels(xs) -> Tensor:
    return concat(xs, axis=1)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x (N, in) -> x @ W.T + b with W shaped (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear", x.shape, weight.shape)
    if _mac_log is not None:
        _mac_log.append(("linear", x.data.size // x.shape[-1] * weight.data.size))
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        grads = [g @ weight.data, g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])]
        if bias is not None:
            grads.append(g.reshape(-1, g.shape[-1]).sum(axis=0))
        return grads

    return make_result(out, parents, back)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_result(p, (x,), back)


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), back)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),))


def flatten(x: Tensor) -> Tensor:
    return as_tensor(x).reshape(x.shape[0], -1)
