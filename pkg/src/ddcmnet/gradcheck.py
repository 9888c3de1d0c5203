"""Central finite-difference gradient checks and the layer/loss check suite."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .nn import functional as F
from .nn.layers import BatchNorm2d, Conv2d, Linear, PReLU
from .rng import RngState
from .tensor import Tensor, backward, no_grad


@dataclass
class GradcheckReport:
    max_rel_error: float
    rtol: float
    per_input: list

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.rtol


def gradcheck(f: Callable[..., Tensor], inputs: Tensor | Sequence[Tensor], rtol: float = 1e-4,
              step: float = 1e-5, floor: float = 1e-6) -> GradcheckReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` with central differences.

    Per element the error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError(f"gradcheck needs a scalar function, got shape {out.shape}")
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("f(x) is not finite")
    backward(out)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]

    per_input = []
    with no_grad():
        for x, a in zip(inputs, analytic):
            num = np.zeros_like(x.data)
            flat = x.data.reshape(-1)
            nflat = num.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = flat[i]
                fp = float(f(*inputs).data)
                flat[i] = orig - step
                lo = flat[i]
                fm = float(f(*inputs).data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise FloatingPointError("f is not finite near x")
                # divide by the representable step actually taken
                nflat[i] = (fp - fm) / (hi - lo)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
            per_input.append(float(np.max(np.abs(a - num) / denom)) if a.size else 0.0)
    return GradcheckReport(max(per_input), rtol, per_input)


# --------------------------------------------------------------------------
# suite


def _projection(rng: RngState, shape):
    # random linear readout so every output element matters
    return rng.normal(0, 1, size=shape)


def _check_conv(rng):
    stride = int(rng.integers(1, 3))
    dilation = int(rng.integers(1, 4))
    conv = Conv2d(2, 3, 3, stride=stride, dilation=dilation, rng=rng)
    x = Tensor(rng.uniform(-2, 2, size=(2, 2, 7, 7)))
    conv.bias.data[:] = rng.uniform(-2, 2, size=3)
    R = None

    def f(x, w, b):
        nonlocal R
        y = F.conv2d(x, w, b, conv.spec.stride, conv.spec.padding, conv.spec.dilation)
        if R is None:
            R = _projection(rng, y.shape)
        return (y * R).sum()

    return gradcheck(f, [x, conv.weight, conv.bias])


def _check_prelu(rng):
    x = rng.uniform(-2, 2, size=(2, 3, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5  # stay off the kink
    act = PReLU(float(rng.uniform(-2, 2)))
    R = _projection(rng, x.shape)
    return gradcheck(lambda x, a: (F.prelu(x, a) * R).sum(), [Tensor(x), act.weight])


def _check_batch_norm(rng, training=True):
    bn = BatchNorm2d(3)
    bn.weight.data[:] = rng.uniform(-2, 2, size=3)
    bn.bias.data[:] = rng.uniform(-2, 2, size=3)
    bn.running_var[:] = rng.uniform(0.5, 2, size=3)
    bn.training = training
    x = Tensor(rng.uniform(-2, 2, size=(2, 3, 3, 3)))
    R = _projection(rng, x.shape)
    return gradcheck(lambda x, g, b: (bn(x) * R).sum(), [x, bn.weight, bn.bias])


def _check_upsample(rng):
    x = Tensor(rng.uniform(-2, 2, size=(1, 2, 3, 4)))
    oh, ow = int(rng.integers(2, 9)), int(rng.integers(2, 9))
    R = _projection(rng, (1, 2, oh, ow))
    return gradcheck(lambda x: (F.bilinear_upsample(x, oh, ow) * R).sum(), x)


def _check_max_pool(rng):
    # distinct values spaced apart keep the argmax stable under perturbation
    n = 2 * 2 * 6 * 6
    vals = rng.generator.permutation(n) * (4.0 / n) - 2.0
    x = Tensor(vals.reshape(2, 2, 6, 6))
    R = _projection(rng, (2, 2, 3, 3))
    return gradcheck(lambda x: (F.max_pool2(x) * R).sum(), x)


def _check_max_pool_overlap(rng):
    n = 1 * 2 * 7 * 7
    x = Tensor((rng.generator.permutation(n) * (4.0 / n) - 2.0).reshape(1, 2, 7, 7))
    R = _projection(rng, (1, 2, 4, 4))
    return gradcheck(lambda x: (F.max_pool(x, 3, 2, 1) * R).sum(), x)


def _check_avg_pool(rng):
    x = Tensor(rng.uniform(-2, 2, size=(2, 3, 4, 5)))
    R = _projection(rng, (2, 3, 1, 1))
    return gradcheck(lambda x: (F.adaptive_avg_pool(x) * R).sum(), x)


def _check_linear(rng):
    lin = Linear(4, 3, rng=rng)
    lin.bias.data[:] = rng.uniform(-2, 2, size=3)
    x = Tensor(rng.uniform(-2, 2, size=(5, 4)))
    R = _projection(rng, (5, 3))
    return gradcheck(lambda x, w, b: (F.linear(x, w, b) * R).sum(), [x, lin.weight, lin.bias])


def _check_softmax(rng):
    x = Tensor(rng.uniform(-2, 2, size=(2, 4, 3, 3)))
    R = _projection(rng, x.shape)
    return gradcheck(lambda x: (F.softmax(x, 1) * R).sum(), x)


def _check_sigmoid(rng):
    x = Tensor(rng.uniform(-2, 2, size=(3, 4)))
    R = _projection(rng, x.shape)
    return gradcheck(lambda x: (F.sigmoid(x) * R).sum(), x)


def _check_elementwise(rng):
    from .tensor import elementwise as ew
    a = Tensor(rng.uniform(0.5, 2, size=(3, 4)))
    b = Tensor(rng.uniform(0.5, 2, size=(3, 4)))
    b.data[np.abs(a.data - b.data) < 1e-3] += 0.01  # keep max off ties
    R = _projection(rng, (3, 4))

    def f(a, b):
        y = ew("sub", ew("add", ew("mul", a, b), ew("div", a, b)), ew("max", a, b))
        y = ew("add", y, ew("log", ew("exp", a)))
        return (y * R).sum()

    return gradcheck(f, [a, b])


def _check_wce(rng):
    from .losses import weighted_cross_entropy
    logits = Tensor(rng.uniform(-2, 2, size=(2, 4, 3, 3)))
    target = rng.integers(0, 4, size=(2, 3, 3))
    w = rng.uniform(0.2, 3.0, size=4)
    return gradcheck(lambda z: weighted_cross_entropy(z, target, w), logits)


def _check_bce(rng):
    from .losses import binary_cross_entropy
    logits = Tensor(rng.uniform(-2, 2, size=(2, 1, 3, 3)))
    target = (rng.random(size=(2, 1, 3, 3)) < 0.5).astype(float)
    return gradcheck(lambda z: binary_cross_entropy(z, target), logits)


def _check_lovasz(rng):
    from .losses import lovasz_softmax
    logits = Tensor(rng.uniform(-2, 2, size=(1, 3, 4, 4)))
    target = rng.integers(0, 3, size=(1, 4, 4))
    return gradcheck(lambda z: lovasz_softmax(F.softmax(z, 1), target), logits)


SUITE: dict[str, Callable] = {
    "elementwise": _check_elementwise,
    "conv2d (dilated, strided)": _check_conv,
    "prelu": _check_prelu,
    "batch_norm (train)": _check_batch_norm,
    "batch_norm (eval)": lambda rng: _check_batch_norm(rng, training=False),
    "bilinear_upsample": _check_upsample,
    "max_pool2": _check_max_pool,
    "max_pool 3x3/2": _check_max_pool_overlap,
    "adaptive_avg_pool": _check_avg_pool,
    "linear": _check_linear,
    "softmax": _check_softmax,
    "sigmoid": _check_sigmoid,
    "weighted_cross_entropy": _check_wce,
    "binary_cross_entropy": _check_bce,
    "lovasz_softmax": _check_lovasz,
}


@dataclass
class SuiteRow:
    name: str
    seeds: int
    worst: float
    passed: bool


def run_suite(seeds: int = 20, base_seed: int = 0, rtol: float = 1e-4, names=None) -> list[SuiteRow]:
    rows = []
    for name, check in SUITE.items():
        if names is not None and name not in names:
            continue
        worst = 0.0
        for s in range(seeds):
            rep = check(RngState(base_seed, ("gradcheck", name, s)))
            worst = max(worst, rep.max_rel_error)
        rows.append(SuiteRow(name, seeds, worst, worst < rtol))
    return rows


def format_suite(rows: list[SuiteRow], rtol: float = 1e-4, elapsed: float | None = None) -> str:
    lines = [f"{'check':<28}{'seeds':>6}{'max rel err':>14}  result"]
    for r in rows:
        lines.append(f"{r.name:<28}{r.seeds:>6}{r.worst:>14.3e}  {'PASS' if r.passed else 'FAIL'}")
    tail = f"rtol {rtol:g}"
    if elapsed is not None:
        tail += f", {elapsed:.1f}s"
    lines.append(tail)
    return "\n".join(lines)


def timed_suite(seeds: int = 20, base_seed: int = 0, rtol: float = 1e-4):
    t0 = time.perf_counter()
    rows = run_suite(seeds, base_seed, rtol)
    return rows, time.perf_counter() - t0
