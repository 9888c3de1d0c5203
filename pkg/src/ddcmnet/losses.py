"""Task losses and the randomly weighted joint loss.

L_total = L_mce + w1 * L_bce + w2 * L_lovasz with (w1, w2) ~ U[0, 1] drawn
afresh each iteration.  All losses use a pixel-mean reduction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import functional as F
from .rng import RngState
from .tensor import Tensor, as_tensor, concat, make_result

PAIRINGS = ("bce-presence", "bce-binary")


@dataclass
class ClassWeights:
    weights: np.ndarray
    frequencies: np.ndarray = field(default=None)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.frequencies is not None:
            self.frequencies = np.asarray(self.frequencies, dtype=np.float64)

    @classmethod
    def uniform(cls, k: int) -> ClassWeights:
        return cls(np.ones(k))


def median_frequency_weights(frequencies) -> ClassWeights:
    """w_c = median(f) / f_c."""
    f = np.asarray(frequencies, dtype=np.float64)
    if f.ndim != 1 or f.size == 0:
        raise ValueError("frequencies must be a nonempty 1-D sequence")
    if np.any(f <= 0):
        bad = np.flatnonzero(f <= 0).tolist()
        raise ValueError(
            f"classes {bad} have zero pixel count; apply a count floor or drop the class "
            "before median frequency balancing"
        )
    return ClassWeights(np.median(f) / f, f)


def _flatten_logits(logits: Tensor, target: np.ndarray):
    # (K,H,W) or (N,K,H,W) -> class axis 1, targets (N,H,W)
    if logits.ndim == 3:
        logits = logits.reshape(1, *logits.shape)
        target = target[None]
    return logits, np.asarray(target)


def weighted_cross_entropy(logits, target, weights: ClassWeights | np.ndarray | None = None) -> Tensor:
    """Mean over pixels of w[target] * -log softmax(logits)[target]."""
    logits, target = _flatten_logits(as_tensor(logits), target)
    K = logits.shape[1]
    t = target.astype(np.int64)
    if t.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ValueError(f"target shape {t.shape} does not match logits {logits.shape}")
    if t.size and (t.min() < 0 or t.max() >= K):
        raise ValueError(f"target class ids must lie in [0, {K}), found [{t.min()}, {t.max()}]")
    w = np.ones(K) if weights is None else np.asarray(getattr(weights, "weights", weights), np.float64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    picked = np.take_along_axis(logp, t[:, None], axis=1)[:, 0]
    wt = w[t]
    n = t.size
    loss = np.asarray(-(wt * picked).sum() / n)

    def back(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, t[:, None], 1.0, axis=1)
        return (g * (wt[:, None] / n) * (p - onehot),)

    return make_result(loss, (logits,), back)


def binary_cross_entropy(logits, target) -> Tensor:
    """Mean of -[y log s(x) + (1-y) log s(-x)], evaluated as softplus(x) - x*y."""
    logits = as_tensor(logits)
    y = np.asarray(target, dtype=np.float64)
    if y.shape != logits.shape:
        y = y.reshape(logits.shape)
    x = logits.data
    n = x.size
    loss = np.asarray((np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))).sum() / n)

    def back(g):
        return (g * (F._sigmoid(x) - y) / n,)

    return make_result(loss, (logits,), back)


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Jaccard-loss increments along a descending-error ordering of binary ground truth."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if gt_sorted.size > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs, target, classes: str = "present", tol: float = 1e-6) -> Tensor:
    """Lovasz-softmax over all pixels, averaged over classes present in ``target``.

    ``probs`` is (K,H,W) or (N,K,H,W) with rows summing to 1.  Sorting uses a
    stable descending order, so tied errors keep pixel order.
    """
    probs, target = _flatten_logits(as_tensor(probs), target)
    K = probs.shape[1]
    sums = probs.data.sum(axis=1)
    if np.max(np.abs(sums - 1.0)) > tol:
        raise ValueError(f"lovasz_softmax expects normalized probabilities; row sums deviate by "
                         f"{np.max(np.abs(sums - 1.0)):.3g}")
    p = np.moveaxis(probs.data, 1, -1).reshape(-1, K)
    t = np.asarray(target).reshape(-1).astype(np.int64)
    grad_p = np.zeros_like(p)
    losses = []
    for c in range(K):
        fg = (t == c).astype(np.float64)
        if classes == "present" and fg.sum() == 0:
            continue
        err = np.abs(fg - p[:, c])
        order = np.argsort(-err, kind="stable")
        g = lovasz_grad(fg[order])
        losses.append(float(np.dot(err[order], g)))
        dl_derr = np.empty_like(g)
        dl_derr[order] = g
        grad_p[:, c] += dl_derr * np.where(fg > 0, -1.0, 1.0)
    count = len(losses)
    loss = np.asarray(sum(losses) / count if count else 0.0)
    if count:
        grad_p /= count
    grad_p = np.moveaxis(grad_p.reshape(probs.shape[0], *probs.shape[2:], K), -1, 1)

    return make_result(loss, (probs,), lambda g: (g * grad_p,))


def binary_probs(logits: Tensor) -> Tensor:
    """(N,1,H,W) logit -> two-class probabilities [1 - s(x), s(x)] along axis 1."""
    s = F.sigmoid(logits)
    return concat([1.0 - s, s], axis=1)


@dataclass
class JointLossSample:
    iteration: int
    w1: float
    w2: float
    l_mce: float
    l_bce: float
    l_lovasz: float
    l_total: float
    total: Tensor = field(repr=False, default=None)

    FIELDS = ("iteration", "w1", "w2", "l_mce", "l_bce", "l_lovasz", "l_total")

    def record(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


def draw_loss_weights(rng: RngState) -> tuple[float, float]:
    w = rng.uniform(0.0, 1.0, size=2)
    return float(w[0]), float(w[1])


def joint_loss(i: int, outputs: dict, targets: dict, weights: ClassWeights | None,
               rng: RngState, pairing: str = "bce-presence") -> JointLossSample:
    """Main weighted CE plus randomly weighted auxiliary losses.

    ``targets`` holds ``seg`` (N,H,W), ``binary`` (N,1,H,W) and ``presence`` (N,K-1).
    With the default pairing BCE trains the presence head and Lovasz-softmax
    trains the binary head through its two-class softmax; ``bce-binary``
    swaps them (Lovasz then runs over presence probabilities).
    """
    if i < 1:
        raise ValueError("iteration index starts at 1")
    missing = [k for k in ("full_seg", "binary", "presence") if k not in outputs]
    if missing:
        raise KeyError(f"joint loss needs all three heads; missing outputs {missing}")
    if pairing not in PAIRINGS:
        raise ValueError(f"unknown loss pairing {pairing!r}; choose from {PAIRINGS}")
    w1, w2 = draw_loss_weights(rng)
    l_mce = weighted_cross_entropy(outputs["full_seg"], targets["seg"], weights)
    binary_t = np.asarray(targets["binary"])
    presence_t = np.asarray(targets["presence"])
    if pairing == "bce-presence":
        l_bce = binary_cross_entropy(outputs["presence"], presence_t)
        bin_logits = outputs["binary"]
        if bin_logits.ndim == 3:
            bin_logits = bin_logits.reshape(1, *bin_logits.shape)
        seg_shape = (bin_logits.shape[0],) + bin_logits.shape[2:]
        l_lov = lovasz_softmax(binary_probs(bin_logits), binary_t.reshape(seg_shape))
    else:
        l_bce = binary_cross_entropy(outputs["binary"], binary_t)
        # each (sample, road class) presence bit is treated as one "pixel"
        pres = outputs["presence"]
        grid = pres.shape if pres.ndim == 2 else (1,) + pres.shape
        pres = pres.reshape(1, 1, *grid)
        l_lov = lovasz_softmax(binary_probs(pres), presence_t.reshape(grid)[None])
    total = l_mce + w1 * l_bce + w2 * l_lov
    return JointLossSample(i, w1, w2, float(l_mce.data), float(l_bce.data), float(l_lov.data),
                           float(total.data), total)
