"""Sliding-window inference with flip/mirror test-time augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import JointTaskDDCM
from .nn import functional as F
from .tensor import Tensor, no_grad

# maps inputs (N,B,h,w) to class probabilities (N,K,h,w)
Predictor = Callable[[np.ndarray], np.ndarray]


def _axis_origins(size: int, window: int, stride: int) -> list[int]:
    origins = list(range(0, size - window + 1, stride))
    if origins[-1] + window < size:
        origins.append(size - window)
    return origins


@dataclass(frozen=True)
class TileGrid:
    height: int
    width: int
    window: int
    overlap: float = 0.6

    def __post_init__(self):
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap must lie in [0, 1), got {self.overlap}")
        if self.height < self.window or self.width < self.window:
            raise ValueError(
                f"scene {self.height}x{self.width} is smaller than the {self.window} window; "
                "pad the scene or use a smaller window"
            )

    @property
    def stride(self) -> int:
        return max(1, round(self.window * (1.0 - self.overlap)))

    def origins(self) -> list[tuple[int, int]]:
        """Top-left corners; the last row/column is clamped to the border."""
        rows = _axis_origins(self.height, self.window, self.stride)
        cols = _axis_origins(self.width, self.window, self.stride)
        return [(r, c) for r in rows for c in cols]

    def coverage(self) -> np.ndarray:
        cov = np.zeros((self.height, self.width), dtype=np.int64)
        for r, c in self.origins():
            cov[r:r + self.window, c:c + self.window] += 1
        return cov


TTA_TRANSFORMS = ((False, False), (True, False), (False, True), (True, True))


def _apply(a: np.ndarray, flip: bool, mirror: bool) -> np.ndarray:
    if flip:
        a = a[..., ::-1, :]
    if mirror:
        a = a[..., ::-1]
    return a


def tta_predict(model: Predictor, window: np.ndarray, tta: bool = True) -> np.ndarray:
    """Average of softmax maps over identity, flip, mirror and flip+mirror (each undone)."""
    window = np.asarray(window, dtype=np.float64)
    if window.shape[-1] % 32 or window.shape[-2] % 32:
        raise ValueError(f"window {window.shape[-2:]} must be a multiple of 32")
    if not tta:
        return model(window[None])[0]
    batch = np.stack([_apply(window, f, m) for f, m in TTA_TRANSFORMS])
    probs = model(np.ascontiguousarray(batch))
    out = None
    for n, (p, (f, m)) in enumerate(zip(probs, TTA_TRANSFORMS), start=1):
        p = _apply(p, f, m)
        out = p.copy() if out is None else out + (p - out) / n
    return out


def stitch(scene: np.ndarray, model: Predictor, grid: TileGrid, tta: bool = True):
    """Uniform average of per-window probabilities over all covering windows.

    Returns the (K,H,W) probability map and the argmax class map (ties go to
    the lowest class id).
    """
    scene = np.asarray(scene, dtype=np.float64)
    H, W = scene.shape[-2:]
    if (H, W) != (grid.height, grid.width):
        raise ValueError(f"grid {grid.height}x{grid.width} does not match scene {H}x{W}")
    s = grid.window
    # running mean: identical contributions reproduce themselves bit-for-bit
    probs = None
    count = np.zeros((H, W))
    for r, c in grid.origins():
        p = tta_predict(model, scene[:, r:r + s, c:c + s], tta)
        if probs is None:
            probs = np.zeros((p.shape[0], H, W))
        count[r:r + s, c:c + s] += 1.0
        view = probs[:, r:r + s, c:c + s]
        view += (p - view) / count[r:r + s, c:c + s]
    return probs, probs.argmax(axis=0)


def network_predictor(net: JointTaskDDCM) -> Predictor:
    """Eval-mode, no-grad softmax over the full-class head."""

    def predict(x: np.ndarray) -> np.ndarray:
        was = net.training
        net.eval()
        try:
            with no_grad():
                logits = net(Tensor(x))["full_seg"]
                return F.softmax(logits, axis=1).data
        finally:
            net.train(was)

    return predict
