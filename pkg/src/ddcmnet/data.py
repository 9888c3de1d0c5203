"""Rasters, patch sampling, augmentation and a synthetic road-scene generator.

Raster container (all integers little-endian)::

    offset  size  field
    0       4     magic b"DDCM"
    4       2     version (u16, currently 1)
    6       2     band count B (u16)
    8       4     height H (u32)
    12      4     width W (u32)
    16      1     label flag (u8, 0 or 1)
    17      8BHW  bands, float64, row-major (band, row, col)
    ...     HW    labels, u8, row-major (present only if flag == 1)

"Flip" reverses rows (vertical axis), "mirror" reverses columns.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .rng import RngState

MAGIC = b"DDCM"
VERSION = 1
HEADER = struct.Struct("<4sHHIIB")
HEADER_SIZE = HEADER.size

# background black, then Road1/Road2/Road3
PALETTE = np.array([[0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25],
                    [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240]], dtype=np.uint8)


class RasterFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


@dataclass
class LabeledRaster:
    bands: np.ndarray
    labels: np.ndarray | None = None
    num_classes: int = 4
    band_names: tuple = ("elevation_gradient", "hillshade")

    def __post_init__(self):
        self.bands = np.asarray(self.bands, dtype=np.float64)
        if self.bands.ndim != 3:
            raise ValueError(f"bands must be (B,H,W), got {self.bands.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint8)
            if self.labels.shape != self.bands.shape[1:]:
                raise ValueError(f"labels {self.labels.shape} do not match bands {self.bands.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.bands.shape[1], self.bands.shape[2]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels.reshape(-1), minlength=self.num_classes)[: self.num_classes]


def write_raster(path, raster: LabeledRaster):
    B, H, W = raster.bands.shape
    has_labels = raster.labels is not None
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, B, H, W, int(has_labels)))
        fh.write(np.ascontiguousarray(raster.bands, dtype="<f8").tobytes())
        if has_labels:
            fh.write(np.ascontiguousarray(raster.labels, dtype=np.uint8).tobytes())


def read_raster(path, num_classes: int = 4) -> LabeledRaster:
    blob = Path(path).read_bytes()
    if len(blob) < HEADER_SIZE:
        raise RasterFormatError(f"truncated header: expected {HEADER_SIZE} bytes, available {len(blob)}",
                                len(blob))
    magic, version, B, H, W, flag = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise RasterFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise RasterFormatError(f"unsupported version {version}", 4)
    if B == 0 or H == 0 or W == 0:
        raise RasterFormatError(f"degenerate shape bands={B} height={H} width={W}", 6)
    if flag not in (0, 1):
        raise RasterFormatError(f"label flag must be 0 or 1, got {flag}", 16)
    band_bytes = 8 * B * H * W
    need = HEADER_SIZE + band_bytes + (H * W if flag else 0)
    if len(blob) < need:
        raise RasterFormatError(f"truncated payload: expected {need} bytes, available {len(blob)}",
                                len(blob))
    if len(blob) > need:
        raise RasterFormatError(f"{len(blob) - need} trailing bytes after payload", need)
    bands = np.frombuffer(blob, dtype="<f8", count=B * H * W, offset=HEADER_SIZE)
    bands = bands.reshape(B, H, W).astype(np.float64)
    labels = None
    if flag:
        labels = np.frombuffer(blob, dtype=np.uint8, count=H * W, offset=HEADER_SIZE + band_bytes)
        labels = labels.reshape(H, W).copy()
    return LabeledRaster(bands, labels, num_classes)


def write_ppm(path, class_map: np.ndarray, palette: np.ndarray = PALETTE):
    """Binary P6 PPM of a class map using the fixed palette."""
    rgb = palette[np.asarray(class_map, dtype=np.int64) % len(palette)]
    H, W = class_map.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


# --------------------------------------------------------------------------
# targets and augmentation


def binary_target(seg: np.ndarray) -> np.ndarray:
    return (np.asarray(seg) > 0).astype(np.float64)


def presence_target(seg: np.ndarray, num_classes: int) -> np.ndarray:
    """Multi-hot over road classes 1..K-1 for a (H,W) map or a (N,H,W) stack."""
    seg = np.asarray(seg)
    if seg.ndim == 2:
        return np.array([float(np.any(seg == c)) for c in range(1, num_classes)])
    return np.stack([presence_target(s, num_classes) for s in seg])


def augment(bands: np.ndarray, labels: np.ndarray | None, flip: bool, mirror: bool):
    """Reverse rows (flip) and/or columns (mirror) of bands (...,H,W) and labels (H,W)."""
    if flip:
        bands = bands[..., ::-1, :]
        labels = None if labels is None else labels[..., ::-1, :]
    if mirror:
        bands = bands[..., ::-1]
        labels = None if labels is None else labels[..., ::-1]
    return bands, labels


@dataclass
class PatchBatch:
    inputs: np.ndarray      # (N,B,h,w)
    seg: np.ndarray         # (N,h,w) int64
    binary: np.ndarray      # (N,1,h,w)
    presence: np.ndarray    # (N,K-1)

    def targets(self) -> dict:
        return {"seg": self.seg, "binary": self.binary, "presence": self.presence}


@dataclass
class PatchSet:
    """A drawn sampling plan: corners plus flip/mirror flags, materialized on demand."""

    raster: LabeledRaster
    size: int
    corners: np.ndarray     # (N,2) top-left (row, col)
    flips: np.ndarray       # (N,) bool
    mirrors: np.ndarray     # (N,) bool

    def __len__(self):
        return len(self.corners)

    @property
    def input_shape(self) -> tuple:
        return (len(self), self.raster.bands.shape[0], self.size, self.size)

    def materialize(self, index=None) -> PatchBatch:
        idx = np.arange(len(self)) if index is None else np.atleast_1d(np.arange(len(self))[index])
        s = self.size
        K = self.raster.num_classes
        xs, ys = [], []
        for i in idx:
            r, c = self.corners[i]
            b = self.raster.bands[:, r:r + s, c:c + s]
            lab = self.raster.labels[r:r + s, c:c + s]
            b, lab = augment(b, lab, bool(self.flips[i]), bool(self.mirrors[i]))
            xs.append(b)
            ys.append(lab)
        inputs = np.ascontiguousarray(np.stack(xs), dtype=np.float64)
        if inputs.size and (inputs.min() < 0.0 or inputs.max() > 1.0):
            raise ValueError("patch values outside [0, 1]")
        seg = np.stack(ys).astype(np.int64)
        return PatchBatch(inputs, seg, binary_target(seg)[:, None], presence_target(seg, K))

    def batches(self, batch_size: int):
        for lo in range(0, len(self), batch_size):
            yield self.materialize(slice(lo, lo + batch_size))


def sample_patches(raster: LabeledRaster, count: int, size: int, rng: RngState) -> PatchSet:
    """Uniform random corners; independent flip and mirror, each with probability 1/2."""
    H, W = raster.shape
    if size % 32:
        raise ValueError(f"patch size {size} must be a multiple of 32")
    if size > H or size > W:
        raise ValueError(f"patch size {size} exceeds raster size {H}x{W}")
    if raster.labels is None:
        raise ValueError("patch sampling needs a labelled raster")
    rows = rng.integers(0, H - size + 1, size=count)
    cols = rng.integers(0, W - size + 1, size=count)
    flags = rng.random(size=(count, 2)) < 0.5
    return PatchSet(raster, size, np.stack([rows, cols], axis=1), flags[:, 0], flags[:, 1])


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SynthSpec:
    height: int = 1024
    width: int = 1024
    roads_per_class: tuple[int, ...] = (3, 3, 4)
    # stroke widths in pixels, (min, max) per road class
    width_ranges: tuple[tuple[float, float], ...] = ((11.0, 15.0), (7.0, 9.0), (3.0, 5.0))
    # additive gradient-band intensity per road class
    band_offsets: tuple[float, ...] = (0.3, 0.55, 0.8)
    # embankment height per road class, shows up in the hillshade band
    heights: tuple[float, ...] = (2.0, 1.0, 3.0)
    noise: float = 0.05
    vertices: int = 5
    num_classes: int = 4


@dataclass
class Polyline:
    cls: int
    width: float
    points: np.ndarray      # (V,2) row, col

    def distance(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        d = np.full(rows.shape, np.inf)
        for (r0, c0), (r1, c1) in zip(self.points[:-1], self.points[1:]):
            dr, dc = r1 - r0, c1 - c0
            L2 = dr * dr + dc * dc
            t = np.zeros(rows.shape) if L2 == 0 else ((rows - r0) * dr + (cols - c0) * dc) / L2
            t = np.clip(t, 0.0, 1.0)
            d = np.minimum(d, np.hypot(rows - (r0 + t * dr), cols - (c0 + t * dc)))
        return d


@dataclass
class SynthScene:
    raster: LabeledRaster
    polylines: list = field(default_factory=list)


def _random_polyline(rng: RngState, H: int, W: int, vertices: int) -> np.ndarray:
    # enter on one border, wander across, leave near the opposite one
    if rng.random() < 0.5:
        cols = np.linspace(-0.05 * W, 1.05 * W, vertices)
        rows = rng.uniform(0, H, size=vertices)
        rows = np.clip(rows[0] + np.cumsum(rng.normal(0, 0.15 * H, size=vertices)), 0, H - 1)
    else:
        rows = np.linspace(-0.05 * H, 1.05 * H, vertices)
        cols = rng.uniform(0, W, size=vertices)
        cols = np.clip(cols[0] + np.cumsum(rng.normal(0, 0.15 * W, size=vertices)), 0, W - 1)
    return np.stack([rows, cols], axis=1)


def _normalize(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    return np.zeros_like(a) if hi == lo else (a - lo) / (hi - lo)


def hillshade(z: np.ndarray, azimuth: float = 315.0, altitude: float = 45.0) -> np.ndarray:
    gy, gx = np.gradient(z)
    slope = np.arctan(np.hypot(gx, gy))
    aspect = np.arctan2(-gx, gy)
    az, alt = np.radians(azimuth), np.radians(altitude)
    shade = np.sin(alt) * np.cos(slope) + np.cos(alt) * np.sin(slope) * np.cos(az - aspect)
    return np.clip(shade, 0.0, 1.0)


def synth_scene(spec: SynthSpec, rng: RngState) -> SynthScene:
    """Smooth noisy terrain with rasterized polyline roads of class-specific width and contrast.

    Road classes are painted in order 1..K-1, so narrower classes drawn later
    overwrite wider ones at crossings.
    """
    H, W = spec.height, spec.width
    if H < 256 or W < 256:
        raise ValueError(f"synthetic scenes need H, W >= 256, got {H}x{W}")
    terrain = ndimage.gaussian_filter(rng.normal(0, 1, size=(H, W)), 24) * 40.0
    terrain += ndimage.gaussian_filter(rng.normal(0, 1, size=(H, W)), 4) * 2.0
    labels = np.zeros((H, W), dtype=np.uint8)
    offsets = np.zeros((H, W))
    height = np.zeros((H, W))
    rows, cols = np.mgrid[0:H, 0:W].astype(np.float64)
    polylines = []
    for ci, n in enumerate(spec.roads_per_class):
        cls = ci + 1
        lo, hi = spec.width_ranges[ci]
        for _ in range(n):
            pts = _random_polyline(rng, H, W, spec.vertices)
            width = float(rng.uniform(lo, hi))
            line = Polyline(cls, width, pts)
            mask = line.distance(rows, cols) <= width / 2.0
            labels[mask] = cls
            offsets[mask] = spec.band_offsets[ci]
            height[mask] = spec.heights[ci]
            polylines.append(line)
    z = terrain + ndimage.gaussian_filter(height, 1.0)
    grad = np.hypot(*np.gradient(terrain))
    band0 = _normalize(grad) * 0.2 + offsets + rng.normal(0, spec.noise, size=(H, W))
    band1 = hillshade(z) + rng.normal(0, spec.noise, size=(H, W))
    bands = np.stack([np.clip(band0, 0.0, 1.0), np.clip(band1, 0.0, 1.0)])
    return SynthScene(LabeledRaster(bands, labels, spec.num_classes), polylines)
