"""Seeded synthetic periodic textures with injected defects and ground truth.

Scenes are sums of oriented gratings (the stand-in for circuit texture), plus
anomalies of three geometric archetypes -- hard disks, rasterized thick
scratch segments, and Gaussian contamination blobs -- plus optional additive
Gaussian noise.  Everything is a pure function of the spec: the noise comes
from splitmix64 (see :mod:`wafertex.rng`), so the same spec reproduces the
scene bit for bit.  Each anomaly yields an exact binary mask, a tight
bounding box, and a ground-truth :class:`~wafertex.metrics.Detection`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from wafertex import rng
from wafertex.formats import rle_encode
from wafertex.metrics import Detection
from wafertex.tensor import Tensor

ANOMALY_KINDS = ("disk", "scratch", "contamination")

# kind -> ground-truth class id
ANOMALY_CLASSES = {"disk": 0, "scratch": 1, "contamination": 2}

# contamination pixels count as support while >= 10% of the peak contrast
CONTAMINATION_THRESHOLD = 0.1
_R10_FACTOR = math.sqrt(2.0 * math.log(1.0 / CONTAMINATION_THRESHOLD))


@dataclass(frozen=True)
class GratingSpec:
    """One periodic component: ``amplitude * wave(2*pi*(x*cos + y*sin)/period + phase)``."""

    period: float
    orientation: float
    amplitude: float
    phase: float = 0.0
    waveform: str = "sine"

    def __post_init__(self):
        if self.period < 2:
            raise ValueError(f"period must be >= 2 pixels, got {self.period}")
        if self.waveform not in ("sine", "square"):
            raise ValueError(f"waveform must be sine or square, got {self.waveform!r}")

    @classmethod
    def from_frequency(cls, fx: int, fy: int, height: int, width: int,
                       amplitude: float, phase: float = 0.0,
                       waveform: str = "sine") -> "GratingSpec":
        """Grating whose tone lands exactly on DFT bin (fx, fy) of an
        ``height x width`` map (no spectral leakage)."""
        if fx == 0 and fy == 0:
            raise ValueError("frequency (0, 0) is not a grating")
        kx = fx / width
        ky = fy / height
        norm = math.hypot(kx, ky)
        return cls(period=1.0 / norm, orientation=math.atan2(ky, kx),
                   amplitude=amplitude, phase=phase, waveform=waveform)


@dataclass(frozen=True)
class AnomalySpec:
    """One injected defect.

    ``size`` is the radius for a disk, ``(length, thickness)`` for a scratch,
    and unused for contamination, whose extent follows ``softness`` (the
    Gaussian sigma; support is the region above 10% of peak contrast).
    """

    kind: str
    center: tuple[float, float]  # (x, y) pixels
    contrast: float
    size: float | tuple[float, float] | None = None
    angle: float = 0.0
    softness: float = 0.0

    def __post_init__(self):
        if self.kind not in ANOMALY_KINDS:
            raise ValueError(f"kind must be one of {ANOMALY_KINDS}, got {self.kind!r}")
        if self.contrast == 0:
            raise ValueError("contrast must be nonzero")
        if self.kind == "disk":
            if not isinstance(self.size, (int, float)) or self.size <= 0:
                raise ValueError(f"disk needs a positive radius, got {self.size!r}")
        elif self.kind == "scratch":
            if (not isinstance(self.size, tuple) or len(self.size) != 2
                    or self.size[0] <= 0 or self.size[1] <= 0):
                raise ValueError(
                    f"scratch needs a (length, thickness) pair, got {self.size!r}")
        else:
            if self.softness <= 0:
                raise ValueError(
                    f"contamination needs softness > 0, got {self.softness}")


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for one scene; bit-deterministic given the seed."""

    height: int
    width: int
    gratings: tuple[GratingSpec, ...] = ()
    anomalies: tuple[AnomalySpec, ...] = ()
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "gratings", tuple(self.gratings))
        object.__setattr__(self, "anomalies", tuple(self.anomalies))
        if self.height < 1 or self.width < 1:
            raise ValueError(f"bad scene size {self.height}x{self.width}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def gen_grating(spec: GratingSpec, height: int, width: int) -> Tensor:
    """Evaluate the grating on the pixel grid (x along width, y along height)."""
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)[:, np.newaxis]
    t = (2.0 * np.pi / spec.period) * (
        xs * math.cos(spec.orientation) + ys * math.sin(spec.orientation)
    ) + spec.phase
    wave = np.sin(t)
    if spec.waveform == "square":
        wave = np.sign(wave)
    return Tensor((spec.amplitude * wave).astype(np.float32))


def _support_bounds(mask_fn, x_lo, x_hi, y_lo, y_hi, height, width):
    """Evaluate a support predicate over its (extended) bounding box and check
    nothing lands outside the image grid."""
    xs = np.arange(math.floor(x_lo) - 1, math.ceil(x_hi) + 2)
    ys = np.arange(math.floor(y_lo) - 1, math.ceil(y_hi) + 2)
    inside = mask_fn(xs[np.newaxis, :], ys[:, np.newaxis])
    yy, xx = np.nonzero(inside)
    if yy.size == 0:
        raise ValueError("anomaly support is empty (no pixel selected)")
    px = xs[xx]
    py = ys[yy]
    if px.min() < 0 or px.max() >= width or py.min() < 0 or py.max() >= height:
        raise ValueError(
            f"anomaly support [{px.min()},{px.max()}]x[{py.min()},{py.max()}] "
            f"extends outside the {width}x{height} image"
        )
    full = np.zeros((height, width), dtype=bool)
    full[py, px] = True
    return full


def _anomaly_delta_mask(spec: AnomalySpec, height: int, width: int):
    """Additive image delta (float64) and exact binary mask for one anomaly."""
    cx, cy = spec.center
    if spec.kind == "disk":
        r = float(spec.size)

        def pred(x, y):
            return (x - cx) ** 2 + (y - cy) ** 2 <= r * r

        mask = _support_bounds(pred, cx - r, cx + r, cy - r, cy + r, height, width)
        delta = np.where(mask, spec.contrast, 0.0)
        return delta, mask

    if spec.kind == "scratch":
        length, thickness = spec.size
        ca, sa = math.cos(spec.angle), math.sin(spec.angle)

        def pred(x, y):
            along = (x - cx) * ca + (y - cy) * sa
            perp = -(x - cx) * sa + (y - cy) * ca
            return ((-length / 2 <= along) & (along < length / 2)
                    & (-thickness / 2 <= perp) & (perp < thickness / 2))

        reach = (length + thickness) / 2
        mask = _support_bounds(pred, cx - reach, cx + reach, cy - reach, cy + reach,
                               height, width)
        delta = np.where(mask, spec.contrast, 0.0)
        return delta, mask

    # contamination: Gaussian blob added everywhere, support thresholded
    sigma = spec.softness
    r10 = sigma * _R10_FACTOR

    def pred(x, y):
        return (x - cx) ** 2 + (y - cy) ** 2 <= r10 * r10

    mask = _support_bounds(pred, cx - r10, cx + r10, cy - r10, cy + r10, height, width)
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)[:, np.newaxis]
    r2 = (xs - cx) ** 2 + (ys - cy) ** 2
    delta = spec.contrast * np.exp(-r2 / (2.0 * sigma * sigma))
    return delta, mask


def inject_anomaly(img: Tensor, spec: AnomalySpec) -> tuple[Tensor, np.ndarray]:
    """Add one anomaly to a single-channel image; returns (image, mask)."""
    if img.channels != 1:
        raise ValueError(f"inject_anomaly expects one channel, got {img.channels}")
    delta, mask = _anomaly_delta_mask(spec, img.height, img.width)
    out = Tensor(img.data[0] + delta.astype(np.float32))
    return out, mask


def _tight_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    ys, xs = np.nonzero(mask)
    return float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)


def gen_scene(spec: SceneSpec) -> tuple[Tensor, np.ndarray, list[Detection]]:
    """Render a scene: image, union anomaly mask, ground-truth detections.

    Gratings are summed in order, anomalies injected in order, noise added
    last (``noise_sigma`` times splitmix64/Box-Muller standard normals in
    row-major pixel order).
    """
    h, w = spec.height, spec.width
    base = np.zeros((h, w), dtype=np.float64)
    for g in spec.gratings:
        base += gen_grating(g, h, w).data[0]
    img = Tensor(base.astype(np.float32))

    union = np.zeros((h, w), dtype=bool)
    records: list[Detection] = []
    for anomaly in spec.anomalies:
        img, mask = inject_anomaly(img, anomaly)
        union |= mask
        records.append(Detection(
            class_id=ANOMALY_CLASSES[anomaly.kind],
            score=1.0,
            box=_tight_box(mask),
            mask=rle_encode(mask),
        ))
    if spec.noise_sigma > 0:
        noise = spec.noise_sigma * rng.normal(spec.seed, h * w).reshape(h, w)
        img = Tensor(img.data[0] + noise.astype(np.float32))
    return img, union, records


def standard_suite(size: int = 256, contrasts=(0.1, 0.25, 0.5),
                   seeds=range(5)) -> list[SceneSpec]:
    """The benchmark grid: contrast levels x anomaly kinds x seeds.

    Background: two bin-aligned sine gratings (amplitude 1.0 and 0.7) plus
    sigma 0.002 sensor noise -- small enough that the faintest contamination
    tail (10% of a 0.1 contrast) stays separable from the noise floor, which
    keeps the benchmark well posed at its own mask threshold.  Anomaly
    geometry is drawn deterministically from the seed, with centers kept
    inside the middle half of the image.
    """
    scenes = []
    for contrast in contrasts:
        for kind in ANOMALY_KINDS:
            for seed in seeds:
                geom_seed = seed * 7919 + ANOMALY_CLASSES[kind] * 101 \
                    + int(round(contrast * 1000))
                u = rng.uniform(geom_seed, 3)
                cx = size * (0.25 + 0.5 * u[0])
                cy = size * (0.25 + 0.5 * u[1])
                if kind == "disk":
                    anomaly = AnomalySpec("disk", (cx, cy), contrast, size=9.0)
                elif kind == "scratch":
                    anomaly = AnomalySpec("scratch", (cx, cy), contrast,
                                          size=(60.0, 3.0), angle=u[2] * math.pi)
                else:
                    anomaly = AnomalySpec("contamination", (cx, cy), contrast,
                                          softness=8.0)
                scenes.append(SceneSpec(
                    height=size,
                    width=size,
                    gratings=(
                        GratingSpec.from_frequency(21, 0, size, size, 1.0),
                        GratingSpec.from_frequency(0, 13, size, size, 0.7,
                                                   phase=0.7),
                    ),
                    anomalies=(anomaly,),
                    noise_sigma=0.002,
                    seed=seed,
                ))
    return scenes
