"""Periodic-texture contrast enhancement in the frequency domain.

The pipeline decouples a feature map into its dominant periodic component and
the residual that breaks periodicity:

1. a 2-D discrete Fourier transform of the map (:func:`dft2d`),
2. retention of the strongest frequency bins with their Hermitian partners
   (:func:`extract_periodic_peaks`),
3. inverse transform of the peak-only spectrum (:func:`periodic_reconstruct`),
4. the spatial residual magnitude ``D = |f - f_periodic|``
   (:func:`disturbance_map`), high exactly where periodicity is disrupted,
5. a boundary attention map ``A = sigmoid(conv(|grad D|))``
   (:func:`boundary_attention`),
6. the gated enhancement ``F + alpha * A (*) F`` (:func:`mptce_enhance`).

The forward transform is unnormalized (plain double sum); the inverse carries
the ``1/(H*W)`` factor.  Spectra are held in complex128; feature maps stay
float32.  By default the transform covers the whole map; an optional tiled
mode (power-of-two tiles, 50% overlap, periodic Hann window, overlap-add)
localizes the periodic model for large maps.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from wafertex import backend
from wafertex.tensor import ConvSpec, Tensor, conv2d, sigmoid_map

GRADIENT_KERNELS = ("sobel", "central")


def default_bca_conv() -> ConvSpec:
    """Untrained boundary-attention conv: 3x3 box average, zero bias."""
    w = np.full((1, 1, 3, 3), 1.0 / 9.0, dtype=np.float32)
    return ConvSpec(1, 1, 3, 3, w, bias=np.zeros(1, dtype=np.float32), padding=1)


@dataclass(frozen=True)
class Spectrum:
    """Full (non-halved) 2-D DFT layout; ``coeffs[v, u]`` is the bin for
    frequency ``u`` along width and ``v`` along height."""

    height: int
    width: int
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.ascontiguousarray(np.asarray(self.coeffs, dtype=np.complex128))
        if c.shape != (self.height, self.width):
            raise ValueError(f"coeffs shape {c.shape} != ({self.height}, {self.width})")
        object.__setattr__(self, "coeffs", c)

    def coeff(self, u: int, v: int) -> complex:
        return complex(self.coeffs[v, u])

    def hermitian_error(self) -> float:
        """Max |coeff(u,v) - conj(coeff(-u mod W, -v mod H))|."""
        h, w = self.height, self.width
        mirrored = self.coeffs[np.ix_((-np.arange(h)) % h, (-np.arange(w)) % w)]
        return float(np.max(np.abs(self.coeffs - np.conj(mirrored))))


@dataclass(frozen=True)
class SpectrumPeaks:
    """Retained dominant bins ``(u, v, coefficient)``, Hermitian-paired so the
    reconstruction is real.  DC is listed first when included."""

    peaks: list[tuple[int, int, complex]]
    include_dc: bool

    def __post_init__(self):
        support = {(u, v) for u, v, _ in self.peaks}
        if len(support) != len(self.peaks):
            raise ValueError("duplicate (u, v) entries in peak set")

    def support(self) -> set[tuple[int, int]]:
        return {(u, v) for u, v, _ in self.peaks}


@dataclass(frozen=True)
class MptceConfig:
    """Knobs of the enhancement operator.

    ``top_k`` is the number of dominant non-DC peak pairs retained -- the one
    quantity the pipeline is genuinely sensitive to and deliberately exposed
    (default 8 pairs).  ``tile=None`` transforms the whole map; a power-of-two
    tile size switches to windowed overlap-add tiling.  ``alpha`` scales the
    enhancement; ``bca_conv`` maps the gradient magnitude to one attention
    channel (default: 3x3 box average, bias 0).
    """

    top_k: int = 8
    tile: int | None = None
    alpha: float = 1.0
    bca_conv: ConvSpec = field(default_factory=default_bca_conv)
    gradient_kernel: str = "sobel"
    include_dc: bool = True

    def __post_init__(self):
        if self.top_k < 0:
            raise ValueError(f"top_k must be >= 0, got {self.top_k}")
        if self.top_k == 0 and not self.include_dc:
            raise ValueError("empty periodic model: top_k == 0 with include_dc false")
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")
        if self.tile is not None:
            if self.tile < 4 or (self.tile & (self.tile - 1)) != 0:
                raise ValueError(f"tile must be a power of two >= 4, got {self.tile}")
        if self.gradient_kernel not in GRADIENT_KERNELS:
            raise ValueError(
                f"gradient_kernel must be one of {GRADIENT_KERNELS}, "
                f"got {self.gradient_kernel!r}"
            )


def _require_single_channel(x: Tensor, op: str) -> None:
    if x.channels != 1:
        raise ValueError(f"{op} expects a single-channel tensor, got {x.channels} channels")


def dft2d(x: Tensor) -> Spectrum:
    """Unnormalized forward 2-D DFT of a single-channel map."""
    _require_single_channel(x, "dft2d")
    coeffs = np.fft.fft2(x.data[0].astype(np.float64))
    return Spectrum(x.height, x.width, coeffs)


def idft2d(s: Spectrum) -> Tensor:
    """Inverse 2-D DFT (carries the 1/(H*W) factor); returns the real part."""
    back = np.fft.ifft2(s.coeffs)
    return Tensor(back.real.astype(np.float32))


def extract_periodic_peaks(s: Spectrum, cfg: MptceConfig) -> SpectrumPeaks:
    """Retain the ``top_k`` strongest non-DC bins, each with its Hermitian partner.

    Bins are ranked by coefficient magnitude, ties broken by ``(u, v)``
    lexicographic order, which makes peak sets nested in ``top_k``.  DC is
    prepended when ``include_dc`` is set.
    """
    h, w = s.height, s.width
    max_pairs = (h * w - 1) // 2
    if cfg.top_k > max_pairs:
        raise ValueError(
            f"top_k={cfg.top_k} exceeds the {max_pairs} non-DC bin pairs of a "
            f"{h}x{w} spectrum"
        )
    if cfg.top_k == 0 and not cfg.include_dc:
        raise ValueError("empty periodic model: top_k == 0 with include_dc false")

    peaks: list[tuple[int, int, complex]] = []
    if cfg.include_dc:
        peaks.append((0, 0, s.coeff(0, 0)))

    if cfg.top_k > 0:
        mag = np.abs(s.coeffs).ravel()
        idx = np.arange(h * w)
        uu = idx % w
        vv = idx // w
        order = np.lexsort((vv, uu, -mag))
        chosen: set[tuple[int, int]] = set()
        pairs = 0
        for flat in order:
            u, v = int(uu[flat]), int(vv[flat])
            if (u, v) == (0, 0) or (u, v) in chosen:
                continue
            partner = ((-u) % w, (-v) % h)
            chosen.add((u, v))
            peaks.append((u, v, s.coeff(u, v)))
            if partner != (u, v):
                chosen.add(partner)
                peaks.append((partner[0], partner[1], s.coeff(*partner)))
            pairs += 1
            if pairs == cfg.top_k:
                break
    return SpectrumPeaks(peaks=peaks, include_dc=cfg.include_dc)


def periodic_reconstruct(peaks: SpectrumPeaks, h: int, w: int) -> Tensor:
    """Inverse DFT of the peak-only spectrum; the result must be real.

    Raises if the peak set is not Hermitian-paired (reconstruction would be
    complex) or if any index falls outside the ``h x w`` grid.
    """
    table: dict[tuple[int, int], complex] = {}
    for u, v, c in peaks.peaks:
        if not (0 <= u < w and 0 <= v < h):
            raise ValueError(f"peak index ({u}, {v}) outside [0,{w}) x [0,{h})")
        table[(u, v)] = c
    if len(table) != len(peaks.peaks):
        raise ValueError("duplicate (u, v) entries in peak set")
    for (u, v), c in table.items():
        partner = ((-u) % w, (-v) % h)
        if partner not in table:
            raise ValueError(f"non-Hermitian peak set: ({u}, {v}) lacks partner {partner}")
        mismatch = abs(table[partner] - c.conjugate())
        if mismatch > 1e-5 * max(1.0, abs(c)):
            raise ValueError(
                f"non-Hermitian peak set: coefficient at {partner} is not the "
                f"conjugate of ({u}, {v}) (|delta| = {mismatch:.3g})"
            )
    spec = np.zeros((h, w), dtype=np.complex128)
    for (u, v), c in table.items():
        spec[v, u] = c
    back = np.fft.ifft2(spec)
    real_norm = float(np.linalg.norm(back.real))
    imag_norm = float(np.linalg.norm(back.imag))
    if imag_norm > 1e-5 * max(real_norm, 1e-30):
        raise ValueError(
            f"reconstruction is not real: imaginary residue {imag_norm:.3g} "
            f"vs signal norm {real_norm:.3g}"
        )
    return Tensor(back.real.astype(np.float32))


def _hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _whole_map_periodic(img: Tensor, cfg: MptceConfig) -> np.ndarray:
    peaks = extract_periodic_peaks(dft2d(img), cfg)
    return periodic_reconstruct(peaks, img.height, img.width).data[0]


def _tiled_periodic(img: Tensor, cfg: MptceConfig) -> np.ndarray:
    """Windowed overlap-add periodic model: 50% overlapping Hann tiles.

    The map is wrap-padded by half a tile (periodic continuation, matching
    the DFT's circular convention) so every original pixel receives full
    window coverage; periodic Hann at hop T/2 sums to one, making the
    overlap-add exact.  Tiles are visited in a fixed row-major order.
    """
    t = cfg.tile
    h, w = img.height, img.width
    if t > h or t > w:
        raise ValueError(f"tile {t} larger than map {h}x{w}")
    hop = t // 2
    pad_b = hop + ((-h) % hop)
    pad_r = hop + ((-w) % hop)
    padded = np.pad(img.data[0].astype(np.float64), ((hop, pad_b), (hop, pad_r)),
                    mode="wrap")
    win = np.outer(_hann_periodic(t), _hann_periodic(t))
    acc = np.zeros_like(padded)
    wacc = np.zeros_like(padded)
    ph, pw = padded.shape
    for py in range(0, ph - t + 1, hop):
        for px in range(0, pw - t + 1, hop):
            tile = padded[py:py + t, px:px + t] * win
            peaks = extract_periodic_peaks(Spectrum(t, t, np.fft.fft2(tile)), cfg)
            recon = periodic_reconstruct(peaks, t, t).data[0]
            acc[py:py + t, px:px + t] += recon
            wacc[py:py + t, px:px + t] += win
    per = acc / np.maximum(wacc, 1e-12)
    return per[hop:hop + h, hop:hop + w].astype(np.float32)


def disturbance_map(f: Tensor, cfg: MptceConfig) -> Tensor:
    """Spatial residual magnitude ``D = |f - f_periodic|`` of one channel.

    The periodic component is reconstructed from the retained peaks and
    subtracted in the spatial domain, so the gradient of ``D`` is defined on
    the pixel grid.  ``D >= 0`` everywhere; it vanishes when the retained
    peaks model the signal completely.
    """
    _require_single_channel(f, "disturbance_map")
    if cfg.tile is None:
        per = _whole_map_periodic(f, cfg)
    else:
        per = _tiled_periodic(f, cfg)
    d = np.abs(f.data[0].astype(np.float64) - per.astype(np.float64))
    return Tensor(d.astype(np.float32))


def boundary_attention(d: Tensor, cfg: MptceConfig) -> Tensor:
    """Attention from disturbance boundaries: ``A = sigmoid(conv(|grad D|))``.

    The gradient magnitude uses the configured kernel (Sobel by default,
    central difference otherwise) with replicate-edge padding.
    """
    _require_single_channel(d, "boundary_attention")
    if cfg.bca_conv.out_channels != 1:
        raise ValueError(
            f"bca_conv must emit one channel, got {cfg.bca_conv.out_channels}"
        )
    if cfg.bca_conv.in_channels != 1:
        raise ValueError(
            f"bca_conv must take one channel, got {cfg.bca_conv.in_channels}"
        )
    b = backend.grad_magnitude(d.data[0], cfg.gradient_kernel)
    return sigmoid_map(conv2d(Tensor(b), cfg.bca_conv))


def enhancement_fields(f: Tensor, cfg: MptceConfig, workers: int = 1) -> tuple[Tensor, Tensor]:
    """Channel-averaged disturbance map and attention map for ``f``.

    Per-channel disturbance maps are averaged (fixed order) into one spatial
    map, which feeds the boundary attention.  ``workers`` parallelizes the
    per-channel transforms only; the result is independent of worker count.
    """
    channels = [Tensor(f.data[c][np.newaxis], dtype=f.dtype) for c in range(f.channels)]
    if workers > 1 and f.channels > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            maps = list(pool.map(lambda ch: disturbance_map(ch, cfg), channels))
    else:
        maps = [disturbance_map(ch, cfg) for ch in channels]
    stacked = np.stack([m.data[0] for m in maps])
    d_mean = Tensor(stacked.mean(axis=0))
    a = boundary_attention(d_mean, cfg)
    if (a.height, a.width) != (f.height, f.width):
        raise ValueError(
            f"attention map {a.height}x{a.width} does not match input "
            f"{f.height}x{f.width}; bca_conv must preserve spatial size"
        )
    return d_mean, a


def mptce_enhance(f: Tensor, cfg: MptceConfig, workers: int = 1) -> Tensor:
    """Gated enhancement ``F + alpha * A (*) F``.

    The single attention channel broadcasts across all channels of ``F``.
    ``alpha=0`` returns the input bit-identically.
    """
    if cfg.alpha == 0.0:
        return f.copy()
    _, a = enhancement_fields(f, cfg, workers=workers)
    out = f.data + np.float32(cfg.alpha) * (a.data * f.data)
    return Tensor(out, dtype=f.dtype)
