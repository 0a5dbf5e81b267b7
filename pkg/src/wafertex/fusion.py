"""High-resolution branch fusion and sampling feasibility.

Small defects disappear once the feature stride exceeds half the defect
width; :func:`nyquist_min_scale` makes that check explicit.  :func:`p2_fuse`
implements the high-resolution branch insertion (1x1 channel alignment,
nearest upsampling, element-wise addition or channel concat with the coarser
map), and :func:`tri_domain_fuse` combines the three enhanced feature domains.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from wafertex.tensor import ConvSpec, Tensor, concat_channels, conv2d, pointwise, upsample_nearest

PYRAMID_STRIDES = (2, 4, 8, 16, 32)

# Two samples across a pattern is the minimum for it to survive resampling.
MIN_SAMPLES_PER_PATTERN = 2.0


class NyquistReport(NamedTuple):
    feasible: bool
    ratio: float  # raw defect_width / stride, for inspection
    largest_feasible_stride: int | None


def nyquist_min_scale(defect_width: float, stride: int) -> NyquistReport:
    """Check whether a defect of the given pixel width survives at a stride.

    Feasible iff ``defect_width / stride >= 2`` (at least two samples across
    the pattern).  The raw ratio and the largest feasible pyramid stride are
    reported alongside the verdict.
    """
    if defect_width <= 0:
        raise ValueError(f"defect width must be positive, got {defect_width}")
    if stride not in PYRAMID_STRIDES:
        raise ValueError(f"stride must be one of {PYRAMID_STRIDES}, got {stride}")
    ratio = defect_width / stride
    candidates = [s for s in PYRAMID_STRIDES if defect_width / s >= MIN_SAMPLES_PER_PATTERN]
    return NyquistReport(
        feasible=ratio >= MIN_SAMPLES_PER_PATTERN,
        ratio=ratio,
        largest_feasible_stride=max(candidates) if candidates else None,
    )


@dataclass(frozen=True)
class FusionConfig:
    """High-resolution branch: 1x1 alignment conv, upsample factor, combiner."""

    align_conv: ConvSpec
    upsample_factor: int
    combine: str = "add"

    def __post_init__(self):
        if self.align_conv.kernel_h != 1 or self.align_conv.kernel_w != 1:
            raise ValueError(
                f"alignment conv must be 1x1, got "
                f"{self.align_conv.kernel_h}x{self.align_conv.kernel_w}"
            )
        if self.upsample_factor < 1:
            raise ValueError(f"upsample factor must be >= 1, got {self.upsample_factor}")
        if self.combine not in ("add", "concat"):
            raise ValueError(f"combine must be add or concat, got {self.combine!r}")


def p2_fuse(c2: Tensor, p3: Tensor, cfg: FusionConfig) -> Tensor:
    """Fuse the high-resolution map into the coarser one.

    ``c2`` is aligned by the 1x1 conv, upsampled, then combined with ``p3``:
    element-wise addition (``combine=add``) or channel concatenation
    (``combine=concat``).
    """
    aligned = upsample_nearest(conv2d(c2, cfg.align_conv), cfg.upsample_factor)
    if cfg.combine == "add":
        if aligned.shape != p3.shape:
            raise ValueError(
                f"p2_fuse(add): aligned branch shape {aligned.shape} does not "
                f"match target shape {p3.shape}"
            )
        return pointwise(aligned, p3, "add")
    if (aligned.height, aligned.width) != (p3.height, p3.width):
        raise ValueError(
            f"p2_fuse(concat): aligned branch spatial size "
            f"{(aligned.height, aligned.width)} does not match target "
            f"{(p3.height, p3.width)}"
        )
    return concat_channels([aligned, p3])


def tri_domain_fuse(f_geom: Tensor, f_context: Tensor, f_texture: Tensor,
                    mode: str = "concat", projection: ConvSpec | None = None) -> Tensor:
    """Combine the geometric, contextual, and texture feature domains.

    ``sum`` adds the three maps (equal shapes required; exactly permutation
    invariant).  ``concat`` stacks them along channels, optionally followed by
    a 1x1 projection conv.
    """
    parts = [f_geom, f_context, f_texture]
    if mode == "sum":
        shapes = {t.shape for t in parts}
        if len(shapes) != 1:
            raise ValueError(f"tri_domain_fuse(sum): shapes differ: {sorted(shapes)}")
        # accumulate in double so the three-way sum is order-independent,
        # then round once
        acc = f_geom.data.astype(np.float64) + f_context.data + f_texture.data
        out = Tensor(acc.astype(f_geom.dtype), dtype=f_geom.dtype)
    elif mode == "concat":
        out = concat_channels(parts)
    else:
        raise ValueError(f"mode must be sum or concat, got {mode!r}")
    if projection is not None:
        if projection.kernel_h != 1 or projection.kernel_w != 1:
            raise ValueError("fusion projection conv must be 1x1")
        out = conv2d(out, projection)
    return out
