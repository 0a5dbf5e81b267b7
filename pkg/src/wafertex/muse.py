"""Context-gated channel attention block (MUSE).

Two parallel convolution branches see the same input: a local 3x3 branch and
a surrounding branch using dilation 2.  Their concatenation is reweighted
channel-wise by an EffectiveSE gate -- global average pooling, a grouped 1x1
convolution, and a sigmoid.  Both branches preserve spatial size, so the
block maps ``[C_in, H, W]`` to ``[C_local + C_surround, H, W]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from wafertex.tensor import (
    ConvSpec,
    SigmoidOp,
    Tensor,
    concat_channels,
    conv2d,
    global_avg_pool,
    sigmoid_map,
    pointwise,
)


@dataclass(frozen=True)
class MuseBlock:
    """Weights of one context block.

    ``local``: 3x3, dilation 1, padding 1.  ``surround``: 3x3, dilation 2,
    padding 2.  ``se_conv``: grouped 1x1 over the concatenated channels.
    ``project``: optional 1x1 epilogue restoring a nominal channel width
    (disabled by default).
    """

    local: ConvSpec
    surround: ConvSpec
    se_conv: ConvSpec
    project: ConvSpec | None = None

    def __post_init__(self):
        if self.local.out_channels != self.surround.out_channels:
            raise ValueError(
                f"branch widths differ: local {self.local.out_channels} vs "
                f"surround {self.surround.out_channels}"
            )
        for name, spec, dilation, padding in (
            ("local", self.local, 1, 1),
            ("surround", self.surround, 2, 2),
        ):
            if (spec.kernel_h, spec.kernel_w) != (3, 3):
                raise ValueError(f"{name} branch must use a 3x3 kernel")
            if spec.dilation != dilation or spec.padding != padding or spec.stride != 1:
                raise ValueError(
                    f"{name} branch must have stride 1, dilation {dilation}, "
                    f"padding {padding} to preserve spatial size"
                )
        ctx = self.local.out_channels + self.surround.out_channels
        if self.se_conv.in_channels != ctx or self.se_conv.out_channels != ctx:
            raise ValueError(
                f"se_conv must map {ctx} -> {ctx} channels, got "
                f"{self.se_conv.in_channels} -> {self.se_conv.out_channels}"
            )
        if (self.se_conv.kernel_h, self.se_conv.kernel_w) != (1, 1):
            raise ValueError("se_conv must be a 1x1 convolution")
        if self.project is not None:
            if self.project.in_channels != ctx:
                raise ValueError(
                    f"projection conv input must be {ctx} channels, got "
                    f"{self.project.in_channels}"
                )
            if (self.project.kernel_h, self.project.kernel_w) != (1, 1):
                raise ValueError("projection conv must be 1x1")

    @property
    def out_channels(self) -> int:
        if self.project is not None:
            return self.project.out_channels
        return self.local.out_channels + self.surround.out_channels

    @classmethod
    def seeded(cls, in_channels: int, out_channels: int, seed: int,
               se_groups: int | None = None, project_channels: int | None = None) -> "MuseBlock":
        """Deterministic untrained block; branches split the width evenly.

        ``se_groups`` defaults to one group per channel (depthwise 1x1, the
        cheapest gate).  Sub-seeds are ``seed``..``seed+3`` for the local,
        surround, SE, and projection weights.
        """
        if out_channels % 2:
            raise ValueError(f"out_channels must be even, got {out_channels}")
        half = out_channels // 2
        if se_groups is None:
            se_groups = out_channels
        project = None
        if project_channels is not None:
            project = ConvSpec.seeded(out_channels, project_channels, 1, 1, seed=seed + 3)
        return cls(
            local=ConvSpec.seeded(in_channels, half, 3, 3, seed=seed, padding=1),
            surround=ConvSpec.seeded(in_channels, half, 3, 3, seed=seed + 1,
                                     padding=2, dilation=2),
            se_conv=ConvSpec.seeded(out_channels, out_channels, 1, 1,
                                    seed=seed + 2, groups=se_groups),
            project=project,
        )

    def weight_arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of all weights, for serialization."""
        out: dict[str, np.ndarray] = {}
        specs = [("local", self.local), ("surround", self.surround), ("se", self.se_conv)]
        if self.project is not None:
            specs.append(("project", self.project))
        for name, spec in specs:
            out[f"{name}.weights"] = spec.weights
            if spec.bias is not None:
                out[f"{name}.bias"] = spec.bias
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "MuseBlock":
        """Rebuild a block from :meth:`weight_arrays` output.

        Layout conventions (stride, padding, dilation) are fixed by the block
        type; the SE group count is inferred from the weight shape.
        """
        def conv(name: str, **kw) -> ConvSpec:
            w = arrays[f"{name}.weights"]
            out_c, cin_g, kh, kw_ = w.shape
            groups = kw.pop("groups", 1)
            return ConvSpec(cin_g * groups, out_c, kh, kw_, w,
                            bias=arrays.get(f"{name}.bias"), groups=groups, **kw)

        se_w = arrays["se.weights"]
        se_groups = se_w.shape[0] // se_w.shape[1]
        project = None
        if "project.weights" in arrays:
            project = conv("project")
        return cls(
            local=conv("local", padding=1),
            surround=conv("surround", padding=2, dilation=2),
            se_conv=conv("se", groups=se_groups),
            project=project,
        )


def effective_se(x_ctx: Tensor, se_conv: ConvSpec) -> Tensor:
    """Channel-attention weights: sigmoid(grouped 1x1 conv(GAP(x)));
    returned as ``[C, 1, 1]`` with values in (0, 1)."""
    if x_ctx.channels != se_conv.in_channels:
        raise ValueError(
            f"effective_se: input has {x_ctx.channels} channels, "
            f"conv expects {se_conv.in_channels}"
        )
    return sigmoid_map(conv2d(global_avg_pool(x_ctx), se_conv))


def _branch(name: str, fn):
    try:
        return fn()
    except ValueError as exc:
        raise ValueError(f"{name} branch: {exc}") from exc


def muse_forward(x: Tensor, block: MuseBlock) -> Tensor:
    """Run the context block: branch convs, concat, channel gate."""
    x_local = _branch("local", lambda: conv2d(x, block.local))
    x_dilated = _branch("surround", lambda: conv2d(x, block.surround))
    x_ctx = concat_channels([x_local, x_dilated])
    w = _branch("channel-attention", lambda: effective_se(x_ctx, block.se_conv))
    out = pointwise(x_ctx, w, "mul")
    if block.project is not None:
        out = _branch("projection", lambda: conv2d(out, block.project))
    return out


class MuseOp:
    """muse_forward with fixed weights, as a differentiable map for grad_check."""

    def __init__(self, block: MuseBlock):
        self.block = block

    def __call__(self, x: Tensor) -> Tensor:
        return muse_forward(x, self.block)

    def jvp(self, x: Tensor, v: Tensor) -> Tensor:
        b = self.block
        x_ctx = concat_channels([conv2d(x, b.local), conv2d(x, b.surround)])
        d_ctx = concat_channels([
            conv2d(v, b.local.without_bias()),
            conv2d(v, b.surround.without_bias()),
        ])
        z = conv2d(global_avg_pool(x_ctx), b.se_conv)
        d_z = conv2d(global_avg_pool(d_ctx), b.se_conv.without_bias())
        w = sigmoid_map(z)
        d_w = Tensor(SigmoidOp._deriv(z) * d_z.data, dtype=d_z.dtype)
        # product rule on w (x) x_ctx with [C,1,1] broadcast
        d_out = Tensor(d_ctx.data * w.data + x_ctx.data * d_w.data, dtype=d_ctx.dtype)
        if b.project is not None:
            d_out = conv2d(d_out, b.project.without_bias())
        return d_out
