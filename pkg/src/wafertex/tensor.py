"""Dense feature-map tensors and the neural primitives built on them.

A :class:`Tensor` is a rank-3 ``[channels, height, width]`` array, float32 by
default (float64 is used internally by oracles and gradient checks).  All
operations are pure: inputs are never mutated, outputs are freshly allocated,
and identical inputs produce bit-identical outputs across runs.  Every public
operation verifies that its result is finite.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from wafertex import backend, rng

# float32 sigmoid saturation bounds: keeps outputs strictly inside (0, 1) even
# for huge inputs (exp would otherwise round to exactly 0 or 1).
SIGMOID_LO = 1e-30
SIGMOID_HI = float(np.nextafter(np.float32(1.0), np.float32(0.0)))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if arr.size and not np.isfinite(arr).all():
        flat = int(np.argmin(np.isfinite(arr).ravel()))
        coord = np.unravel_index(flat, arr.shape)
        raise ValueError(f"{op} produced a non-finite value at coordinate {coord}")


class Tensor:
    """Dense ``[channels, height, width]`` map of real values.

    ``data`` is a C-contiguous numpy array.  Constructing from a 2-D array
    adds a singleton channel axis.  Values must be finite.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if arr.ndim == 2:
            arr = arr[np.newaxis]
        if arr.ndim != 3:
            raise ValueError(f"tensor data must be rank 2 or 3, got rank {arr.ndim}")
        arr = np.ascontiguousarray(arr, dtype=np.float32 if dtype is None else dtype)
        _check_finite(arr, "tensor construction")
        self.data = arr

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, dtype=dtype)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(channels={self.channels}, height={self.height}, width={self.width}, dtype={self.data.dtype})"

    @classmethod
    def zeros(cls, channels: int, height: int, width: int, dtype=np.float32) -> "Tensor":
        return cls(np.zeros((channels, height, width)), dtype=dtype)

    @classmethod
    def full(cls, channels: int, height: int, width: int, value: float, dtype=np.float32) -> "Tensor":
        return cls(np.full((channels, height, width), value), dtype=dtype)

    @classmethod
    def from_flat(cls, channels: int, height: int, width: int, values) -> "Tensor":
        flat = np.asarray(values, dtype=np.float32)
        if flat.size != channels * height * width:
            raise ValueError(
                f"flat data length {flat.size} != {channels}x{height}x{width}"
            )
        return cls(flat.reshape(channels, height, width))

    @classmethod
    def random_uniform(cls, channels: int, height: int, width: int, seed: int,
                       low: float = -1.0, high: float = 1.0) -> "Tensor":
        vals = rng.uniform(seed, channels * height * width, low, high)
        return cls.from_flat(channels, height, width, vals)


@dataclass(frozen=True)
class ConvSpec:
    """2-D convolution parameters plus weights.

    Weights are shaped ``[out_channels, in_channels // groups, kernel_h,
    kernel_w]``; the optional bias has length ``out_channels``.  Convolution
    uses the cross-correlation convention (no kernel flip) with zero padding.
    """

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    weights: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        if self.dilation < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(
                f"require dilation >= 1, stride >= 1, padding >= 0; got "
                f"dilation={self.dilation} stride={self.stride} padding={self.padding}"
            )
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ValueError("kernel dims must be >= 1")
        w = np.ascontiguousarray(np.asarray(self.weights), dtype=np.float32)
        expect = (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)
        if w.shape != expect:
            raise ValueError(f"weights shape {w.shape} != expected {expect}")
        _check_finite(w, "conv weights")
        object.__setattr__(self, "weights", w)
        if self.bias is not None:
            b = np.ascontiguousarray(np.asarray(self.bias), dtype=np.float32)
            if b.shape != (self.out_channels,):
                raise ValueError(f"bias shape {b.shape} != ({self.out_channels},)")
            _check_finite(b, "conv bias")
            object.__setattr__(self, "bias", b)

    def without_bias(self) -> "ConvSpec":
        return dataclasses.replace(self, bias=None)

    def out_size(self, height: int, width: int) -> tuple[int, int]:
        """Output spatial size; floor semantics."""
        oh = (height + 2 * self.padding - self.dilation * (self.kernel_h - 1) - 1) // self.stride + 1
        ow = (width + 2 * self.padding - self.dilation * (self.kernel_w - 1) - 1) // self.stride + 1
        return oh, ow

    @classmethod
    def seeded(cls, in_channels: int, out_channels: int, kernel_h: int, kernel_w: int, *,
               seed: int, stride: int = 1, padding: int = 0, dilation: int = 1,
               groups: int = 1, bias: bool = True, scale: float = 0.1) -> "ConvSpec":
        """Deterministic untrained weights: seeded uniform in [-scale, scale]."""
        n_w = out_channels * (in_channels // groups) * kernel_h * kernel_w
        w = rng.uniform(seed, n_w, -scale, scale).reshape(
            out_channels, in_channels // groups, kernel_h, kernel_w)
        b = rng.uniform(seed, out_channels, -scale, scale, offset=n_w) if bias else None
        return cls(in_channels, out_channels, kernel_h, kernel_w, w, b,
                   stride=stride, padding=padding, dilation=dilation, groups=groups)

    @classmethod
    def identity(cls, channels: int, kernel: int = 1) -> "ConvSpec":
        """Identity map: center tap 1 on the matching channel, padding (k-1)/2."""
        if kernel % 2 == 0:
            raise ValueError("identity kernel size must be odd")
        w = np.zeros((channels, channels, kernel, kernel), dtype=np.float32)
        mid = kernel // 2
        for c in range(channels):
            w[c, c, mid, mid] = 1.0
        return cls(channels, channels, kernel, kernel, w, padding=mid)


def _matched_weights(spec: ConvSpec, dtype):
    if dtype == np.float64:
        w = spec.weights.astype(np.float64)
        b = None if spec.bias is None else spec.bias.astype(np.float64)
        return w, b
    return spec.weights, spec.bias


def conv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    """Cross-correlate ``x`` with ``spec`` (zero padding, floor output size)."""
    if x.channels != spec.in_channels:
        raise ValueError(
            f"conv2d: input has {x.channels} channels, spec expects {spec.in_channels}"
        )
    oh, ow = spec.out_size(x.height, x.width)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d: kernel extent exceeds padded input "
            f"({x.height}x{x.width} with padding {spec.padding})"
        )
    w, b = _matched_weights(spec, x.dtype)
    out = backend.conv2d_forward(x.data, w, spec.stride, spec.padding,
                                 spec.dilation, spec.groups)
    if b is not None:
        out = out + b[:, np.newaxis, np.newaxis]
    _check_finite(out, "conv2d")
    return Tensor(out, dtype=out.dtype)


def conv2d_input_grad(g: Tensor, spec: ConvSpec, in_h: int, in_w: int) -> Tensor:
    """Backward of conv2d w.r.t. its input: the adjoint applied to ``g``."""
    w, _ = _matched_weights(spec, g.dtype)
    dx = backend.conv2d_input_grad(g.data, w, spec.stride, spec.padding,
                                   spec.dilation, spec.groups, in_h, in_w)
    _check_finite(dx, "conv2d_input_grad")
    return Tensor(dx, dtype=dx.dtype)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate every pixel into a ``factor x factor`` block."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x.copy()
    out = backend.upsample_nearest(x.data, factor)
    return Tensor(out, dtype=out.dtype)


def upsample_nearest_grad(g: Tensor, factor: int) -> Tensor:
    """Backward of nearest upsampling: sum over each factor x factor block."""
    if factor == 1:
        return g.copy()
    c, fh, fw = g.shape
    h, w = fh // factor, fw // factor
    dx = g.data.reshape(c, h, factor, w, factor).sum(axis=(2, 4))
    return Tensor(dx, dtype=g.dtype)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel mean, returned as shape ``[channels, 1, 1]``."""
    if x.height < 1 or x.width < 1 or x.channels < 1:
        raise ValueError(f"global_avg_pool: empty tensor {x.shape}")
    out = x.data.mean(axis=(1, 2), keepdims=True)
    _check_finite(out, "global_avg_pool")
    return Tensor(out, dtype=out.dtype)


def global_avg_pool_grad(g: Tensor, height: int, width: int) -> Tensor:
    """Backward of global average pooling."""
    scale = 1.0 / (height * width)
    dx = np.broadcast_to(g.data * scale, (g.channels, height, width))
    return Tensor(np.ascontiguousarray(dx), dtype=g.dtype)


def _broadcast_ok(x: Tensor, y: Tensor) -> bool:
    return y.shape == x.shape or y.shape == (x.channels, 1, 1)


def pointwise(x: Tensor, y: Tensor, kind: str) -> Tensor:
    """Elementwise add/mul; ``y`` may be ``[C,1,1]`` (channel broadcast)."""
    if kind not in ("add", "mul"):
        raise ValueError(f"pointwise kind must be add or mul, got {kind!r}")
    if not _broadcast_ok(x, y):
        raise ValueError(
            f"pointwise: incompatible shapes {x.shape} vs {y.shape} "
            f"(need equal shapes or [C,1,1] second operand)"
        )
    out = x.data + y.data if kind == "add" else x.data * y.data
    _check_finite(out, f"pointwise {kind}")
    return Tensor(out, dtype=out.dtype)


def sigmoid_map(x: Tensor) -> Tensor:
    """Elementwise logistic sigmoid, saturating to (0, 1).

    Computed in the overflow-free split form; results are clamped to
    ``[SIGMOID_LO, SIGMOID_HI]`` so extreme inputs saturate instead of
    rounding to exactly 0 or 1.
    """
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)
    np.clip(out, SIGMOID_LO, SIGMOID_HI, out=out)
    return Tensor(out, dtype=out.dtype)


def concat_channels(parts: list[Tensor]) -> Tensor:
    """Stack tensors along the channel axis; spatial sizes must agree."""
    if not parts:
        raise ValueError("concat_channels: need at least one tensor")
    hw = {(t.height, t.width) for t in parts}
    if len(hw) != 1:
        raise ValueError(f"concat_channels: spatial sizes differ: {sorted(hw)}")
    out = np.concatenate([t.data for t in parts], axis=0)
    return Tensor(out, dtype=out.dtype)


# ---------------------------------------------------------------------------
# Differentiable-op handles for grad_check.  Each wraps a fixed-parameter
# Tensor -> Tensor map and provides the analytic forward-mode product `jvp`
# and (where listed in the contract) the adjoint `vjp`.

class ConvOp:
    def __init__(self, spec: ConvSpec):
        self.spec = spec

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.spec)

    def jvp(self, x: Tensor, v: Tensor) -> Tensor:
        return conv2d(v, self.spec.without_bias())

    def vjp(self, x: Tensor, g: Tensor) -> Tensor:
        return conv2d_input_grad(g, self.spec, x.height, x.width)


class PointwiseOp:
    """pointwise(x, other, kind) viewed as a function of x alone."""

    def __init__(self, other: Tensor, kind: str):
        self.other = other
        self.kind = kind

    def __call__(self, x: Tensor) -> Tensor:
        return pointwise(x, self.other, self.kind)

    def jvp(self, x: Tensor, v: Tensor) -> Tensor:
        if self.kind == "add":
            return v.copy()
        return pointwise(v, self.other, "mul")

    def vjp(self, x: Tensor, g: Tensor) -> Tensor:
        if self.kind == "add":
            return g.copy()
        return pointwise(g, self.other, "mul")


class SigmoidOp:
    def __call__(self, x: Tensor) -> Tensor:
        return sigmoid_map(x)

    @staticmethod
    def _deriv(x: Tensor) -> np.ndarray:
        s = sigmoid_map(x).data
        return s * (1.0 - s)

    def jvp(self, x: Tensor, v: Tensor) -> Tensor:
        return Tensor(self._deriv(x) * v.data, dtype=v.dtype)

    def vjp(self, x: Tensor, g: Tensor) -> Tensor:
        return Tensor(self._deriv(x) * g.data, dtype=g.dtype)


class GapOp:
    def __call__(self, x: Tensor) -> Tensor:
        return global_avg_pool(x)

    def jvp(self, x: Tensor, v: Tensor) -> Tensor:
        return global_avg_pool(v)

    def vjp(self, x: Tensor, g: Tensor) -> Tensor:
        return global_avg_pool_grad(g, x.height, x.width)


class UpsampleOp:
    def __init__(self, factor: int):
        self.factor = factor

    def __call__(self, x: Tensor) -> Tensor:
        return upsample_nearest(x, self.factor)

    def jvp(self, x: Tensor, v: Tensor) -> Tensor:
        return upsample_nearest(v, self.factor)

    def vjp(self, x: Tensor, g: Tensor) -> Tensor:
        return upsample_nearest_grad(g, self.factor)


def grad_check(op, x: Tensor, eps: float, samples: int = 6, seed: int = 0) -> float:
    """Compare the op's analytic Jacobian-vector products to central differences.

    For ``samples`` input coordinates (chosen deterministically from ``seed``)
    the column of the Jacobian along that coordinate is computed analytically
    via ``op.jvp`` and numerically via a central difference with step ``eps``.
    Returns the max over all sampled entries of
    ``|analytic - fd| / (|fd| + 1e-8)``.  Evaluation runs in float64; the op
    itself reports any non-finite intermediate with its coordinate.
    """
    if eps <= 0:
        raise ValueError(f"grad_check eps must be > 0, got {eps}")
    x64 = x.astype(np.float64)
    size = x64.data.size
    if size == 0:
        raise ValueError("grad_check: empty input tensor")
    coords = np.unique(rng.raw_stream(seed, samples) % np.uint64(size)).astype(np.int64)
    worst = 0.0
    for flat in coords:
        e = np.zeros(size, dtype=np.float64)
        e[flat] = 1.0
        e = e.reshape(x64.shape)
        fp = op(Tensor(x64.data + eps * e, dtype=np.float64))
        fm = op(Tensor(x64.data - eps * e, dtype=np.float64))
        fd = (fp.data - fm.data) / (2.0 * eps)
        an = op.jvp(x64, Tensor(e, dtype=np.float64)).data
        err = float(np.max(np.abs(an - fd) / (np.abs(fd) + 1e-8)))
        worst = max(worst, err)
    return worst
