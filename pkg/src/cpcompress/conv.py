"""Convolution forward passes, direct and factorized, plus pooling/activation.

The direct path evaluates a (T, S, D, D) kernel against a (S, W, H) input
the obvious way (via patch extraction and one matrix product).  The
factorized path runs three cheaper stages instead:

  1. a 1x1 convolution mixing S input channels down to R (stride 1, no pad),
  2. a per-channel D x D spatial convolution carrying the stride and padding,
  3. a 1x1 convolution mixing R channels up to T outputs.

Stage 2 is depthwise: channel r of its output depends only on channel r of
its input.  For any factors, the pipeline output equals the direct
convolution with the reconstructed kernel, up to float rounding.

Every op optionally takes a :class:`MultiplyCounter`; when given, it is
incremented with the exact number of scalar multiplications the plain
nested-loop evaluation would perform.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .cp import CpFactors
from .tensor import DenseTensor

__all__ = [
    "ConvSpec",
    "MultiplyCounter",
    "conv_forward",
    "conv_forward_decomposed",
    "fc_forward",
    "relu",
    "max_pool",
]


class MultiplyCounter:
    """Running total of scalar multiplications performed by instrumented ops."""

    __slots__ = ("count",)

    def __init__(self):
        self.count = 0

    def add(self, n: int):
        self.count += int(n)

    def __repr__(self):
        return f"MultiplyCounter(count={self.count})"


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution layer.

    Kernels are square with odd extent.  Output extents must come out as
    positive integers: (W + 2*padding - kernel_size) divisible by stride.
    With groups > 1 the input and output channels split into independent
    blocks; the kernel then has in_channels/groups channels per filter.
    """

    out_channels: int
    in_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.out_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and positive")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")
        if self.groups < 1:
            raise ValueError("groups must be >= 1")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError("channel counts must be divisible by groups")

    def output_extent(self, extent: int) -> int:
        span = extent + 2 * self.padding - self.kernel_size
        if span < 0 or span % self.stride:
            raise ValueError(
                f"input extent {extent} with kernel {self.kernel_size}, "
                f"stride {self.stride}, padding {self.padding} does not give "
                "an integral output extent"
            )
        return span // self.stride + 1

    @property
    def kernel_shape(self) -> tuple:
        return (
            self.out_channels,
            self.in_channels // self.groups,
            self.kernel_size,
            self.kernel_size,
        )

    @property
    def weight_count(self) -> int:
        t, s_g, d, _ = self.kernel_shape
        return t * s_g * d * d


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p)))


def _patches(xpad: np.ndarray, d: int, stride: int, wout: int, hout: int) -> np.ndarray:
    """(C, Wp, Hp) -> (C*d*d, wout*hout) patch matrix in kernel-flatten order."""
    win = sliding_window_view(xpad, (d, d), axis=(1, 2))[:, ::stride, ::stride]
    win = win[:, :wout, :hout]
    c = xpad.shape[0]
    return win.transpose(0, 3, 4, 1, 2).reshape(c * d * d, wout * hout)


def conv_forward(
    x: DenseTensor,
    kernel: DenseTensor,
    spec: ConvSpec,
    counter: MultiplyCounter | None = None,
) -> DenseTensor:
    """Direct convolution of a (S, W, H) input with a (T, S/g, D, D) kernel."""
    xa = x.array
    ka = kernel.array
    if xa.ndim != 3:
        raise ValueError(f"input must be 3-way, got {xa.ndim}-way")
    if ka.shape != spec.kernel_shape:
        raise ValueError(f"kernel shape {ka.shape} does not match {spec.kernel_shape}")
    if xa.shape[0] != spec.in_channels:
        raise ValueError(
            f"input has {xa.shape[0]} channels, spec wants {spec.in_channels}"
        )
    _, w, h = xa.shape
    wout = spec.output_extent(w)
    hout = spec.output_extent(h)
    d = spec.kernel_size
    g = spec.groups
    s_g = spec.in_channels // g
    t_g = spec.out_channels // g

    xpad = _pad2d(xa, spec.padding)
    out = np.empty((spec.out_channels, wout, hout))
    for gi in range(g):
        cols = _patches(xpad[gi * s_g : (gi + 1) * s_g], d, spec.stride, wout, hout)
        kmat = ka[gi * t_g : (gi + 1) * t_g].reshape(t_g, s_g * d * d)
        out[gi * t_g : (gi + 1) * t_g] = (kmat @ cols).reshape(t_g, wout, hout)
        if counter is not None:
            counter.add(t_g * s_g * d * d * wout * hout)
    return DenseTensor.from_array(out)


def _as_group_factors(factors, spec: ConvSpec) -> tuple:
    if isinstance(factors, CpFactors):
        factors = (factors,)
    factors = tuple(factors)
    if len(factors) != spec.groups:
        raise ValueError(f"expected {spec.groups} factor groups, got {len(factors)}")
    s_g = spec.in_channels // spec.groups
    t_g = spec.out_channels // spec.groups
    for f in factors:
        if f.in_channels != s_g or f.out_channels != t_g:
            raise ValueError(
                f"factor channels ({f.out_channels}, {f.in_channels}) do not "
                f"match spec group shape ({t_g}, {s_g})"
            )
        if f.kernel_size != spec.kernel_size:
            raise ValueError("factor kernel size does not match spec")
    return factors


def _mix_channels(weights: np.ndarray, x: np.ndarray) -> np.ndarray:
    """1x1 convolution: (OUT, IN) weights against (IN, W, H)."""
    return np.tensordot(weights, x, axes=([1], [0]))


def _depthwise(
    z: np.ndarray, filters: np.ndarray, stride: int, padding: int, wout: int, hout: int
) -> np.ndarray:
    """Per-channel D x D convolution of (R, W, H) with (R, D, D) filters."""
    d = filters.shape[1]
    zpad = _pad2d(z, padding)
    win = sliding_window_view(zpad, (d, d), axis=(1, 2))[:, ::stride, ::stride]
    win = win[:, :wout, :hout]
    return np.einsum("rwhji,rji->rwh", win, filters)


def conv_forward_decomposed(
    x: DenseTensor,
    factors,
    spec: ConvSpec,
    counter: MultiplyCounter | None = None,
) -> DenseTensor:
    """Three-stage factorized convolution; matches conv_forward on the
    reconstructed kernel up to rounding.

    `factors` is a CpFactors, or a sequence of them (one per group) when
    spec.groups > 1.
    """
    xa = x.array
    if xa.ndim != 3:
        raise ValueError(f"input must be 3-way, got {xa.ndim}-way")
    if xa.shape[0] != spec.in_channels:
        raise ValueError(
            f"input has {xa.shape[0]} channels, spec wants {spec.in_channels}"
        )
    groups = _as_group_factors(factors, spec)
    _, w, h = xa.shape
    wout = spec.output_extent(w)
    hout = spec.output_extent(h)
    d = spec.kernel_size
    s_g = spec.in_channels // spec.groups
    t_g = spec.out_channels // spec.groups

    parts = []
    for gi, f in enumerate(groups):
        xg = xa[gi * s_g : (gi + 1) * s_g]
        r = f.rank
        z = _mix_channels(f.u1, xg)
        assert z.shape == (r, w, h)
        z2 = _depthwise(z, f.u2, spec.stride, spec.padding, wout, hout)
        assert z2.shape == (r, wout, hout)
        parts.append(_mix_channels(f.u3, z2))
        if counter is not None:
            counter.add(r * s_g * w * h)
            counter.add(r * d * d * wout * hout)
            counter.add(t_g * r * wout * hout)
    return DenseTensor.from_array(np.concatenate(parts, axis=0))


def fc_forward(
    x: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray | None = None,
    counter: MultiplyCounter | None = None,
) -> np.ndarray:
    """Fully connected map y = W x (+ bias) with W of shape (M out, N in).

    Orientation convention: weights[m, n] connects input n to output m.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if x.ndim != 1 or w.ndim != 2 or w.shape[1] != x.size:
        raise ValueError(f"weights {w.shape} do not apply to input of length {x.size}")
    y = w @ x
    if counter is not None:
        counter.add(w.shape[0] * w.shape[1])
    if bias is not None:
        b = np.asarray(bias, dtype=np.float64)
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias length {b.size} does not match {w.shape[0]} outputs")
        y = y + b
    return y


def relu(x: DenseTensor) -> DenseTensor:
    """Elementwise max(value, 0)."""
    return DenseTensor.from_array(np.maximum(x.array, 0.0))


def max_pool(x: DenseTensor, window: int, stride: int) -> DenseTensor:
    """Spatial max pooling over (C, W, H); windows stay fully inside the input."""
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    xa = x.array
    if xa.ndim != 3:
        raise ValueError(f"input must be 3-way, got {xa.ndim}-way")
    _, w, h = xa.shape
    if window > w or window > h:
        raise ValueError(f"window {window} exceeds spatial extent ({w}, {h})")
    wout = (w - window) // stride + 1
    hout = (h - window) // stride + 1
    win = sliding_window_view(xa, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    win = win[:, :wout, :hout]
    return DenseTensor.from_array(win.max(axis=(3, 4)))
