"""Cylindrical convolution kernel with reflection-tied parameters.

The kernel lives on a cylinder of ``n_views`` azimuth columns assembled
from three trainable groups (side, front, rear); the side block appears
twice, once column-reversed, so kernels at mirrored azimuths are exact
horizontal mirrors and gradients into shared columns accumulate. Each
view's k x k kernel is a window of k consecutive columns of the
periodically padded cylinder, centered on that view's column.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    concat,
    flip,
    sliding_windows,
    take_wrap,
    _lift,
    _node,
)

PAD_MODES = ("wrap", "flip")


class ConfigurationError(ValueError):
    """Cylinder geometry violates its invariants."""


@dataclass
class CylindricalKernel:
    """Tied parameter groups plus the geometry needed to assemble them.

    w_side has (n_views - 2) / 2 columns; w_front and w_rear one each, so
    the distinct trainable column count is (n_views + 2) / 2.
    """

    k: int
    n_views: int
    ch_in: int
    ch_out: int
    w_side: Tensor
    w_front: Tensor
    w_rear: Tensor
    pad_mode: str = "wrap"

    def __post_init__(self):
        validate_geometry(self.k, self.n_views)
        if self.pad_mode not in PAD_MODES:
            raise ConfigurationError(f"pad_mode must be one of {PAD_MODES}, got {self.pad_mode!r}")
        m = self.n_side
        expect = {
            "w_side": (self.k, m, self.ch_in, self.ch_out),
            "w_front": (self.k, 1, self.ch_in, self.ch_out),
            "w_rear": (self.k, 1, self.ch_in, self.ch_out),
        }
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ConfigurationError(f"{name} shape {got}, expected {shape}")

    @property
    def n_side(self):
        return (self.n_views - 2) // 2

    @classmethod
    def initialize(cls, k, n_views, ch_in, ch_out, rng, pad_mode="wrap"):
        """He-style fan-in Gaussian init over the k x k x ch_in receptive field."""
        validate_geometry(k, n_views)
        std = np.sqrt(2.0 / (k * k * ch_in))
        m = (n_views - 2) // 2

        def block(cols):
            return Tensor(rng.normal(0.0, std, (k, cols, ch_in, ch_out)), requires_grad=True)

        return cls(k, n_views, ch_in, ch_out, block(m), block(1), block(1), pad_mode)

    def parameters(self):
        return {"side": self.w_side, "front": self.w_front, "rear": self.w_rear}

    def param_count(self):
        """Distinct trainable scalars: k * ((n_views + 2) / 2) * ch_in * ch_out."""
        return self.w_side.size + self.w_front.size + self.w_rear.size


def validate_geometry(k, n_views):
    if k < 1 or k % 2 == 0:
        raise ConfigurationError(f"kernel size k must be odd and positive, got {k}")
    if n_views % 2 != 0 or n_views < k:
        raise ConfigurationError(f"n_views must be even and >= k, got n_views={n_views}, k={k}")


def build_cylinder(kernel):
    """Assemble the full cylinder [side, front, reversed(side), rear].

    Shape (k, n_views, ch_in, ch_out). Columns m+j and m-j (m = n_side)
    reference the same stored side column, so backward accumulates their
    gradients into one parameter.
    """
    return concat(
        [kernel.w_side, kernel.w_front, flip(kernel.w_side, axis=1), kernel.w_rear],
        axis=1,
    )


def pad_cylinder(full, pad_mode="wrap"):
    """Pad floor(k/2) columns on each side so every view window is in range.

    wrap: true circular continuation (left pad = last columns in order,
    right pad = first columns in order). flip: each pad block is the
    horizontally flipped copy of its own end block.
    """
    full = _lift(full) if not isinstance(full, Tensor) else full
    if full.ndim != 4:
        raise DimensionError(f"cylinder must be rank 4, got {full.ndim}")
    k = full.shape[0]
    n = full.shape[1]
    h = k // 2
    if pad_mode not in PAD_MODES:
        raise ConfigurationError(f"pad_mode must be one of {PAD_MODES}, got {pad_mode!r}")
    if h == 0:
        return full
    if pad_mode == "wrap":
        return take_wrap(full, np.arange(-h, n + h), axis=1)
    left = flip(full[:, :h], axis=1)
    right = flip(full[:, n - h:], axis=1)
    return concat([left, full, right], axis=1)


def extract_view_kernel(padded, v):
    """The k x k x ch_in x ch_out kernel window centered on cylinder column v."""
    k = padded.shape[0]
    n_views = padded.shape[1] - 2 * (k // 2)
    if not 0 <= v < n_views:
        raise IndexError(f"view {v} out of range [0, {n_views})")
    return padded[:, v:v + k]


def assemble_windows(kernel):
    """All n_views view kernels stacked: (n_views, k, k, ch_in, ch_out)."""
    padded = pad_cylinder(build_cylinder(kernel), kernel.pad_mode)
    return sliding_windows(padded, axis=1, size=kernel.k)


def mirror_view(v, n_views):
    """Azimuth bin whose kernel is the horizontal mirror of bin v's kernel."""
    m = (n_views - 2) // 2
    return (2 * m - v) % n_views


@dataclass
class ViewFeatures:
    """Per-view feature vectors, (n_views, ch_out)."""

    values: Tensor


def contract_windows(x, windows):
    """F[..., v, o] = sum_{r,c,i} windows[v,r,c,i,o] * x[..., r,c,i].

    The forward pass accumulates over the flattened (row, col, channel)
    index in ascending order, one fused multiply-add step at a time, so the
    result is bit-identical to a naive ordered triple loop. The backward
    pass uses BLAS contractions.
    """
    x = _lift(x)
    windows = _lift(windows)
    if windows.ndim != 5:
        raise DimensionError("windows must be rank 5 (views, k, k, ch_in, ch_out)")
    n_views, k1, k2, cin, cout = windows.shape
    if x.shape[-3:] != (k1, k2, cin):
        raise DimensionError(f"input window {x.shape[-3:]} != kernel window {(k1, k2, cin)}")
    if x.ndim not in (3, 4):
        raise DimensionError("x must be (k, k, ch_in) or batched (B, k, k, ch_in)")
    batched = x.ndim == 4
    kk = k1 * k2 * cin

    xf = x.data.reshape((-1, kk) if batched else (kk,))
    wf = windows.data.reshape(n_views, kk, cout)
    if batched:
        out = np.zeros((xf.shape[0], n_views, cout))
        tmp = np.empty_like(out)
        for j in range(kk):
            np.multiply(xf[:, j, None, None], wf[None, :, j, :], out=tmp)
            np.add(out, tmp, out=out)
    else:
        out = np.zeros((n_views, cout))
        tmp = np.empty_like(out)
        for j in range(kk):
            np.multiply(wf[:, j, :], xf[j], out=tmp)
            np.add(out, tmp, out=out)

    def vjp(g):
        if batched:
            gx = np.tensordot(g, wf, axes=([1, 2], [0, 2])).reshape(x.shape)
            gw = np.tensordot(g, xf, axes=([0], [0])).transpose(0, 2, 1).reshape(windows.shape)
        else:
            gx = np.tensordot(g, wf, axes=([0, 1], [0, 2])).reshape(x.shape)
            gw = (g[:, None, :] * xf[None, :, None]).reshape(windows.shape)
        return gx, gw

    return _node(out, (x, windows), vjp)


def contract_windows_fast(x, windows):
    """Same contraction as contract_windows via one BLAS call.

    Training throughput path; agrees with the canonically ordered forward
    to floating-point reassociation (~1e-13 relative), which the tests
    pin down. Gradients are identical.
    """
    x = _lift(x)
    windows = _lift(windows)
    if windows.ndim != 5:
        raise DimensionError("windows must be rank 5 (views, k, k, ch_in, ch_out)")
    n_views, k1, k2, cin, cout = windows.shape
    if x.shape[-3:] != (k1, k2, cin):
        raise DimensionError(f"input window {x.shape[-3:]} != kernel window {(k1, k2, cin)}")
    if x.ndim not in (3, 4):
        raise DimensionError("x must be (k, k, ch_in) or batched (B, k, k, ch_in)")
    batched = x.ndim == 4
    kk = k1 * k2 * cin

    xf = x.data.reshape((-1, kk) if batched else (kk,))
    wf = windows.data.reshape(n_views, kk, cout)
    if batched:
        out = np.tensordot(xf, wf, axes=([1], [1]))          # (B, n_views, cout)
    else:
        out = np.tensordot(wf, xf, axes=([1], [0]))          # (n_views, cout)

    def vjp(g):
        if batched:
            gx = np.tensordot(g, wf, axes=([1, 2], [0, 2])).reshape(x.shape)
            gw = np.tensordot(g, xf, axes=([0], [0])).transpose(0, 2, 1).reshape(windows.shape)
        else:
            gx = np.tensordot(g, wf, axes=([0, 1], [0, 2])).reshape(x.shape)
            gw = (g[:, None, :] * xf[None, :, None]).reshape(windows.shape)
        return gx, gw

    return _node(out, (x, windows), vjp)


def view_specific_features(x, kernel):
    """Per-view features of one k x k x ch_in input under the tied cylinder."""
    x = _lift(x) if not isinstance(x, Tensor) else x
    if x.shape != (kernel.k, kernel.k, kernel.ch_in):
        raise DimensionError(
            f"input shape {x.shape} != (k, k, ch_in) = {(kernel.k, kernel.k, kernel.ch_in)}"
        )
    return ViewFeatures(values=contract_windows(x, assemble_windows(kernel)))
