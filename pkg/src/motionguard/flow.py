"""Differentiable Horn-Schunck optical flow with a truncatable iteration budget.

The estimator runs a fixed number of fixed-point iterations from zero flow.
When the estimate participates in a differentiation graph only the first
`iters_gradient` iterations are traced, which keeps attack/defense gradients
well-behaved while inference uses the full `iters_inference` budget.

All pairs of a clip are estimated in one stacked pass (arrays shaped
(pairs, H, W)), on either a tape (differentiable) or plain numpy. Both
paths execute the same kernels in the same order, so they agree bit-for-bit
when the iteration budgets match.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad


REC601 = (0.299, 0.587, 0.114)


class FlowError(Exception):
    pass


class FlowFormatError(FlowError):
    """Malformed .flo file."""


@dataclass
class FlowConfig:
    alpha: float = 0.1  # smoothness weight of the energy, for [0,1] intensities
    iters_inference: int = 64
    iters_gradient: int = 2
    luminance: tuple = REC601

    def validate(self):
        if not (1 <= self.iters_gradient <= self.iters_inference):
            raise FlowError("need 1 <= iters_gradient <= iters_inference")


@dataclass
class FlowField:
    field: np.ndarray  # (H, W, 2), channels (u, v) in pixels
    tensor: object = None  # DiffTensor of the truncated estimate, if traced


@dataclass
class FlowStack:
    fields: np.ndarray  # (pairs, H, W, 2)
    direction: str = "forward"
    tensor: object = None

    @property
    def count(self):
        return self.fields.shape[0]


# ---------------------------------------------------------------------------
# Dual-backend kernels: the tape and the raw-numpy paths share these exact
# numpy call sequences, guaranteeing bit-identical values.
# ---------------------------------------------------------------------------


class _NumpyOps:
    """Raw ndarray twin of the tape primitives used by the solver."""

    @staticmethod
    def lum(frames, weights):
        return frames @ np.asarray(weights, dtype=frames.dtype)

    add = staticmethod(lambda a, b: a + b)
    sub = staticmethod(lambda a, b: a - b)
    mul = staticmethod(lambda a, b: a * b)
    div = staticmethod(lambda a, b: a / b)
    scale = staticmethod(lambda a, s: a * s)

    @staticmethod
    def ddx(a):
        return (ad._shift1_fwd(a, -1, 1) - ad._shift1_fwd(a, -1, -1)) * 0.5

    @staticmethod
    def ddy(a):
        return (ad._shift1_fwd(a, -2, 1) - ad._shift1_fwd(a, -2, -1)) * 0.5

    @staticmethod
    def avg4(a):
        # grouping matches the tape path so both round identically
        return (
            (ad._shift1_fwd(a, -2, -1) + ad._shift1_fwd(a, -2, 1))
            + (ad._shift1_fwd(a, -1, -1) + ad._shift1_fwd(a, -1, 1))
        ) * 0.25

    @staticmethod
    def stack_uv(u, v):
        return np.stack([u, v], axis=-1)


class _TapeOps:
    """Tape-recorded implementation of the same kernel set."""

    @staticmethod
    def lum(frames, weights):
        return ad.channel_weighted_sum(frames, weights)

    add = staticmethod(ad.add)
    sub = staticmethod(ad.sub)
    mul = staticmethod(ad.mul)
    div = staticmethod(ad.div)
    scale = staticmethod(lambda a, s: ad.mul(a, s))

    @staticmethod
    def ddx(a):
        return ad.mul(ad.sub(ad.shift2d(a, 0, 1), ad.shift2d(a, 0, -1)), 0.5)

    @staticmethod
    def ddy(a):
        return ad.mul(ad.sub(ad.shift2d(a, 1, 0), ad.shift2d(a, -1, 0)), 0.5)

    @staticmethod
    def avg4(a):
        return ad.mul(
            ad.add(
                ad.add(ad.shift2d(a, -1, 0), ad.shift2d(a, 1, 0)),
                ad.add(ad.shift2d(a, 0, -1), ad.shift2d(a, 0, 1)),
            ),
            0.25,
        )

    stack_uv = staticmethod(ad.stack_last)


def _resolve_luminance(config, channels):
    if len(config.luminance) == channels:
        return config.luminance
    return (1.0 / channels,) * channels


def _hs_core(ops, frames1, frames2, config, iters):
    """Shared Horn-Schunck loop over stacked frame pairs (P, H, W, C)."""
    shape = frames1.values.shape if hasattr(frames1, "values") else frames1.shape
    weights = _resolve_luminance(config, shape[-1])
    l1 = ops.lum(frames1, weights)
    l2 = ops.lum(frames2, weights)
    iavg = ops.scale(ops.add(l1, l2), 0.5)
    ix = ops.ddx(iavg)
    iy = ops.ddy(iavg)
    it = ops.sub(l2, l1)
    den = ops.add(ops.add(ops.mul(ix, ix), ops.mul(iy, iy)), config.alpha**2)
    # zero-flow init: the first update reduces to -I_d * It / den
    num = ops.div(it, den)
    u = ops.scale(ops.mul(ix, num), -1.0)
    v = ops.scale(ops.mul(iy, num), -1.0)
    for _ in range(iters - 1):
        ub = ops.avg4(u)
        vb = ops.avg4(v)
        num = ops.div(ops.add(ops.add(ops.mul(ix, ub), ops.mul(iy, vb)), it), den)
        u = ops.sub(ub, ops.mul(ix, num))
        v = ops.sub(vb, ops.mul(iy, num))
    return ops.stack_uv(u, v)


def estimate_stack_diff(frames1, frames2, config, iters=None):
    """Traced estimation of stacked pairs; frames are DiffTensors (P,H,W,C).

    Returns the (P, H, W, 2) DiffTensor after `iters` (default
    config.iters_gradient) traced iterations.
    """
    config.validate()
    return _hs_core(
        _TapeOps, frames1, frames2, config, iters or config.iters_gradient
    )


def estimate_stack_np(frames1, frames2, config, iters=None):
    """Plain-numpy estimation of stacked pairs (P, H, W, C) -> (P, H, W, 2)."""
    config.validate()
    dtype = np.float32 if ad.get_precision() == "float32" else np.float64
    f1 = np.asarray(frames1, dtype=dtype)
    f2 = np.asarray(frames2, dtype=dtype)
    return _hs_core(_NumpyOps, f1, f2, config, iters or config.iters_inference)


def estimate_pair(frame1, frame2, config=None, differentiable=False):
    """Estimate flow for one frame pair (H, W, C) each.

    In differentiable mode the inputs must be DiffTensors; the returned
    FlowField carries the truncated-iteration tensor for gradient use and
    its `field` holds the same truncated values. Refinement to full
    inference quality happens on the non-differentiable path only.
    """
    config = config or FlowConfig()
    if differentiable:
        if frame1.values.shape != frame2.values.shape:
            raise FlowError("frame shapes differ")
        t = estimate_stack_diff(
            ad.reshape(frame1, (1,) + frame1.values.shape),
            ad.reshape(frame2, (1,) + frame2.values.shape),
            config,
        )
        return FlowField(t.values[0], tensor=t)
    frame1 = np.asarray(frame1)
    frame2 = np.asarray(frame2)
    if frame1.shape != frame2.shape:
        raise FlowError("frame shapes differ")
    out = estimate_stack_np(frame1[None], frame2[None], config)
    return FlowField(out[0])


def pair_indices(T, direction):
    """(first, second) frame index arrays for a pairing direction."""
    if direction == "forward":
        if T < 2:
            raise FlowError("forward pairing needs T >= 2")
        return np.arange(0, T - 1), np.arange(1, T)
    if direction == "backward":
        if T < 2:
            raise FlowError("backward pairing needs T >= 2")
        return np.arange(1, T), np.arange(0, T - 1)
    if direction == "long-range":
        if T % 2 != 0:
            raise FlowError("long-range pairing needs even T")
        half = T // 2
        return np.arange(0, half), np.arange(half, T)
    raise FlowError(f"unknown direction {direction!r}")


def clip_pair_stacks(clip_tensor, direction):
    """Slice a traced clip (T,H,W,C) into (first, second) pair stacks."""
    T = clip_tensor.values.shape[0]
    if direction == "forward":
        return ad.slice0(clip_tensor, 0, T - 1), ad.slice0(clip_tensor, 1, T)
    if direction == "backward":
        return ad.slice0(clip_tensor, 1, T), ad.slice0(clip_tensor, 0, T - 1)
    if direction == "long-range":
        if T % 2 != 0:
            raise FlowError("long-range pairing needs even T")
        half = T // 2
        return ad.slice0(clip_tensor, 0, half), ad.slice0(clip_tensor, half, T)
    raise FlowError(f"unknown direction {direction!r}")


def estimate_clip(clip, direction="forward", config=None, differentiable=False):
    """Estimate the flow stack of a clip for a pairing direction.

    `clip` is a VideoClip / (T,H,W,C) array, or a DiffTensor in
    differentiable mode.
    """
    config = config or FlowConfig()
    if differentiable:
        first, second = clip_pair_stacks(clip, direction)
        t = estimate_stack_diff(first, second, config)
        return FlowStack(t.values, direction=direction, tensor=t)
    frames = clip.frames if hasattr(clip, "frames") else np.asarray(clip)
    fi, si = pair_indices(frames.shape[0], direction)
    fields = estimate_stack_np(frames[fi], frames[si], config)
    return FlowStack(fields, direction=direction)


def endpoint_error(flow, ground_truth, interior_margin=0):
    """Mean Euclidean flow error over the interior region."""
    flow = np.asarray(flow)
    gt = np.asarray(ground_truth)
    if flow.shape != gt.shape:
        raise FlowError("flow shapes differ")
    h, w = flow.shape[-3], flow.shape[-2]
    m = int(interior_margin)
    if m >= h // 2 or m >= w // 2:
        raise FlowError("interior margin leaves no pixels")
    sl = (Ellipsis, slice(m, h - m), slice(m, w - m), slice(None))
    diff = flow[sl] - gt[sl]
    return float(np.sqrt((diff**2).sum(axis=-1)).mean())


# ---------------------------------------------------------------------------
# Flow color wheel (zero flow -> white, hue from direction)
# ---------------------------------------------------------------------------


def flow_to_color(flow, max_magnitude=None):
    """Map an (H, W, 2) flow field to an (H, W, 3) image in [0, 1]."""
    flow = np.asarray(flow, dtype=np.float64)
    if not np.all(np.isfinite(flow)):
        raise FlowError("flow contains non-finite values")
    u, v = flow[..., 0], flow[..., 1]
    mag = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = mag.max()
    if max_magnitude <= 0:
        return np.ones(flow.shape[:2] + (3,))
    sat = np.clip(mag / max_magnitude, 0.0, 1.0)
    hue = (np.arctan2(v, u) / (2 * np.pi)) % 1.0
    # HSV -> RGB with V = 1
    h6 = hue * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = 1.0 - sat
    q = 1.0 - sat * f
    t = 1.0 - sat * (1.0 - f)
    one = np.ones_like(sat)
    lut = np.stack(
        [
            np.stack([one, t, p], -1),
            np.stack([q, one, p], -1),
            np.stack([p, one, t], -1),
            np.stack([p, q, one], -1),
            np.stack([t, p, one], -1),
            np.stack([one, p, q], -1),
        ]
    )
    return np.take_along_axis(
        lut, i[None, ..., None], axis=0
    )[0]


# ---------------------------------------------------------------------------
# Middlebury .flo format
# ---------------------------------------------------------------------------

_FLO_MAGIC = 202021.25


def save_flo(flow, path):
    flow = np.asarray(flow, dtype="<f4")
    h, w = flow.shape[0], flow.shape[1]
    data = struct.pack("<f", _FLO_MAGIC) + struct.pack("<2i", w, h) + flow.tobytes()
    from .video import _atomic_write

    _atomic_write(path, data)


def load_flo(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise FlowFormatError(f"{path}: header truncated")
    (magic,) = struct.unpack("<f", data[:4])
    if magic != np.float32(_FLO_MAGIC):
        raise FlowFormatError(f"{path}: bad magic {magic}")
    w, h = struct.unpack("<2i", data[4:12])
    need = h * w * 2 * 4
    if len(data) - 12 < need:
        raise FlowFormatError(f"{path}: payload truncated")
    return np.frombuffer(data[12 : 12 + need], dtype="<f4").reshape(h, w, 2).copy()
