"""Clip data model, synthetic motion-class dataset, and file formats.

The dataset is a desk-scale benchmark of eight global-motion classes
(translate E/N/W/S, rotate CW/CCW, zoom in/out). Every clip is rendered by
bilinearly resampling a large low-pass-filtered noise canvas under the
class motion, so the per-pair ground-truth flow is known analytically and
the label depends on motion only, never on appearance.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter


class ClipFormatError(Exception):
    """Base class for clip file-format failures."""


class BadMagicError(ClipFormatError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(ClipFormatError):
    """File payload is shorter than the header promises."""


class ValueRangeError(ClipFormatError):
    """Loaded pixel values fall outside [0, 1]."""


CLASS_NAMES = (
    "translate-E",
    "translate-N",
    "translate-W",
    "translate-S",
    "rotate-CW",
    "rotate-CCW",
    "zoom-in",
    "zoom-out",
)


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, C) float32 in [0, 1]
    label: Optional[int] = None
    clip_id: str = ""
    frame_rate: float = 25.0

    @property
    def T(self):
        return self.frames.shape[0]

    def validate(self):
        if self.frames.ndim != 4:
            raise ValueError("frames must be T x H x W x C")
        if self.frames.shape[0] < 2:
            raise ValueError("clips need at least two frames")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise ValueRangeError("pixel values outside [0, 1]")


@dataclass
class DatasetSpec:
    num_classes: int = 8
    T: int = 16
    H: int = 64
    W: int = 64
    C: int = 3
    clips_per_class: int = 10
    translate_px: tuple = (1.0, 2.0)
    rotate_deg: tuple = (1.0, 2.0)
    zoom_rate: tuple = (0.01, 0.02)
    texture_smoothness: float = 5.0
    texture_low: float = 0.2
    texture_high: float = 0.8


@dataclass
class GroundTruthFlow:
    # (T-1, H, W, 2) pixel displacements; flow at pixel p of frame t points
    # to p + f in frame t+1, channel order (u, v) = (x, y) displacement
    fields: np.ndarray


@dataclass
class MotionParams:
    class_index: int
    magnitude: float  # px/frame, deg/frame, or fractional scale/frame

    def as_dict(self):
        return {
            "class": CLASS_NAMES[self.class_index],
            "class_index": self.class_index,
            "magnitude": self.magnitude,
        }


_TRANSLATE_DIRS = {0: (1.0, 0.0), 1: (0.0, -1.0), 2: (-1.0, 0.0), 3: (0.0, 1.0)}


def _bilinear_np(img, ys, xs):
    """Plain numpy bilinear lookup with clamp-to-edge, float64 internally."""
    h, w = img.shape[:2]
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.clip(np.floor(ys), 0, h - 2).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 2).astype(np.int64)
    wy = (ys - y0)[..., None]
    wx = (xs - x0)[..., None]
    return (
        img[y0, x0] * (1 - wy) * (1 - wx)
        + img[y0, x0 + 1] * (1 - wy) * wx
        + img[y0 + 1, x0] * wy * (1 - wx)
        + img[y0 + 1, x0 + 1] * wy * wx
    )


def _source_coords(spec, params, t, ys, xs, cy, cx):
    """Canvas-frame coordinates sampled by frame t (frame coordinates in)."""
    k = params.class_index
    if k < 4:
        dx, dy = _TRANSLATE_DIRS[k]
        s = params.magnitude
        return ys - t * s * dy, xs - t * s * dx
    if k in (4, 5):
        # screen-space CW is +theta with y pointing down
        sign = 1.0 if k == 4 else -1.0
        th = -sign * np.deg2rad(params.magnitude) * t
        dy, dx = ys - cy, xs - cx
        return (
            np.sin(th) * dx + np.cos(th) * dy + cy,
            np.cos(th) * dx - np.sin(th) * dy + cx,
        )
    scale = (1.0 + params.magnitude) if k == 6 else 1.0 / (1.0 + params.magnitude)
    return (ys - cy) / scale**t + cy, (xs - cx) / scale**t + cx


def _flow_field(spec, params, ys, xs, cy, cx):
    """Analytic flow from frame t to t+1 (same for all t of these motions)."""
    k = params.class_index
    if k < 4:
        dx, dy = _TRANSLATE_DIRS[k]
        s = params.magnitude
        u = np.full_like(xs, s * dx)
        v = np.full_like(ys, s * dy)
        return u, v
    if k in (4, 5):
        sign = 1.0 if k == 4 else -1.0
        th = sign * np.deg2rad(params.magnitude)
        dy, dx = ys - cy, xs - cx
        u = np.cos(th) * dx - np.sin(th) * dy + cx - xs
        v = np.sin(th) * dx + np.cos(th) * dy + cy - ys
        return u, v
    scale = (1.0 + params.magnitude) if k == 6 else 1.0 / (1.0 + params.magnitude)
    return (scale - 1.0) * (xs - cx), (scale - 1.0) * (ys - cy)


def _max_displacement(spec, params):
    k = params.class_index
    radius = 0.5 * float(np.hypot(spec.H, spec.W))
    if k < 4:
        return params.magnitude * (spec.T - 1)
    if k in (4, 5):
        return 2 * radius * np.sin(np.deg2rad(params.magnitude) * (spec.T - 1) / 2)
    growth = (1.0 + params.magnitude) ** (spec.T - 1)
    return radius * max(growth - 1.0, 1.0 - 1.0 / growth)


def _sample_magnitude(spec, params_rng, class_index):
    if class_index < 4:
        lo, hi = spec.translate_px
    elif class_index in (4, 5):
        lo, hi = spec.rotate_deg
    else:
        lo, hi = spec.zoom_rate
    return float(params_rng.uniform(lo, hi))


def render_clip(spec, params, texture_rng):
    """Render one clip and its analytic ground-truth flow."""
    margin = int(np.ceil(_max_displacement(spec, params))) + 4
    if margin > 4 * max(spec.H, spec.W):
        raise ValueError("requested motion exceeds a renderable canvas margin")
    ch = spec.H + 2 * margin
    cw = spec.W + 2 * margin
    canvas = np.empty((ch, cw, spec.C))
    for c in range(spec.C):
        noise = texture_rng.standard_normal((ch, cw))
        tex = gaussian_filter(noise, spec.texture_smoothness, mode="wrap")
        lo, hi = tex.min(), tex.max()
        canvas[..., c] = (tex - lo) / (hi - lo) * (
            spec.texture_high - spec.texture_low
        ) + spec.texture_low

    ys, xs = np.mgrid[0 : spec.H, 0 : spec.W].astype(np.float64)
    cy, cx = (spec.H - 1) / 2.0, (spec.W - 1) / 2.0
    frames = np.empty((spec.T, spec.H, spec.W, spec.C), dtype=np.float32)
    for t in range(spec.T):
        sy, sx = _source_coords(spec, params, t, ys, xs, cy, cx)
        frames[t] = _bilinear_np(canvas, sy + margin, sx + margin)
    frames = np.clip(frames, 0.0, 1.0)

    u, v = _flow_field(spec, params, ys, xs, cy, cx)
    pair = np.stack([u, v], axis=-1).astype(np.float32)
    flows = np.broadcast_to(pair, (spec.T - 1,) + pair.shape).copy()
    return frames, GroundTruthFlow(flows)


def generate_dataset(spec, seed):
    """Deterministically generate the labeled clips and ground-truth flows.

    Each clip draws its own child RNG from (seed, clip index), so parallel
    and serial generation produce identical bits. Returns a list of
    (VideoClip, GroundTruthFlow, MotionParams).
    """
    out = []
    total = spec.num_classes * spec.clips_per_class
    for idx in range(total):
        label = idx % spec.num_classes
        rng = np.random.default_rng([int(seed), idx])
        params = MotionParams(label, _sample_magnitude(spec, rng, label))
        frames, gt = render_clip(spec, params, rng)
        clip = VideoClip(frames, label=label, clip_id=f"clip_{idx:05d}")
        out.append((clip, gt, params))
    return out


# ---------------------------------------------------------------------------
# .vclip format: "VCLP", version, T, H, W, C (u32 LE), then f32 LE payload,
# frame-major, row-major, channel-last.
# ---------------------------------------------------------------------------

_VCLIP_MAGIC = b"VCLP"
_VCLIP_VERSION = 1


def save_clip(clip, path):
    frames = np.asarray(clip.frames, dtype="<f4")
    t, h, w, c = frames.shape
    payload = struct.pack("<5I", _VCLIP_VERSION, t, h, w, c) + frames.tobytes()
    _atomic_write(path, _VCLIP_MAGIC + payload)


def load_clip(path, check_range=True):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _VCLIP_MAGIC:
        raise BadMagicError(f"{path}: not a .vclip file")
    if len(data) < 24:
        raise TruncatedFileError(f"{path}: header truncated")
    version, t, h, w, c = struct.unpack("<5I", data[4:24])
    if version != _VCLIP_VERSION:
        raise ClipFormatError(f"{path}: unsupported version {version}")
    need = t * h * w * c * 4
    if len(data) - 24 < need:
        raise TruncatedFileError(f"{path}: payload shorter than {t}x{h}x{w}x{c}")
    frames = np.frombuffer(data[24 : 24 + need], dtype="<f4").reshape(t, h, w, c)
    if check_range and (frames.min() < 0.0 or frames.max() > 1.0):
        raise ValueRangeError(f"{path}: values outside [0, 1]")
    return VideoClip(frames.copy())


# ---------------------------------------------------------------------------
# PPM export (binary P6, maxval 255, half-up rounding)
# ---------------------------------------------------------------------------


def frame_to_ppm_bytes(frame):
    """Encode one H x W x C frame in [0, 1] as binary PPM (P6)."""
    h, w = frame.shape[:2]
    if frame.ndim == 2:
        frame = frame[..., None]
    if frame.shape[2] == 1:
        frame = np.repeat(frame, 3, axis=2)
    # round half-up, not banker's
    rgb = np.floor(np.clip(frame, 0, 1) * 255.0 + 0.5).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes()


def export_frames(clip, directory):
    os.makedirs(directory, exist_ok=True)
    for t in range(clip.frames.shape[0]):
        path = os.path.join(directory, f"frame_{t:04d}.ppm")
        _atomic_write(path, frame_to_ppm_bytes(clip.frames[t]))


def _atomic_write(path, data):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------


def write_dataset(dataset, directory, seed, spec):
    """Write clips plus a JSON manifest; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, (clip, gt, params) in enumerate(dataset):
        rel = f"{clip.clip_id}.vclip"
        save_clip(clip, os.path.join(directory, rel))
        entry = {"path": rel, "label": clip.label, "clip_id": clip.clip_id, "seed_index": i}
        entry.update(params.as_dict())
        entries.append(entry)
    manifest = {
        "seed": int(seed),
        "spec": {
            "num_classes": spec.num_classes,
            "T": spec.T,
            "H": spec.H,
            "W": spec.W,
            "C": spec.C,
            "clips_per_class": spec.clips_per_class,
            "texture_smoothness": spec.texture_smoothness,
        },
        "class_names": list(CLASS_NAMES),
        "clips": entries,
    }
    path = os.path.join(directory, "manifest.json")
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True))
    return path
