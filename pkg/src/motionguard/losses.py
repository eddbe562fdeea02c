"""Warping, photometric, edge-aware smoothness, and motion-consistency losses.

All losses are scalar DiffTensors, differentiable with respect to clip
pixels through the truncated flow estimator. Normalization is mean over
pairs, pixels, and channels, so magnitudes are comparable across clip
lengths and channel counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import flow as fl


class LossError(Exception):
    pass


@dataclass
class MCConfig:
    sim_metric: str = "charbonnier"  # "l1" or "charbonnier"
    kappa: float = 1e-3
    lambda_smooth: float = 0.05
    lambda_edge: float = 150.0
    constraints: tuple = ("forward",)
    # which frame of each pair supplies the edge weights
    edge_frame: str = "first"

    def validate(self):
        if self.sim_metric not in ("l1", "charbonnier"):
            raise LossError(f"unknown similarity metric {self.sim_metric!r}")
        if self.lambda_smooth < 0 or self.lambda_edge < 0:
            raise LossError("loss weights must be non-negative")
        if not self.constraints:
            raise LossError("constraint set must be non-empty")


MULTI_CONSTRAINTS = ("forward", "backward", "long-range")


def _metric(diff, config):
    if config.sim_metric == "l1":
        return ad.abs_(diff)
    return ad.charbonnier_abs(diff, kappa=config.kappa)


def _identity_coords(p, h, w, dtype):
    ys, xs = np.mgrid[0:h, 0:w].astype(dtype)
    grid = np.stack([xs, ys], axis=-1)
    return np.broadcast_to(grid, (p, h, w, 2)).copy()


def warp_backward(target_frames, flows):
    """Warp each target frame by its flow: out(x, y) = target(x+u, y+v).

    target_frames: DiffTensor (P, H, W, C); flows: DiffTensor (P, H, W, 2).
    Differentiable in both arguments; clamp-to-edge sampling.
    """
    p, h, w, c = target_frames.values.shape
    if flows.values.shape != (p, h, w, 2):
        raise LossError(
            f"flow stack {flows.values.shape} does not pair with frames {(p, h, w, c)}"
        )
    tape = target_frames.tape
    grid = tape.tensor(_identity_coords(p, h, w, tape.dtype))
    coords = ad.add(grid, flows)
    images = ad.transpose(target_frames, (0, 3, 1, 2))  # (P, C, H, W)
    warped = ad.bilinear_sample_batch(images, coords)
    return ad.transpose(warped, (0, 2, 3, 1))


def photometric_loss(first_frames, target_frames, flows, config=None):
    """Mean similarity between first frames and flow-warped target frames."""
    config = config or MCConfig()
    config.validate()
    warped = warp_backward(target_frames, flows)
    return ad.mean(_metric(ad.sub(warped, first_frames), config))


def smoothness_loss(first_frames, flows, config=None):
    """Edge-aware second-derivative penalty on the flow stack.

    Edge weights exp(-(lambda/3) * sum_c |dI_c/da|) come from the reference
    frame of each pair; the penalty sums |d2 u/da2| + |d2 v/da2| per axis.
    """
    config = config or MCConfig()
    config.validate()
    images = ad.transpose(first_frames, (0, 3, 1, 2))  # (P, C, H, W)
    u = ad.select_last(flows, 0)
    v = ad.select_last(flows, 1)
    total = None
    for axis in ("x", "y"):
        edges = ad.sum_(ad.abs_(ad.spatial_derivatives(images, 1, axis)), axes=(1,))
        weight = ad.exp(ad.mul(edges, -config.lambda_edge / 3.0))
        curv = ad.add(
            ad.abs_(ad.spatial_derivatives(u, 2, axis)),
            ad.abs_(ad.spatial_derivatives(v, 2, axis)),
        )
        term = ad.mul(weight, curv)
        total = term if total is None else ad.add(total, term)
    return ad.mean(total)


def _photometric_for_direction(clip_tensor, direction, flow_config, mc_config):
    first, second = fl.clip_pair_stacks(clip_tensor, direction)
    flows = fl.estimate_stack_diff(first, second, flow_config)
    return first, second, flows


def mc_loss(clip_tensor, flow_config=None, mc_config=None, return_parts=False):
    """Motion-consistency loss: photometric + lambda_smooth * smoothness.

    clip_tensor is a (T, H, W, C) DiffTensor; the flow estimate inside is
    traced at the truncated iteration budget.
    """
    flow_config = flow_config or fl.FlowConfig()
    mc_config = mc_config or MCConfig()
    mc_config.validate()
    first, second, flows = _photometric_for_direction(
        clip_tensor, "forward", flow_config, mc_config
    )
    photo = photometric_loss(first, second, flows, mc_config)
    smooth = smoothness_loss(first, flows, mc_config)
    total = ad.add(photo, ad.mul(smooth, mc_config.lambda_smooth))
    if return_parts:
        return total, {"photometric": photo, "smoothness": smooth}
    return total


def multi_mc_loss(clip_tensor, flow_config=None, mc_config=None):
    """Photometric terms for every configured pairing plus weighted smoothness.

    With constraints restricted to {forward} this equals mc_loss exactly.
    """
    flow_config = flow_config or fl.FlowConfig()
    mc_config = mc_config or MCConfig()
    mc_config.validate()
    T = clip_tensor.values.shape[0]
    if "long-range" in mc_config.constraints and T % 2 != 0:
        raise LossError("long-range constraint needs an even frame count")
    total = None
    smooth = None
    for direction in mc_config.constraints:
        first, second, flows = _photometric_for_direction(
            clip_tensor, direction, flow_config, mc_config
        )
        photo = photometric_loss(first, second, flows, mc_config)
        total = photo if total is None else ad.add(total, photo)
        if direction == "forward":
            smooth = smoothness_loss(first, flows, mc_config)
    if smooth is not None:
        total = ad.add(total, ad.mul(smooth, mc_config.lambda_smooth))
    return total


def consistency_objective(clip_tensor, flow_config, defense_loss, mc_config):
    """Select MC or multi-constraint MC by name."""
    if defense_loss == "mc":
        cfg = mc_config
        if cfg.constraints != ("forward",):
            cfg = MCConfig(**{**cfg.__dict__, "constraints": ("forward",)})
        return mc_loss(clip_tensor, flow_config, cfg)
    if defense_loss == "multiMC":
        cfg = mc_config
        if cfg.constraints == ("forward",):
            cfg = MCConfig(**{**cfg.__dict__, "constraints": MULTI_CONSTRAINTS})
        return multi_mc_loss(clip_tensor, flow_config, cfg)
    raise LossError(f"unknown defense loss {defense_loss!r}")


def photometric_loss_clip(clip_tensor, flow_stack, config=None):
    """Photometric loss of a clip against an already-estimated flow stack."""
    first, second = fl.clip_pair_stacks(clip_tensor, flow_stack.direction)
    flows = flow_stack.tensor
    if flows is None:
        flows = clip_tensor.tape.tensor(flow_stack.fields)
    if flows.values.shape[0] != first.values.shape[0]:
        raise LossError("flow stack does not pair with the clip")
    return photometric_loss(first, second, flows, config)


def mc_loss_value(frames, flow_config=None, mc_config=None, loss="mc"):
    """Evaluate a consistency loss on plain frames, no gradients.

    Uses full inference-quality flow (the truncated budget is a gradient
    approximation only).
    """
    flow_config = flow_config or fl.FlowConfig()
    eval_config = fl.FlowConfig(
        alpha=flow_config.alpha,
        iters_inference=flow_config.iters_inference,
        iters_gradient=flow_config.iters_inference,
        luminance=flow_config.luminance,
    )
    tape = ad.Tape()
    clip_t = tape.tensor(np.asarray(frames), requires_grad=False)
    if loss == "mc":
        out = mc_loss(clip_t, eval_config, mc_config)
    else:
        out = multi_mc_loss(clip_t, eval_config, mc_config)
    return float(out.values)
