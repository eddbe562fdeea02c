"""Adversarial attacks against the flow classifier.

All L-infinity bounded attacks share one projected sign-ascent loop;
adaptive variants change only the objective, so lambda = 0 reduces them
to plain PGD bit-for-bit. Gradients run through the truncated flow
estimator; bounds are specified in 1/255 units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import classifier as cls
from . import flow as fl
from . import losses as ls
from . import video as vd


class AttackError(Exception):
    pass


@dataclass
class AttackConfig:
    epsilon_a: float = 8.0  # L-inf bound, 1/255 units
    step_size: float = 2.0  # 1/255 units
    steps: int = 20
    init: str = "uniform-random"  # or "zero"
    lam: float = 1.0  # weight of the adaptive regularizers
    seed: int = 0

    def validate(self):
        if self.epsilon_a <= 0:
            raise AttackError("epsilon must be positive")
        if self.step_size > 2 * self.epsilon_a:
            raise AttackError("step size exceeds twice the bound")
        if self.init not in ("zero", "uniform-random"):
            raise AttackError(f"unknown init mode {self.init!r}")
        if self.steps < 0:
            raise AttackError("step count must be non-negative")

    @property
    def epsilon(self):
        return self.epsilon_a / 255.0

    @property
    def step(self):
        return self.step_size / 255.0


@dataclass
class Perturbation:
    delta: np.ndarray  # clip-shaped, or (T, C) for flickering
    kind: str
    loss_trace: list = field(default_factory=list)
    frame_index: int = -1  # one-frame attack only

    def apply(self, frames):
        delta = self.delta
        if delta.ndim == 2:  # flickering offsets broadcast over pixels
            delta = delta[:, None, None, :]
        return np.clip(frames + delta, 0.0, 1.0).astype(frames.dtype)

    def full_delta(self, shape):
        if self.delta.shape == tuple(shape):
            return self.delta
        return np.broadcast_to(self.delta[:, None, None, :], shape).copy()


def _require_label(label, model):
    if label is None:
        raise AttackError("attack needs a labeled clip")
    if not 0 <= int(label) < model.num_classes:
        raise AttackError(f"label {label} out of range")
    return int(label)


def _frames_of(clip):
    return clip.frames if isinstance(clip, vd.VideoClip) else np.asarray(clip)


def _ce_through_flow(model, x_tensor, label, flow_config):
    """Cross-entropy of the classifier through truncated-gradient flow."""
    first, second = fl.clip_pair_stacks(x_tensor, "forward")
    flows = fl.estimate_stack_diff(first, second, flow_config)
    logits = cls.forward(model, flows)
    return cls.cross_entropy(logits, label), flows


def _init_delta(frames, config, rng):
    if config.init == "zero" :
        delta = np.zeros_like(frames)
    else:
        delta = rng.uniform(-config.epsilon, config.epsilon, frames.shape).astype(
            frames.dtype
        )
    return _project(frames, delta, config.epsilon)


def _project(frames, delta, epsilon):
    # the interval clips commute, so range-then-ball equals ball-then-range;
    # ending on the ball clip makes the epsilon bound exact in float32
    delta = np.clip(frames + delta, 0.0, 1.0) - frames
    eps = frames.dtype.type(epsilon)
    return np.clip(delta, -eps, eps)


def _sign_ascent(frames, objective, config, mask=None, kind="pgd"):
    """Shared projected sign-ascent loop maximizing objective(x_adv).

    objective(x_adv) -> (loss value, gradient wrt x_adv). mask, if given,
    confines the perturbation support.
    """
    rng = np.random.default_rng(config.seed)
    delta = _init_delta(frames, config, rng)
    if mask is not None:
        delta = delta * mask
    trace = []
    for _ in range(config.steps):
        loss, grad = objective(frames + delta)
        if mask is not None:
            grad = grad * mask
        delta = delta + config.step * np.sign(grad).astype(frames.dtype)
        delta = _project(frames, delta, config.epsilon)
        if mask is not None:
            delta = delta * mask
        trace.append(float(loss))
    return Perturbation(delta, kind, trace)


def _ce_objective(model, label, flow_config):
    def objective(x_adv):
        tape = ad.Tape()
        x = tape.tensor(x_adv, requires_grad=True)
        loss, _ = _ce_through_flow(model, x, label, flow_config)
        ad.backward(loss)
        return float(loss.values), x.adjoint

    return objective


def pgd_attack(clip, label, model, flow_config=None, attack_config=None):
    """Sign-PGD on cross-entropy within the epsilon ball and [0, 1]."""
    attack_config = attack_config or AttackConfig()
    attack_config.validate()
    flow_config = flow_config or fl.FlowConfig()
    label = _require_label(label, model)
    frames = _frames_of(clip)
    return _sign_ascent(
        frames, _ce_objective(model, label, flow_config), attack_config, kind="pgd"
    )


def random_perturbation(clip, bound, seed=0):
    """Uniform noise in [-bound, +bound] (pixel scale), clipped to [0, 1]."""
    frames = _frames_of(clip)
    rng = np.random.default_rng(seed)
    delta = rng.uniform(-bound, bound, frames.shape).astype(frames.dtype)
    delta = np.clip(frames + delta, 0.0, 1.0) - frames
    return Perturbation(delta, "random")


def one_frame_gradient_norms(clip, label, model, flow_config=None):
    """Per-frame L1 norms of the cross-entropy gradient at delta = 0."""
    flow_config = flow_config or fl.FlowConfig()
    frames = _frames_of(clip)
    tape = ad.Tape()
    x = tape.tensor(frames, requires_grad=True)
    loss, _ = _ce_through_flow(model, x, label, flow_config)
    ad.backward(loss)
    return np.abs(x.adjoint).sum(axis=(1, 2, 3))


def one_frame_attack(clip, label, model, flow_config=None, attack_config=None):
    """PGD restricted to the frame with the largest clean gradient norm."""
    attack_config = attack_config or AttackConfig()
    attack_config.validate()
    flow_config = flow_config or fl.FlowConfig()
    label = _require_label(label, model)
    frames = _frames_of(clip)
    if frames.shape[0] < 2:
        raise AttackError("one-frame attack needs at least two frames")
    norms = one_frame_gradient_norms(clip, label, model, flow_config)
    target = int(np.argmax(norms))  # argmax takes the lowest index on ties
    mask = np.zeros_like(frames)
    mask[target] = 1.0
    pert = _sign_ascent(
        frames,
        _ce_objective(model, label, flow_config),
        attack_config,
        mask=mask,
        kind="one-frame",
    )
    pert.frame_index = target
    return pert


def adaptive_attack_1(
    clip, label, model, flow_config=None, attack_config=None, mc_config=None
):
    """Maximize cross-entropy minus lambda times the MC loss."""
    attack_config = attack_config or AttackConfig()
    attack_config.validate()
    flow_config = flow_config or fl.FlowConfig()
    mc_config = mc_config or ls.MCConfig()
    label = _require_label(label, model)
    frames = _frames_of(clip)
    lam = attack_config.lam

    def objective(x_adv):
        tape = ad.Tape()
        x = tape.tensor(x_adv, requires_grad=True)
        ce, flows = _ce_through_flow(model, x, label, flow_config)
        if lam == 0.0:
            total = ce
        else:
            first, _ = fl.clip_pair_stacks(x, "forward")
            photo = ls.photometric_loss_clip(x, fl.FlowStack(flows.values, "forward", flows), mc_config)
            smooth = ls.smoothness_loss(first, flows, mc_config)
            mc = ad.add(photo, ad.mul(smooth, mc_config.lambda_smooth))
            total = ad.sub(ce, ad.mul(mc, lam))
        ad.backward(total)
        return float(total.values), x.adjoint

    return _sign_ascent(frames, objective, attack_config, kind="adaptive-1")


def adaptive_attack_2(clip, label, model, flow_config=None, attack_config=None):
    """Maximize cross-entropy minus lambda times mean |G(x+d) - G(x)|.

    Clean flows are computed once at the truncated budget (the same G the
    gradient sees) and held constant.
    """
    attack_config = attack_config or AttackConfig()
    attack_config.validate()
    flow_config = flow_config or fl.FlowConfig()
    label = _require_label(label, model)
    frames = _frames_of(clip)
    lam = attack_config.lam
    clean = fl.estimate_clip(
        frames,
        "forward",
        fl.FlowConfig(
            alpha=flow_config.alpha,
            iters_inference=flow_config.iters_gradient,
            iters_gradient=flow_config.iters_gradient,
            luminance=flow_config.luminance,
        ),
    ).fields

    def objective(x_adv):
        tape = ad.Tape()
        x = tape.tensor(x_adv, requires_grad=True)
        ce, flows = _ce_through_flow(model, x, label, flow_config)
        if lam == 0.0:
            total = ce
        else:
            drift = ad.mean(ad.abs_(ad.sub(flows, tape.tensor(clean))))
            total = ad.sub(ce, ad.mul(drift, lam))
        ad.backward(total)
        return float(total.values), x.adjoint

    return _sign_ascent(frames, objective, attack_config, kind="adaptive-2")


def bpda_attack(
    clip, label, model, flow_config=None, attack_config=None, defense_config=None
):
    """Attack through purification using identity gradients for the defense.

    Every step purifies x + delta at the defense's full budget, takes the
    cross-entropy gradient at the purified point, and applies it to delta
    as if purification were the identity map.
    """
    from . import defense as df

    attack_config = attack_config or AttackConfig()
    attack_config.validate()
    flow_config = flow_config or fl.FlowConfig()
    defense_config = defense_config or df.DefenseConfig()
    label = _require_label(label, model)
    frames = _frames_of(clip)
    ce_grad = _ce_objective(model, label, flow_config)

    def objective(x_adv):
        result = df.purify(x_adv, flow_config, defense_config)
        return ce_grad(result.purified)

    return _sign_ascent(frames, objective, attack_config, kind="bpda")


def flickering_attack(
    clip,
    label,
    model,
    flow_config=None,
    steps=100,
    beta1=0.1,
    beta2=0.1,
    step_size=0.02,
):
    """Per-frame per-channel constant color offsets, no L-inf ball.

    Ascends L_CE - beta1*thickness - beta2*roughness by L2-normalized
    gradient steps on the (T, C) offset table and returns the iterate with
    the best objective (with dominant regularizers that is the zero
    offset); the perturbed clip is clamped to [0, 1] when applied.
    """
    flow_config = flow_config or fl.FlowConfig()
    label = _require_label(label, model)
    frames = _frames_of(clip)
    t, h, w, c = frames.shape
    d = np.zeros((t, c), dtype=frames.dtype)
    trace = []
    best_value = -np.inf
    best_d = d
    for _ in range(steps):
        tape = ad.Tape()
        d_t = tape.tensor(d, requires_grad=True)
        x = ad.clamp01(
            ad.add(tape.tensor(frames), ad.broadcast_frame_channel(d_t, frames.shape))
        )
        ce, _ = _ce_through_flow(model, x, label, flow_config)
        thickness = ad.mean(ad.abs_(d_t))
        first_diff = ad.sub(ad.slice0(d_t, 1, t), ad.slice0(d_t, 0, t - 1))
        second_diff = ad.sub(
            ad.add(ad.slice0(d_t, 2, t), ad.slice0(d_t, 0, t - 2)),
            ad.mul(ad.slice0(d_t, 1, t - 1), 2.0),
        )
        roughness = ad.add(
            ad.mean(ad.abs_(first_diff)), ad.mean(ad.abs_(second_diff))
        )
        total = ad.sub(
            ce, ad.add(ad.mul(thickness, beta1), ad.mul(roughness, beta2))
        )
        ad.backward(total)
        value = float(total.values)
        if value > best_value:
            best_value = value
            best_d = d.copy()
        grad = d_t.adjoint
        norm = np.sqrt((grad * grad).sum())
        if norm > 0:
            d = d + step_size * (grad / norm).astype(frames.dtype)
        trace.append(value)
    return Perturbation(best_d, "flickering", trace)


def flow_change(clean_frames, adv_frames, flow_config=None):
    """Mean |G(adv) - G(clean)| at full inference quality."""
    flow_config = flow_config or fl.FlowConfig()
    g0 = fl.estimate_clip(clean_frames, "forward", flow_config).fields
    g1 = fl.estimate_clip(adv_frames, "forward", flow_config).fields
    return float(np.abs(g1 - g0).mean())


def export_delta(perturbation, frames_shape, path):
    """Write the delta, offset by +0.5, as a .vclip file for audit."""
    full = perturbation.full_delta(frames_shape).astype(np.float32)
    vd.save_clip(vd.VideoClip(full + 0.5), path)


def write_trace(perturbation, path):
    payload = {
        "kind": perturbation.kind,
        "loss_trace": perturbation.loss_trace,
        "max_abs_delta": float(np.abs(perturbation.delta).max()),
    }
    if perturbation.frame_index >= 0:
        payload["frame_index"] = perturbation.frame_index
    vd.atomic_write_text(path, json.dumps(payload, indent=2))
