"""Small convolutional classifier over optical-flow stacks.

Two stride-2 conv layers with relu, global average pooling per field, a
temporal mean across fields, and a linear head. Training runs mini-batch
SGD with momentum on flows precomputed at full inference quality; the
whole pipeline is deterministic given the seeds.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import flow as fl
from . import video as vd


class ClassifierError(Exception):
    pass


class ModelFormatError(ClassifierError):
    pass


class BadModelMagicError(ModelFormatError):
    pass


class ModelVersionError(ModelFormatError):
    pass


class TruncatedModelError(ModelFormatError):
    pass


class GeometryError(ClassifierError):
    pass


_MAGIC = b"VMDL"
_VERSION = 1
_PARAM_ORDER = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "head_w", "head_b")


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0

    def validate(self):
        if self.learning_rate <= 0:
            raise ClassifierError("learning rate must be positive")
        if self.epochs < 1:
            raise ClassifierError("need at least one epoch")
        if self.batch_size < 1:
            raise ClassifierError("batch size must be positive")


@dataclass
class ClassifierModel:
    params: dict  # name -> float32 ndarray, keys _PARAM_ORDER
    height: int
    width: int
    class_names: tuple = vd.CLASS_NAMES
    seed: int = 0
    train_accuracy: float = float("nan")

    @property
    def num_classes(self):
        return self.params["head_b"].shape[0]

    def param_shapes(self):
        k = self.num_classes
        return {
            "conv1_w": (8, 2, 3, 3),
            "conv1_b": (8,),
            "conv2_w": (16, 8, 3, 3),
            "conv2_b": (16,),
            "head_w": (16, k),
            "head_b": (k,),
        }


def init_model(num_classes=8, height=64, width=64, class_names=None, seed=0):
    """He-style random initialization, biases at zero."""
    rng = np.random.default_rng([seed, 0])
    if class_names is None:
        class_names = vd.CLASS_NAMES if num_classes == 8 else tuple(
            f"class-{i}" for i in range(num_classes)
        )
    if len(class_names) != num_classes:
        raise ClassifierError("class name count does not match num_classes")

    def he(shape, fan_in):
        scale = np.sqrt(2.0 / fan_in)
        return (rng.standard_normal(shape) * scale).astype(np.float32)

    params = {
        "conv1_w": he((8, 2, 3, 3), 2 * 9),
        "conv1_b": np.zeros(8, np.float32),
        "conv2_w": he((16, 8, 3, 3), 8 * 9),
        "conv2_b": np.zeros(16, np.float32),
        "head_w": he((16, num_classes), 16),
        "head_b": np.zeros(num_classes, np.float32),
    }
    return ClassifierModel(params, height, width, tuple(class_names), seed)


def _feature_trunk(p, flows_t):
    """Conv trunk on a (N, 2, H, W) flow tensor -> (N, 16) pooled features."""
    h1 = ad.relu(ad.conv2d(flows_t, p["conv1_w"], stride=2, padding=1, bias=p["conv1_b"]))
    h2 = ad.relu(ad.conv2d(h1, p["conv2_w"], stride=2, padding=1, bias=p["conv2_b"]))
    return ad.mean(h2, axes=(2, 3))


def _logits_from_features(p, feats):
    """Temporal mean over the (P, 16) field features, then the linear head."""
    pooled = ad.mean(feats, axes=(0,))
    return ad.linear(pooled, p["head_w"], bias=p["head_b"])


def _flow_tensor(model, flows, tape, requires_grad):
    if isinstance(flows, fl.FlowStack):
        if flows.tensor is not None:
            t = flows.tensor
        else:
            t = tape.tensor(flows.fields, requires_grad=requires_grad)
    elif isinstance(flows, ad.DiffTensor):
        t = flows
    else:
        t = tape.tensor(np.asarray(flows), requires_grad=requires_grad)
    shape = t.values.shape
    if len(shape) != 4 or shape[3] != 2:
        raise GeometryError(f"flow stack shape {shape} is not (P, H, W, 2)")
    if shape[1] != model.height or shape[2] != model.width:
        raise GeometryError(
            f"flow geometry {shape[1]}x{shape[2]} does not match the "
            f"{model.height}x{model.width} model"
        )
    return t


def forward(model, flows, differentiable=False, param_tensors=None):
    """Logits for one flow stack.

    flows may be a FlowStack, a DiffTensor, or a plain (P, H, W, 2) array.
    With differentiable=False a throwaway tape is used and plain logits
    come back as a DiffTensor whose values are the answer.
    """
    if param_tensors is not None:
        tape = next(iter(param_tensors.values())).tape
        p = param_tensors
    else:
        tape = flows.tape if isinstance(flows, ad.DiffTensor) else (
            flows.tensor.tape
            if isinstance(flows, fl.FlowStack) and flows.tensor is not None
            else ad.Tape()
        )
        p = {k: tape.tensor(v) for k, v in model.params.items()}
    t = _flow_tensor(model, flows, tape, requires_grad=differentiable)
    images = ad.transpose(t, (0, 3, 1, 2))
    feats = _feature_trunk(p, images)
    return _logits_from_features(p, feats)


def softmax_np(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def cross_entropy(logits, label):
    """Stable scalar cross-entropy: logsumexp(logits) - logits[label]."""
    tape = logits.tape
    k = logits.values.shape[0]
    if not 0 <= label < k:
        raise ClassifierError(f"label {label} out of range for {k} classes")
    shift = tape.tensor(np.asarray(logits.values.max()))
    z = ad.sub(logits, shift)
    lse = ad.add(ad.log(ad.sum_(ad.exp(z))), shift)
    return ad.sub(lse, ad.gather_scalar(logits, label))


def _as_labeled_clips(dataset):
    items = []
    for entry in dataset:
        if isinstance(entry, vd.VideoClip):
            items.append((entry.frames, entry.label))
        elif isinstance(entry, tuple) and isinstance(entry[0], vd.VideoClip):
            items.append((entry[0].frames, entry[0].label))
        else:
            frames, label = entry
            items.append((np.asarray(frames, np.float32), int(label)))
    if not items:
        raise ClassifierError("dataset is empty")
    return items


def precompute_flows(dataset, flow_config=None):
    """Forward flow stacks for every clip at full inference quality."""
    flow_config = flow_config or fl.FlowConfig()
    items = _as_labeled_clips(dataset)
    flows, labels = [], []
    for frames, label in items:
        flows.append(fl.estimate_clip(frames, "forward", flow_config).fields)
        labels.append(label)
    return flows, np.array(labels, dtype=np.int64)


def _batch_loss_and_grads(model, params, flow_batch, label_batch):
    """Mean cross-entropy over one batch plus parameter gradients."""
    tape = ad.Tape()
    p = {k: tape.tensor(v, requires_grad=True) for k, v in params.items()}
    per_clip = flow_batch[0].shape[0]
    stacked = np.concatenate(
        [np.transpose(f, (0, 3, 1, 2)) for f in flow_batch], axis=0
    )
    feats = _feature_trunk(p, tape.tensor(stacked))
    total = None
    correct = 0
    for i, label in enumerate(label_batch):
        clip_feats = ad.slice0(feats, i * per_clip, (i + 1) * per_clip)
        logits = _logits_from_features(p, clip_feats)
        if int(np.argmax(logits.values)) == label:
            correct += 1
        loss = cross_entropy(logits, label)
        total = loss if total is None else ad.add(total, loss)
    mean_loss = ad.mul(total, 1.0 / len(label_batch))
    ad.backward(mean_loss)
    grads = {k: p[k].adjoint for k in params}
    return float(mean_loss.values), grads, correct


def train(dataset, train_config=None, flow_config=None, num_classes=None):
    """Fit the classifier on precomputed flows with SGD plus momentum."""
    train_config = train_config or TrainConfig()
    train_config.validate()
    flow_config = flow_config or fl.FlowConfig()
    flows, labels = precompute_flows(dataset, flow_config)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 8
        num_classes = max(num_classes, 8) if num_classes <= 8 else num_classes
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ClassifierError("labels out of range")
    h, w = flows[0].shape[1:3]
    model = init_model(num_classes, h, w, seed=train_config.seed)

    rng = np.random.default_rng([train_config.seed, 1])
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    n = len(flows)
    bs = train_config.batch_size
    accuracy = 0.0
    for _ in range(train_config.epochs):
        order = rng.permutation(n)
        correct = 0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            batch_flows = [flows[i] for i in idx]
            batch_labels = [int(labels[i]) for i in idx]
            loss, grads, hits = _batch_loss_and_grads(
                model, model.params, batch_flows, batch_labels
            )
            if not np.isfinite(loss):
                raise ClassifierError(
                    f"training diverged (loss={loss}); lower the learning rate"
                )
            correct += hits
            for k in model.params:
                velocity[k] = (
                    train_config.momentum * velocity[k]
                    - train_config.learning_rate * grads[k]
                ).astype(np.float32)
                model.params[k] = model.params[k] + velocity[k]
        accuracy = correct / n
    model.train_accuracy = accuracy
    return model


def predict(model, clip, flow_config=None):
    """(label, probability vector) from forward flows at inference quality."""
    flow_config = flow_config or fl.FlowConfig()
    frames = clip.frames if isinstance(clip, vd.VideoClip) else np.asarray(clip)
    stack = fl.estimate_clip(frames, "forward", flow_config)
    logits = forward(model, stack)
    probs = softmax_np(logits.values)
    return int(np.argmax(probs)), probs


def predict_flows(model, flows):
    """(label, probability vector) for an already-estimated flow stack."""
    logits = forward(model, flows)
    probs = softmax_np(logits.values)
    return int(np.argmax(probs)), probs


def save_model(model, path):
    """Versioned binary dump: magic, version, geometry, metadata, f32 payload."""
    meta = json.dumps(
        {
            "class_names": list(model.class_names),
            "seed": model.seed,
            "train_accuracy": model.train_accuracy,
        }
    ).encode("utf-8")
    header = _MAGIC + struct.pack(
        "<5I", _VERSION, model.height, model.width, model.num_classes, len(meta)
    )
    payload = b"".join(
        np.ascontiguousarray(model.params[k], dtype="<f4").tobytes()
        for k in _PARAM_ORDER
    )
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header + meta + payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path, expect_geometry=None):
    """Inverse of save_model; expect_geometry=(H, W) guards the pipeline."""
    data = open(path, "rb").read()
    if len(data) < 24:
        raise TruncatedModelError("model file shorter than its header")
    if data[:4] != _MAGIC:
        raise BadModelMagicError(f"bad magic {data[:4]!r}")
    version, h, w, k, meta_len = struct.unpack("<5I", data[4:24])
    if version != _VERSION:
        raise ModelVersionError(f"unsupported model version {version}")
    if len(data) < 24 + meta_len:
        raise TruncatedModelError("metadata block truncated")
    meta = json.loads(data[24 : 24 + meta_len].decode("utf-8"))
    model = ClassifierModel(
        params={},
        height=h,
        width=w,
        class_names=tuple(meta["class_names"]),
        seed=int(meta["seed"]),
        train_accuracy=float(meta["train_accuracy"]),
    )
    model.params = {"head_b": np.zeros(k, np.float32)}  # seed num_classes
    shapes = model.param_shapes()
    offset = 24 + meta_len
    params = {}
    for name in _PARAM_ORDER:
        shape = shapes[name]
        nbytes = int(np.prod(shape)) * 4
        chunk = data[offset : offset + nbytes]
        if len(chunk) < nbytes:
            raise TruncatedModelError(f"payload truncated in {name}")
        params[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        offset += nbytes
    model.params = params
    if expect_geometry is not None and (h, w) != tuple(expect_geometry):
        raise GeometryError(
            f"model expects {h}x{w} flows, pipeline provides "
            f"{expect_geometry[0]}x{expect_geometry[1]}"
        )
    return model
