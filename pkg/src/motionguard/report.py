"""Experiment driver: paired attack/defense evaluation and reporting.

One report evaluates the same clip sample under every (perturbation row x
defense column) condition, so every accuracy cell is recomputable from the
per-clip records. All randomness is derived from per-clip child seeds, so
reruns of the same configuration produce bit-identical report JSON; wall
clock timings go to a separate runtime file.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import attacks as atk
from . import classifier as cls
from . import defense as df
from . import flow as fl
from . import losses as ls
from . import video as vd


class ReportError(Exception):
    pass


COLUMNS = ("standard", "random-defense", "defended", "defended-multi")

# attacks evaluated on a reduced sample (reported via sample_sizes)
ADAPTIVE_KINDS = ("adaptive-1", "adaptive-2", "bpda")

DISCLOSURE = {
    "optical_flow": "variational Horn-Schunck solver in place of a learned "
    "RAFT estimator",
    "classifier": "two-layer convolutional flow classifier in place of a "
    "pretrained I3D backbone",
    "dataset": "synthetic textured-motion clips in place of UCF-101 videos",
    "scale": "desk-scale clip counts; numbers are trends, not "
    "full-benchmark reproductions",
}


@dataclass
class ExperimentConfig:
    dataset: vd.DatasetSpec = field(default_factory=vd.DatasetSpec)
    seed: int = 0
    train: cls.TrainConfig = field(default_factory=cls.TrainConfig)
    flow: fl.FlowConfig = field(default_factory=fl.FlowConfig)
    attacks: list = field(default_factory=list)  # [{"kind": ..., params}]
    defense: df.DefenseConfig = field(default_factory=df.DefenseConfig)
    defense_multi: df.DefenseConfig = None
    sample_size: int = 100
    adaptive_sample_size: int = 50
    out_dir: str = "runs/experiment"
    workers: int = 1
    report_formats: tuple = ("json", "csv")

    def validate(self):
        total = self.dataset.num_classes * self.dataset.clips_per_class
        if not 0 < self.sample_size <= total:
            raise ReportError(
                f"sample size {self.sample_size} not in 1..{total}"
            )
        if not 0 < self.adaptive_sample_size <= self.sample_size:
            raise ReportError("adaptive sample must fit inside the sample")
        for spec in self.attacks:
            if spec.get("kind") not in (
                "pgd", "one-frame", "adaptive-1", "adaptive-2", "bpda",
                "flickering",
            ):
                raise ReportError(f"unknown attack kind {spec.get('kind')!r}")
        if self.workers < 1:
            raise ReportError("worker count must be positive")


@dataclass
class ExperimentReport:
    accuracy: dict  # {row: {column: float}}
    per_clip: list  # one record per (clip, row)
    sample_sizes: dict  # {row: clip count}
    columns: list
    disclosure: dict
    config_echo: dict
    failures: list = field(default_factory=list)

    def recompute_accuracy(self):
        """Rebuild every accuracy cell from the per-clip records."""
        out = {}
        for row in self.accuracy:
            records = [r for r in self.per_clip if r["row"] == row]
            out[row] = {}
            for col in self.columns:
                key = "pred_" + col.replace("-", "_")
                if key not in records[0]:
                    continue
                hits = sum(r[key] == r["label"] for r in records)
                out[row][col] = hits / len(records)
        return out


def child_seed(base, *parts):
    """Stable scalar seed from a tuple, for configs that take one integer."""
    return int(
        np.random.default_rng([int(base)] + [int(p) for p in parts]).integers(
            2**31
        )
    )


def _attack_config(spec, seed):
    kw = {k: v for k, v in spec.items() if k != "kind"}
    kw["seed"] = seed
    return atk.AttackConfig(**kw)


def apply_attack(spec, clip, model, flow_config, defense_config, seed):
    """Run one attack spec against one clip; returns the perturbed frames."""
    kind = spec["kind"]
    if kind == "flickering":
        kw = {k: v for k, v in spec.items() if k != "kind"}
        pert = atk.flickering_attack(
            clip, clip.label, model, flow_config, **kw
        )
    elif kind == "bpda":
        pert = atk.bpda_attack(
            clip, clip.label, model, flow_config,
            _attack_config(spec, seed), defense_config,
        )
    else:
        fn = {
            "pgd": atk.pgd_attack,
            "one-frame": atk.one_frame_attack,
            "adaptive-1": atk.adaptive_attack_1,
            "adaptive-2": atk.adaptive_attack_2,
        }[kind]
        pert = fn(clip, clip.label, model, flow_config, _attack_config(spec, seed))
    return pert.apply(clip.frames)


def _variant_frames(row, spec, clip, model, econfig, clip_idx):
    if row == "clean":
        return clip.frames
    if row == "random":
        bound = (
            spec.get("epsilon_a", atk.AttackConfig().epsilon_a) / 255.0
            if spec else atk.AttackConfig().epsilon
        )
        pert = atk.random_perturbation(
            clip, bound, seed=child_seed(econfig.seed, 1, clip_idx)
        )
        return pert.apply(clip.frames)
    return apply_attack(
        spec, clip, model, econfig.flow, econfig.defense,
        child_seed(econfig.seed, 2, clip_idx),
    )


def evaluate_clip(row, spec, clip, gt, model, econfig, clip_idx):
    """All column predictions plus MC losses and EPE for one (clip, row)."""
    frames = _variant_frames(row, spec, clip, model, econfig, clip_idx)
    record = {"clip_id": clip.clip_id, "label": clip.label, "row": row}

    flows = fl.estimate_clip(frames, "forward", econfig.flow)
    label, _ = cls.predict_flows(model, flows)
    record["pred_standard"] = label
    record["epe"] = fl.endpoint_error(flows.fields, gt.fields)
    record["mc_loss"] = ls.mc_loss_value(frames, econfig.flow)

    noisy = atk.random_perturbation(
        frames, econfig.defense.epsilon,
        seed=child_seed(econfig.seed, 3, clip_idx),
    ).apply(frames)
    record["pred_random_defense"] = cls.predict(model, noisy, econfig.flow)[0]

    label, _, result = df.defended_predict(
        frames, model, econfig.flow, econfig.defense
    )
    record["pred_defended"] = label
    record["mc_loss_purified"] = ls.mc_loss_value(result.purified, econfig.flow)

    if econfig.defense_multi is not None:
        label, _, _ = df.defended_predict(
            frames, model, econfig.flow, econfig.defense_multi
        )
        record["pred_defended_multi"] = label
    return record


def _evaluate_row(row, spec, sample, model, econfig):
    clips = sample
    if spec is not None and spec["kind"] in ADAPTIVE_KINDS:
        clips = sample[: econfig.adaptive_sample_size]
    work = [
        (row, spec, clip, gt, model, econfig, idx)
        for idx, (clip, gt) in enumerate(clips)
    ]
    if econfig.workers > 1:
        with ThreadPoolExecutor(max_workers=econfig.workers) as pool:
            records = list(pool.map(lambda a: evaluate_clip(*a), work))
    else:
        records = [evaluate_clip(*a) for a in work]
    return records


# plumbing knobs that do not affect the numbers; kept out of the echo so
# reruns in a different directory still produce byte-identical reports
_ECHO_SKIP = ("out_dir", "workers", "report_formats")


def _config_echo(econfig):
    def plain(obj):
        if hasattr(obj, "__dataclass_fields__"):
            return {
                k: plain(getattr(obj, k))
                for k in obj.__dataclass_fields__
                if k not in _ECHO_SKIP
            }
        if isinstance(obj, (tuple, list)):
            return [plain(v) for v in obj]
        if isinstance(obj, dict):
            return {k: plain(v) for k, v in obj.items()}
        return obj

    return plain(econfig)


def sample_clips(dataset, sample_size, seed):
    """Deterministic clip sample shared by every condition in a report."""
    order = np.random.default_rng([int(seed), 9]).permutation(len(dataset))
    picked = sorted(order[:sample_size].tolist())
    return [(dataset[i][0], dataset[i][1]) for i in picked]


def run_full_experiment(econfig, model=None, dataset=None):
    """Train (or reuse) a model, evaluate every condition, write artifacts."""
    econfig.validate()
    timings = {}
    start = time.perf_counter()
    if dataset is None:
        dataset = vd.generate_dataset(econfig.dataset, econfig.seed)
    timings["generate_s"] = time.perf_counter() - start
    if model is None:
        start = time.perf_counter()
        model = cls.train(
            [c for c, _, _ in dataset], econfig.train, econfig.flow
        )
        timings["train_s"] = time.perf_counter() - start

    sample = sample_clips(dataset, econfig.sample_size, econfig.seed)
    columns = ["standard", "random-defense", "defended"]
    if econfig.defense_multi is not None:
        columns.append("defended-multi")

    rows = [("clean", None), ("random", None)]
    rows += [(spec["kind"], spec) for spec in econfig.attacks]

    accuracy, per_clip, sizes, failures = {}, [], {}, []
    for row, spec in rows:
        start = time.perf_counter()
        try:
            records = _evaluate_row(row, spec, sample, model, econfig)
        except Exception as exc:  # keep a partial report on stage failure
            failures.append({"row": row, "error": f"{type(exc).__name__}: {exc}"})
            continue
        timings[f"row_{row}_s"] = time.perf_counter() - start
        per_clip.extend(records)
        sizes[row] = len(records)
        accuracy[row] = {}
        for col in columns:
            key = "pred_" + col.replace("-", "_")
            hits = sum(r[key] == r["label"] for r in records)
            accuracy[row][col] = hits / len(records)

    report = ExperimentReport(
        accuracy=accuracy,
        per_clip=per_clip,
        sample_sizes=sizes,
        columns=columns,
        disclosure=dict(DISCLOSURE),
        config_echo=_config_echo(econfig),
        failures=failures,
    )
    write_report(report, econfig.out_dir, econfig.report_formats)
    vd.atomic_write_text(
        os.path.join(econfig.out_dir, "runtime.json"),
        json.dumps(timings, indent=2, sort_keys=True),
    )
    return report


# ---------------------------------------------------------------------------
# Artifact writers
# ---------------------------------------------------------------------------


def report_to_json(report):
    payload = {
        "accuracy": report.accuracy,
        "per_clip": report.per_clip,
        "sample_sizes": report.sample_sizes,
        "columns": report.columns,
        "disclosure": report.disclosure,
        "config": report.config_echo,
        "failures": report.failures,
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def report_from_json(text):
    payload = json.loads(text)
    return ExperimentReport(
        accuracy=payload["accuracy"],
        per_clip=payload["per_clip"],
        sample_sizes=payload["sample_sizes"],
        columns=payload["columns"],
        disclosure=payload["disclosure"],
        config_echo=payload["config"],
        failures=payload["failures"],
    )


def accuracy_csv(report):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["condition"] + list(report.columns))
    for row, cells in report.accuracy.items():
        writer.writerow([row] + [f"{cells[c]:.6f}" for c in report.columns
                                 if c in cells])
    return buf.getvalue()


_PER_CLIP_FIELDS = (
    "row", "clip_id", "label", "pred_standard", "pred_random_defense",
    "pred_defended", "pred_defended_multi", "mc_loss", "mc_loss_purified",
    "epe",
)


def per_clip_csv(report):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(_PER_CLIP_FIELDS)
    for rec in report.per_clip:
        writer.writerow([rec.get(k, "") for k in _PER_CLIP_FIELDS])
    return buf.getvalue()


def write_report(report, out_dir, formats=("json", "csv")):
    os.makedirs(out_dir, exist_ok=True)
    if "json" in formats:
        vd.atomic_write_text(
            os.path.join(out_dir, "report.json"), report_to_json(report)
        )
    if "csv" in formats:
        vd.atomic_write_text(
            os.path.join(out_dir, "accuracy.csv"), accuracy_csv(report)
        )
        vd.atomic_write_text(
            os.path.join(out_dir, "per_clip.csv"), per_clip_csv(report)
        )


# ---------------------------------------------------------------------------
# Loss histogram + AUROC (attack detectability)
# ---------------------------------------------------------------------------


def auroc(negatives, positives):
    """Probability a positive outranks a negative (Mann-Whitney rank form)."""
    neg = np.asarray(negatives, dtype=np.float64)
    pos = np.asarray(positives, dtype=np.float64)
    if neg.size == 0 or pos.size == 0:
        raise ReportError("AUROC needs non-empty score lists")
    ranks = rankdata(np.concatenate([neg, pos]))
    u = ranks[neg.size:].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (neg.size * pos.size))


def loss_histogram(losses_by_condition, bins=20, out_prefix=None):
    """Shared-bin histogram across conditions, plus clean-vs-other AUROC.

    Returns (edges, {condition: counts}, {condition: auroc}). When an
    output prefix is given, writes `<prefix>.csv` and a rasterized
    `<prefix>.ppm` bar chart.
    """
    if len(losses_by_condition) < 2:
        raise ReportError("histogram needs at least two conditions")
    for name, values in losses_by_condition.items():
        if len(values) == 0:
            raise ReportError(f"condition {name!r} has no losses")
    everything = np.concatenate(
        [np.asarray(v, dtype=np.float64) for v in losses_by_condition.values()]
    )
    lo, hi = float(everything.min()), float(everything.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    counts = {
        name: np.histogram(values, bins=edges)[0]
        for name, values in losses_by_condition.items()
    }
    names = list(losses_by_condition)
    scores = {}
    if "clean" in losses_by_condition:
        for name in names:
            if name != "clean":
                scores[name] = auroc(
                    losses_by_condition["clean"], losses_by_condition[name]
                )
    if out_prefix is not None:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["bin_lo", "bin_hi"] + names)
        for b in range(bins):
            writer.writerow(
                [f"{edges[b]:.6g}", f"{edges[b + 1]:.6g}"]
                + [int(counts[n][b]) for n in names]
            )
        vd.atomic_write_text(f"{out_prefix}.csv", buf.getvalue())
        chart = _histogram_chart(edges, counts, names)
        with open(f"{out_prefix}.ppm", "wb") as fh:
            fh.write(vd.frame_to_ppm_bytes(chart))
    return edges, counts, scores


_CHART_COLORS = (
    (0.20, 0.45, 0.80),
    (0.85, 0.35, 0.25),
    (0.30, 0.65, 0.30),
    (0.60, 0.40, 0.70),
    (0.80, 0.65, 0.20),
    (0.35, 0.70, 0.70),
)


def _histogram_chart(edges, counts, names, height=160, bar_width=4):
    """Grouped bar chart rasterized directly into an RGB float array."""
    bins = len(edges) - 1
    group = bar_width * len(names) + 2
    width = bins * group + 2
    img = np.ones((height + 10, width, 3), dtype=np.float32)
    top = max(int(c.max()) for c in counts.values()) or 1
    for b in range(bins):
        for k, name in enumerate(names):
            h = int(round(counts[name][b] / top * height))
            if h == 0:
                continue
            x0 = 1 + b * group + k * bar_width
            color = _CHART_COLORS[k % len(_CHART_COLORS)]
            img[height + 4 - h : height + 4, x0 : x0 + bar_width] = color
    img[height + 5, :] = 0.0  # baseline axis
    return img


# ---------------------------------------------------------------------------
# Flow visualization panel
# ---------------------------------------------------------------------------


def viz_flow_panel(
    conditions, out_dir, flow_config=None, stride=1, max_magnitude=None
):
    """Frame row plus one flow-color row per condition, as PPM files.

    `conditions` maps a condition name to its (T, H, W, C) frames; the
    first entry also provides the RGB frame row. Returns the written paths.
    """
    if not conditions:
        raise ReportError("panel needs at least one condition")
    flow_config = flow_config or fl.FlowConfig()
    os.makedirs(out_dir, exist_ok=True)
    written = []
    first = next(iter(conditions.values()))
    frame_row = np.concatenate(list(first[::stride]), axis=1)
    path = os.path.join(out_dir, "frames.ppm")
    with open(path, "wb") as fh:
        fh.write(vd.frame_to_ppm_bytes(np.clip(frame_row, 0.0, 1.0)))
    written.append(path)
    for name, frames in conditions.items():
        stack = fl.estimate_clip(np.asarray(frames), "forward", flow_config)
        tiles = [
            fl.flow_to_color(f, max_magnitude=max_magnitude)
            for f in stack.fields[::stride]
        ]
        row = np.concatenate(tiles, axis=1)
        path = os.path.join(out_dir, f"flow_{name}.ppm")
        with open(path, "wb") as fh:
            fh.write(vd.frame_to_ppm_bytes(row))
        written.append(path)
    return written
