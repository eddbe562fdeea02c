"""Command-line front end for data generation, training, attacks, defense,
evaluation, and visualization.

Exit codes: 0 success, 2 usage error, 3 configuration error, 1 runtime
failure. Every subcommand reads a JSON config (``--config``) whose keys are
documented in the README; ``--seed``, ``--sample``, ``--workers``, and
``--out`` override the corresponding config entries.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import attacks as atk
from . import classifier as cls
from . import defense as df
from . import flow as fl
from . import report as rp
from . import video as vd

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3

WORKERS_ENV = "MOTIONGUARD_WORKERS"


class ConfigError(Exception):
    pass


def _build(dc_type, payload, what):
    """Construct a dataclass from a config dict, rejecting unknown keys."""
    payload = dict(payload or {})
    known = dc_type.__dataclass_fields__
    for key in payload:
        if key not in known:
            raise ConfigError(f"unknown {what} key {key!r}")
    return dc_type(**payload)


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc


def _dataset_spec(cfg):
    return _build(vd.DatasetSpec, cfg.get("dataset"), "dataset")


def _flow_config(cfg):
    return _build(fl.FlowConfig, cfg.get("flow"), "flow")


def _defense_config(cfg, key="defense"):
    payload = dict(cfg.get(key) or {})
    mc = payload.pop("mc_config", None)
    dcfg = _build(df.DefenseConfig, payload, key)
    if mc is not None:
        from . import losses as ls

        dcfg.mc_config = _build(ls.MCConfig, mc, "mc_config")
    dcfg.validate()
    return dcfg


def _seed(cfg, args):
    if args.seed is not None:
        return args.seed
    return int(cfg.get("seed", 0))


def _generate(cfg, seed):
    return vd.generate_dataset(_dataset_spec(cfg), seed)


def _sampled_clips(cfg, args, seed):
    dataset = _generate(cfg, seed)
    n = args.sample or int(cfg.get("sample_size", len(dataset)))
    if not 0 < n <= len(dataset):
        raise ConfigError(f"sample size {n} not in 1..{len(dataset)}")
    return rp.sample_clips(dataset, n, seed)


def _load_model(args):
    if not args.model:
        raise ConfigError("this subcommand needs --model <model.vmdl>")
    try:
        return cls.load_model(args.model)
    except FileNotFoundError as exc:
        raise ConfigError(f"model file not found: {args.model}") from exc


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    cfg = _load_config(args.config)
    seed = _seed(cfg, args)
    spec = _dataset_spec(cfg)
    dataset = vd.generate_dataset(spec, seed)
    manifest = vd.write_dataset(dataset, args.out, seed, spec)
    print(f"wrote {len(dataset)} clips, manifest {manifest}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args.config)
    seed = _seed(cfg, args)
    train_cfg = _build(cls.TrainConfig, cfg.get("train"), "train")
    train_cfg.seed = seed if args.seed is not None else train_cfg.seed
    try:
        train_cfg.validate()
    except cls.ClassifierError as exc:
        raise ConfigError(str(exc)) from exc
    dataset = _generate(cfg, seed)
    model = cls.train(
        [c for c, _, _ in dataset], train_cfg, _flow_config(cfg)
    )
    cls.save_model(model, args.out)
    print(f"trained on {len(dataset)} clips, "
          f"final-epoch accuracy {model.train_accuracy:.4f}, saved {args.out}")
    return EXIT_OK


def cmd_attack(args):
    cfg = _load_config(args.config)
    seed = _seed(cfg, args)
    spec = cfg.get("attack") or {"kind": "pgd"}
    rp.ExperimentConfig(
        attacks=[spec], sample_size=1, adaptive_sample_size=1
    ).validate()
    model = _load_model(args)
    flow_cfg = _flow_config(cfg)
    defense_cfg = _defense_config(cfg)
    os.makedirs(args.out, exist_ok=True)
    flips = 0
    sample = _sampled_clips(cfg, args, seed)
    for idx, (clip, _) in enumerate(sample):
        adv = rp.apply_attack(
            spec, clip, model, flow_cfg, defense_cfg,
            rp.child_seed(seed, 2, idx),
        )
        vd.save_clip(
            vd.VideoClip(adv), os.path.join(args.out, f"{clip.clip_id}.adv.vclip")
        )
        pred = cls.predict(model, adv, flow_cfg)[0]
        flips += pred != clip.label
    print(f"{spec['kind']}: {flips}/{len(sample)} clips flipped, "
          f"adversarial clips in {args.out}")
    return EXIT_OK


def cmd_defend(args):
    cfg = _load_config(args.config)
    seed = _seed(cfg, args)
    flow_cfg = _flow_config(cfg)
    defense_cfg = _defense_config(cfg)
    os.makedirs(args.out, exist_ok=True)
    sample = _sampled_clips(cfg, args, seed)
    for clip, _ in sample:
        result = df.purify(clip, flow_cfg, defense_cfg)
        df.export_result(result, os.path.join(args.out, clip.clip_id))
    print(f"purified {len(sample)} clips into {args.out}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_config(args.config)
    econfig = rp.ExperimentConfig(
        dataset=_dataset_spec(cfg),
        seed=_seed(cfg, args),
        train=_build(cls.TrainConfig, cfg.get("train"), "train"),
        flow=_flow_config(cfg),
        attacks=list(cfg.get("attacks", [])),
        defense=_defense_config(cfg),
        defense_multi=(
            _defense_config(cfg, "defense_multi")
            if cfg.get("defense_multi") else None
        ),
        sample_size=args.sample or int(cfg.get("sample_size", 100)),
        adaptive_sample_size=int(cfg.get("adaptive_sample_size", 50)),
        out_dir=args.out,
        workers=args.workers,
    )
    econfig.validate()
    model = cls.load_model(args.model) if args.model else None
    report = rp.run_full_experiment(econfig, model=model)
    for row, cells in report.accuracy.items():
        cols = "  ".join(f"{k}={v:.3f}" for k, v in cells.items())
        print(f"{row:12s} {cols}")
    print(f"report in {args.out}")
    return EXIT_OK


def cmd_viz_flow(args):
    cfg = _load_config(args.config)
    seed = _seed(cfg, args)
    flow_cfg = _flow_config(cfg)
    sample = _sampled_clips(cfg, args, seed)
    clip = sample[0][0]
    conditions = {"clean": clip.frames}
    if args.model:
        model = cls.load_model(args.model)
        spec = cfg.get("attack") or {"kind": "pgd"}
        defense_cfg = _defense_config(cfg)
        adv = rp.apply_attack(
            spec, clip, model, flow_cfg, defense_cfg,
            rp.child_seed(seed, 2, 0),
        )
        conditions["attacked"] = adv
        conditions["purified"] = df.purify(adv, flow_cfg, defense_cfg).purified
    paths = rp.viz_flow_panel(conditions, args.out, flow_cfg)
    print("\n".join(paths))
    return EXIT_OK


def cmd_loss_hist(args):
    if not args.report:
        raise ConfigError("loss-hist needs --report <report.json>")
    try:
        report = rp.report_from_json(open(args.report).read())
    except FileNotFoundError as exc:
        raise ConfigError(f"report not found: {args.report}") from exc
    losses = {}
    for rec in report.per_clip:
        losses.setdefault(rec["row"], []).append(rec["mc_loss"])
    if "clean" in losses:
        purified = [
            r["mc_loss_purified"] for r in report.per_clip
            if r["row"] == "clean" and "mc_loss_purified" in r
        ]
        if purified:
            losses["clean-purified"] = purified
    prefix = os.path.join(args.out, "mc_loss_hist")
    os.makedirs(args.out, exist_ok=True)
    _, _, scores = rp.loss_histogram(losses, bins=args.bins, out_prefix=prefix)
    for name, value in sorted(scores.items()):
        print(f"AUROC clean vs {name}: {value:.4f}")
    print(f"histogram in {prefix}.csv / {prefix}.ppm")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


def _parser():
    parser = argparse.ArgumentParser(
        prog="motionguard",
        description="Motion-consistency video defense: data, training, "
        "attacks, purification, evaluation.",
    )
    sub = parser.add_subparsers(dest="command")
    specs = {
        "gen-data": (cmd_gen_data, "generate the synthetic clip dataset"),
        "train": (cmd_train, "train the flow classifier"),
        "attack": (cmd_attack, "run one attack over a clip sample"),
        "defend": (cmd_defend, "purify a clip sample"),
        "eval": (cmd_eval, "run the full paired evaluation"),
        "viz-flow": (cmd_viz_flow, "render frame and flow-color panels"),
        "loss-hist": (cmd_loss_hist, "histogram MC losses from a report"),
    }
    default_workers = int(os.environ.get(WORKERS_ENV, "1"))
    for name, (fn, help_text) in specs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--out", default="out", help="output file or directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=default_workers)
        p.add_argument("--sample", type=int, default=None,
                       help="clip sample size override")
        p.add_argument("--model", default=None, help="model .vmdl path")
        if name == "loss-hist":
            p.add_argument("--report", default=None, help="report.json path")
            p.add_argument("--bins", type=int, default=20)
        p.set_defaults(fn=fn)
    return parser


def main(argv=None):
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code else EXIT_OK
    if not getattr(args, "fn", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except (
        ConfigError,
        rp.ReportError,
        atk.AttackError,
        df.DefenseError,
        vd.ClipFormatError,
        cls.ModelFormatError,
    ) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
