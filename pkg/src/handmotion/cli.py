"""Command-line entry point wiring the library into reproducible runs.

Exit codes: 0 success, 1 usage error, 2 runtime/data error. Every
artifact-producing run writes a run_manifest.json (argv, config hash,
seeds, git hash) next to its outputs. ``GHTT_SEED`` provides a global seed
fallback when ``--seed`` is not given.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .codec import MotionSequence, default_template
from .dataset import (
    GeneratorConfig,
    _validate_record,
    generate_synthetic,
    load_dataset,
    split_sequences,
)
from .errors import HandMotionError
from .inference import (
    aggregate_object_stream,
    evaluate_prediction,
    evaluate_recognition,
    predict_action_guided,
    predict_pose_only,
    recognize,
    refine,
)
from .codec import encode_sequence
from .nets import ModelConfig
from .taxonomy import Taxonomy
from .training import (
    TrainConfig,
    load_checkpoint,
    prepare_sequences,
    save_checkpoint,
    train_action_block,
    train_fid_net,
    train_object_aggregator,
    train_pose_block,
    write_trace,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _default_seed() -> int:
    return int(os.environ.get("GHTT_SEED", "0"))


def _load_json(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _config_hash(path: str | None) -> str:
    if path is None:
        return "none"
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _write_run_manifest(out_dir: Path, args: argparse.Namespace, argv: list[str]) -> None:
    from .training import _git_hash

    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "argv": argv,
        "command": args.command,
        "config_hash": _config_hash(getattr(args, "config", None)),
        "seed": getattr(args, "seed", None),
        "git_hash": _git_hash(),
        "versions": {"handmotion": __version__, "torch": torch.__version__,
                     "numpy": np.__version__},
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=1))


def _load_motion(path: str) -> MotionSequence:
    rec = json.loads(Path(path).read_text())
    return _validate_record(rec, line=1)


def _motion_to_dict(seq: MotionSequence, rid: str) -> dict:
    return {
        "id": rid,
        "fps": seq.fps,
        "verb": int(seq.verb) if seq.verb is not None else 0,
        "noun": int(seq.noun) if seq.noun is not None else 0,
        "left": np.round(seq.left, 3).tolist(),
        "right": np.round(seq.right, 3).tolist(),
    }


def _train_configs(args, stage: str) -> tuple[ModelConfig, TrainConfig]:
    raw = _load_json(getattr(args, "config", None))
    model_raw = raw.get("model", {})
    model = ModelConfig.from_dict(model_raw) if model_raw else ModelConfig.toy()
    train_raw = dict(raw.get("train", {}))
    train_raw["stage"] = stage
    if args.seed is not None:
        train_raw["seed"] = args.seed
    train = TrainConfig.from_dict(train_raw)
    return model, train


def _load_train_split(args):
    sequences, manifest = load_dataset(args.data)
    if manifest is not None:
        train_seqs = split_sequences(sequences, manifest, "train")
    else:
        train_seqs = sequences
    taxonomy = None
    data_dir = Path(args.data) if Path(args.data).is_dir() else Path(args.data).parent
    tax_path = data_dir / "taxonomy.json"
    if tax_path.exists():
        taxonomy = Taxonomy.load(tax_path)
    return train_seqs, manifest, taxonomy


def _cmd_gen_data(args, argv) -> int:
    cfg = GeneratorConfig.from_dict(_load_json(args.config)) if args.config else GeneratorConfig()
    out = Path(args.out)
    manifest = generate_synthetic(cfg, args.seed, out)
    _write_run_manifest(out, args, argv)
    print(f"wrote {len(manifest['records'])} records to {out} "
          f"(hash {manifest['content_hash'][:12]}, "
          f"verb separability {manifest['generator']['verb_separability']:.3f})")
    return 0


def _run_training(args, argv, stage: str) -> int:
    model_cfg, train_cfg = _train_configs(args, stage)
    train_seqs, manifest, taxonomy = _load_train_split(args)
    template = default_template()
    prepared = prepare_sequences(train_seqs, template)
    if stage == "pose":
        result = train_pose_block(prepared, model_cfg, train_cfg)
    elif stage == "action":
        pose_block, _ = load_checkpoint(args.pose_ckpt)
        result = train_action_block(prepared, pose_block, taxonomy, model_cfg, train_cfg)
    elif stage == "epo":
        result = train_object_aggregator([s.noun for s in train_seqs], taxonomy,
                                         model_cfg, train_cfg)
    else:
        result = train_fid_net(prepared, taxonomy, model_cfg, train_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result, out / stage)
    write_trace(result.trace, out / f"{stage}_trace.csv")
    _write_run_manifest(out, args, argv)
    print(f"{stage} training done: final loss {result.trace[-1]['loss']:.5f}, "
          f"checkpoint {out / stage}.pt")
    return 0


def _cmd_refine(args, argv) -> int:
    block, manifest = load_checkpoint(args.ckpt)
    config = ModelConfig.from_dict(manifest["model_config"])
    motion = _load_motion(getattr(args, "in"))
    out = refine(block, motion, default_template(), config)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    refined = out.motion
    refined.verb, refined.noun = motion.verb, motion.noun
    out_path.write_text(json.dumps(_motion_to_dict(refined, "refined")) + "\n")
    _write_run_manifest(out_path.parent, args, argv)
    print(f"refined {motion.n_frames} frames over {out.n_clips} clips -> {out_path}")
    return 0


def _cmd_recognize(args, argv) -> int:
    pose_block, pose_manifest = load_checkpoint(args.pose_ckpt)
    action_block, _ = load_checkpoint(args.action_ckpt)
    config = ModelConfig.from_dict(pose_manifest["model_config"])
    taxonomy = Taxonomy.load(args.taxonomy)
    motion = _load_motion(getattr(args, "in"))
    out = refine(pose_block, motion, default_template(), config)
    epo = None
    if args.epo_ckpt:
        epo, _ = load_checkpoint(args.epo_ckpt)
    rng = np.random.default_rng(args.seed)
    omegas = aggregate_object_stream(epo, taxonomy, motion.noun or 0, out.n_clips,
                                     config, rng, noise_std=0.01)
    label, _, probs = recognize(action_block, taxonomy, out.midlevels, omegas)
    print(json.dumps({"action": label, "label": taxonomy.action_label(label),
                      "probability": float(probs[label])}))
    return 0


def _cmd_predict(args, argv) -> int:
    pose_block, pose_manifest = load_checkpoint(args.pose_ckpt)
    config = ModelConfig.from_dict(pose_manifest["model_config"])
    motion = _load_motion(getattr(args, "in"))
    encoded = encode_sequence(motion, default_template())
    if args.mode == "pa":
        pred = predict_pose_only(pose_block, encoded, config, steps=args.clips,
                                 n_samples=args.samples,
                                 variance_scale=args.variance_scale, seed=args.seed)
    else:
        action_block, _ = load_checkpoint(args.action_ckpt)
        taxonomy = Taxonomy.load(args.taxonomy)
        n_clips_obs = -(-motion.n_frames // config.t)
        omegas = np.repeat(
            taxonomy.object_embeddings[motion.noun or 0][None].astype(np.float32),
            n_clips_obs, axis=0)
        pred = predict_action_guided(pose_block, action_block, encoded, omegas, config,
                                     n_future_clips=args.clips, n_samples=args.samples,
                                     variance_scale=args.variance_scale, seed=args.seed)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as fh:
        for i, sample in enumerate(pred.samples):
            rec = _motion_to_dict(sample, f"sample{i:03d}")
            rec["first_frame_index"] = pred.first_frame_index
            fh.write(json.dumps(rec) + "\n")
    _write_run_manifest(out_path.parent, args, argv)
    print(f"wrote {len(pred.samples)} samples ({args.mode}), frames from index "
          f"{pred.first_frame_index} -> {out_path}")
    return 0


def _cmd_evaluate(args, argv) -> int:
    sequences, manifest = load_dataset(args.data)
    taxonomy = Taxonomy.load(
        Path(args.data) / "taxonomy.json" if Path(args.data).is_dir()
        else Path(args.data).parent / "taxonomy.json")
    eval_seqs = split_sequences(sequences, manifest, args.split) if manifest else sequences
    train_ids = manifest["splits"].get("train", []) if manifest else None
    pose_block, pose_manifest = load_checkpoint(args.pose_ckpt)
    action_block, _ = load_checkpoint(args.action_ckpt)
    config = ModelConfig.from_dict(pose_manifest["model_config"])
    template = default_template()
    if args.task == "recognition":
        epo = None
        if args.epo_ckpt:
            epo, _ = load_checkpoint(args.epo_ckpt)
        report = evaluate_recognition(eval_seqs, pose_block, action_block, taxonomy,
                                      template, config, epo=epo, seed=args.seed,
                                      split=args.split, train_ids=train_ids)
    else:
        fid_net, _ = load_checkpoint(args.fid_ckpt)
        report = evaluate_prediction(eval_seqs, pose_block, action_block, fid_net,
                                     taxonomy, template, config,
                                     n_samples=args.samples,
                                     variance_scale=args.variance_scale,
                                     seed=args.seed, split=args.split,
                                     train_ids=train_ids, workers=args.workers)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(report, indent=1))
    _write_run_manifest(report_path.parent, args, argv)
    print(json.dumps(report))
    return 0


def _cmd_plot(args, argv) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    made = []
    if args.trace:
        import csv as _csv

        with open(args.trace) as fh:
            rows = list(_csv.DictReader(fh))
        fig, ax = plt.subplots(figsize=(7, 4))
        steps = [int(r["step"]) for r in rows]
        for key in rows[0].keys():
            if key != "step":
                ax.plot(steps, [float(r[key]) for r in rows], label=key)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        path = out / (Path(args.trace).stem + ".png")
        fig.savefig(path)
        plt.close(fig)
        made.append(path)
    if args.report:
        report = json.loads(Path(args.report).read_text())
        rows = [(k, json.dumps(v) if isinstance(v, (list, dict)) else f"{v}")
                for k, v in report.items()]
        fig, ax = plt.subplots(figsize=(6, 0.4 * len(rows) + 1))
        ax.axis("off")
        table = ax.table(cellText=rows, colLabels=["metric", "value"], loc="center")
        table.scale(1, 1.3)
        fig.tight_layout()
        path = out / (Path(args.report).stem + "_table.png")
        fig.savefig(path)
        plt.close(fig)
        made.append(path)
    if not made:
        raise _UsageError("plot needs --trace and/or --report")
    _write_run_manifest(out, args, argv)
    print("wrote " + ", ".join(str(p) for p in made))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="handmotion", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=_default_seed())
        return p

    p = add("gen-data", _cmd_gen_data, help="generate a synthetic dataset")
    p.add_argument("--config", help="generator config JSON")
    p.add_argument("--out", required=True)

    for stage, helptext in (("pose", "stage 1: pose block"),
                            ("action", "stage 2: action block (pose frozen)"),
                            ("epo", "object aggregator"),
                            ("fid", "sequence feature net for FID")):
        p = add(f"train-{stage}", lambda a, v, s=stage: _run_training(a, v, s),
                help=f"train the {helptext}")
        p.add_argument("--data", required=True)
        p.add_argument("--config", help="JSON with 'model' and 'train' sections")
        p.add_argument("--out", required=True)
        if stage == "action":
            p.add_argument("--pose-ckpt", required=True)

    p = add("refine", _cmd_refine, help="refine an input pose stream")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)

    p = add("recognize", _cmd_recognize, help="classify the action of a motion")
    p.add_argument("--pose-ckpt", required=True)
    p.add_argument("--action-ckpt", required=True)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--epo-ckpt")
    p.add_argument("--in", required=True)

    p = add("predict", _cmd_predict, help="sample future motion")
    p.add_argument("--mode", choices=("pa", "pb"), default="pb")
    p.add_argument("--pose-ckpt", required=True)
    p.add_argument("--action-ckpt")
    p.add_argument("--taxonomy")
    p.add_argument("--in", required=True)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--variance-scale", type=float, default=5.0)
    p.add_argument("--clips", type=int, default=4, help="future clips to generate")
    p.add_argument("--out", required=True)

    p = add("evaluate", _cmd_evaluate, help="run an evaluation protocol")
    p.add_argument("--task", choices=("recognition", "prediction"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--pose-ckpt", required=True)
    p.add_argument("--action-ckpt", required=True)
    p.add_argument("--fid-ckpt")
    p.add_argument("--epo-ckpt")
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--variance-scale", type=float, default=5.0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--report", required=True)

    p = add("plot", _cmd_plot, help="figures from traces and reports")
    p.add_argument("--trace")
    p.add_argument("--report")
    p.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    torch.set_num_threads(max(1, torch.get_num_threads()))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args, argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_help(sys.stderr)
        return 1
    except (HandMotionError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
