"""Command-line surface: dataset generation, the two training phases,
guided sampling, and evaluation.

Every command resolves a RunConfig (defaults, optional JSON file, then
flags), runs one module operation, and embeds the resolved config in
whatever it writes. Exit codes: 0 success, 2 argument error, 3 I/O
error, 4 contract violation.
"""

import argparse
import json
import os
import sys

from . import diffusion, evaluate, nn, synth, training
from .config import resolve_config
from .diffusion import GuidanceParams
from .errors import (
    AlignmentError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    StoreError,
)
from .tensor_store import write_tensors

EVAL_MODES = ("disentangle", "aligned", "alpha-sweep")


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _resolved(args, section, keys):
    """RunConfig for one command: defaults < config file < given flags."""
    overrides = {section: {}}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            overrides[section][key] = value
    return resolve_config(args.config, overrides)


def cmd_gen_data(args):
    cfg = _resolved(args, "gen_data", ("n", "conflict_ratio"))
    section = cfg["gen_data"]
    n, ratio = section["n"], section["conflict_ratio"]
    if not isinstance(n, int) or n < 1:
        raise ConfigError("--n must be a positive integer, got %r" % (n,))
    if not 0.0 <= float(ratio) <= 1.0:
        raise ConfigError(
            "--conflict-ratio must be in [0, 1], got %r" % (ratio,)
        )
    manifest = synth.make_dataset(
        n, float(ratio), cfg["seed"], args.out,
        k=section["k"], workers=cfg["threads"])
    _write_json(os.path.join(args.out, "run_config.json"),
                {"command": "gen-data", "run_config": cfg})
    conflicted = sum(1 for row in manifest["scenes"] if row["conflict"])
    print("wrote %d scenes (%d conflicted, %d classes) to %s"
          % (n, conflicted, section["k"], args.out))
    return 0


def cmd_train(args):
    cfg = _resolved(args, "train", (
        "phase", "steps", "batch_size", "learning_rate", "weight_decay",
        "cond_drop_p", "grad_clip", "min_events", "feature_mode"))
    section = cfg["train"]
    phase = section["phase"]
    if phase not in ("backbone", "adapter"):
        raise ConfigError("--phase must be 'backbone' or 'adapter', got %r"
                          % (phase,))
    if phase == "adapter" and args.backbone is None:
        raise ConfigError("adapter phase requires --backbone CKPT")
    dataset = synth.load_dataset(args.data)
    train_cfg = training.TrainConfig(
        phase=phase, steps=section["steps"], batch_size=section["batch_size"],
        learning_rate=section["learning_rate"],
        weight_decay=section["weight_decay"],
        cond_drop_p=section["cond_drop_p"], grad_clip=section["grad_clip"],
        seed=cfg["seed"], min_events=section["min_events"])
    log_path = args.log if args.log is not None else args.out + ".loss.csv"
    if phase == "backbone":
        ckpt = training.pretrain_backbone(dataset, train_cfg,
                                          log_path=log_path)
    else:
        backbone_ckpt = training.load_checkpoint(args.backbone)
        ckpt = training.train_adapter(
            dataset, backbone_ckpt, train_cfg,
            feature_mode=section["feature_mode"], log_path=log_path)
    ckpt.config["run"] = {"command": "train", "run_config": cfg}
    training.save_checkpoint(args.out, ckpt)
    last = ckpt.losses[-1][1] if ckpt.losses else float("nan")
    print("%s phase: %d steps in %.1fs; final loss %.4f; checkpoint %s"
          % (phase, ckpt.step_count, ckpt.wall_time_s, last, args.out))
    return 0


def cmd_generate(args):
    cfg = _resolved(args, "generate", ("gamma", "alpha", "steps"))
    section = cfg["generate"]
    ckpt = training.load_checkpoint(args.ckpt)
    record = synth.load_scene_file(args.scene_file)
    num_classes = ckpt.config["backbone"]["num_classes"]
    text_class = args.text_class
    if text_class is None:
        text_class = record.scene.audio_class
    if not 0 <= text_class < num_classes:
        raise ConfigError(
            "--text-class must be in [0, %d), got %r"
            % (num_classes, text_class)
        )
    guide = GuidanceParams(section["gamma"], section["alpha"])
    system = training.restore_system(ckpt).with_guide(guide)
    sched = training.schedule_from_config(ckpt.config)
    with nn.no_grad():
        e_v = system.features_for(record.avclip, record.clip)
    latent = diffusion.sample(
        system.model_pair(text_class, e_v), sched, guide,
        section["steps"], record.latent.shape, cfg["seed"])

    predicted = None
    data_meta = ckpt.config.get("data")
    if data_meta is not None:
        signatures = synth.make_signatures(data_meta["k"], data_meta["seed"])
        predicted = evaluate.classify_latent(latent, signatures)
    offset = None
    if record.scene.event_times:
        offset = evaluate.temporal_offset(latent, record.scene.event_times)
    sidecar = {
        "command": "generate",
        "run_config": cfg,
        "scene": synth.scene_meta(record.scene),
        "text_class": int(text_class),
        "guide": {"gamma": guide.gamma, "alpha_asym": guide.alpha_asym},
        "steps": section["steps"],
        "seed": cfg["seed"],
        "predicted_class": predicted,
        "temporal_offset_s": offset,
    }
    write_tensors(args.out, {"latent": latent}, manifest=sidecar)
    _write_json(args.out + ".json", sidecar)
    print("scene %d, text class %d -> %s (predicted %s, offset %s s)"
          % (record.scene.scene_id, text_class, args.out, predicted,
             "n/a" if offset is None else "%.3f" % offset))
    return 0


def _parse_alphas(text):
    parts = [p for p in text.split(",") if p.strip()]
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise ConfigError(
            "--alphas must be comma-separated numbers, got %r" % text
        )


def cmd_eval(args):
    overrides_keys = ("mode", "gamma", "alpha", "steps", "batch_size")
    if args.alphas is not None:
        args.alphas = _parse_alphas(args.alphas)
    cfg = _resolved(args, "eval", overrides_keys + ("alphas",))
    section = cfg["eval"]
    mode = section["mode"]
    if mode not in EVAL_MODES:
        raise ConfigError("--mode must be one of %s, got %r"
                          % ("/".join(EVAL_MODES), mode))
    ckpt = training.load_checkpoint(args.ckpt)
    dataset = synth.load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    extra = {"command": "eval", "mode": mode, "run_config": cfg}
    if mode == "alpha-sweep":
        rows, _ = evaluate.alpha_sweep(
            ckpt, dataset, section["alphas"], gamma=section["gamma"],
            steps=section["steps"], seed=cfg["seed"],
            batch_size=section["batch_size"])
        csv_path = os.path.join(args.out, "sweep.csv")
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(evaluate.sweep_csv(rows))
        evaluate.write_sweep_plot(os.path.join(args.out, "sweep.png"), rows)
        _write_json(os.path.join(args.out, "sweep.json"),
                    dict(extra, header=list(evaluate.SWEEP_CSV_HEADER),
                         rows=[list(map(float, row)) for row in rows]))
        for alpha, acc, offset, frechet, clap in rows:
            print("alpha %.2f: acc %.3f, mean offset %.3f s, frechet %.4f, "
                  "clap %.3f" % (alpha, acc, offset, frechet, clap))
    else:
        guide = GuidanceParams(section["gamma"], section["alpha"])
        run = (evaluate.disentanglement_eval if mode == "disentangle"
               else evaluate.aligned_eval)
        report = run(ckpt, dataset, guide=guide, steps=section["steps"],
                     seed=cfg["seed"], batch_size=section["batch_size"])
        evaluate.save_report(
            report,
            csv_path=os.path.join(args.out, "report.csv"),
            json_path=os.path.join(args.out, "report.json"),
            extra=extra)
        print("%s: %d scenes, acc %.3f, mean offset %.3f s, frechet %.4f, "
              "clap %.3f"
              % (mode, len(report.records), report.accuracy,
                 report.mean_offset_s, report.frechet_distance,
                 report.clap_analog_similarity))
    return 0


def build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", metavar="JSON",
                        help="config file merged over built-in defaults")
    shared.add_argument("--seed", type=int, help="master seed")

    parser = argparse.ArgumentParser(
        prog="foley-adapter",
        description="Toy text-to-audio diffusion with a temporal video "
                    "adapter: data synthesis, training, sampling, metrics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[shared],
                       help="synthesize a scene dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=int, help="number of scenes")
    p.add_argument("--conflict-ratio", type=float, dest="conflict_ratio",
                   help="fraction of scenes with mismatched audio/video "
                        "classes")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[shared],
                       help="run one training phase")
    p.add_argument("--phase", choices=("backbone", "adapter"))
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--backbone", help="backbone checkpoint (adapter phase)")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--min-events", type=int, dest="min_events",
                   help="train only on scenes with at least this many events")
    p.add_argument("--feature-mode", choices=("avclip", "fused"),
                   dest="feature_mode")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="loss CSV path (default: OUT.loss.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[shared],
                       help="sample one latent for a scene file")
    p.add_argument("--ckpt", required=True, help="adapter checkpoint")
    p.add_argument("--scene-file", required=True, dest="scene_file")
    p.add_argument("--text-class", type=int, dest="text_class",
                   help="text condition (default: the scene's audio class)")
    p.add_argument("--gamma", type=float, help="guidance scale")
    p.add_argument("--alpha", type=float, help="asymmetric attenuation")
    p.add_argument("--steps", type=int, help="sampling steps")
    p.add_argument("--out", required=True, help="latent output path")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", parents=[shared],
                       help="score a checkpoint against a dataset")
    p.add_argument("--ckpt", required=True, help="adapter checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--mode", choices=EVAL_MODES)
    p.add_argument("--alphas", help="comma-separated values for alpha-sweep")
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(2, exc)
    except (StoreError, OSError) as exc:
        return _fail(3, exc)
    except (AlignmentError, ContractError, DataError, DimensionError) as exc:
        return _fail(4, exc)


def _fail(code, exc):
    print("error: %s" % exc, file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
