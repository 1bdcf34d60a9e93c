"""``afunet`` command line: train, infer, eval, oracle, ablate, synth.

Every command writes into ``<out>/<run-id>/`` and drops the resolved config
there as ``config.yaml`` (plus ``config.source.yaml`` when ``--config`` was
given). Exit status is 0 on success and 1 on any handled error.
"""
import argparse
import csv
import json
import logging
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

import cv2
import numpy as np
import torch

from .config import ConfigError, SyntheticDataConfig, load_config, with_model
from .data import SceneError, load_scene, read_manifest, save_scene, write_manifest
from .metrics import tonemap
from .model import ABLATION_VARIANTS, count_block_calls
from .oracle import DivergenceError, OracleError, energy, initial_state, solve
from .problem import ProblemFileError, load_problem
from .rgbe import HDRFormatError, write_hdr
from .train import (
    CheckpointError,
    Trainer,
    evaluate,
    load_checkpoint,
    model_from_checkpoint,
    predict,
    synthetic_scenes,
)

log = logging.getLogger("afunet")

SWEEPS = {
    "stages": [("T2", {"stages": 2}), ("T3", {"stages": 3}), ("T4", {"stages": 4}),
               ("T5", {"stages": 5}), ("T6", {"stages": 6})],
    "components": [(name, toggles) for name, toggles in ABLATION_VARIANTS.items()],
    "paradigm": [("AF", {"paradigm": "AF"}), ("FA", {"paradigm": "FA"})],
}

HANDLED = (ConfigError, SceneError, CheckpointError, ProblemFileError, HDRFormatError,
           OracleError, DivergenceError, OSError, ValueError)


def _common(p):
    p.add_argument("--config", type=Path, help="YAML/JSON config overlaid on the profile")
    p.add_argument("--profile", choices=["desk", "paper"], default="paper")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output root (default: config output_dir)")
    p.add_argument("--run-id", help="run directory name under --out (default: <command>-<timestamp>)")
    p.add_argument("--device", help="torch device, e.g. cpu or cuda")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="afunet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--resume", action="store_true", help="continue from --checkpoint")
    p.add_argument("--epochs", type=int, help="override the total epoch count")
    p.add_argument("--stop-after", type=int, help="stop once this many epochs are done")

    p = sub.add_parser("infer", help="reconstruct HDR for one scene directory")
    _common(p)
    p.add_argument("--scene", type=Path, required=True)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest of scenes")
    _common(p)
    p.add_argument("--manifest", type=Path, help="default: data.test_manifest from the config")

    p = sub.add_parser("oracle", help="run the classical HQS solver on a problem file")
    _common(p)
    p.add_argument("--problem", type=Path, required=True)

    p = sub.add_parser("ablate", help="train and score a family of model variants")
    _common(p)
    p.add_argument("--sweep", choices=sorted(SWEEPS), required=True)
    p.add_argument("--epochs", type=int, help="override the per-variant epoch count")

    p = sub.add_parser("synth", help="write synthetic scenes and a manifest to disk")
    _common(p)
    p.add_argument("--count", type=int, default=2)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--offset", type=int, default=0)
    return parser


def resolve_config(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.device is not None:
        overrides["device"] = args.device
    if getattr(args, "epochs", None) is not None:
        overrides["optim"] = {"epochs": args.epochs}
    return load_config(args.config, args.profile, overrides)


def make_run_dir(args, config):
    root = args.out if args.out is not None else Path(config.output_dir)
    run_id = args.run_id or f"{args.command}-{time.strftime('%Y%m%d-%H%M%S')}"
    run_dir = root / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(config.to_yaml())
    if args.config is not None:
        shutil.copyfile(args.config, run_dir / "config.source.yaml")
    return run_dir


def _write_table(run_dir, stem, rows):
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(run_dir / f"{stem}.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)
    with open(run_dir / f"{stem}.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")


def _checkpoint_model(args, device):
    if args.checkpoint is None:
        raise ConfigError(f"{args.command} needs --checkpoint")
    ckpt = load_checkpoint(args.checkpoint)
    return model_from_checkpoint(ckpt, device), ckpt


def cmd_train(args, config, run_dir):
    if args.resume:
        if args.checkpoint is None:
            raise ConfigError("--resume needs --checkpoint")
        trainer = Trainer.resume(args.checkpoint, run_dir)
        if args.epochs is not None:
            trainer.config = replace(trainer.config, optim=replace(trainer.config.optim, epochs=args.epochs))
        (run_dir / "config.yaml").write_text(trainer.config.to_yaml())
    else:
        trainer = Trainer(config, run_dir)
    entries = trainer.fit(args.stop_after)
    for e in entries:
        print(f"epoch {e['epoch']:4d}  loss {e['loss']:.6f}  lr {e['lr']:.3e}")
    print(f"run directory: {run_dir}")


def cmd_infer(args, config, run_dir):
    model, ckpt = _checkpoint_model(args, config.device)
    stack = load_scene(args.scene)
    pred = predict(model, stack, config.device)
    hdr_scale = ckpt["config"].get("train", {}).get("hdr_scale", 1.0)
    hdr_path = run_dir / f"{stack.name}.hdr"
    write_hdr(hdr_path, pred * hdr_scale)
    np.save(run_dir / f"{stack.name}.npy", pred)
    preview = np.round(tonemap(np.clip(pred, 0, 1)) * 255).astype(np.uint8)
    if not cv2.imwrite(str(run_dir / f"{stack.name}.png"), preview[..., ::-1]):
        raise OSError(f"could not write preview for {stack.name}")
    print(hdr_path)


def cmd_eval(args, config, run_dir):
    model, _ = _checkpoint_model(args, config.device)
    manifest = args.manifest or config.data.test_manifest
    if manifest is None:
        raise ConfigError("eval needs --manifest or data.test_manifest")
    stacks = [load_scene(p) for p in read_manifest(manifest)]
    report = evaluate(lambda s: predict(model, s, config.device), stacks)
    report.write(run_dir)
    agg = report.aggregate
    print(f"{len(report.rows)} scenes, {len(report.skipped)} skipped  "
          f"PSNR-mu {agg['psnr_mu']:.3f}  PSNR-l {agg['psnr_l']:.3f}  "
          f"SSIM-mu {agg['ssim_mu']:.4f}  SSIM-l {agg['ssim_l']:.4f}")


def cmd_oracle(args, config, run_dir):
    shutil.copyfile(args.problem, run_dir / f"problem{args.problem.suffix or '.yaml'}")
    problem, solve_config, x_star = load_problem(args.problem)
    state = solve(problem, solve_config)
    trace = state.energy_trace
    with open(run_dir / "energy.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "energy"])
        for i, e in enumerate(trace, start=1):
            writer.writerow([i, repr(float(e))])
    x = state.x
    np.save(run_dir / "x.npy", x)
    img = x if x.ndim == 3 else np.repeat(x[..., None], 3, axis=2)
    write_hdr(run_dir / "x.hdr", np.clip(img, 0, None))
    start = initial_state(problem, solve_config.beta1, solve_config.beta3)
    summary = {
        "iterations": len(trace),
        "initial_energy": energy(problem, start),
        "final_energy": float(trace[-1]),
        "kappa": list(start.kappa(problem)),
    }
    if x_star is not None:
        summary["max_abs_error"] = float(np.max(np.abs(x - x_star)))
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))


def cmd_ablate(args, config, run_dir):
    rows = []
    for name, changes in SWEEPS[args.sweep]:
        if args.sweep == "components":
            variant_cfg = replace(config, model=config.model.variant(name))
        else:
            variant_cfg = with_model(config, **changes)
        vdir = run_dir / name
        trainer = Trainer(variant_cfg, vdir)
        (vdir / "config.yaml").write_text(variant_cfg.to_yaml())
        trainer.fit()
        model = trainer.model
        with count_block_calls(model) as calls:
            report = evaluate(lambda s: predict(model, s, trainer.device), trainer.val_scenes)
        m = variant_cfg.model
        row = {
            "variant": name,
            "stages": m.stages,
            "paradigm": m.paradigm,
            "use_sam": m.use_sam,
            "use_cfm": m.use_cfm,
            "use_dcm": m.use_dcm,
            "params": sum(p.numel() for p in model.parameters()),
            "epochs": trainer.epoch,
            "sam_calls": calls["SAM"],
            "cfm_calls": calls["CFM"],
            "dcm_calls": calls["DCM"],
            **{k: v for k, v in report.aggregate.items() if k != "scene"},
        }
        rows.append(row)
        print(f"{name:5s} params {row['params']:8d}  PSNR-mu {row['psnr_mu']:.3f}  "
              f"calls SAM/CFM/DCM {row['sam_calls']}/{row['cfm_calls']}/{row['dcm_calls']}")
    _write_table(run_dir, "ablation", rows)


def cmd_synth(args, config, run_dir):
    recipe = SyntheticDataConfig(count=args.count, size=args.size, noise=args.noise,
                                 offset=args.offset, seed=config.seed)
    paths = [save_scene(s, run_dir / s.name) for s in synthetic_scenes(recipe)]
    write_manifest(run_dir / "manifest.txt", [p.name for p in paths])
    print(run_dir / "manifest.txt")


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "oracle": cmd_oracle,
    "ablate": cmd_ablate,
    "synth": cmd_synth,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        torch.manual_seed(config.seed)
        run_dir = make_run_dir(args, config)
        COMMANDS[args.command](args, config, run_dir)
    except HANDLED as err:
        print(f"afunet {args.command}: error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
