"""Training loop, checkpoints, evaluation reports and inference."""
import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .data import (
    PatchBatch,
    SceneError,
    SyntheticScene,
    epoch_rng,
    generate_synthetic,
    load_scene,
    read_manifest,
    sample_patches,
    split_validation,
)
from .metrics import ReconstructionLoss, image_metrics
from .model import AFUNet, ModelConfig

__all__ = [
    "CHECKPOINT_FORMAT",
    "CheckpointError",
    "cosine_lr",
    "synthetic_scenes",
    "load_training_scenes",
    "predict",
    "MetricReport",
    "evaluate",
    "Trainer",
    "load_checkpoint",
    "model_from_checkpoint",
]

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "afunet-checkpoint/1"
METRIC_KEYS = ("psnr_mu", "psnr_l", "ssim_mu", "ssim_l")


class CheckpointError(RuntimeError):
    pass


def cosine_lr(epoch, epochs, lr_init=5e-4, lr_final=5e-6):
    """lr_final + (lr_init - lr_final) (1 + cos(pi e / E)) / 2."""
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * epoch / epochs))


def synthetic_scenes(cfg, prefix="synthetic"):
    rng = np.random.default_rng(cfg.seed)
    spec = SyntheticScene(
        height=cfg.size,
        width=cfg.size,
        noise=cfg.noise,
        offsets=((cfg.offset, -cfg.offset), (-cfg.offset, cfg.offset)),
    )
    return [generate_synthetic(spec, rng, name=f"{prefix}_{i:03d}") for i in range(cfg.count)]


def load_training_scenes(config: RunConfig):
    """(train, val) exposure stacks from the manifest or the synthetic recipe."""
    data = config.data
    if data.synthetic is not None:
        scenes = synthetic_scenes(data.synthetic)
    elif data.train_manifest:
        scenes = [load_scene(p) for p in read_manifest(data.train_manifest)]
    else:
        raise SceneError("data", "no train_manifest and no synthetic recipe configured")
    scenes = [s for s in scenes if s.gt is not None]
    if not scenes:
        raise SceneError(data.train_manifest or "data", "training set is empty")
    return split_validation(scenes, data.val_fraction, config.seed)


@torch.no_grad()
def predict(model, stack, device="cpu"):
    """Full-image forward pass; returns (H, W, 3) float64 in (0, 1)."""
    dtype = next(model.parameters()).dtype
    ys = [torch.from_numpy(a)[None].to(device=device, dtype=dtype) for a in stack.inputs()]
    was_training = model.training
    model.eval()
    out = model(*ys)[0].permute(1, 2, 0).double().cpu().numpy()
    model.train(was_training)
    return out


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def aggregate(self):
        agg = {"scene": "mean"}
        for k in METRIC_KEYS:
            agg[k] = float(np.mean([r[k] for r in self.rows])) if self.rows else float("nan")
        return agg

    def all_rows(self):
        return self.rows + [self.aggregate]

    def write(self, directory, stem="metrics"):
        directory = Path(directory)
        rows = self.all_rows()
        with open(directory / f"{stem}.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["scene", *METRIC_KEYS])
            writer.writeheader()
            for r in rows:
                writer.writerow({k: r[k] for k in ("scene", *METRIC_KEYS)})
        with open(directory / f"{stem}.jsonl", "w") as fh:
            for r in rows:
                fh.write(json.dumps(r) + "\n")
        if self.skipped:
            (directory / f"{stem}.skipped.txt").write_text("".join(f"{s}\n" for s in self.skipped))


def evaluate(predict_fn, stacks):
    """Per-scene metrics for every stack with ground truth; the rest are skipped."""
    report = MetricReport()
    for stack in stacks:
        if stack.gt is None:
            log.warning("skipping %s: no ground truth", stack.name)
            report.skipped.append(stack.name)
            continue
        pred = predict_fn(stack)
        report.rows.append({"scene": stack.name, **image_metrics(pred, stack.gt)})
    return report


def _rng_states():
    return {"torch": torch.get_rng_state(), "numpy": np.random.get_state()}


def load_checkpoint(path, map_location="cpu"):
    try:
        ckpt = torch.load(path, map_location=map_location, weights_only=False)
    except Exception as err:  # torch raises a zoo of types for corrupt archives
        raise CheckpointError(f"{path}: unreadable checkpoint ({err})") from None
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not an {CHECKPOINT_FORMAT} archive")
    return ckpt


def model_from_checkpoint(ckpt, device="cpu"):
    model = AFUNet(ModelConfig.from_dict(ckpt["config"]["model"]))
    try:
        model.load_state_dict(ckpt["model"])
    except RuntimeError as err:
        raise CheckpointError(f"checkpoint weights do not match the model: {err}") from None
    return model.to(device).eval()


class Trainer:
    """Owns model, optimizer and the append-only run ledger for one training run."""

    def __init__(self, config: RunConfig, run_dir, train_scenes=None, val_scenes=None):
        self.config = config
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        probe = self.run_dir / ".write_probe"
        try:
            probe.write_text("")
            probe.unlink()
        except OSError as err:
            raise OSError(f"run directory {self.run_dir} is not writable: {err}") from None

        if train_scenes is None:
            train_scenes, val_scenes = load_training_scenes(config)
        if not train_scenes:
            raise SceneError("data", "training set is empty")
        self.train_scenes = list(train_scenes)
        self.val_scenes = list(val_scenes if val_scenes is not None else train_scenes)

        self.device = torch.device(config.device)
        torch.manual_seed(config.seed)
        self.model = AFUNet(config.model).to(self.device)
        o = config.optim
        self.optimizer = torch.optim.Adam(
            self.model.parameters(), lr=o.lr_init, betas=o.betas, eps=o.eps, weight_decay=o.weight_decay
        )
        self.criterion = ReconstructionLoss(config.loss).to(self.device)
        self.epoch = 0
        self.best_psnr_mu = -math.inf
        self.ledger_path = self.run_dir / "ledger.jsonl"

    # checkpoints

    def state(self):
        return {
            "format": CHECKPOINT_FORMAT,
            "config": self.config.to_dict(),
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "epoch": self.epoch,
            "best_psnr_mu": self.best_psnr_mu,
            "seed": self.config.seed,
            "rng": _rng_states(),
        }

    def save_checkpoint(self, name):
        path = self.run_dir / name
        tmp = path.with_suffix(".tmp")
        torch.save(self.state(), tmp)
        tmp.replace(path)
        return path

    def load_state(self, ckpt):
        self.model.load_state_dict(ckpt["model"])
        self.optimizer.load_state_dict(ckpt["optimizer"])
        self.epoch = int(ckpt["epoch"])
        self.best_psnr_mu = float(ckpt["best_psnr_mu"])
        torch.set_rng_state(ckpt["rng"]["torch"])
        np.random.set_state(ckpt["rng"]["numpy"])

    @classmethod
    def resume(cls, path, run_dir=None, **kwargs):
        ckpt = load_checkpoint(path)
        config = RunConfig.from_dict(ckpt["config"])
        trainer = cls(config, run_dir or Path(path).parent, **kwargs)
        trainer.load_state(ckpt)
        return trainer

    # training

    def lr_at(self, epoch):
        o = self.config.optim
        return cosine_lr(epoch, o.epochs, o.lr_init, o.lr_final)

    def epoch_batches(self, epoch):
        """Deterministic batches for ``epoch``: a pure function of (seed, epoch)."""
        o, d = self.config.optim, self.config.data
        rng = epoch_rng(self.config.seed, epoch)
        order = rng.permutation(len(self.train_scenes))
        patches = [
            sample_patches(self.train_scenes[i], o.patch, rng, count=d.patches_per_scene, augment=d.augment)
            for i in order
        ]
        flat = PatchBatch.collate(patches) if patches else None
        n = len(flat)
        for start in range(0, n, o.batch):
            sl = slice(start, start + o.batch)
            yield PatchBatch(flat.y1[sl], flat.y2[sl], flat.y3[sl], flat.gt[sl], flat.size, flat.meta[sl])

    def train_step(self, batch):
        y1, y2, y3, gt = batch.tensors(self.device)
        pred = self.model(y1, y2, y3)
        loss = self.criterion(pred, gt)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        return loss.item()

    def validate(self):
        report = evaluate(lambda s: predict(self.model, s, self.device), self.val_scenes)
        return report.aggregate

    def _log(self, entry):
        with open(self.ledger_path, "a") as fh:
            fh.write(json.dumps(entry) + "\n")

    def run_epoch(self):
        epoch = self.epoch
        lr = self.lr_at(epoch)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        t0 = time.perf_counter()
        self.model.train()
        losses = [self.train_step(b) for b in self.epoch_batches(epoch)]
        self.epoch += 1
        entry = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses)), "losses": losses}

        t = self.config.train
        last = self.epoch == self.config.optim.epochs
        checkpoints = []
        if self.epoch % t.val_every == 0 or last:
            metrics = self.validate()
            entry["val"] = metrics
            if metrics["psnr_mu"] > self.best_psnr_mu:
                self.best_psnr_mu = metrics["psnr_mu"]
                checkpoints.append(str(self.save_checkpoint("best.pt")))
        if self.epoch % t.checkpoint_every == 0 or last:
            checkpoints.append(str(self.save_checkpoint("last.pt")))
        entry["checkpoints"] = checkpoints
        entry["wall_clock"] = time.perf_counter() - t0
        self._log(entry)
        return entry

    def fit(self, until=None):
        """Train up to epoch ``until`` (default: the configured total)."""
        until = self.config.optim.epochs if until is None else min(until, self.config.optim.epochs)
        entries = []
        while self.epoch < until:
            entries.append(self.run_epoch())
            log.info("epoch %d loss %.5f lr %.2e", entries[-1]["epoch"], entries[-1]["loss"], entries[-1]["lr"])
        return entries
