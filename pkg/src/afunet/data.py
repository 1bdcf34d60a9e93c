"""Scene loading, synthetic scenes and patch sampling.

On-disk scene layout (Kalantari style)::

    scene/
        *.tif           three LDR exposures, sorted by name = ascending exposure
        exposures.txt   three EV values, one per line
        HDRImg.hdr      optional ground truth

Images are kept as float64 (H, W, 3) arrays until batching.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .rgbe import read_hdr, write_hdr

__all__ = [
    "GAMMA",
    "SceneError",
    "ExposureStack",
    "PatchBatch",
    "SyntheticScene",
    "exposure_times",
    "gamma_companions",
    "load_scene",
    "save_scene",
    "read_ldr",
    "read_manifest",
    "write_manifest",
    "sample_patches",
    "dihedral",
    "generate_synthetic",
    "epoch_rng",
    "split_validation",
]

log = logging.getLogger(__name__)

GAMMA = 2.2
LDR_SUFFIXES = (".tif", ".tiff", ".png")


class SceneError(ValueError):
    def __init__(self, path, reason):
        self.path = str(path)
        super().__init__(f"{path}: {reason}")


def exposure_times(ev, ref_index=1):
    """Relative exposure times t_i = 2^(ev_i - ev_ref)."""
    ev = np.asarray(ev, dtype=np.float64)
    return np.power(2.0, ev - ev[ref_index])


def gamma_companions(ldrs, ev, gamma=GAMMA, ref_index=1):
    """H_i = L_i^gamma / t_i, so the reference companion is L_ref^gamma."""
    t = exposure_times(ev, ref_index)
    return tuple(np.power(L, gamma) / ti for L, ti in zip(ldrs, t))


@dataclass(frozen=True)
class ExposureStack:
    """Three LDR exposures of one scene; index 1 (the middle one) is the reference."""

    ldr: tuple
    ev: tuple
    hdr: tuple = None
    gt: np.ndarray = None
    name: str = ""
    gamma: float = GAMMA
    reference_index: int = 1

    def __post_init__(self):
        if len(self.ldr) != 3 or len(self.ev) != 3:
            raise ValueError("an exposure stack holds exactly three images and three EVs")
        shape = self.ldr[0].shape
        for i, L in enumerate(self.ldr):
            if L.shape != shape:
                raise ValueError(f"L{i + 1} shape {L.shape} differs from L1 {shape}")
            if L.min() < 0 or L.max() > 1:
                raise ValueError(f"L{i + 1} has values outside [0, 1]")
        if self.gt is not None:
            if self.gt.shape != shape:
                raise ValueError(f"gt shape {self.gt.shape} differs from LDR shape {shape}")
            if self.gt.min() < 0:
                raise ValueError("gt has negative radiance")
        if self.hdr is None:
            object.__setattr__(self, "hdr", gamma_companions(self.ldr, self.ev, self.gamma, self.reference_index))

    @property
    def shape(self):
        return self.ldr[0].shape[:2]

    @property
    def eval_only(self):
        return self.gt is None

    def inputs(self, dtype=np.float32):
        """The three 6-channel network inputs [L_i, H_i] as (6, H, W) arrays."""
        return tuple(
            np.concatenate([L, H], axis=2).transpose(2, 0, 1).astype(dtype)
            for L, H in zip(self.ldr, self.hdr)
        )


@dataclass
class PatchBatch:
    y1: np.ndarray
    y2: np.ndarray
    y3: np.ndarray
    gt: np.ndarray
    size: int
    meta: list = field(default_factory=list)

    def __len__(self):
        return self.y1.shape[0]

    def tensors(self, device="cpu", dtype=None):
        import torch

        conv = lambda a: torch.from_numpy(a).to(device=device, dtype=dtype or torch.float32)
        return conv(self.y1), conv(self.y2), conv(self.y3), conv(self.gt)

    @classmethod
    def collate(cls, batches):
        return cls(
            y1=np.concatenate([b.y1 for b in batches]),
            y2=np.concatenate([b.y2 for b in batches]),
            y3=np.concatenate([b.y3 for b in batches]),
            gt=np.concatenate([b.gt for b in batches]),
            size=batches[0].size,
            meta=[m for b in batches for m in b.meta],
        )


def read_ldr(path):
    """Decode a 16-bit TIFF or 8-bit PNG into float64 RGB in [0, 1]."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise SceneError(path, "unreadable image")
    if img.dtype == np.uint16:
        img = img.astype(np.float64) / 65535.0
    elif img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    else:
        raise SceneError(path, f"unsupported LDR sample type {img.dtype}")
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.shape[2] == 4:
        img = img[..., :3]
    return img[..., ::-1].copy()  # BGR -> RGB


def write_ldr16(path, img):
    """Write an RGB float image in [0, 1] as a 16-bit TIFF/PNG."""
    q = np.round(np.clip(img, 0, 1) * 65535).astype(np.uint16)
    if not cv2.imwrite(str(path), q[..., ::-1]):
        raise OSError(f"could not write {path}")


def load_scene(path, gamma=GAMMA):
    path = Path(path)
    if not path.is_dir():
        raise SceneError(path, "scene directory not found")
    ldr_files = sorted(p for p in path.iterdir() if p.suffix.lower() in LDR_SUFFIXES)
    if len(ldr_files) != 3:
        raise SceneError(path, f"expected 3 LDR images, found {len(ldr_files)}")
    exp_file = path / "exposures.txt"
    if not exp_file.exists():
        raise SceneError(path, "missing exposures.txt")
    try:
        ev = tuple(float(tok) for tok in exp_file.read_text().split())
    except ValueError as err:
        raise SceneError(exp_file, f"bad exposure value ({err})") from None
    if len(ev) != 3:
        raise SceneError(exp_file, f"expected 3 exposure values, found {len(ev)}")

    ldr = tuple(read_ldr(p) for p in ldr_files)
    for p, L in zip(ldr_files[1:], ldr[1:]):
        if L.shape != ldr[0].shape:
            raise SceneError(p, f"shape {L.shape} differs from {ldr_files[0].name} {ldr[0].shape}")

    gt = None
    gt_file = path / "HDRImg.hdr"
    if gt_file.exists():
        gt = read_hdr(gt_file).astype(np.float64)
        if gt.shape != ldr[0].shape:
            raise SceneError(gt_file, f"shape {gt.shape} differs from LDR shape {ldr[0].shape}")
    else:
        log.info("%s has no HDRImg.hdr; usable for inference only", path)
    return ExposureStack(ldr=ldr, ev=ev, gt=gt, name=path.name, gamma=gamma)


def save_scene(stack: ExposureStack, path):
    """Write ``stack`` in the on-disk layout read by :func:`load_scene` (16-bit TIFFs)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, L in enumerate(stack.ldr, start=1):
        write_ldr16(path / f"ldr_{i}.tif", L)
    (path / "exposures.txt").write_text("".join(f"{v:g}\n" for v in stack.ev))
    if stack.gt is not None:
        write_hdr(path / "HDRImg.hdr", stack.gt)
    return path


def read_manifest(path):
    """Scene directories listed one per line; relative entries resolve against the manifest."""
    path = Path(path)
    if not path.exists():
        raise SceneError(path, "manifest not found")
    scenes = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        p = Path(line)
        scenes.append(p if p.is_absolute() else (path.parent / p))
    return scenes


def write_manifest(path, scenes):
    Path(path).write_text("".join(f"{s}\n" for s in scenes))


def epoch_rng(seed, epoch, worker=0):
    """Independent, reproducible stream per (seed, epoch, worker)."""
    return np.random.default_rng([seed, epoch, worker])


def split_validation(scenes, fraction=0.1, seed=0):
    """Hold out ``floor(fraction * n)`` scenes; with none held out, validate on the training set."""
    scenes = list(scenes)
    n_val = int(len(scenes) * fraction)
    if n_val == 0:
        return scenes, scenes
    order = np.random.default_rng(seed).permutation(len(scenes))
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(scenes) if i not in val_idx]
    val = [s for i, s in enumerate(scenes) if i in val_idx]
    return train, val


def dihedral(img, k):
    """Apply dihedral transform ``k`` in [0, 8) to the two leading (H, W) axes."""
    out = np.rot90(img, k % 4, axes=(0, 1))
    if k >= 4:
        out = out[:, ::-1]
    return out


def sample_patches(stack: ExposureStack, size, rng, count=1, augment=True):
    """Random ``size`` x ``size`` crops with one shared dihedral transform per crop."""
    if stack.gt is None:
        raise SceneError(stack.name, "cannot sample training patches without ground truth")
    H, W = stack.shape
    if H < size or W < size:
        raise SceneError(stack.name, f"scene {H}x{W} is smaller than patch size {size}")
    y = stack.inputs(np.float64)
    y_hwc = [a.transpose(1, 2, 0) for a in y]
    out = {k: [] for k in ("y1", "y2", "y3", "gt")}
    meta = []
    for _ in range(count):
        top = int(rng.integers(0, H - size + 1))
        left = int(rng.integers(0, W - size + 1))
        k = int(rng.integers(0, 8)) if augment else 0
        crop = lambda a: dihedral(a[top:top + size, left:left + size], k).transpose(2, 0, 1)
        for key, a in zip(("y1", "y2", "y3", "gt"), (*y_hwc, stack.gt)):
            out[key].append(crop(a).astype(np.float32))
        meta.append({"scene": stack.name, "top": top, "left": left, "transform": k})
    return PatchBatch(**{k: np.stack(v) for k, v in out.items()}, size=size, meta=meta)


@dataclass(frozen=True)
class SyntheticScene:
    """Recipe for a synthetic exposure stack.

    ``L_i = clip(x* . gain_i, 0, 1)^(1/gamma) + noise``, clipped to [0, 1].
    ``offsets`` are integer (dy, dx) circular shifts for the two non-reference exposures.
    """

    height: int = 64
    width: int = 64
    gains: tuple = (0.25, 1.0, 4.0)
    clip: float = 1.0
    gamma: float = GAMMA
    noise: float = 0.0
    offsets: tuple = ((0, 0), (0, 0))
    radiance_range: tuple = (0.02, 1.0)
    blobs: int = 6
    latent: np.ndarray = None

    def __post_init__(self):
        if len(self.gains) != 3 or min(self.gains) <= 0:
            raise ValueError("need three positive exposure gains")


def _latent_radiance(spec: SyntheticScene, rng):
    H, W = spec.height, spec.width
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    field = np.zeros((H, W, 3))
    for _ in range(spec.blobs):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        sy, sx = rng.uniform(0.08, 0.3) * H, rng.uniform(0.08, 0.3) * W
        colour = rng.uniform(0.2, 1.0, size=3)
        blob = np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
        field += blob[..., None] * colour
    gy, gx = rng.uniform(-1, 1, size=2)
    field += 0.3 * (1 + (gy * (yy / H - 0.5) + gx * (xx / W - 0.5)))[..., None]
    lo, hi = spec.radiance_range
    field = (field - field.min()) / (field.max() - field.min())
    return lo + (hi - lo) * field


def generate_synthetic(spec: SyntheticScene, rng, name="synthetic"):
    x_star = spec.latent if spec.latent is not None else _latent_radiance(spec, rng)
    x_star = np.asarray(x_star, dtype=np.float64)
    shifts = [spec.offsets[0], (0, 0), spec.offsets[1]]
    ldr = []
    for gain, shift in zip(spec.gains, shifts):
        x = np.roll(x_star, shift=tuple(shift), axis=(0, 1))
        L = np.clip(x * gain, 0.0, spec.clip) ** (1.0 / spec.gamma)
        if spec.noise > 0:
            L = L + rng.normal(0.0, spec.noise, size=L.shape)
        ldr.append(np.clip(L, 0.0, 1.0))
    ev = tuple(float(v) for v in np.log2(np.asarray(spec.gains) / spec.gains[1]))
    return ExposureStack(ldr=tuple(ldr), ev=ev, gt=x_star, name=name, gamma=spec.gamma)
