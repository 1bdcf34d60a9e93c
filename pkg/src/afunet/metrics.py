"""mu-law tone mapping, the reconstruction loss, and PSNR/SSIM.

Metric functions take numpy arrays in (H, W) or (H, W, C) layout and compute
in float64. The loss works on torch tensors.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
import torch
import torch.nn as nn

__all__ = [
    "TonemapParams",
    "LossConfig",
    "PSNR_CAP",
    "clamp_events",
    "tonemap",
    "ReconstructionLoss",
    "PerceptualLoss",
    "psnr",
    "ssim",
    "gaussian_window",
    "image_metrics",
]

log = logging.getLogger(__name__)

PSNR_CAP = 100.0


@dataclass(frozen=True)
class TonemapParams:
    mu: float = 5000.0

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")


@dataclass(frozen=True)
class LossConfig:
    eta: float = 0.005
    perceptual_enabled: bool = False
    perceptual_layers: tuple = (8, 17, 26)
    perceptual_pretrained: bool = True

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")


class _ClampCounter:
    """Number of values above 1 that tone mapping has clamped so far."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


clamp_events = _ClampCounter()


def tonemap(x, params: TonemapParams = TonemapParams()):
    """tau(x) = log(1 + mu x) / log(1 + mu), for numpy arrays or torch tensors."""
    mu = params.mu
    if isinstance(x, torch.Tensor):
        over = int((x > 1).sum())
        if over:
            clamp_events.count += over
            log.warning("tonemap: clamped %d values above 1", over)
            x = x.clamp(max=1.0)
        return torch.log1p(mu * x) / math.log1p(mu)
    x = np.asarray(x, dtype=np.float64)
    over = int(np.count_nonzero(x > 1))
    if over:
        clamp_events.count += over
        log.warning("tonemap: clamped %d values above 1", over)
        x = np.minimum(x, 1.0)
    return np.log1p(mu * x) / math.log1p(mu)


class PerceptualLoss(nn.Module):
    """L1 distance between VGG-19 feature taps (post-ReLU ``features`` indices)."""

    def __init__(self, layers=(8, 17, 26), pretrained=True):
        super().__init__()
        from torchvision.models import VGG19_Weights, vgg19

        weights = VGG19_Weights.IMAGENET1K_V1 if pretrained else None
        feats = vgg19(weights=weights).features[: max(layers) + 1].eval()
        for p in feats.parameters():
            p.requires_grad_(False)
        self.features = feats
        self.layers = tuple(sorted(layers))
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def _taps(self, x):
        x = (x - self.mean) / self.std
        taps = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.layers:
                taps.append(x)
        return taps

    def forward(self, pred, target):
        return sum((a - b).abs().mean() for a, b in zip(self._taps(pred), self._taps(target)))


class ReconstructionLoss(nn.Module):
    """Mean L1 in the tone-mapped domain plus ``eta`` times the perceptual term."""

    def __init__(self, config: LossConfig = LossConfig(), tonemap_params: TonemapParams = TonemapParams()):
        super().__init__()
        self.config = config
        self.tonemap_params = tonemap_params
        self.perceptual = None
        if config.perceptual_enabled and config.eta > 0:
            self.perceptual = PerceptualLoss(config.perceptual_layers, config.perceptual_pretrained)

    def forward(self, pred, gt):
        if pred.shape != gt.shape:
            raise ValueError(f"pred shape {tuple(pred.shape)} != gt shape {tuple(gt.shape)}")
        tp, tg = tonemap(pred, self.tonemap_params), tonemap(gt, self.tonemap_params)
        loss = (tg - tp).abs().mean()
        if self.perceptual is not None:
            loss = loss + self.config.eta * self.perceptual(tp, tg)
        return loss


def _domain(x, domain, params):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    if domain == "linear":
        return x
    if domain == "mu":
        return tonemap(x, params)
    raise ValueError(f"unknown domain {domain!r}; use 'linear' or 'mu'")


def psnr(pred, gt, domain="linear", params: TonemapParams = TonemapParams()):
    """PSNR with peak 1; identical inputs report ``PSNR_CAP``."""
    a, b = _domain(pred, domain, params), _domain(gt, domain, params)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size=11, sigma=1.5):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    k = len(g)
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def _gray(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x.mean(axis=2)
    if x.ndim == 2:
        return x
    raise ValueError(f"expected (H, W) or (H, W, C) image, got shape {x.shape}")


def ssim(pred, gt, domain="linear", params: TonemapParams = TonemapParams(),
         window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Gaussian-window SSIM on the channel-mean image, averaged over valid positions."""
    a = _gray(_domain(pred, domain, params))
    b = _gray(_domain(gt, domain, params))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} is smaller than the {window}x{window} window")
    c1, c2 = k1 ** 2, k2 ** 2
    g = gaussian_window(window, sigma)
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def image_metrics(pred, gt, params: TonemapParams = TonemapParams()):
    """The four reported numbers for one (H, W, 3) prediction."""
    return {
        "psnr_mu": psnr(pred, gt, "mu", params),
        "psnr_l": psnr(pred, gt, "linear", params),
        "ssim_mu": ssim(pred, gt, "mu", params),
        "ssim_l": ssim(pred, gt, "linear", params),
    }
