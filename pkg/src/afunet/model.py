"""T-stage alignment/fusion unfolding network.

Each stage is one outer iteration of :func:`afunet.oracle.solve` carried out
in feature space: two SAMs for the alignment step, then SFM, two CFMs, DCM
and a residual MLP for the fusion step.
"""
from collections import Counter
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from typing import Literal, NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import CFM, DCM, SAM, SFEM, SFM, BlockConfig, ReconHead, ResidualFuse

__all__ = ["ModelConfig", "StageState", "AFMStage", "AFUNet", "ABLATION_VARIANTS", "count_block_calls"]


@dataclass(frozen=True)
class ModelConfig:
    stages: int = 4
    channels: int = 32
    window_size: int = 8
    num_heads: int = 4
    ffn_expansion: float = 2.0
    paradigm: Literal["AF", "FA"] = "AF"
    use_sam: bool = True
    use_cfm: bool = True
    use_dcm: bool = True

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError(f"stages must be >= 1, got {self.stages}")
        if self.paradigm not in ("AF", "FA"):
            raise ValueError(f"paradigm must be 'AF' or 'FA', got {self.paradigm!r}")
        self.block_config()  # validates channel/head divisibility

    def block_config(self) -> BlockConfig:
        return BlockConfig(self.channels, self.window_size, self.num_heads, self.ffn_expansion)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def variant(self, name: str) -> "ModelConfig":
        """Component ablation variant: M1 (no SAM/CFM/DCM), M2 SAM, M3 CFM, M4 DCM, or full."""
        toggles = ABLATION_VARIANTS[name]
        return ModelConfig(**{**asdict(self), **toggles})


ABLATION_VARIANTS = {
    "M1": dict(use_sam=False, use_cfm=False, use_dcm=False),
    "M2": dict(use_sam=True, use_cfm=False, use_dcm=False),
    "M3": dict(use_sam=False, use_cfm=True, use_dcm=False),
    "M4": dict(use_sam=False, use_cfm=False, use_dcm=True),
    "full": dict(use_sam=True, use_cfm=True, use_dcm=True),
}


class StageState(NamedTuple):
    f_a1: torch.Tensor
    f_x: torch.Tensor
    f_a3: torch.Tensor


class AFMStage(nn.Module):
    """One alignment-fusion stage. Disabled components are not built and act as identity."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        bc = cfg.block_config()
        self.paradigm = cfg.paradigm
        self.sam1 = SAM(bc) if cfg.use_sam else None
        self.sam3 = SAM(bc) if cfg.use_sam else None
        self.sfm = SFM(bc)
        self.cfm_u = CFM(bc) if cfg.use_cfm else None
        self.cfm_v = CFM(bc) if cfg.use_cfm else None
        self.dcm = DCM(bc) if cfg.use_dcm else None
        self.fuse = ResidualFuse(cfg.channels)

    def align(self, f_a1, f_a3, f_x):
        if self.sam1 is None:
            return f_a1, f_a3
        return self.sam1(f_a1, f_x), self.sam3(f_a3, f_x)

    def fusion(self, f_a1, f_x, f_a3, f_y2):
        f_us, f_r, f_vs = self.sfm(f_a1, f_x, f_a3)
        if self.cfm_u is None:
            f_u, f_v = f_us, f_vs
        else:
            f_u, f_v = self.cfm_u(f_us, f_x), self.cfm_v(f_vs, f_x)
        f_xp = f_x if self.dcm is None else self.dcm(f_u, f_y2, f_v)
        return self.fuse(f_u, f_xp, f_v, f_r)

    def forward(self, state: StageState, f_y2) -> StageState:
        f_a1, f_x, f_a3 = state
        if self.paradigm == "AF":
            f_a1, f_a3 = self.align(f_a1, f_a3, f_x)
            f_x = self.fusion(f_a1, f_x, f_a3, f_y2)
        else:
            f_x = self.fusion(f_a1, f_x, f_a3, f_y2)
            f_a1, f_a3 = self.align(f_a1, f_a3, f_x)
        return StageState(f_a1, f_x, f_a3)


def _pad_to_multiple(t, multiple):
    H, W = t.shape[-2:]
    ph, pw = (-H) % multiple, (-W) % multiple
    if not (ph or pw):
        return t
    mode = "reflect" if ph < H and pw < W else "replicate"
    return F.pad(t, (0, pw, 0, ph), mode=mode)


class AFUNet(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.sfem1 = SFEM(cfg.channels)
        self.sfem2 = SFEM(cfg.channels)
        self.sfem3 = SFEM(cfg.channels)
        self.stages = nn.ModuleList(AFMStage(cfg) for _ in range(cfg.stages))
        self.head = ReconHead(cfg.channels)

    def initialize(self, y1, y2, y3):
        """Shallow features; f_y2 doubles as the initial f_x and the DCM/head observation."""
        f_y2 = self.sfem2(y2)
        return StageState(self.sfem1(y1), f_y2, self.sfem3(y3)), f_y2

    def forward(self, y1, y2, y3):
        for name, y in (("y1", y1), ("y2", y2), ("y3", y3)):
            if y.dim() != 4 or y.shape[1] != 6:
                raise ValueError(f"{name}: expected (B, 6, H, W), got {tuple(y.shape)}")
        if not (y1.shape == y2.shape == y3.shape):
            raise ValueError(f"input shapes differ: {tuple(y1.shape)}, {tuple(y2.shape)}, {tuple(y3.shape)}")
        H, W = y2.shape[-2:]
        ws = self.cfg.window_size
        y1, y2, y3 = (_pad_to_multiple(y, ws) for y in (y1, y2, y3))

        state, f_y2 = self.initialize(y1, y2, y3)
        for stage in self.stages:
            state = stage(state, f_y2)
        return self.head(state.f_x, f_y2)[..., :H, :W]


@contextmanager
def count_block_calls(model: nn.Module):
    """Count forward invocations of SAM, CFM and DCM modules inside ``model``."""
    counts = Counter({"SAM": 0, "CFM": 0, "DCM": 0})
    handles = []
    for m in model.modules():
        name = type(m).__name__
        if name in counts:
            handles.append(m.register_forward_hook(lambda mod, inp, out, n=name: counts.update([n])))
    try:
        yield counts
    finally:
        for h in handles:
            h.remove()
