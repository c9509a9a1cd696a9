"""HyFusion: dual-coupled SpeNet/SpaNet branches built from dense ERFB blocks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .attention import ISTL
from .cube import HsiCube
from .nn import Conv2d, Module
from .resample import downsample_bicubic, upsample_bilinear
from .tensor import Tensor

DENSE_STAGES = 4


@dataclass
class ModelConfig:
    bands: int = 172
    msi_bands: int = 4
    scale: int = 4
    channels: int = 32
    growth: int = 16
    blocks: int = 2
    window: int = 8
    shift: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    slope: float = 0.2
    dense: bool = True
    spanet_upsample: str = "after"
    zero_init_rec: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("bands", "msi_bands", "scale", "channels", "growth", "blocks", "window", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if not 1 <= self.shift < self.window:
            raise ValueError(f"shift must lie in [1, window), got {self.shift}")
        if self.spanet_upsample not in ("after", "before"):
            raise ValueError(f"spanet_upsample must be 'after' or 'before', got {self.spanet_upsample!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def stage_in_channels(self) -> list[int]:
        """Input channels of the five ERFB stages: C + (j-1) g when dense."""
        c, g = self.channels, self.growth
        if self.dense:
            return [c + j * g for j in range(DENSE_STAGES + 1)]
        return [c] + [g] * DENSE_STAGES

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        base = dict(bands=31, msi_bands=4)
        base.update(kw)
        return cls(**base)

    @classmethod
    def toy(cls, **kw) -> "ModelConfig":
        """Small configuration for tests and the single-sample overfit check."""
        base = dict(bands=31, msi_bands=4, channels=16, growth=8, blocks=1,
                    window=4, shift=2, heads=2)
        base.update(kw)
        return cls(**base)


@dataclass
class ErfbTrace:
    z: list[Tensor]
    stage_inputs: list[int]

    @property
    def z0(self) -> Tensor:
        return self.z[0]

    @property
    def z5(self) -> Tensor:
        return self.z[-1]


@dataclass
class FusionOutput:
    y: Tensor
    z_h: Tensor | None = None
    z_m: Tensor | None = None
    z_hm: Tensor | None = None
    traces: dict[str, list[ErfbTrace]] = field(default_factory=dict)

    def cubes(self) -> list[HsiCube]:
        return [HsiCube(v, min(0.0, float(v.min())), max(1.0, float(v.max()))) for v in self.y.data]


class ERFB(Module):
    """Four dense stages (concat -> 1x1 -> ISTL -> 3x3 -> LeakyReLU) plus a 0.2-scaled residual tail."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, use_shifted: bool = True):
        dt = cfg.np_dtype
        c, g = cfg.channels, cfg.growth
        self.dense, self.slope = cfg.dense, cfg.slope
        self.proj = [Conv2d(cin, c, 1, rng, dt) for cin in cfg.stage_in_channels()]
        self.istl = [ISTL(c, cfg.heads, cfg.window, cfg.shift, cfg.mlp_ratio, rng, dt, cfg.slope, use_shifted)
                     for _ in range(DENSE_STAGES + 1)]
        self.conv = [Conv2d(c, g, 3, rng, dt) for _ in range(DENSE_STAGES)] + [Conv2d(c, c, 3, rng, dt)]

    def _stage_input(self, feats: list[Tensor]) -> Tensor:
        return T.concat_channels(feats) if self.dense else feats[-1]

    def forward(self, z0: Tensor, trace: bool = False):
        feats = [z0]
        widths = []
        for j in range(DENSE_STAGES):
            inp = self._stage_input(feats)
            widths.append(inp.shape[1])
            feats.append(T.leaky_relu(self.conv[j](self.istl[j](self.proj[j](inp))), self.slope))
        inp = self._stage_input(feats)
        widths.append(inp.shape[1])
        tail = self.conv[-1](self.istl[-1](self.proj[-1](inp)))
        z5 = tail * 0.2 + z0
        if trace:
            return z5, ErfbTrace(feats + [z5], widths)
        return z5


class Branch(Module):
    """Shallow 3x3 conv + LeakyReLU, then a chain of ERFB blocks."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, upsample: int = 1):
        dt = cfg.np_dtype
        self.shallow = Conv2d(cfg.bands + cfg.msi_bands, cfg.channels, 3, rng, dt)
        self.blocks = [ERFB(cfg, rng) for _ in range(cfg.blocks)]
        self.slope = cfg.slope
        self.upsample = upsample

    def forward(self, draft: Tensor, trace: bool = False):
        z = T.leaky_relu(self.shallow(draft), self.slope)
        traces = []
        for block in self.blocks:
            if trace:
                z, tr = block(z, trace=True)
                traces.append(tr)
            else:
                z = block(z)
        if self.upsample > 1:
            z = upsample_bilinear(z, self.upsample)
        return (z, traces) if trace else z


def _as_batch(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, HsiCube):
        x = x.values[None]
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr)


def _check_pair(x_h: Tensor, x_m: Tensor, scale: int) -> None:
    if x_h.ndim != 4 or x_m.ndim != 4 or x_h.shape[0] != x_m.shape[0]:
        raise ValueError(f"expected batched NCHW inputs, got {x_h.shape} and {x_m.shape}")
    h, w = x_h.shape[-2:]
    hh, ww = x_m.shape[-2:]
    if (hh, ww) != (scale * h, scale * w):
        raise ValueError(f"HR-MSI extents {hh}x{ww} are not {scale}x the LR-HSI extents {h}x{w}")


def make_quasi_spectral_draft(x_h, x_m, scale: int) -> Tensor:
    """Bilinearly upsampled LR-HSI concatenated with the HR-MSI (HSI channels first)."""
    dt = x_h.dtype if isinstance(x_h, Tensor) else np.float64
    x_h, x_m = _as_batch(x_h, dt), _as_batch(x_m, dt)
    _check_pair(x_h, x_m, scale)
    up = upsample_bilinear(x_h, scale) if scale > 1 else x_h
    return T.concat_channels([up, x_m])


def make_quasi_spatial_draft(x_h, x_m, scale: int) -> Tensor:
    """LR-HSI concatenated with the bicubic-downsampled HR-MSI."""
    dt = x_h.dtype if isinstance(x_h, Tensor) else np.float64
    x_h, x_m = _as_batch(x_h, dt), _as_batch(x_m, dt)
    _check_pair(x_h, x_m, scale)
    down = downsample_bicubic(x_m, scale) if scale > 1 else x_m
    return T.concat_channels([x_h, down])


class HyFusion(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.spe = Branch(cfg, rng)
        self.spa = Branch(cfg, rng, upsample=cfg.scale if cfg.spanet_upsample == "after" else 1)
        self.rec = Conv2d(2 * cfg.channels, cfg.bands, 3, rng, cfg.np_dtype, zero=cfg.zero_init_rec)

    def forward(self, x_h, x_m, features: bool = False, trace: bool = False) -> FusionOutput:
        cfg = self.cfg
        x_h, x_m = _as_batch(x_h, cfg.np_dtype), _as_batch(x_m, cfg.np_dtype)
        if x_h.shape[1] != cfg.bands or x_m.shape[1] != cfg.msi_bands:
            raise ValueError(f"model expects {cfg.bands}/{cfg.msi_bands} bands, "
                             f"got {x_h.shape[1]}/{x_m.shape[1]}")
        up_h = upsample_bilinear(x_h, cfg.scale) if cfg.scale > 1 else x_h
        spe_draft = make_quasi_spectral_draft(x_h, x_m, cfg.scale)
        spa_draft = make_quasi_spatial_draft(x_h, x_m, cfg.scale)
        if cfg.spanet_upsample == "before" and cfg.scale > 1:
            spa_draft = upsample_bilinear(spa_draft, cfg.scale)
        out = FusionOutput(y=None)
        if trace:
            z_h, out.traces["spe"] = self.spe(spe_draft, trace=True)
            z_m, out.traces["spa"] = self.spa(spa_draft, trace=True)
        else:
            z_h, z_m = self.spe(spe_draft), self.spa(spa_draft)
        z_hm = T.concat_channels([z_h, z_m])
        out.y = self.rec(z_hm) + up_h
        if features:
            out.z_h, out.z_m, out.z_hm = z_h, z_m, z_hm
        return out


def fuse(x_h, x_m, model: HyFusion, **kw) -> FusionOutput:
    return model(x_h, x_m, **kw)


# ---------------------------------------------------------------------------
# closed-form parameter bookkeeping
# ---------------------------------------------------------------------------

def conv_params(c_in: int, c_out: int, k: int, bias: bool = True) -> int:
    return c_out * c_in * k * k + (c_out if bias else 0)


def linear_params(f_in: int, f_out: int, bias: bool = True) -> int:
    return f_out * f_in + (f_out if bias else 0)


def istl_params(cfg: ModelConfig, shifted: bool = True) -> int:
    c = cfg.channels
    hidden = int(round(c * cfg.mlp_ratio))
    attn = linear_params(c, 3 * c) + linear_params(c, c) + (2 * cfg.window - 1) ** 2 * cfg.heads
    path = 2 * (2 * c) + attn + linear_params(c, hidden) + linear_params(hidden, c)
    return (2 * path + 2) if shifted else (path + 1)


def erfb_params(cfg: ModelConfig) -> int:
    c, g = cfg.channels, cfg.growth
    n = sum(conv_params(cin, c, 1) for cin in cfg.stage_in_channels())
    n += (DENSE_STAGES + 1) * istl_params(cfg)
    n += DENSE_STAGES * conv_params(c, g, 3) + conv_params(c, c, 3)
    return n


def param_count(cfg: ModelConfig) -> int:
    branch = conv_params(cfg.bands + cfg.msi_bands, cfg.channels, 3) + cfg.blocks * erfb_params(cfg)
    return 2 * branch + conv_params(2 * cfg.channels, cfg.bands, 3)
