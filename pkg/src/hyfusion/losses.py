"""Training objective: L1 + lambda1 * SAM + lambda2 * SWT on NCHW tensors."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .swt import swt_forward
from .tensor import Tensor

COS_MARGIN = 1e-7


@dataclass
class LossConfig:
    lambda_sam: float = 0.01
    lambda_swt: float = 0.01
    subband_weights: list[float] | None = None
    sam_eps: float = 1e-8
    swt_levels: int = 1
    wavelet: str = "haar"

    def __post_init__(self):
        if self.lambda_sam < 0 or self.lambda_swt < 0:
            raise ValueError("loss weights must be non-negative")
        if self.sam_eps <= 0:
            raise ValueError("sam_eps must be positive")
        if self.subband_weights is not None:
            if len(self.subband_weights) != 4 * self.swt_levels:
                raise ValueError(f"need {4 * self.swt_levels} subband weights, "
                                 f"got {len(self.subband_weights)}")
            if any(w < 0 for w in self.subband_weights):
                raise ValueError("subband weights must be non-negative")

    def weights(self) -> list[float]:
        if self.subband_weights is None:
            return [1.0] * (4 * self.swt_levels)
        return list(self.subband_weights)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown LossConfig keys: {sorted(unknown)}")
        return cls(**d)


def _as_tensor(y) -> Tensor:
    return y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float64))


def _same_shape(y: Tensor, y_star: Tensor) -> None:
    if y.shape != y_star.shape:
        raise ValueError(f"shape mismatch: reference {y.shape} vs estimate {y_star.shape}")


def l1_loss(y, y_star) -> Tensor:
    y, y_star = _as_tensor(y), _as_tensor(y_star)
    _same_shape(y, y_star)
    return T.abs_(y_star - y).mean()


def spectral_angles(y, y_star, eps: float = 1e-8) -> Tensor:
    """Per-pixel spectral angle in radians; band axis is -3 (``[..., B, H, W]``)."""
    y, y_star = _as_tensor(y), _as_tensor(y_star)
    _same_shape(y, y_star)
    dot = (y * y_star).sum(axis=-3)
    n1 = T.sqrt((y * y).sum(axis=-3)) + eps
    n2 = T.sqrt((y_star * y_star).sum(axis=-3)) + eps
    cos = T.clip(dot / (n1 * n2), -1.0 + COS_MARGIN, 1.0 - COS_MARGIN)
    return T.arccos(cos)


def sam_loss(y, y_star, eps: float = 1e-8) -> Tensor:
    """Mean spectral angle (radians) over all pixels of the batch."""
    return spectral_angles(y, y_star, eps).mean()


def swt_loss(y, y_star, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    y, y_star = _as_tensor(y), _as_tensor(y_star)
    _same_shape(y, y_star)
    pa = swt_forward(y, cfg.swt_levels, cfg.wavelet).subbands()
    pb = swt_forward(y_star, cfg.swt_levels, cfg.wavelet).subbands()
    total = None
    for lam, a, b in zip(cfg.weights(), pa, pb):
        if lam == 0:
            continue
        term = T.abs_(b - a).mean() * lam
        total = term if total is None else total + term
    if total is None:
        return (y_star * 0.0).sum()
    return total


@dataclass
class LossTerms:
    total: Tensor
    l1: float
    sam: float
    swt: float

    def as_dict(self) -> dict[str, float]:
        return {"total": self.total.item(), "l1": self.l1, "sam": self.sam, "swt": self.swt}


def total_loss(y, y_star, cfg: LossConfig | None = None, terms: bool = False):
    cfg = cfg or LossConfig()
    l1 = l1_loss(y, y_star)
    total = l1
    sam = swt = None
    if cfg.lambda_sam:
        sam = sam_loss(y, y_star, cfg.sam_eps)
        total = total + sam * cfg.lambda_sam
    if cfg.lambda_swt:
        swt = swt_loss(y, y_star, cfg)
        total = total + swt * cfg.lambda_swt
    if terms:
        return LossTerms(total, l1.item(), sam.item() if sam is not None else 0.0,
                         swt.item() if swt is not None else 0.0)
    return total

