"""Reconstruction quality metrics on (bands, H, W) arrays or cubes."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .cube import HsiCube


def _arr(x) -> np.ndarray:
    if isinstance(x, HsiCube):
        return x.values.astype(np.float64)
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _pair(y, y_star) -> tuple[np.ndarray, np.ndarray]:
    a, b = _arr(y), _arr(y_star)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: reference {a.shape} vs estimate {b.shape}")
    return a, b


def rmse(y, y_star) -> float:
    a, b = _pair(y, y_star)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(y, y_star, peak: float | None = None) -> float:
    """10 log10(peak^2 / MSE); ``inf`` when the images are identical."""
    a, b = _pair(y, y_star)
    if peak is None:
        peak = float(a.max())
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def sam_metric(y, y_star, return_count: bool = False):
    """Mean spectral angle in degrees; pixels with an all-zero spectrum are skipped."""
    a, b = _pair(y, y_star)
    bands = a.shape[-3]
    a = np.moveaxis(a, -3, -1).reshape(-1, bands)
    b = np.moveaxis(b, -3, -1).reshape(-1, bands)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    keep = (na > 0) & (nb > 0)
    if not keep.any():
        raise ValueError("every pixel has an all-zero spectrum; SAM is undefined")
    cos = np.einsum("ij,ij->i", a[keep], b[keep]) / (na[keep] * nb[keep])
    angle = float(np.degrees(np.mean(np.arccos(np.clip(cos, -1.0, 1.0)))))
    excluded = int((~keep).sum())
    return (angle, excluded) if return_count else angle


def ergas(y, y_star, scale: int = 4) -> float:
    """100/scale * sqrt(mean_b (RMSE_b / mu_b)^2) with mu_b the reference band mean."""
    a, b = _pair(y, y_star)
    a = a.reshape(-1, *a.shape[-3:]) if a.ndim > 3 else a[None]
    b = b.reshape(a.shape)
    mu = a.mean(axis=(0, 2, 3))
    zero = np.flatnonzero(mu == 0)
    if zero.size:
        raise ValueError(f"reference band {int(zero[0])} has zero mean; ERGAS undefined")
    band_rmse = np.sqrt(np.mean((a - b) ** 2, axis=(0, 2, 3)))
    return float(100.0 / scale * np.sqrt(np.mean((band_rmse / mu) ** 2)))


@dataclass
class MetricReport:
    psnr_db: float
    sam_deg: float
    rmse: float
    ergas: float
    data_peak: float
    scale: int
    sam_excluded: int = 0

    def to_json_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["psnr_db"]):
            d["psnr_db"] = "inf"
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    def to_table(self) -> str:
        rows = [("PSNR (dB)", self.psnr_db), ("SAM (deg)", self.sam_deg), ("RMSE", self.rmse),
                ("ERGAS", self.ergas), ("peak", self.data_peak), ("scale", self.scale)]
        return "\n".join(f"{name:<10} {value:>12.6f}" if not isinstance(value, int)
                         else f"{name:<10} {value:>12d}" for name, value in rows)


def evaluate(y, y_star, scale: int = 4, peak: float | None = None) -> MetricReport:
    a, b = _pair(y, y_star)
    peak = float(a.max()) if peak is None else peak
    sam, excluded = sam_metric(a, b, return_count=True)
    return MetricReport(psnr(a, b, peak), sam, rmse(a, b), ergas(a, b, scale), peak, scale, excluded)
