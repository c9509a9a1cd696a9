"""Synthetic scenes, simulated LR-HSI/HR-MSI pairs, augmentation and datasets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .cube import HsiCube
from .resample import BlurOperator, SpectralResponse, degrade_spatial, degrade_spectral

__all__ = ["SceneSpec", "synth_scene", "make_pair", "augment", "Sample", "Dataset", "HsiCube"]


@dataclass
class SceneSpec:
    """Linear-mixing scene parameters.

    ``length_scale`` is the endmember smoothness as a fraction of the band
    count; ``softness`` is the softmax temperature turning blob fields into
    abundances (larger = smoother material boundaries); blob radii are
    fractions of the image side.
    """

    seed: int = 0
    height: int = 128
    width: int = 128
    bands: int = 31
    endmembers: int = 6
    length_scale: float = 0.15
    blobs: int = 40
    softness: float = 0.1
    radius: tuple[float, float] = (0.02, 0.12)
    wavelength_range: tuple[float, float] = (400.0, 2500.0)

    def __post_init__(self):
        if self.endmembers < 1:
            raise ValueError("need at least one endmember")
        if min(self.height, self.width, self.bands) < 1:
            raise ValueError("extents must be positive")
        if self.softness <= 0 or self.length_scale <= 0:
            raise ValueError("softness and length_scale must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown SceneSpec keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("radius", "wavelength_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def endmember_spectra(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """(E, bands) smooth curves from a squared-exponential Gaussian process, mapped into [0.05, 0.95]."""
    b = spec.bands
    idx = np.arange(b, dtype=np.float64)
    ell = max(spec.length_scale * b, 1e-3)
    cov = np.exp(-0.5 * ((idx[:, None] - idx[None, :]) / ell) ** 2) + 1e-8 * np.eye(b)
    chol = np.linalg.cholesky(cov)
    draws = rng.standard_normal((spec.endmembers, b)) @ chol.T
    return 0.05 + 0.9 / (1.0 + np.exp(-draws))


def abundance_maps(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """(E, H, W) non-negative maps summing to one per pixel."""
    e, h, w = spec.endmembers, spec.height, spec.width
    if e == 1:
        return np.ones((1, h, w))
    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    side = min(h, w)
    logits = 0.1 * rng.standard_normal((e, 1, 1)) * np.ones((e, h, w))
    for _ in range(spec.blobs):
        k = rng.integers(e)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(*spec.radius) * side
        logits[k] += np.exp(-0.5 * ((yy - cy) ** 2 + (xx - cx) ** 2) / r ** 2)
    z = logits / spec.softness
    z -= z.max(axis=0, keepdims=True)
    a = np.exp(z)
    return a / a.sum(axis=0, keepdims=True)


def synth_scene(spec: SceneSpec, return_parts: bool = False):
    """Ground-truth cube Y(p) = sum_e a_e(p) s_e, deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    spectra = endmember_spectra(spec, rng)
    abund = abundance_maps(spec, rng)
    values = np.clip(np.tensordot(spectra, abund, axes=([0], [0])), 0.0, 1.0)
    wl = np.linspace(*spec.wavelength_range, spec.bands)
    cube = HsiCube(values, 0.0, 1.0, wl)
    return (cube, spectra, abund) if return_parts else cube


def make_pair(y: HsiCube, blur: BlurOperator, response: SpectralResponse) -> tuple[HsiCube, HsiCube]:
    """Simulated (LR-HSI, HR-MSI) observations of ``y``."""
    x_h = degrade_spatial(y, blur)
    x_m = degrade_spectral(y, response)
    return x_h, HsiCube(x_m.values, x_m.lo, x_m.hi)


def augment(x_h, x_m, y, rng, crop: int | None = None, rotate: bool = True, scale: int = 4):
    """Registered random crop (``crop`` in HR pixels) and rotation by a multiple of 90 degrees.

    Works on cubes or on ``(bands, H, W)`` arrays and returns the same kind.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    arrays = [v.values if isinstance(v, HsiCube) else np.asarray(v) for v in (x_h, x_m, y)]
    h_lr, w_lr = arrays[0].shape[-2:]
    hr_h, hr_w = arrays[2].shape[-2:]
    if (hr_h, hr_w) != (scale * h_lr, scale * w_lr) or arrays[1].shape[-2:] != (hr_h, hr_w):
        raise ValueError("LR/HR extents are not related by the scale factor")
    if crop is not None:
        if crop % scale:
            raise ValueError(f"crop {crop} is not divisible by scale {scale}")
        c = crop // scale
        if c > h_lr or c > w_lr:
            raise ValueError(f"crop {crop} exceeds source extents {hr_h}x{hr_w}")
        i0 = int(rng.integers(0, h_lr - c + 1))
        j0 = int(rng.integers(0, w_lr - c + 1))
        arrays[0] = arrays[0][..., i0:i0 + c, j0:j0 + c]
        for k in (1, 2):
            arrays[k] = arrays[k][..., scale * i0:scale * (i0 + c), scale * j0:scale * (j0 + c)]
    k_rot = int(rng.integers(4)) if rotate else 0
    arrays = [np.ascontiguousarray(np.rot90(a, k_rot, axes=(-2, -1))) for a in arrays]
    out = []
    for src, a in zip((x_h, x_m, y), arrays):
        out.append(src.with_values(a) if isinstance(src, HsiCube) else a)
    return tuple(out)


def rotate(x, k: int):
    """Rotate a cube or array by ``k`` quarter turns in the spatial plane."""
    if isinstance(x, HsiCube):
        return x.with_values(np.ascontiguousarray(np.rot90(x.values, k, axes=(-2, -1))))
    return np.ascontiguousarray(np.rot90(x, k, axes=(-2, -1)))


@dataclass
class Sample:
    x_h: np.ndarray
    x_m: np.ndarray
    y: np.ndarray
    seed: int = 0
    split: str = "train"


class Dataset:
    """In-memory list of samples with split tags."""

    def __init__(self, samples: list[Sample]):
        self.samples = list(samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i) -> Sample:
        return self.samples[i]

    def split(self, tag: str) -> "Dataset":
        return Dataset([s for s in self.samples if s.split == tag])

    def subset(self, fraction: float, seed: int = 0) -> "Dataset":
        """Nested subsets: a fixed seeded permutation truncated to ceil(fraction * n)."""
        if not 0 < fraction <= 1:
            raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
        n = len(self.samples)
        order = np.random.default_rng(seed).permutation(n)
        keep = max(1, int(np.ceil(fraction * n - 1e-9)))
        return Dataset([self.samples[i] for i in sorted(order[:keep])])

    @classmethod
    def synthesize(cls, n: int, spec: SceneSpec, scale: int = 4, msi_bands: int = 4,
                   ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> "Dataset":
        blur = BlurOperator(scale)
        resp = SpectralResponse.block_average(spec.bands, msi_bands)
        tags = split_tags(n, ratios)
        samples = []
        for i in range(n):
            s = SceneSpec.from_dict({**spec.to_dict(), "seed": spec.seed + i})
            y = synth_scene(s)
            x_h, x_m = make_pair(y, blur, resp)
            samples.append(Sample(x_h.values, x_m.values, y.values, s.seed, tags[i]))
        return cls(samples)


def split_tags(n: int, ratios=(0.8, 0.1, 0.1)) -> list[str]:
    """Deterministic train/val/test tags in the given proportions (remainder goes to train)."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not np.isclose(sum(ratios), 1.0):
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_val = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))
    n_train = n - n_val - n_test
    return ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
