"""Observation models and interpolation.

Spatial degradation (blur + decimation), spectral degradation (band
response), bilinear upsampling and antialiased bicubic downsampling are all
linear and separable, so each is represented by a per-axis matrix.  The
functions accept an ``HsiCube``, a raw ``(..., H, W)`` array, or a
``Tensor`` (differentiable path).
"""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .cube import HsiCube
from .tensor import Tensor


def _reflect_index(p: np.ndarray, n: int) -> np.ndarray:
    """Whole-sample reflection (``abcd|cba``) of integer positions into [0, n)."""
    if n == 1:
        return np.zeros_like(p)
    period = 2 * n - 2
    q = np.mod(p, period)
    return np.where(q < n, q, period - q)


def _phase_taps(center: float, half_width: float) -> np.ndarray:
    """Integer positions within ``half_width`` of a (possibly half-integer) center."""
    lo = math.ceil(center - half_width - 1e-9)
    hi = math.floor(center + half_width + 1e-9)
    return np.arange(lo, hi + 1)


def _frozen(fn):
    """Cache a matrix builder and hand out read-only arrays."""
    @functools.lru_cache(maxsize=64)
    @functools.wraps(fn)
    def wrapper(*args):
        m = fn(*args)
        m.setflags(write=False)
        return m
    return wrapper


def _kernel_matrix(n_in: int, n_out: int, factor: int, kernel, half_width: float) -> np.ndarray:
    """Rows are normalized kernel weights centred on half-pixel output sites, reflect boundary."""
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        c = (i + 0.5) * factor - 0.5
        pos = _phase_taps(c, half_width)
        w = kernel(pos - c)
        w = w / w.sum()
        np.add.at(m[i], _reflect_index(pos, n_in), w)
    return m


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlurOperator:
    """Separable Gaussian blur followed by decimation by ``stride``.

    Taps are sampled at integer offsets from each output site's centre,
    ``(i + 0.5) * stride - 0.5``, so for even strides the tap offsets are
    half-integers and the tap count is even.  This keeps the operator
    symmetric under 90-degree rotations of the image.
    """

    stride: int = 4
    sigma: float | None = None

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.sigma is None:
            object.__setattr__(self, "sigma", 0.5 * self.stride)
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @property
    def half_width(self) -> int:
        return math.ceil(3 * self.sigma)

    @property
    def taps(self) -> tuple[np.ndarray, np.ndarray]:
        """(offsets, weights) of the 1-D kernel; weights sum to 1."""
        c = 0.5 * self.stride - 0.5
        pos = _phase_taps(c, self.half_width)
        off = pos - c
        w = self._gauss(off)
        return off, w / w.sum()

    def _gauss(self, t):
        return np.exp(-0.5 * (np.asarray(t, dtype=np.float64) / self.sigma) ** 2)

    def matrix(self, n: int) -> np.ndarray:
        if n % self.stride:
            raise ValueError(f"stride {self.stride} does not divide extent {n}")
        return _blur_matrix(n, self.stride, self.sigma)


@dataclass(frozen=True)
class SpectralResponse:
    """Row-stochastic band-response matrix of shape (b_m, b)."""

    response: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.response, dtype=np.float64)
        if r.ndim != 2:
            raise ValueError(f"spectral response must be 2-D, got shape {r.shape}")
        if np.any(r < 0):
            raise ValueError("spectral response must be non-negative")
        if not np.allclose(r.sum(axis=1), 1.0, rtol=0, atol=1e-12):
            raise ValueError("spectral response rows must sum to 1")
        object.__setattr__(self, "response", r)

    @property
    def msi_bands(self) -> int:
        return self.response.shape[0]

    @property
    def hsi_bands(self) -> int:
        return self.response.shape[1]

    @classmethod
    def block_average(cls, bands: int, msi_bands: int) -> "SpectralResponse":
        """Contiguous, nearly equal band groups, each averaged into one output band."""
        if not 1 <= msi_bands <= bands:
            raise ValueError(f"cannot split {bands} bands into {msi_bands} groups")
        r = np.zeros((msi_bands, bands))
        for row, group in enumerate(np.array_split(np.arange(bands), msi_bands)):
            r[row, group] = 1.0 / group.size
        return cls(r)

    @classmethod
    def from_csv(cls, path) -> "SpectralResponse":
        with open(path, newline="") as fh:
            rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
        if len({len(r) for r in rows}) > 1:
            raise ValueError(f"{path}: ragged spectral response rows")
        return cls(np.array(rows))

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in self.response:
                writer.writerow([repr(float(v)) for v in row])


@_frozen
def _blur_matrix(n: int, stride: int, sigma: float) -> np.ndarray:
    gauss = lambda t: np.exp(-0.5 * (t / sigma) ** 2)
    return _kernel_matrix(n, n // stride, stride, gauss, math.ceil(3 * sigma))


# ---------------------------------------------------------------------------
# interpolation matrices
# ---------------------------------------------------------------------------

@_frozen
def bilinear_matrix(n_in: int, factor: int) -> np.ndarray:
    """Half-pixel-centre bilinear upsampling; source positions clamp at the border."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    n_out = n_in * factor
    m = np.zeros((n_out, n_in))
    src = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def catmull_rom(t, a: float = -0.5) -> np.ndarray:
    x = np.abs(np.asarray(t, dtype=np.float64))
    near = ((a + 2) * x - (a + 3)) * x * x + 1
    far = ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


@_frozen
def bicubic_down_matrix(n_in: int, factor: int) -> np.ndarray:
    """Antialiased Catmull-Rom downsampling (kernel stretched by ``factor``), reflect boundary."""
    if factor < 1 or n_in % factor:
        raise ValueError(f"factor {factor} does not divide extent {n_in}")
    return _kernel_matrix(n_in, n_in // factor, factor, lambda t: catmull_rom(t / factor), 2 * factor)


# ---------------------------------------------------------------------------
# application
# ---------------------------------------------------------------------------

def _separable(x, mh: np.ndarray, mw: np.ndarray):
    if isinstance(x, Tensor):
        return T.axis_matmul(T.axis_matmul(x, mh, -2), mw, -1)
    arr = np.asarray(x)
    out = np.moveaxis(np.tensordot(arr, mh, axes=([-2], [1])), -1, -2)
    return np.tensordot(out, mw, axes=([-1], [1]))


def _extents(x) -> tuple[int, int]:
    if isinstance(x, HsiCube):
        return x.height, x.width
    return tuple(x.shape[-2:])


def _dispatch(x, mh, mw):
    if isinstance(x, HsiCube):
        return x.with_values(_separable(x.values, mh, mw))
    return _separable(x, mh, mw)


def degrade_spatial(y, blur: BlurOperator):
    """LR observation: per-band Gaussian blur then decimation by the stride."""
    h, w = _extents(y)
    return _dispatch(y, blur.matrix(h), blur.matrix(w))


def degrade_spectral(y, response: SpectralResponse):
    """MSI observation: per-pixel band mixing by the response matrix."""
    r = response.response
    if isinstance(y, HsiCube):
        if y.bands != response.hsi_bands:
            raise ValueError(f"response expects {response.hsi_bands} bands, cube has {y.bands}")
        return y.with_values(np.tensordot(r, y.values, axes=([1], [0])))
    axis = -3
    if y.shape[axis] != response.hsi_bands:
        raise ValueError(f"response expects {response.hsi_bands} bands, input has {y.shape[axis]}")
    if isinstance(y, Tensor):
        return T.axis_matmul(y, r, axis)
    return np.moveaxis(np.tensordot(np.asarray(y), r, axes=([axis], [1])), -1, axis)


def upsample_bilinear(x, factor: int):
    h, w = _extents(x)
    return _dispatch(x, bilinear_matrix(h, factor), bilinear_matrix(w, factor))


def downsample_bicubic(x, factor: int):
    h, w = _extents(x)
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide extents {h}x{w}")
    return _dispatch(x, bicubic_down_matrix(h, factor), bicubic_down_matrix(w, factor))
