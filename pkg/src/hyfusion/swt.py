"""Undecimated (stationary) 2-D wavelet transform with periodic boundaries.

Filters are scaled so the lowpass taps sum to 1 and the highpass taps sum
to 0.  With that scaling the analysis bank is a Parseval frame and the
inverse is simply its adjoint, at every a-trous dilation.

Subband names are two letters: the filter along the width axis, then the
filter along the height axis.  ``HL`` therefore responds to intensity
changes across columns (vertical edges).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cube import HsiCube
from .tensor import Tensor, make_op

SUBBANDS = ("LL", "LH", "HL", "HH")


def _wavelet_filters(name: str) -> tuple[np.ndarray, np.ndarray]:
    if name == "haar":
        lo = np.array([1.0, 1.0]) / np.sqrt(2.0)
    elif name == "db2":
        s3 = np.sqrt(3.0)
        lo = np.array([1 + s3, 3 + s3, 3 - s3, 1 - s3]) / (4 * np.sqrt(2.0))
    else:
        raise ValueError(f"unknown wavelet {name!r}; expected 'haar' or 'db2'")
    hi = np.array([(-1) ** k * lo[len(lo) - 1 - k] for k in range(len(lo))])
    return lo / np.sqrt(2.0), hi / np.sqrt(2.0)


WAVELETS = {name: _wavelet_filters(name) for name in ("haar", "db2")}


def _roll_sum(x: np.ndarray, taps: np.ndarray, dilation: int, axis: int, sign: int) -> np.ndarray:
    out = taps[0] * x
    for k in range(1, len(taps)):
        out = out + taps[k] * np.roll(x, sign * k * dilation, axis=axis)
    return out


def circular_filter(x, taps: np.ndarray, dilation: int, axis: int, adjoint: bool = False):
    """``y[n] = sum_k taps[k] * x[n + k*dilation]`` with wraparound (or its adjoint)."""
    sign = 1 if adjoint else -1
    if isinstance(x, Tensor):
        taps = np.asarray(taps, dtype=x.dtype)
        out = _roll_sum(x.data, taps, dilation, axis, sign)
        return make_op(out, (x,), lambda g: (_roll_sum(g, taps, dilation, axis, -sign),), "circular_filter")
    return _roll_sum(np.asarray(x), taps, dilation, axis, sign)


@dataclass
class SwtPyramid:
    """Per-level subbands, each at the full input extent.

    ``levels[j]`` maps subband name to an array (or Tensor) shaped like the
    input.  Level ``j`` uses filters dilated by ``2**j``.
    """

    levels: list[dict]
    wavelet: str
    shape: tuple[int, ...]
    cube_template: HsiCube | None = None

    @property
    def J(self) -> int:
        return len(self.levels)

    def subbands(self) -> list:
        """All subbands of all levels in a fixed order (level-major, LL first)."""
        return [lvl[name] for lvl in self.levels for name in SUBBANDS]


def _check_levels(n: int, filt_len: int, J: int, axis_name: str) -> None:
    span = (filt_len - 1) * 2 ** (J - 1) + 1
    if span > n:
        raise ValueError(f"J={J} dilates the filter to {span} taps, longer than {axis_name} extent {n}")


def swt_forward(x, J: int = 1, wavelet: str = "haar") -> SwtPyramid:
    if J < 1:
        raise ValueError(f"J must be >= 1, got {J}")
    lo, hi = WAVELETS.get(wavelet) or _wavelet_filters(wavelet)
    template = None
    if isinstance(x, HsiCube):
        template, x = x, x.values
    h, w = x.shape[-2:]
    _check_levels(h, len(lo), J, "height")
    _check_levels(w, len(lo), J, "width")
    levels = []
    approx = x
    for j in range(J):
        d = 2 ** j
        xl = circular_filter(approx, lo, d, -1)
        xh = circular_filter(approx, hi, d, -1)
        lvl = {
            "LL": circular_filter(xl, lo, d, -2),
            "LH": circular_filter(xl, hi, d, -2),
            "HL": circular_filter(xh, lo, d, -2),
            "HH": circular_filter(xh, hi, d, -2),
        }
        levels.append(lvl)
        approx = lvl["LL"]
    return SwtPyramid(levels, wavelet, tuple(x.shape), template)


def swt_inverse(p: SwtPyramid):
    if p.wavelet not in WAVELETS:
        raise ValueError(f"unknown wavelet {p.wavelet!r}")
    if not p.levels:
        raise ValueError("pyramid has no levels")
    for j, lvl in enumerate(p.levels):
        if set(lvl) != set(SUBBANDS):
            raise ValueError(f"level {j} has subbands {sorted(lvl)}, expected {SUBBANDS}")
        for name in SUBBANDS:
            if tuple(lvl[name].shape) != tuple(p.shape):
                raise ValueError(f"level {j} {name} has shape {lvl[name].shape}, pyramid says {p.shape}")
    lo, hi = WAVELETS[p.wavelet]
    approx = p.levels[-1]["LL"]
    for j in reversed(range(p.J)):
        d = 2 ** j
        lvl = p.levels[j]
        xl = circular_filter(approx, lo, d, -2, True) + circular_filter(lvl["LH"], hi, d, -2, True)
        xh = circular_filter(lvl["HL"], lo, d, -2, True) + circular_filter(lvl["HH"], hi, d, -2, True)
        approx = circular_filter(xl, lo, d, -1, True) + circular_filter(xh, hi, d, -1, True)
    if p.cube_template is not None:
        return p.cube_template.with_values(approx)
    return approx
