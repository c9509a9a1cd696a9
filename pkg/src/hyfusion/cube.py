"""The hyperspectral raster value type."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class HsiCube:
    """Band-sequential hyperspectral raster.

    ``values`` has shape ``(bands, height, width)``.  ``lo``/``hi`` bound the
    data range; ``wavelengths`` (nm) is optional but must match ``bands``.
    """

    values: np.ndarray
    lo: float = 0.0
    hi: float = 1.0
    wavelengths: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError(f"HsiCube values must be (bands, height, width), got shape {v.shape}")
        if v.dtype.kind != "f":
            v = v.astype(np.float64)
        object.__setattr__(self, "values", v)
        if not np.all(np.isfinite(v)):
            raise ValueError("HsiCube values must be finite")
        if v.size and not (self.lo <= v.min() and v.max() <= self.hi):
            raise ValueError(f"values [{v.min()}, {v.max()}] escape declared range [{self.lo}, {self.hi}]")
        if self.wavelengths is not None:
            wl = np.asarray(self.wavelengths, dtype=np.float64)
            if wl.shape != (v.shape[0],):
                raise ValueError(f"{wl.size} wavelengths for {v.shape[0]} bands")
            object.__setattr__(self, "wavelengths", wl)

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        """(height, width, bands), the conventional HSI extent order."""
        return self.height, self.width, self.bands

    def with_values(self, values: np.ndarray, keep_wavelengths: bool = True) -> "HsiCube":
        """New cube with the same metadata; the range widens to cover ``values``."""
        values = np.asarray(values)
        lo = min(self.lo, float(values.min())) if values.size else self.lo
        hi = max(self.hi, float(values.max())) if values.size else self.hi
        wl = self.wavelengths if keep_wavelengths and values.shape[0] == self.bands else None
        return HsiCube(values, lo, hi, wl)

    def __eq__(self, other) -> bool:
        if not isinstance(other, HsiCube):
            return NotImplemented
        same_wl = (self.wavelengths is None and other.wavelengths is None) or (
            self.wavelengths is not None and other.wavelengths is not None
            and np.array_equal(self.wavelengths, other.wavelengths))
        return (self.values.shape == other.values.shape and np.array_equal(self.values, other.values)
                and self.lo == other.lo and self.hi == other.hi and same_wl)
