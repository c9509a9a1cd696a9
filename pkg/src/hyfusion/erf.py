"""Gradient-based effective receptive field (ERF) maps.

The probe sums the centre output pixel over channels, backpropagates to a
random N(0, 1) input, and accumulates ``|grad|`` over input channels and
samples.  Maps are normalised to a maximum of one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import ISTL
from .model import DENSE_STAGES, ERFB, ModelConfig
from .nn import Conv2d, Module, parameter
from .tensor import Tensor, backward

TAGS = ("a", "b", "c")
TAG_DESCRIPTIONS = {
    "a": "chain of single-path attention stages (window / shifted window alternating), 1x1 convs",
    "b": "as a, with dense connections",
    "c": "dense connections, two-path (W + SW) attention in every stage, 3x3 convs",
}
PROBE = "centre output summed over channels; |grad| summed over input channels and samples; N(0,1) inputs"


@dataclass
class ErfMap:
    values: np.ndarray
    center: tuple[int, int]
    tag: str = ""
    threshold: float = 1e-6
    samples: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def support(self, threshold: float | None = None) -> np.ndarray:
        return self.values > (self.threshold if threshold is None else threshold)

    def metadata(self) -> dict:
        return {"tag": self.tag, "center": list(self.center), "threshold": self.threshold,
                "samples": self.samples, "seed": self.seed, "shape": list(self.values.shape),
                "probe": PROBE, **self.meta}


def erf_map(fragment: Callable[[Tensor], Tensor], input_extents: tuple[int, int, int], samples: int = 32,
            seed: int = 0, tag: str = "", threshold: float = 1e-6) -> ErfMap:
    """ERF of ``fragment`` at the centre pixel of a ``(C, H, W)`` input."""
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    c, h, w = input_extents
    ci, cj = h // 2, w // 2
    rng = np.random.default_rng(seed)
    acc = np.zeros((h, w))
    for _ in range(samples):
        x = Tensor(rng.standard_normal((1, c, h, w)), requires_grad=True)
        y = fragment(x)
        if tuple(y.shape[-2:]) != (h, w):
            raise ValueError(f"fragment changed spatial extents {h}x{w} -> {y.shape[-2:]}")
        backward(y[:, :, ci, cj].sum())
        g = np.zeros_like(x.data) if x.grad is None else x.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient in ERF probe")
        acc += np.abs(g).sum(axis=(0, 1))
    peak = acc.max()
    if peak > 0:
        acc /= peak
    return ErfMap(acc, (ci, cj), tag, threshold, samples, seed)


def erf_stats(m: ErfMap, threshold: float | None = None) -> dict:
    """Support area above ``threshold`` and the radius holding 90% of the map mass."""
    tau = m.threshold if threshold is None else threshold
    if not 0 < tau < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {tau}")
    v = m.values
    yy, xx = np.indices(v.shape)
    r = np.hypot(yy - m.center[0], xx - m.center[1]).ravel()
    order = np.argsort(r, kind="stable")
    mass = np.cumsum(v.ravel()[order])
    total = mass[-1] if mass.size else 0.0
    radius = float(r[order][np.searchsorted(mass, 0.9 * total)]) if total > 0 else 0.0
    return {"support_area": int(np.count_nonzero(v > tau)), "radius_p90": radius}


def fragment_config(channels: int = 8, growth: int = 4, heads: int = 2, window: int = 4, shift: int = 2,
                    mlp_ratio: float = 2.0) -> ModelConfig:
    return ModelConfig(bands=1, msi_bands=1, channels=channels, growth=growth, blocks=1, window=window,
                       shift=shift, heads=heads, mlp_ratio=mlp_ratio)


class AttentionStack(Module):
    """Five-stage block: [concat ->] 1x1 -> attention -> conv (-> LeakyReLU), 0.2-scaled tail + input.

    ``dense`` feeds each stage all previous features instead of only the
    last one.  ``attention`` holds one layer per stage, either a single
    transformer path or a two-path ISTL.
    """

    def __init__(self, proj: list[Conv2d], attention: list, conv: list[Conv2d], dense: bool, slope: float = 0.2):
        self.proj, self.attention, self.conv = proj, attention, conv
        self.dense, self.slope = dense, slope

    def forward(self, z0: Tensor) -> Tensor:
        feats = [z0]
        for j in range(DENSE_STAGES + 1):
            inp = T.concat_channels(feats) if self.dense else feats[-1]
            out = self.conv[j](self.attention[j](self.proj[j](inp)))
            if j < DENSE_STAGES:
                feats.append(T.leaky_relu(out, self.slope))
        return out * 0.2 + z0


def _conv_from(src: Conv2d, in_slice: slice | None = None, center_only: bool = False) -> Conv2d:
    """Copy of ``src`` restricted to some input channels and/or its centre tap."""
    w = src.weight.data[:, in_slice] if in_slice is not None else src.weight.data
    if center_only:
        k = w.shape[-1] // 2
        w = w[:, :, k:k + 1, k:k + 1]
    conv = Conv2d.__new__(Conv2d)
    conv.weight = parameter(np.array(w))
    conv.bias = parameter(np.array(src.bias.data))
    conv.k = w.shape[-1]
    return conv


def build_fragment(tag: str, cfg: ModelConfig | None = None, seed: int = 0) -> Module:
    """Fragment for configuration ``a``, ``b`` or ``c`` with nested, shared weights.

    ``c`` is a dense ERFB whose stages use the two-path (W + SW) layer and
    3x3 convolutions.  ``b`` deletes components from ``c``: each stage keeps
    only one attention path (window and shifted window alternating, as in a
    conventional shifted-window stack) and the centre tap of each
    convolution.  ``a`` further deletes the dense inputs, keeping the weight
    columns that act on the previous stage only.  Every weight ``a`` or ``b``
    retains is the same number as in ``c``.
    """
    if tag not in TAGS:
        raise ValueError(f"unknown ERF configuration {tag!r}; expected one of {TAGS}")
    cfg = ModelConfig.from_dict({**(cfg or fragment_config()).to_dict(), "dense": True})
    full = ERFB(cfg, np.random.default_rng(seed), use_shifted=True)
    if tag == "c":
        return AttentionStack(full.proj, full.istl, full.conv, dense=True, slope=cfg.slope)
    paths = [layer.path_w if j % 2 == 0 else layer.path_sw for j, layer in enumerate(full.istl)]
    convs = [_conv_from(cv, center_only=True) for cv in full.conv]
    if tag == "b":
        return AttentionStack(full.proj, paths, convs, dense=True, slope=cfg.slope)
    widths = cfg.stage_in_channels()
    proj = [_conv_from(pr, slice(widths[j] - (cfg.channels if j == 0 else cfg.growth), widths[j]))
            for j, pr in enumerate(full.proj)]
    return AttentionStack(proj, paths, convs, dense=False, slope=cfg.slope)


def build_istl(shifted: bool, cfg: ModelConfig | None = None, seed: int = 0) -> ISTL:
    """A single attention layer: window path only, or window plus shifted path."""
    cfg = cfg or fragment_config()
    return ISTL(cfg.channels, cfg.heads, cfg.window, cfg.shift, cfg.mlp_ratio,
                np.random.default_rng(seed), cfg.np_dtype, cfg.slope, use_shifted=shifted)


def erf_suite(extent: int = 64, samples: int = 32, seed: int = 0, cfg: ModelConfig | None = None,
              threshold: float = 1e-6, tags=TAGS) -> dict[str, ErfMap]:
    """Maps for the requested configurations at matched extents, inputs and initialisation."""
    cfg = cfg or fragment_config()
    maps = {}
    for tag in tags:
        frag = build_fragment(tag, cfg, seed)
        m = erf_map(frag, (cfg.channels, extent, extent), samples, seed, tag, threshold)
        m.meta["description"] = TAG_DESCRIPTIONS[tag]
        maps[tag] = m
    return maps


def write_pgm(m: ErfMap, path, gamma: float = 0.5) -> None:
    """8-bit binary PGM; the gamma brightens faint tails."""
    img = np.round(255.0 * np.clip(m.values, 0.0, 1.0) ** gamma).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def write_csv(m: ErfMap, path) -> None:
    np.savetxt(path, m.values, delimiter=",", fmt="%.17g")


def read_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def export(maps: dict[str, ErfMap], outdir) -> dict:
    """Write PGM, CSV and a stats JSON for each map; returns the stats."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    stats = {}
    for tag, m in maps.items():
        write_pgm(m, outdir / f"erf_{tag}.pgm")
        write_csv(m, outdir / f"erf_{tag}.csv")
        stats[tag] = {**erf_stats(m), **m.metadata()}
    (outdir / "erf_stats.json").write_text(json.dumps(stats, indent=1, sort_keys=True))
    return stats
