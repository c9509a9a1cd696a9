"""Window attention (W-MSA), shifted-window attention (SW-MSA) and the two-path ISTL."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, parameter
from .tensor import Tensor

MASK_VALUE = -1e9


def relative_position_index(w: int) -> np.ndarray:
    """(w*w, w*w) index into a ((2w-1)**2, heads) bias table."""
    coords = np.stack(np.meshgrid(np.arange(w), np.arange(w), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (w - 1)
    return rel[0] * (2 * w - 1) + rel[1]


def shift_region_labels(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """Region id per pixel of the *shifted* frame; tokens from different ids must not attend."""
    labels = np.zeros((h, w), dtype=np.int64)
    cuts = lambda n: (slice(0, n - window), slice(n - window, n - shift), slice(n - shift, n))
    for i, hs in enumerate(cuts(h)):
        for j, ws in enumerate(cuts(w)):
            labels[hs, ws] = 3 * i + j
    return labels


def shift_mask(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """Additive attention mask, shape (num_windows, window**2, window**2)."""
    lab = shift_region_labels(h, w, window, shift)
    lab = lab.reshape(h // window, window, w // window, window).transpose(0, 2, 1, 3)
    lab = lab.reshape(-1, window * window)
    return np.where(lab[:, :, None] != lab[:, None, :], MASK_VALUE, 0.0)


class WindowAttention(Module):
    def __init__(self, dim: int, heads: int, window: int, rng: np.random.Generator, dtype=np.float64):
        if dim % heads:
            raise ValueError(f"dim {dim} is not divisible by {heads} heads")
        self.dim, self.heads, self.window = dim, heads, window
        self.scale = (dim // heads) ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)
        self.bias_table = parameter(np.zeros(((2 * window - 1) ** 2, heads), dtype))
        self._index = relative_position_index(window).reshape(-1)

    def attend(self, tokens: Tensor, mask: np.ndarray | None = None, images: int = 1,
               return_weights: bool = False):
        """Self-attention inside each window; ``tokens`` is [windows, w*w, C]."""
        b, n_tok, c = tokens.shape
        h, d = self.heads, c // self.heads
        qkv = self.qkv(tokens).reshape(b, n_tok, 3, h, d).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0] * self.scale, qkv[1], qkv[2]
        scores = T.matmul(q, k.transpose(0, 1, 3, 2))
        bias = T.take(self.bias_table, self._index, 0).reshape(n_tok, n_tok, h).transpose(2, 0, 1)
        scores = scores + T.broadcast_to(bias.reshape(1, h, n_tok, n_tok), scores.shape)
        if mask is not None:
            per_image = scores.reshape(images, b // images, h, n_tok, n_tok)
            scores = T.add_const(per_image, mask[None, :, None]).reshape(b, h, n_tok, n_tok)
        weights = T.softmax_lastdim(scores)
        out = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, n_tok, c)
        out = self.proj(out)
        return (out, weights) if return_weights else out


def _check_window(x: Tensor, w: int) -> None:
    h, wd = x.shape[-2:]
    if h % w or wd % w:
        raise ValueError(f"window {w} does not divide spatial extents {h}x{wd}")


def w_msa(x: Tensor, p: WindowAttention) -> Tensor:
    """Window attention on an NCHW map whose extents are multiples of the window."""
    _check_window(x, p.window)
    n, _, h, wd = x.shape
    t = T.window_partition(x, p.window)
    return T.window_merge(p.attend(t, images=n), p.window, n, h, wd)


def sw_msa(x: Tensor, p: WindowAttention, shift: int, masked: bool = True) -> Tensor:
    """Shifted-window attention: roll by -shift, masked window attention, roll back."""
    w = p.window
    if not 0 <= shift < w:
        raise ValueError(f"shift must lie in [0, {w}), got {shift}")
    _check_window(x, w)
    n, _, h, wd = x.shape
    mask = shift_mask(h, wd, w, shift) if shift and masked else None
    t = T.window_partition(T.cyclic_shift(x, -shift, -shift), w)
    y = T.window_merge(p.attend(t, mask, n), w, n, h, wd)
    return T.cyclic_shift(y, shift, shift)


class TransformerPath(Module):
    """Pre-norm block: x + MSA(LN(x)), then + MLP(LN(.)), computed in window layout.

    Extents that are not multiples of the window are reflect-padded and
    cropped back afterwards.
    """

    def __init__(self, dim: int, heads: int, window: int, shift: int, mlp_ratio: float,
                 rng: np.random.Generator, dtype=np.float64, slope: float = 0.2):
        if not 0 <= shift < window:
            raise ValueError(f"shift must lie in [0, {window}), got {shift}")
        self.shift, self.slope = shift, slope
        hidden = int(round(dim * mlp_ratio))
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = WindowAttention(dim, heads, window, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        w, s = self.attn.window, self.shift
        n, _, h, wd = x.shape
        ph, pw = (-h) % w, (-wd) % w
        if ph or pw:
            x = T.pad(x, [(0, 0), (0, 0), (0, ph), (0, pw)], mode="reflect")
        hp, wp = h + ph, wd + pw
        mask = shift_mask(hp, wp, w, s) if s else None
        if s:
            x = T.cyclic_shift(x, -s, -s)
        t = T.window_partition(x, w)
        t = t + self.attn.attend(self.norm1(t), mask, n)
        t = t + self.fc2(T.leaky_relu(self.fc1(self.norm2(t)), self.slope))
        y = T.window_merge(t, w, n, hp, wp)
        if s:
            y = T.cyclic_shift(y, s, s)
        if ph or pw:
            y = y[:, :, :h, :wd]
        return y


class ISTL(Module):
    """beta1 * Path_W(x) + beta2 * Path_SW(x) with independent path parameters."""

    def __init__(self, dim: int, heads: int, window: int, shift: int, mlp_ratio: float,
                 rng: np.random.Generator, dtype=np.float64, slope: float = 0.2,
                 use_shifted: bool = True):
        if use_shifted and not 1 <= shift < window:
            raise ValueError(f"SW path needs shift in [1, {window}), got {shift}")
        self.path_w = TransformerPath(dim, heads, window, 0, mlp_ratio, rng, dtype, slope)
        self.beta1 = parameter(np.array(1.0, dtype))
        self.use_shifted = use_shifted
        if use_shifted:
            self.path_sw = TransformerPath(dim, heads, window, shift, mlp_ratio, rng, dtype, slope)
            self.beta2 = parameter(np.array(1.0, dtype))

    def forward(self, x: Tensor) -> Tensor:
        out = self.beta1 * self.path_w(x)
        if self.use_shifted:
            out = out + self.beta2 * self.path_sw(x)
        return out
