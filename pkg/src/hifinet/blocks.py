"""Network building blocks.

Parameters live in a flat :class:`~hifinet.tensor.ParamSet`; each block reads
the entries under its own name prefix.  Layer naming:

* ``stem.color.{0,1}.{w,b}``, ``stem.freq.{0,1}.{w,b}``
* ``branch{b}.{0,1}.{w,b}`` for b = 1..4
* ``head{b}.{w,b}``
* ``attn.{g,phi,psi,proj}.{w,b}``
* ``pconv.{0,1}.{w,b}``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .tensor import ParamSet, ShapeError, Tensor


# --------------------------------------------------------------------------
# Laplacian of Gaussian


@dataclass(frozen=True)
class LoGKernel:
    size: int
    sigma: float
    weights: np.ndarray  # [size, size], zero sum


def log_kernel(size: int = 5, sigma: float = 1.0) -> LoGKernel:
    """Five-point discrete Laplacian of a sampled, unit-sum Gaussian,
    shifted to zero sum.

    The Gaussian is sampled on a (size+2)^2 grid so every output tap has all
    four neighbours.  The stencil sums are grouped so the kernel is exactly
    symmetric under transposition and flips.
    """
    if size < 3 or size % 2 == 0:
        raise ValueError(f"LoG kernel size must be odd and >= 3, got {size}")
    if sigma <= 0:
        raise ValueError("LoG sigma must be positive")
    r = size // 2 + 1
    ax = np.arange(-r, r + 1, dtype=np.float64)
    d2 = ax[:, None] ** 2 + ax[None, :] ** 2
    g = np.exp(-d2 / (2.0 * sigma * sigma))
    g /= g.sum()
    vert = g[:-2, 1:-1] + g[2:, 1:-1]
    horiz = g[1:-1, :-2] + g[1:-1, 2:]
    lap = (vert + horiz) - 4.0 * g[1:-1, 1:-1]
    w = lap - lap.mean()
    w.setflags(write=False)
    return LoGKernel(size, float(sigma), w)


def log_filter(features, kernel: LoGKernel) -> Tensor:
    """Apply the LoG kernel to every channel, preserving spatial size."""
    features = tc.as_tensor(features)
    k = kernel.size
    if features.shape[-1] < k or features.shape[-2] < k:
        raise ShapeError(f"log_filter: feature map {features.shape[-2:]} smaller than kernel {k}")
    c = features.shape[-3]
    w = Tensor(np.broadcast_to(kernel.weights, (c, k, k)).copy())
    return tc.depthwise_conv2d(features, w, padding=k // 2)


# --------------------------------------------------------------------------
# partial convolution


def _binary(mask, what: str) -> np.ndarray:
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValueError(f"{what}: mask must be binary (0/1)")
    return m


def partial_conv(x, mask, w, b, stride: int = 1, padding: int = 0) -> tuple[Tensor, np.ndarray]:
    """Mask-renormalised convolution.

    Each output site sees ``w . (x * mask)`` over its window, scaled by
    ``window_area / sum(mask in window)`` and then offset by the bias; sites
    whose window holds no valid pixel output 0 (no bias).  Returns the
    response and the propagated mask (1 where the window held any valid
    pixel).  The mask is a constant: no gradient flows into it.
    """
    x, w = tc.as_tensor(x), tc.as_tensor(w)
    m = _binary(mask, "partial_conv")
    if x.ndim == 3 and m.ndim == 3:
        out, valid = partial_conv(tc.reshape(x, (1,) + x.shape), m[None], w, b, stride, padding)
        return tc.reshape(out, out.shape[1:]), valid[0]
    if m.ndim != x.ndim or m.shape[-3] != 1 or m.shape[-2:] != x.shape[-2:]:
        raise ShapeError(f"partial_conv: mask {m.shape} does not match input {x.shape}")
    k = w.shape[-1]
    xm = tc.mul(x, Tensor(m))
    raw = tc.conv2d(xm, w, None, stride, padding)
    msum = tc.conv2d(Tensor(m), Tensor(np.ones((1, 1, k, k))), None, stride, padding).data
    valid = msum > 0
    ratio = np.where(valid, (k * k) / np.where(valid, msum, 1.0), 0.0)
    out = tc.mul(raw, Tensor(ratio))
    out = tc.bias_add(out, b, gate=valid.astype(np.float64))
    return out, valid.astype(np.float64)


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class BranchConfig:
    """Multi-resolution layout.  ``widths`` lists channels for branches 1..4;
    branch 4 runs at ``image_size`` and each coarser branch halves it."""

    image_size: int = 32
    stem_width: int = 8
    widths: tuple[int, int, int, int] = (48, 32, 24, 16)
    attn_channels: int = 16
    embed_dim: int = 18
    pconv_channels: int = 8
    log_size: int = 5
    log_sigma: float = 1.0
    key_stride: int = 2
    attn_residual: bool = False
    # top-down pathway: each branch also receives its coarser neighbour
    fuse: bool = True
    # fixed affine map applied to [0,1] pixels before the stems
    input_mean: float = 0.5
    input_scale: float = 4.0
    max_attention_entries: int = 1 << 22

    def resolutions(self) -> tuple[int, int, int, int]:
        return tuple(self.image_size >> (4 - b) for b in range(1, 5))

    def validate(self) -> None:
        if self.image_size % 8:
            raise ValueError(f"image_size must be divisible by 8, got {self.image_size}")
        if len(self.widths) != 4 or min(self.widths) < 1:
            raise ValueError(f"need four positive branch widths, got {self.widths}")
        res4 = self.image_size
        if res4 % self.key_stride:
            raise ValueError("key_stride must divide the branch-4 resolution")


# --------------------------------------------------------------------------
# stems and branches


def _conv(params: ParamSet, name: str, x, padding: int = 1) -> Tensor:
    return tc.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], 1, padding)


def stems(image, params: ParamSet, cfg: BranchConfig) -> Tensor:
    """Standardize pixels with the fixed ``input_mean``/``input_scale``, then
    run the colour stream (two conv+relu) and frequency stream (conv, LoG,
    conv) and concatenate them along channels."""
    image = tc.scale(tc.add(tc.as_tensor(image), -cfg.input_mean), cfg.input_scale)
    c = tc.relu(_conv(params, "stem.color.0", image))
    c = tc.relu(_conv(params, "stem.color.1", c))
    f = _conv(params, "stem.freq.0", image)
    f = log_filter(f, log_kernel(cfg.log_size, cfg.log_sigma))
    f = tc.relu(_conv(params, "stem.freq.1", f))
    return tc.concat([c, f], axis=-3)


def branch_forward(stem_out, cfg: BranchConfig, params: ParamSet) -> list[Tensor]:
    """Feature maps for branches 1..4 (coarsest first).

    Branches are computed fine to coarse (4 -> 1); with ``fuse`` each finer
    branch then adds a 1x1 projection of the already-fused coarser branch,
    upsampled, so branch 4 sees the deepest features too."""
    stem_out = tc.as_tensor(stem_out)
    res = cfg.resolutions()
    if stem_out.shape[-1] != res[3] or stem_out.shape[-2] != res[3]:
        raise ShapeError(f"branch_forward: stem output {stem_out.shape[-2:]} != branch-4 resolution {res[3]}")
    if stem_out.shape[-3] != 2 * cfg.stem_width:
        raise ShapeError(f"branch_forward: stem has {stem_out.shape[-3]} channels, config expects {2 * cfg.stem_width}")
    feats: dict[int, Tensor] = {}
    x = stem_out
    for b in (4, 3, 2, 1):
        if b < 4:
            x = tc.resample(x, 2, "down_avg")
        x = tc.relu(_conv(params, f"branch{b}.0", x))
        x = tc.relu(_conv(params, f"branch{b}.1", x))
        feats[b] = x
    if cfg.fuse:
        for b in (2, 3, 4):
            top = tc.resample(_conv(params, f"fuse{b}", feats[b - 1], padding=0), 2, "up_nearest")
            feats[b] = tc.relu(tc.add(feats[b], top))
    return [feats[b] for b in (1, 2, 3, 4)]


# --------------------------------------------------------------------------
# heads


def classification_head(features, w, b, extra=None) -> Tensor:
    """Global average pool, optionally concatenate ``extra`` [B,E], then affine."""
    features = tc.as_tensor(features)
    w = tc.as_tensor(w)
    squeeze = features.ndim == 3
    if squeeze:
        features = tc.reshape(features, (1,) + features.shape)
        if extra is not None:
            extra = tc.reshape(extra, (1,) + tc.as_tensor(extra).shape)
    pooled = tc.mean(features, axes=(2, 3))
    if extra is not None:
        pooled = tc.concat([pooled, extra], axis=1)
    if pooled.shape[1] != w.shape[1]:
        raise ShapeError(f"classification_head: {pooled.shape[1]} input features vs weight {w.shape}")
    if tc.as_tensor(b).shape != (w.shape[0],):
        raise ShapeError("classification_head: bias size must equal the number of classes")
    logits = tc.bias_add(tc.matmul(pooled, tc.transpose(w, (1, 0))), b)
    return tc.reshape(logits, (w.shape[0],)) if squeeze else logits


def attention_localize(F, params: ParamSet, key_stride: int = 1, residual: bool = False,
                       max_entries: int = 1 << 22) -> tuple[Tensor, Tensor]:
    """Spatial self-attention over branch-4 features.

    Queries come from ``attn.phi``, keys from ``attn.psi``, values from
    ``attn.g`` (all 1x1 convolutions).  Row ``i`` of the attention matrix is
    a softmax over key positions of ``phi_i . psi_j``; the attended map
    ``F' = A g`` is projected by ``attn.proj`` to per-pixel embeddings.
    ``key_stride`` > 1 average-pools keys and values before attending.
    """
    F = tc.as_tensor(F)
    squeeze = F.ndim == 3
    if squeeze:
        F = tc.reshape(F, (1,) + F.shape)
    bsz, _, h, w = F.shape
    n = h * w
    if key_stride > 1 and (h % key_stride or w % key_stride):
        key_stride = 1
    nk = (h // key_stride) * (w // key_stride)
    if n * nk > max_entries:
        raise MemoryError(
            f"attention matrix {n}x{nk} exceeds the budget of {max_entries} entries; "
            "reduce the branch-4 resolution or raise key_stride")
    fg = _conv(params, "attn.g", F, padding=0)
    fphi = _conv(params, "attn.phi", F, padding=0)
    fpsi = _conv(params, "attn.psi", F, padding=0)
    ca = fg.shape[1]
    if key_stride > 1:
        keys = tc.resample(fpsi, key_stride, "down_avg")
        vals = tc.resample(fg, key_stride, "down_avg")
    else:
        keys, vals = fpsi, fg
    q = tc.transpose(tc.reshape(fphi, (bsz, ca, n)), (0, 2, 1))       # [B,N,C]
    k = tc.reshape(keys, (bsz, ca, nk))                                 # [B,C,Nk]
    v = tc.transpose(tc.reshape(vals, (bsz, ca, nk)), (0, 2, 1))       # [B,Nk,C]
    attn = tc.softmax(tc.matmul(q, k), axis=-1)                         # [B,N,Nk]
    out = tc.matmul(attn, v)                                            # [B,N,C]
    f_prime = tc.reshape(tc.transpose(out, (0, 2, 1)), (bsz, ca, h, w))
    proj_in = tc.add(f_prime, fg) if residual else f_prime
    embed = _conv(params, "attn.proj", proj_in, padding=0)
    if squeeze:
        f_prime = tc.reshape(f_prime, f_prime.shape[1:])
        embed = tc.reshape(embed, embed.shape[1:])
    return f_prime, embed


def masked_embed(image, mask, params: ParamSet) -> Tensor:
    """Two partial-conv layers (3x3, no padding, relu) over ``image * mask``,
    pooled over the propagated mask into one vector per image."""
    image = tc.as_tensor(image)
    m = _binary(mask, "masked_embed")
    squeeze = image.ndim == 3
    if squeeze:
        image = tc.reshape(image, (1,) + image.shape)
        m = m[None]
    x = tc.mul(image, Tensor(m))
    for layer in (0, 1):
        x, m = partial_conv(x, m, params[f"pconv.{layer}.w"], params[f"pconv.{layer}.b"], 1, 0)
        x = tc.relu(x)
    count = m.sum(axis=(1, 2, 3))
    pooled = tc.sum_(tc.mul(x, Tensor(m)), axes=(2, 3))
    inv = np.where(count > 0, 1.0 / np.maximum(count, 1.0), 0.0)
    emb = tc.mul(pooled, Tensor(np.broadcast_to(inv[:, None], pooled.shape).copy()))
    return tc.reshape(emb, emb.shape[1:]) if squeeze else emb
