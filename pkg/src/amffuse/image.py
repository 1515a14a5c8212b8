"""Image encoders (a small conv net or precomputed embeddings), noise and augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module
from .tensor import Parameter, ShapeError, Tensor


@dataclass
class ImageEncoderConfig:
    mode: str = "conv-small"  # or "precomputed"
    height: int = 16
    width: int = 16
    channels: int = 1
    d_img: int = 128
    widths: tuple[int, ...] = field(default=(16, 32, 64))

    def __post_init__(self):
        if self.mode not in ("conv-small", "precomputed"):
            raise ValueError(f"unknown image encoder mode {self.mode!r}")
        if self.d_img < 1:
            raise ValueError("d_img must be positive")
        if self.mode == "conv-small":
            if self.height < 8 or self.width < 8:
                raise ValueError("conv-small encoder needs images of at least 8x8")
            if len(self.widths) != 3:
                raise ValueError("conv-small encoder has exactly 3 conv blocks")
        self.widths = tuple(self.widths)


class ConvBlock(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(9 * c_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (3, 3, c_in, c_out)))
        self.bias = Parameter(rng.uniform(-bound, bound, c_out))
        self.norm = LayerNorm(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return T.mean_pool2d(T.silu(self.norm(T.conv2d(x, self.weight, self.bias))), 2)


class ConvImageEncoder(Module):
    """3 x (conv3x3 -> LayerNorm -> SiLU -> 2x2 mean pool), global mean pool, linear."""

    def __init__(self, cfg: ImageEncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        chans = (cfg.channels,) + cfg.widths
        self.blocks = [ConvBlock(a, b, rng) for a, b in zip(chans[:-1], chans[1:])]
        self.head = Linear(chans[-1], cfg.d_img, rng)

    @property
    def out_dim(self) -> int:
        return self.cfg.d_img

    def forward(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        single = x.ndim == 3
        if single:
            x = T.reshape(x, (1,) + x.shape)
        expected = (self.cfg.height, self.cfg.width, self.cfg.channels)
        if x.shape[1:] != expected:
            raise ShapeError("encode_image", x.shape[1:], expected)
        for block in self.blocks:
            x = block(x)
        z = self.head(T.mean(x, axis=(1, 2)))
        return T.reshape(z, (z.shape[-1],)) if single else z


class PrecomputedImageEncoder(Module):
    """Pass-through for stored image embeddings."""

    def __init__(self, cfg: ImageEncoderConfig):
        self.cfg = cfg

    @property
    def out_dim(self) -> int:
        return self.cfg.d_img

    def forward(self, embeddings) -> Tensor:
        z = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
        if z.shape[-1] != self.cfg.d_img:
            raise ShapeError("encode_image", z.shape, (self.cfg.d_img,))
        return z


def build_image_encoder(cfg: ImageEncoderConfig, rng: np.random.Generator) -> Module:
    if cfg.mode == "precomputed":
        return PrecomputedImageEncoder(cfg)
    return ConvImageEncoder(cfg, rng)


def encode_image(x, config: ImageEncoderConfig, params: Module) -> Tensor:
    return params(x)


def gaussian_noise(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """``clip(x + N(0, sigma^2), 0, 1)`` with iid noise per pixel."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    return np.clip(x + rng.normal(0.0, sigma, x.shape), 0.0, 1.0)


def _crop_resize(imgs: np.ndarray, top, left, h, w) -> np.ndarray:
    """Bilinear resample of per-image crop boxes back to full size; edges clamp."""
    n, H, W, _ = imgs.shape
    rows = top[:, None] + (np.arange(H) + 0.5) * (h[:, None] / H) - 0.5     # (n, H)
    cols = left[:, None] + (np.arange(W) + 0.5) * (w[:, None] / W) - 0.5    # (n, W)
    rows = np.clip(rows, 0, H - 1)
    cols = np.clip(cols, 0, W - 1)
    r0 = np.minimum(np.floor(rows).astype(np.intp), H - 2) if H > 1 else np.zeros_like(rows, dtype=np.intp)
    c0 = np.minimum(np.floor(cols).astype(np.intp), W - 2) if W > 1 else np.zeros_like(cols, dtype=np.intp)
    fr = (rows - r0)[:, :, None, None]
    fc = (cols - c0)[:, None, :, None]
    r1 = np.minimum(r0 + 1, H - 1)
    c1 = np.minimum(c0 + 1, W - 1)
    b = np.arange(n)[:, None, None]

    def at(r, c):
        return imgs[b, r[:, :, None], c[:, None, :]]

    top_row = at(r0, c0) * (1 - fc) + at(r0, c1) * fc
    bottom_row = at(r1, c0) * (1 - fc) + at(r1, c1) * fc
    return top_row * (1 - fr) + bottom_row * fr


def augment_images(images: np.ndarray, rng: np.random.Generator, prob: float = 0.95,
                   scale=(0.6, 1.0), jitter_sigma: float = 0.05) -> np.ndarray:
    """Random resized crop, horizontal flip and noise jitter, applied per image under one gate."""
    out = np.array(images, dtype=np.float64, copy=True)
    n, H, W, _ = out.shape
    gate = rng.random(n) < prob
    area = rng.uniform(scale[0], scale[1], n)
    aspect = np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3), n))
    h = np.minimum(H, np.sqrt(area * aspect) * H)
    w = np.minimum(W, np.sqrt(area / aspect) * W)
    top = rng.random(n) * (H - h)
    left = rng.random(n) * (W - w)
    flip = rng.random(n) < 0.5
    noise = rng.normal(0.0, jitter_sigma, out.shape)
    if not gate.any():
        return out
    idx = np.flatnonzero(gate)
    aug = _crop_resize(out[idx], top[idx], left[idx], h[idx], w[idx])
    aug = np.where(flip[idx, None, None, None], aug[:, :, ::-1], aug)
    out[idx] = np.clip(aug + noise[idx], 0.0, 1.0)
    return out
