"""Adaptive modulation and fusion of image and tabular embeddings.

Both embeddings are projected to a common width ``d_out``. A confidence
ratio ``r_conf`` (image metric / tabular metric) fixes how many leading
dimensions the image keeps (``l_img``) and how many trailing ones the
tabular side keeps (``l_tab``). The retained slices are concatenated; the
discarded slices are pushed towards zero by the leakage loss and the two
retained slices are pushed towards equal mean magnitude by the magnitude
loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import tensor as T
from .nn import MLP, Linear, Module
from .tensor import ShapeError, Tensor


def contribution(z) -> float:
    """L1 norm of a feature vector."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    if z.size == 0:
        raise ValueError("contribution of an empty vector is undefined")
    return float(np.abs(z).sum())


def avg_contribution(z) -> float:
    """L1 norm divided by the dimension."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    return contribution(z) / z.size


def confidence_ratio(metric_img: float, metric_tab: float) -> float:
    if metric_img <= 0 or metric_tab <= 0:
        raise ValueError(f"unimodal metrics must be positive, got {metric_img}, {metric_tab}")
    return metric_img / metric_tab


def compute_lengths(d_out: int, r_conf: float) -> tuple[int, int]:
    """``l_tab = floor(d_out / (1 + r_conf))``, ``l_img = d_out - l_tab``.

    The floor is taken in exact rational arithmetic on the float value of
    ``r_conf`` so results never depend on rounding of the division.
    """
    if int(d_out) != d_out or d_out < 2:
        raise ValueError(f"d_out must be an integer >= 2, got {d_out}")
    if not r_conf > 0:
        raise ValueError(f"r_conf must be positive, got {r_conf}")
    d_out = int(d_out)
    l_tab = int(Fraction(d_out) / (1 + Fraction(r_conf)))
    l_img = d_out - l_tab
    if l_tab == 0 or l_img == 0:
        raise ValueError(f"degenerate allocation (l_img={l_img}, l_tab={l_tab}) for d_out={d_out}, "
                         f"r_conf={r_conf}; raise d_out or clamp r_conf")
    return l_img, l_tab


@dataclass
class FusionConfig:
    r_conf: float = 1.0
    d_out: int = 2048
    lambda1: float = 5.0
    lambda2: float = 5.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda weights must be non-negative")
        self.l_img, self.l_tab = compute_lengths(self.d_out, self.r_conf)

    @property
    def mask_img(self) -> np.ndarray:
        m = np.zeros(self.d_out)
        m[:self.l_img] = 1.0
        return m

    @property
    def mask_tab(self) -> np.ndarray:
        return 1.0 - self.mask_img


@dataclass
class ModulatedFeatures:
    transitional_img: Tensor
    transitional_tab: Tensor
    retained_img: Tensor
    discarded_img: Tensor
    retained_tab: Tensor
    discarded_tab: Tensor
    fused: Tensor


def partition(zp_img: Tensor, zp_tab: Tensor, cfg: FusionConfig) -> ModulatedFeatures:
    """Split transitional features into retained/discarded regions and fuse."""
    for z in (zp_img, zp_tab):
        if z.shape[-1] != cfg.d_out:
            raise ShapeError("partition", z.shape, (cfg.d_out,))
    li, d = cfg.l_img, cfg.d_out
    r_img = T.slice_last(zp_img, 0, li)
    r_tab = T.slice_last(zp_tab, li, d)
    return ModulatedFeatures(
        transitional_img=zp_img,
        transitional_tab=zp_tab,
        retained_img=r_img,
        discarded_img=T.slice_last(zp_img, li, d),
        retained_tab=r_tab,
        discarded_tab=T.slice_last(zp_tab, 0, li),
        fused=T.concat([r_img, r_tab], axis=-1),
    )


def fuse_masked(zp_img: Tensor, zp_tab: Tensor, cfg: FusionConfig) -> Tensor:
    """Mask-sum form of the fused vector; equals the slice concatenation."""
    return T.apply_mask(zp_img, cfg.mask_img) + T.apply_mask(zp_tab, cfg.mask_tab)


def _rows(z: Tensor) -> Tensor:
    return z if z.ndim == 2 else T.reshape(z, (1, -1))


def leakage_loss(zp_img: Tensor, zp_tab: Tensor, cfg: FusionConfig) -> Tensor:
    """Mean per-element L1 magnitude of both discarded regions, averaged over the batch.

    The image term reads ``zp_img[l_img:]`` and the tabular term reads
    ``zp_tab[:l_img]``.
    """
    zi, zt = _rows(zp_img), _rows(zp_tab)
    f = partition(zi, zt, cfg)
    per_row = (T.mean(T.abs(f.discarded_img), axis=-1) + T.mean(T.abs(f.discarded_tab), axis=-1))
    return T.mean(per_row) * 0.5


def magnitude_loss(zp_img: Tensor, zp_tab: Tensor, cfg: FusionConfig) -> Tensor:
    """Batch mean of ``|mean|retained_img| - mean|retained_tab||``."""
    zi, zt = _rows(zp_img), _rows(zp_tab)
    f = partition(zi, zt, cfg)
    gap = T.mean(T.abs(f.retained_img), axis=-1) - T.mean(T.abs(f.retained_tab), axis=-1)
    return T.mean(T.abs(gap))


class AMFModule(Module):
    """Two single-hidden-layer projection heads into ``d_out`` followed by mask fusion."""

    def __init__(self, d_img: int, d_tab: int, cfg: FusionConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.d_img, self.d_tab = d_img, d_tab
        self.psi_img = MLP(d_img, cfg.d_out, rng)
        self.psi_tab = MLP(d_tab, cfg.d_out, rng)

    def forward(self, z_img: Tensor, z_tab: Tensor) -> ModulatedFeatures:
        if z_img.shape[-1] != self.d_img:
            raise ShapeError("modulate_and_fuse", z_img.shape, (self.d_img,))
        if z_tab.shape[-1] != self.d_tab:
            raise ShapeError("modulate_and_fuse", z_tab.shape, (self.d_tab,))
        return partition(self.psi_img(z_img), self.psi_tab(z_tab), self.cfg)


def modulate_and_fuse(z_img: Tensor, z_tab: Tensor, psi_img, psi_tab, cfg: FusionConfig) -> ModulatedFeatures:
    return partition(psi_img(z_img), psi_tab(z_tab), cfg)


DEFAULT_CLASS_WEIGHTS = (0.1, 2.0)


def classification_loss(logits: Tensor, labels, task: str,
                        class_weights=DEFAULT_CLASS_WEIGHTS) -> Tensor:
    """Weighted binary cross-entropy (one logit per row) or mean softmax cross-entropy."""
    y = np.asarray(labels)
    if task == "binary-weighted":
        z = T.reshape(logits, (-1,)) if logits.ndim > 1 else logits
        if z.shape[0] != y.shape[0]:
            raise ShapeError("classification_loss", logits.shape, y.shape)
        if not np.isin(y, (0, 1)).all():
            raise ValueError("binary labels must be 0 or 1")
        w0, w1 = class_weights
        yf = y.astype(np.float64)
        # log p = -softplus(-z), log(1 - p) = -softplus(z)
        per = T.softplus(-z) * (w1 * yf) + T.softplus(z) * (w0 * (1.0 - yf))
        return T.mean(per)
    if task == "multiclass":
        n_cls = logits.shape[-1]
        if y.min() < 0 or y.max() >= n_cls or not np.array_equal(y, y.astype(int)):
            raise ValueError(f"labels must be integers in [0, {n_cls})")
        onehot = np.eye(n_cls)[y.astype(int)]
        return -T.mean(T.sum(T.apply_mask(T.log_softmax(logits), onehot), axis=-1))
    raise ValueError(f"unknown task {task!r}")


def finetune_loss(logits: Tensor, labels, aux: ModulatedFeatures | None, lambda1: float,
                  lambda2: float, task: str, cfg: FusionConfig | None = None,
                  class_weights=DEFAULT_CLASS_WEIGHTS) -> Tensor:
    """Classification loss plus ``lambda1 * leakage + lambda2 * magnitude``."""
    loss = classification_loss(logits, labels, task, class_weights)
    if aux is None or (lambda1 == 0 and lambda2 == 0):
        return loss
    if cfg is None:
        raise ValueError("finetune_loss needs the fusion config when auxiliary terms are on")
    if lambda1:
        loss = loss + leakage_loss(aux.transitional_img, aux.transitional_tab, cfg) * lambda1
    if lambda2:
        loss = loss + magnitude_loss(aux.transitional_img, aux.transitional_tab, cfg) * lambda2
    return loss


class FusionClassifier(Module):
    """Image encoder + tabular encoder + AMF module + one linear layer."""

    def __init__(self, image_encoder: Module, tabular_encoder: Module, cfg: FusionConfig,
                 n_outputs: int, rng: np.random.Generator):
        self.image_encoder = image_encoder
        self.tabular_encoder = tabular_encoder
        self.amf = AMFModule(image_encoder.out_dim, tabular_encoder.out_dim, cfg, rng)
        self.classifier = Linear(cfg.d_out, n_outputs, rng)

    def forward_embeddings(self, z_img: Tensor, z_tab: Tensor) -> tuple[Tensor, ModulatedFeatures]:
        feats = self.amf(z_img, z_tab)
        return self.classifier(feats.fused), feats

    def forward(self, images, rows) -> tuple[Tensor, ModulatedFeatures]:
        return self.forward_embeddings(self.image_encoder(images), self.tabular_encoder(rows))

    def encoder_parameters(self) -> list:
        return self.image_encoder.parameters() + self.tabular_encoder.parameters()

    def fusion_parameters(self) -> list:
        return self.amf.parameters() + self.classifier.parameters()
