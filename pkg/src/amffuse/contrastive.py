"""Projection heads and the bidirectional image-tabular contrastive objective."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import MLP, Adam, Module
from .tensor import Tensor


class ProjectionHead(MLP):
    """in -> in (SiLU) -> d_proj; outputs are L2-normalised."""

    def __init__(self, d_in: int, d_proj: int, rng: np.random.Generator):
        super().__init__(d_in, d_proj, rng, hidden=d_in)

    def forward(self, x: Tensor) -> Tensor:
        return T.l2_normalize(super().forward(x))


def itc_loss(z_img: Tensor, z_tab: Tensor, tau: float, form: str = "printed") -> Tensor:
    """Symmetric image-tabular contrastive loss over L2-normalised rows.

    ``form="printed"`` leaves the positive pair out of each softmax denominator
    (so the loss can go negative); ``form="standard"`` is the usual InfoNCE
    denominator over the whole row.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if z_img.ndim != 2 or z_img.shape != z_tab.shape:
        raise T.ShapeError("itc_loss", z_img.shape, z_tab.shape)
    n = z_img.shape[0]
    if n < 2:
        raise ValueError("itc_loss needs a batch of at least 2 pairs")
    if form not in ("printed", "standard"):
        raise ValueError(f"unknown ITC form {form!r}")
    eye = np.eye(n, dtype=bool)
    mask = ~eye if form == "printed" else None
    sim = T.matmul(z_img, T.transpose(z_tab)) / tau
    pos = T.sum(T.apply_mask(sim, eye.astype(float)), axis=-1)
    i2t = T.mean(T.logsumexp(sim, mask) - pos)
    t2i = T.mean(T.logsumexp(T.transpose(sim), mask) - pos)
    return (i2t + t2i) * 0.5


class PretrainModel(Module):
    def __init__(self, image_encoder: Module, tabular_encoder: Module, d_proj: int,
                 rng: np.random.Generator):
        self.image_encoder = image_encoder
        self.tabular_encoder = tabular_encoder
        self.phi_img = ProjectionHead(image_encoder.out_dim, d_proj, rng)
        self.phi_tab = ProjectionHead(tabular_encoder.out_dim, d_proj, rng)

    def forward(self, images, rows) -> tuple[Tensor, Tensor]:
        return self.phi_img(self.image_encoder(images)), self.phi_tab(self.tabular_encoder(rows))

    def heads(self) -> list:
        return self.phi_img.parameters() + self.phi_tab.parameters()


def pretrain_step(images: np.ndarray, rows: np.ndarray, model: PretrainModel, opt: Adam,
                  tau: float = 0.1, form: str = "printed") -> float:
    """One optimizer update against the averaged ITC loss; returns the loss value."""
    opt.zero_grad()
    z_img, z_tab = model(images, rows)
    loss = itc_loss(z_img, z_tab, tau, form)
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"non-finite ITC loss: {loss.item()}")
    loss.backward()
    opt.step()
    return loss.item()
