"""Selective state-space (Mamba-style) blocks and the tabular encoder built on them."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module
from .tensor import Parameter, Tensor, selective_scan
from .tokenizer import FeatureTokenizer, TabularSchema


@dataclass
class EncoderConfig:
    d_tab: int = 64
    n_blocks: int = 2
    d_state: int = 16
    expand: int = 2
    conv_width: int = 4
    d_rank: int | None = None
    dt_min: float = 1e-3
    dt_max: float = 0.1

    def __post_init__(self):
        if self.d_rank is None:
            self.d_rank = math.ceil(self.d_tab / 16)
        for name in ("d_tab", "d_state", "expand", "conv_width", "d_rank"):
            if getattr(self, name) < 1:
                raise ValueError(f"EncoderConfig.{name} must be positive")
        if self.n_blocks < 0:
            raise ValueError("EncoderConfig.n_blocks must be >= 0")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_tab


class MambaBlock(Module):
    """Pre-norm residual block: ``x + out(SiLU(gate) * scan(SiLU(conv(main))))``."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d, di, S = cfg.d_tab, cfg.d_inner, cfg.d_state
        self.d_inner = di
        self.norm = LayerNorm(d)
        self.in_proj = Linear(d, 2 * di, rng)
        k = 1.0 / math.sqrt(cfg.conv_width)
        self.conv_weight = Parameter(rng.uniform(-k, k, (cfg.conv_width, di)))
        self.conv_bias = Parameter(rng.uniform(-k, k, di))
        self.dt_down = Linear(di, cfg.d_rank, rng, bias=False)
        self.dt_up = Linear(cfg.d_rank, di, rng)
        # softplus(bias) = dt with dt log-uniform in [dt_min, dt_max]
        dt = np.exp(rng.uniform(math.log(cfg.dt_min), math.log(cfg.dt_max), di))
        self.dt_up.bias.data = dt + np.log(-np.expm1(-dt))
        self.B_proj = Linear(di, S, rng, bias=False)
        self.C_proj = Linear(di, S, rng, bias=False)
        # A = -exp(A_log) stays strictly negative under any update
        self.A_log = Parameter(np.log(np.tile(np.arange(1, S + 1, dtype=np.float64), (di, 1))))
        self.D = Parameter(np.ones(di))
        self.out_proj = Linear(di, d, rng)

    @property
    def A(self) -> Tensor:
        return -T.exp(self.A_log)

    def forward(self, x: Tensor) -> Tensor:
        h = self.in_proj(self.norm(x))
        main = T.slice_last(h, 0, self.d_inner)
        gate = T.slice_last(h, self.d_inner, 2 * self.d_inner)
        u = T.silu(T.conv1d_causal(main, self.conv_weight, self.conv_bias))
        delta = T.softplus(self.dt_up(self.dt_down(u)))
        y = selective_scan(u, delta, self.A, self.B_proj(u), self.C_proj(u), self.D)
        return x + self.out_proj(y * T.silu(gate))


def mamba_block(x: Tensor, params: MambaBlock) -> Tensor:
    return params(x)


class TabularEncoder(Module):
    """Feature tokenizer, a stack of Mamba blocks, final LayerNorm, CLS readout."""

    def __init__(self, schema: TabularSchema, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.tokenizer = FeatureTokenizer(schema, cfg.d_tab, rng)
        self.blocks = [MambaBlock(cfg, rng) for _ in range(cfg.n_blocks)]
        self.norm = LayerNorm(cfg.d_tab)

    @property
    def out_dim(self) -> int:
        return self.cfg.d_tab

    def encode_tokens(self, tokens: Tensor) -> Tensor:
        return encode_tabular(tokens, self.blocks, self.norm)

    def forward(self, rows) -> Tensor:
        return self.encode_tokens(self.tokenizer(rows))


def encode_tabular(tokens: Tensor, blocks: list[MambaBlock], norm: LayerNorm) -> Tensor:
    """Run the blocks over (..., N+1, d) tokens and return the final-normed CLS row."""
    x = tokens
    for block in blocks:
        x = block(x)
    x = norm(x)
    return x[..., -1, :]
