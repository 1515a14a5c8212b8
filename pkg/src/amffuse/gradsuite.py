"""Central-difference gradient checks over every differentiable piece of the model.

Each check builds a scalar loss ``sum(w * op(...))`` with a random weighting
``w`` (or uses a loss directly) and compares the analytic gradient of every
input against central differences. Inputs of non-smooth ops are drawn away
from their kinks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .contrastive import ProjectionHead, itc_loss
from .fusion import (FusionClassifier, FusionConfig, classification_loss, finetune_loss, leakage_loss,
                     magnitude_loss)
from .image import ConvImageEncoder, ImageEncoderConfig
from .nn import Module
from .ssm import EncoderConfig, MambaBlock, TabularEncoder
from .tensor import Tensor, grad_check_many
from .tokenizer import FeatureSpec, FeatureTokenizer, TabularSchema

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def _p(rng, *shape, lo=None, hi=None, away=0.0) -> Tensor:
    """Random leaf tensor; ``away`` keeps |x| >= away (for kinks at 0)."""
    if lo is not None:
        x = rng.uniform(lo, hi, shape)
    else:
        x = rng.normal(0.0, 1.0, shape)
    if away:
        x = np.sign(x) * (np.abs(x) + away)
        x[x == 0] = away
    return Tensor(x, requires_grad=True)


def _weighted(rng, out_shape) -> Callable[[Tensor], Tensor]:
    w = rng.normal(0.0, 1.0, out_shape)
    return lambda y: T.sum(y * w)


def _op_check(rng, op, *inputs: Tensor) -> tuple[Callable[[], Tensor], list[Tensor]]:
    with T.no_grad():
        shape = op(*inputs).shape
    red = _weighted(rng, shape)
    return (lambda: red(op(*inputs))), [x for x in inputs if x.requires_grad]


def toy_schema(n_num: int = 3, cards=(3, 4)) -> TabularSchema:
    """Small mixed schema: ``n_num`` numerical then categorical columns."""
    feats = [FeatureSpec(f"x{i}", "numerical") for i in range(n_num)]
    feats += [FeatureSpec(f"c{j}", "categorical", cardinality=c) for j, c in enumerate(cards)]
    return TabularSchema(feats)


def toy_rows(schema: TabularSchema, n: int, rng) -> np.ndarray:
    cols = []
    for f in schema.features:
        cols.append(rng.normal(0, 1, n) if f.kind == "numerical" else rng.integers(0, f.cardinality, n))
    return np.stack(cols, axis=1).astype(np.float64)


def _module_check(rng, model: Module, loss: Callable[[], Tensor]) -> tuple[Callable[[], Tensor], list]:
    return loss, model.parameters()


# -- catalogue ---------------------------------------------------------------

def _tensor_cases(rng) -> dict[str, tuple]:
    c = {}
    c["add"] = _op_check(rng, lambda a, b: a + b, _p(rng, 3, 4), _p(rng, 4))
    c["sub"] = _op_check(rng, lambda a, b: a - b, _p(rng, 2, 3), _p(rng, 2, 3))
    c["mul"] = _op_check(rng, lambda a, b: a * b, _p(rng, 2, 3, 4), _p(rng, 3, 4))
    c["neg"] = _op_check(rng, T.neg, _p(rng, 5))
    c["div"] = _op_check(rng, lambda a, b: a / b, _p(rng, 3, 4), _p(rng, 4, away=0.5))
    c["abs"] = _op_check(rng, T.abs, _p(rng, 3, 4, away=0.1))
    c["exp"] = _op_check(rng, T.exp, _p(rng, 3, 4))
    c["log"] = _op_check(rng, T.log, _p(rng, 3, 4, lo=0.2, hi=3.0))
    c["sigmoid"] = _op_check(rng, T.sigmoid, _p(rng, 3, 4))
    c["silu"] = _op_check(rng, T.silu, _p(rng, 3, 4))
    c["tanh"] = _op_check(rng, T.tanh, _p(rng, 3, 4))
    c["softplus"] = _op_check(rng, T.softplus, _p(rng, 3, 4))
    mask = (rng.random(4) > 0.5).astype(float)
    c["apply_mask"] = _op_check(rng, lambda a: T.apply_mask(a, mask), _p(rng, 3, 4))
    c["sum"] = _op_check(rng, lambda a: T.sum(a, axis=1), _p(rng, 2, 3, 4))
    c["mean"] = _op_check(rng, lambda a: T.mean(a, axis=(0, 2)), _p(rng, 2, 3, 4))
    c["reshape"] = _op_check(rng, lambda a: T.reshape(a, (4, 3)), _p(rng, 2, 6))
    c["transpose"] = _op_check(rng, lambda a: T.transpose(a, (2, 0, 1)), _p(rng, 2, 3, 4))
    c["broadcast_to"] = _op_check(rng, lambda a: T.broadcast_to(a, (3, 2, 4)), _p(rng, 2, 4))
    c["concat"] = _op_check(rng, lambda a, b: T.concat([a, b], axis=-1), _p(rng, 2, 3), _p(rng, 2, 2))
    c["slice_last"] = _op_check(rng, lambda a: T.slice_last(a, 1, 4), _p(rng, 2, 5))
    c["getitem"] = _op_check(rng, lambda a: a[..., -1, :], _p(rng, 2, 3, 4))
    idx = np.array([[0, 2], [2, 1]])
    c["take"] = _op_check(rng, lambda a: T.take(a, idx, axis=1), _p(rng, 2, 3, 4))
    c["embedding"] = _op_check(rng, lambda a: T.embedding(a, np.array([0, 3, 3, 1])), _p(rng, 5, 3))
    c["feature_scale"] = _op_check(rng, T.feature_scale, _p(rng, 2, 3), _p(rng, 3, 4))
    c["matmul"] = _op_check(rng, T.matmul, _p(rng, 2, 3, 4), _p(rng, 4, 5))
    c["matmul_batched"] = _op_check(rng, T.matmul, _p(rng, 2, 3, 4), _p(rng, 2, 4, 2))
    c["softmax"] = _op_check(rng, T.softmax, _p(rng, 3, 5))
    c["log_softmax"] = _op_check(rng, T.log_softmax, _p(rng, 3, 5))
    lmask = ~np.eye(4, dtype=bool)
    c["logsumexp"] = _op_check(rng, lambda a: T.logsumexp(a, lmask), _p(rng, 4, 4))
    c["layer_norm"] = _op_check(rng, T.layer_norm, _p(rng, 3, 5), _p(rng, 5), _p(rng, 5))
    c["l2_normalize"] = _op_check(rng, T.l2_normalize, _p(rng, 3, 5))
    c["cosine_similarity"] = _op_check(rng, T.cosine_similarity, _p(rng, 3, 5), _p(rng, 3, 5))
    c["conv1d_causal"] = _op_check(rng, T.conv1d_causal, _p(rng, 2, 6, 3), _p(rng, 4, 3), _p(rng, 3))
    c["conv2d"] = _op_check(rng, T.conv2d, _p(rng, 2, 5, 5, 2), _p(rng, 3, 3, 2, 3), _p(rng, 3))
    c["mean_pool2d"] = _op_check(rng, lambda a: T.mean_pool2d(a, 2), _p(rng, 2, 4, 4, 2))
    c["max_pool2d"] = _op_check(rng, lambda a: T.max_pool2d(a, 2), _p(rng, 2, 4, 4, 2))
    L, din, S = 6, 3, 2
    c["selective_scan"] = _op_check(
        rng, T.selective_scan, _p(rng, 2, L, din), _p(rng, 2, L, din, lo=0.05, hi=0.8),
        _p(rng, din, S, lo=-2.0, hi=-0.2), _p(rng, 2, L, S), _p(rng, 2, L, S), _p(rng, din))
    reused = _p(rng, 4)
    c["reuse"] = _op_check(rng, lambda a: a * a + T.exp(a), reused)
    return c


def _model_cases(rng) -> dict[str, tuple]:
    c = {}
    schema = toy_schema()
    rows = toy_rows(schema, 4, rng)
    tok = FeatureTokenizer(schema, 4, rng)
    red = _weighted(rng, (4, len(schema) + 1, 4))
    c["tokenizer"] = _module_check(rng, tok, lambda: red(tok(rows)))

    ecfg = EncoderConfig(d_tab=4, n_blocks=1, d_state=3, expand=2)
    block = MambaBlock(ecfg, rng)
    x = _p(rng, 2, 5, 4)
    red_b = _weighted(rng, (2, 5, 4))
    c["mamba_block"] = (lambda: red_b(block(x)), block.parameters() + [x])
    c["mamba_block_mean"] = (lambda: T.mean(block(x)), block.parameters())

    enc = TabularEncoder(toy_schema(3, (3, 4)), EncoderConfig(d_tab=4, n_blocks=2, d_state=2), rng)
    red_e = _weighted(rng, (3, 4))
    trows = toy_rows(enc.tokenizer.schema, 3, rng)
    c["tabular_encoder"] = _module_check(rng, enc, lambda: red_e(enc(trows)))

    icfg = ImageEncoderConfig(mode="conv-small", height=8, width=8, channels=1, d_img=4, widths=(2, 3, 4))
    img = ConvImageEncoder(icfg, rng)
    images = rng.uniform(0, 1, (2, 8, 8, 1))
    c["image_encoder"] = _module_check(rng, img, lambda: T.mean(img(images)))

    head = ProjectionHead(5, 3, rng)
    hx = _p(rng, 4, 5)
    red_h = _weighted(rng, (4, 3))
    c["projection_head"] = (lambda: red_h(head(hx)), head.parameters() + [hx])

    zi, zt = _p(rng, 5, 3), _p(rng, 5, 3)
    for form in ("printed", "standard"):
        c[f"itc_{form}"] = (lambda f=form: itc_loss(T.l2_normalize(zi), T.l2_normalize(zt), 0.5, f), [zi, zt])

    fcfg = FusionConfig(r_conf=0.8, d_out=6)
    ai, at = _p(rng, 3, 6, away=0.05), _p(rng, 3, 6, away=0.05)
    # keep the per-row magnitude gap away from zero as well
    ai.data[:, :fcfg.l_img] *= 3.0
    c["leakage_loss"] = (lambda: leakage_loss(ai, at, fcfg), [ai, at])
    c["magnitude_loss"] = (lambda: magnitude_loss(ai, at, fcfg), [ai, at])

    zb = _p(rng, 6, 1)
    yb = rng.integers(0, 2, 6)
    c["ce_binary_weighted"] = (lambda: classification_loss(zb, yb, "binary-weighted", (0.1, 2.0)), [zb])
    zm = _p(rng, 6, 3)
    ym = rng.integers(0, 3, 6)
    c["ce_multiclass"] = (lambda: classification_loss(zm, ym, "multiclass"), [zm])

    # end to end on a 5-feature toy: tokenizer -> SSM -> AMF -> classifier
    schema5 = toy_schema(3, (3, 2))
    enc5 = TabularEncoder(schema5, EncoderConfig(d_tab=4, n_blocks=1, d_state=2), rng)
    img5 = ConvImageEncoder(icfg, rng)
    fc = FusionConfig(r_conf=1.2, d_out=6)
    model = FusionClassifier(img5, enc5, fc, 2, rng)
    rows5 = toy_rows(schema5, 3, rng)
    imgs5 = rng.uniform(0, 1, (3, 8, 8, 1))
    y5 = np.array([0, 1, 1])

    def fused():
        logits, feats = model(imgs5, rows5)
        return finetune_loss(logits, y5, feats, 5.0, 5.0, "multiclass", fc)

    c["fused_model"] = (fused, model.parameters())
    return c


def run_grad_suite(seed: int = 0, eps: float = 1e-5, points: int = 1,
                   only: list[str] | None = None) -> list[CheckResult]:
    """Run every check at ``points`` random draws; returns the worst error per check."""
    results: dict[str, CheckResult] = {}
    for p in range(points):
        rng = np.random.default_rng([seed, p])
        cases = _tensor_cases(rng)
        cases.update(_model_cases(rng))
        for name, (fn, params) in cases.items():
            if only and name not in only:
                continue
            t0 = time.perf_counter()
            err = grad_check_many(fn, params, eps)
            dt = time.perf_counter() - t0
            prev = results.get(name)
            if prev is None or err > prev.max_rel_err:
                results[name] = CheckResult(name, err, dt + (prev.seconds if prev else 0.0))
            else:
                prev.seconds += dt
    return list(results.values())

