import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from amffuse import tensor as T
from amffuse.contrastive import PretrainModel, ProjectionHead, itc_loss, pretrain_step
from amffuse.gradsuite import toy_rows, toy_schema
from amffuse.image import ImageEncoderConfig, build_image_encoder
from amffuse.nn import Adam
from amffuse.ssm import EncoderConfig, TabularEncoder
from amffuse.tensor import Tensor, grad_check_many

from oracles import itc_by_hand


def unit_rows(r, n, d):
    z = r.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def itc(zi, zt, tau, form="printed"):
    return itc_loss(Tensor(zi), Tensor(zt), tau, form).item()


def test_printed_form_aligned_orthogonal():
    z = np.eye(2)
    assert itc(z, z, 1.0) == pytest.approx(-1.0, abs=1e-12)


def test_standard_form_aligned_orthogonal():
    # -log(e / (e + 1)) per row
    z = np.eye(2)
    assert itc(z, z, 1.0, "standard") == pytest.approx(math.log1p(math.exp(-1.0)), abs=1e-12)


@pytest.mark.parametrize("n", [2, 3, 5, 8])
def test_high_temperature_limit(rng, n):
    zi, zt = unit_rows(rng, n, 4), unit_rows(rng, n, 4)
    assert itc(zi, zt, 1e6) == pytest.approx(math.log(n - 1), abs=1e-3)
    assert itc(zi, zt, 1e6, "standard") == pytest.approx(math.log(n), abs=1e-3)


@given(st.integers(2, 6), st.sampled_from([0.05, 0.1, 0.2, 1.0]), st.sampled_from(["printed", "standard"]),
       st.integers(0, 2**31 - 1))
def test_matches_hand_oracle(n, tau, form, seed):
    r = np.random.default_rng(seed)
    zi, zt = unit_rows(r, n, 3), unit_rows(r, n, 3)
    assert itc(zi, zt, tau, form) == pytest.approx(itc_by_hand(zi.tolist(), zt.tolist(), tau, form), rel=1e-10)


@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_permutation_invariant(n, seed):
    r = np.random.default_rng(seed)
    zi, zt = unit_rows(r, n, 3), unit_rows(r, n, 3)
    p = r.permutation(n)
    assert itc(zi[p], zt[p], 0.1) == pytest.approx(itc(zi, zt, 0.1), rel=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_rotation_invariant(seed):
    r = np.random.default_rng(seed)
    zi, zt = unit_rows(r, 5, 4), unit_rows(r, 5, 4)
    q, _ = np.linalg.qr(r.normal(size=(4, 4)))
    assert abs(itc(zi @ q, zt @ q, 0.1) - itc(zi, zt, 0.1)) < 1e-10


def test_larger_diagonal_similarity_lowers_loss():
    # row j of the similarity matrix with fixed off-diagonals
    base = np.array([[0.2, 0.1, -0.3], [0.0, 0.4, 0.2], [0.1, -0.2, 0.3]])

    def i2t(sim, tau=0.1):
        n = sim.shape[0]
        return np.mean([-(sim[j, j] / tau) + math.log(sum(math.exp(sim[j, k] / tau) for k in range(n) if k != j))
                        for j in range(n)])

    bumped = base.copy()
    bumped[1, 1] += 0.05
    assert i2t(bumped) < i2t(base)


def test_errors():
    with pytest.raises(ValueError):
        itc(np.ones((1, 3)), np.ones((1, 3)), 0.1)
    with pytest.raises(ValueError):
        itc(np.eye(2), np.eye(2), 0.0)
    with pytest.raises(ValueError):
        itc(np.eye(2), np.eye(2), 0.1, "other")


def test_gradients(rng):
    zi = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    zt = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    for form in ("printed", "standard"):
        f = lambda f=form: itc_loss(T.l2_normalize(zi), T.l2_normalize(zt), 0.2, f)  # noqa: E731
        assert grad_check_many(f, [zi, zt]) < 1e-4


def test_projection_head_unit_norm(rng):
    head = ProjectionHead(6, 4, rng)
    out = head(Tensor(rng.normal(size=(3, 6)))).data
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0)


# -- pretraining steps -------------------------------------------------------

def correlated_pairs(r, n=64):
    """Images whose brightness pattern and tabular columns share a latent."""
    latent = r.normal(size=(n, 2))
    yy, xx = np.mgrid[0:8, 0:8] / 7.0
    images = 0.5 + 0.2 * (latent[:, :1, None] * (yy - 0.5) + latent[:, 1:, None] * (xx - 0.5))
    images = np.clip(images + r.normal(0, 0.02, images.shape), 0, 1)[..., None]
    schema = toy_schema(3, ())
    rows = np.column_stack([latent[:, 0], latent[:, 1], r.normal(size=n)])
    return images, rows, schema


def build_model(schema, seed=0):
    r = np.random.default_rng(seed)
    img = build_image_encoder(ImageEncoderConfig(height=8, width=8, d_img=8, widths=(4, 4, 8)), r)
    tab = TabularEncoder(schema, EncoderConfig(d_tab=8, d_state=4), r)
    return PretrainModel(img, tab, 8, r)


def test_loss_decreases_on_correlated_pairs():
    images, rows, schema = correlated_pairs(np.random.default_rng(0))
    model = build_model(schema)
    opt = Adam(model.parameters(), lr=3e-3)
    losses = [pretrain_step(images, rows, model, opt, 0.1) for _ in range(50)]
    avg = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(avg) < 0)
    assert losses[-1] < losses[0]


def test_frozen_encoders_only_heads_move():
    images, rows, schema = correlated_pairs(np.random.default_rng(1), 16)
    model = build_model(schema)
    model.image_encoder.requires_grad_(False)
    model.tabular_encoder.requires_grad_(False)
    before = {k: v.copy() for k, v in model.image_encoder.state_dict().items()}
    opt = Adam(model.heads(), lr=1e-2)
    pretrain_step(images, rows, model, opt, 0.1)
    for k, v in model.image_encoder.state_dict().items():
        assert np.array_equal(v, before[k])
    assert all(p.grad is not None for p in model.heads())


def test_same_seed_same_losses():
    images, rows, schema = correlated_pairs(np.random.default_rng(2), 16)
    runs = []
    for _ in range(2):
        model = build_model(schema, seed=5)
        opt = Adam(model.parameters(), lr=1e-3)
        runs.append([pretrain_step(images, rows, model, opt, 0.1) for _ in range(3)])
    assert np.allclose(runs[0], runs[1], rtol=0, atol=1e-12)
