import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from amffuse import tensor as T
from amffuse.gradsuite import toy_rows, toy_schema
from amffuse.nn import Adam, LayerNorm
from amffuse.ssm import EncoderConfig, MambaBlock, TabularEncoder, encode_tabular, mamba_block
from amffuse.tensor import NonFiniteError, Tensor, grad_check_many

from oracles import naive_scan


def scan_inputs(r, L, din, S, batch=()):
    u = r.normal(size=batch + (L, din))
    delta = r.uniform(0.01, 1.0, batch + (L, din))
    A = -r.uniform(0.1, 3.0, (din, S))
    B = r.normal(size=batch + (L, S))
    C = r.normal(size=batch + (L, S))
    D = r.normal(size=din)
    return u, delta, A, B, C, D


def run_scan(*arrays):
    return T.selective_scan(*(Tensor(a) for a in arrays)).data


@given(st.integers(1, 64), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_scan_matches_naive_recurrence(L, din, S, seed):
    r = np.random.default_rng(seed)
    u, delta, A, B, C, D = scan_inputs(r, L, din, S)
    ref = np.array(naive_scan(u.tolist(), delta.tolist(), A.tolist(), B.tolist(), C.tolist(), D.tolist()))
    assert np.max(np.abs(run_scan(u, delta, A, B, C, D) - ref)) < 1e-12


def test_scan_batched_equals_per_sequence(rng):
    u, delta, A, B, C, D = scan_inputs(rng, 7, 3, 2, batch=(2, 3))
    y = run_scan(u, delta, A, B, C, D)
    for i in range(2):
        for j in range(3):
            one = run_scan(u[i, j], delta[i, j], A, B[i, j], C[i, j], D)
            assert np.allclose(y[i, j], one, atol=1e-14)


def test_single_step_closed_form(rng):
    u, delta, A, B, C, D = scan_inputs(rng, 1, 4, 3)
    y = run_scan(u, delta, A, B, C, D)[0]
    expected = [sum(C[0, s] * delta[0, d] * B[0, s] * u[0, d] for s in range(3)) + D[d] * u[0, d]
                for d in range(4)]
    assert np.allclose(y, expected, atol=1e-14)


def test_no_memory_when_decay_vanishes(rng):
    u, delta, A, B, C, D = scan_inputs(rng, 5, 2, 2)
    delta[:] = 1.0
    A[:] = -40.0  # delta * A < -30, exp < 1e-12
    y = run_scan(u, delta, A, B, C, D)
    assert math.exp(-40.0) < 1e-12
    memoryless = np.einsum("ts,td->td", C * B, u) + D * u
    assert np.allclose(y, memoryless, atol=1e-12)


@given(st.integers(2, 32), st.integers(0, 2**31 - 1))
def test_scan_causality(L, seed):
    r = np.random.default_rng(seed)
    u, delta, A, B, C, D = scan_inputs(r, L, 3, 2)
    t = int(r.integers(0, L - 1))
    y = run_scan(u, delta, A, B, C, D)
    u2, d2, B2, C2 = u.copy(), delta.copy(), B.copy(), C.copy()
    u2[t + 1:] += r.normal(size=u2[t + 1:].shape)
    d2[t + 1:] *= 2.0
    B2[t + 1:] += 1.0
    C2[t + 1:] -= 1.0
    y2 = run_scan(u2, d2, A, B2, C2, D)
    assert np.array_equal(y[:t + 1], y2[:t + 1])


def test_scan_reports_nonfinite_step(rng):
    u, delta, A, B, C, D = scan_inputs(rng, 6, 2, 2)
    u[3, 0] = np.inf
    with pytest.raises(NonFiniteError, match="3"):
        run_scan(u, delta, A, B, C, D)


def test_scan_gradients(rng):
    arrays = scan_inputs(rng, 5, 3, 2, batch=(2,))
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    w = rng.normal(size=(2, 5, 3))
    assert grad_check_many(lambda: T.sum(T.selective_scan(*ts) * w), ts) < 1e-4


# -- block and encoder -------------------------------------------------------

@given(st.integers(1, 9), st.sampled_from([2, 4, 6]))
def test_block_preserves_shape(L, d):
    block = MambaBlock(EncoderConfig(d_tab=d, d_state=3), np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(2, L, d)))
    assert mamba_block(x, block).shape == (2, L, d)


def test_block_zero_input_zero_biases():
    block = MambaBlock(EncoderConfig(d_tab=4, d_state=3), np.random.default_rng(0))
    for mod in (block.in_proj, block.dt_up, block.out_proj):
        mod.bias.data[:] = 0.0
    block.conv_bias.data[:] = 0.0
    block.norm.bias.data[:] = 0.0
    y = block(Tensor(np.zeros((3, 4))))
    assert np.array_equal(y.data, np.zeros((3, 4)))


def test_block_gradient_of_mean(rng):
    block = MambaBlock(EncoderConfig(d_tab=4, d_state=3), rng)
    x = Tensor(rng.normal(size=(2, 5, 4)))
    assert grad_check_many(lambda: T.mean(block(x)), block.parameters()) < 1e-4


def test_block_is_causal(rng):
    block = MambaBlock(EncoderConfig(d_tab=4, d_state=3), rng)
    x = rng.normal(size=(8, 4))
    y = block(Tensor(x)).data
    x2 = x.copy()
    x2[5:] += 3.0
    assert np.array_equal(block(Tensor(x2)).data[:5], y[:5])


def test_empty_stack_reads_normed_cls(rng):
    schema = toy_schema(2, (3,))
    enc = TabularEncoder(schema, EncoderConfig(d_tab=4, n_blocks=0), rng)
    rows = toy_rows(schema, 2, rng)
    z = enc(rows).data
    ref = T.layer_norm(Tensor(enc.tokenizer.cls.data)).data
    assert np.allclose(z, np.tile(ref, (2, 1)), atol=1e-12)


def test_encoder_output_width(rng):
    schema = toy_schema(5, (2, 3))
    enc = TabularEncoder(schema, EncoderConfig(d_tab=8, d_state=4), rng)
    assert enc(toy_rows(schema, 3, rng)).shape == (3, 8)


def test_first_token_reaches_cls(rng):
    schema = toy_schema(5, ())
    enc = TabularEncoder(schema, EncoderConfig(d_tab=4, d_state=3), rng)
    tokens = enc.tokenizer(toy_rows(schema, 1, rng)).data
    z = encode_tabular(Tensor(tokens), enc.blocks, enc.norm).data
    tokens[:, 0] += rng.normal(size=4)
    z2 = encode_tabular(Tensor(tokens), enc.blocks, enc.norm).data
    assert np.linalg.norm(z2 - z) > 0


def test_end_to_end_gradients_five_features(rng):
    schema = toy_schema(3, (3, 2))
    enc = TabularEncoder(schema, EncoderConfig(d_tab=4, n_blocks=2, d_state=2), rng)
    rows = toy_rows(schema, 3, rng)
    w = rng.normal(size=(3, 4))
    assert grad_check_many(lambda: T.sum(enc(rows) * w), enc.parameters()) < 1e-4


def test_state_matrix_stays_negative(rng):
    schema = toy_schema(3, ())
    enc = TabularEncoder(schema, EncoderConfig(d_tab=4, d_state=3), rng)
    opt = Adam(enc.parameters(), lr=0.5)
    rows = toy_rows(schema, 8, rng)
    for _ in range(20):
        opt.zero_grad()
        loss = -T.sum(enc(rows) * 10.0)
        loss.backward()
        opt.step()
    for block in enc.blocks:
        assert np.all(block.A.data < 0)


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(d_state=0)
    assert EncoderConfig(d_tab=64).d_rank == 4
    assert isinstance(MambaBlock(EncoderConfig(d_tab=4), np.random.default_rng(0)).norm, LayerNorm)


def test_dt_bias_initial_range(rng):
    block = MambaBlock(EncoderConfig(d_tab=16), rng)
    dt = np.log1p(np.exp(block.dt_up.bias.data))
    assert np.all(dt >= 1e-3 - 1e-12) and np.all(dt <= 0.1 + 1e-12)
    assert np.allclose(-block.A.data[0], np.arange(1, 17), rtol=1e-14)
