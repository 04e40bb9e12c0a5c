import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_spd, random_sym
from remind.corruption import CorruptionSpec
from remind.errors import ParameterError, ShapeError
from remind.frontend import ElectrodeLayout, FrontendParams, Recording, build_state_sequence
from remind.recon import (
    ReconHead,
    n_channels_from_dim,
    pretrain_target_and_input,
    recon_loss,
    reconstruct,
    tangent_devectorize,
    tangent_dim,
    tangent_vectorize,
    unvech,
    vech,
)
from remind.spd_geometry import le_distance, min_eigenvalue


def test_identity_vectorizes_to_zero():
    assert np.all(tangent_vectorize(np.eye(4)) == 0.0)
    assert tangent_vectorize(np.eye(4)).shape == (10,)


def test_vectorization_is_isometric(rng):
    for _ in range(500):
        C = int(rng.integers(2, 7))
        P, Q = random_spd(rng, C), random_spd(rng, C)
        d = np.linalg.norm(tangent_vectorize(P) - tangent_vectorize(Q))
        assert abs(d - le_distance(P, Q)) <= 1e-9


def test_vectorize_round_trip(rng):
    P = random_spd(rng, 5)
    assert np.max(np.abs(tangent_devectorize(tangent_vectorize(P)) - P)) <= 1e-10


def test_devectorize_zero_and_random(rng):
    np.testing.assert_allclose(tangent_devectorize(np.zeros(6)), np.eye(3), atol=1e-15)
    assert min_eigenvalue(tangent_devectorize(3.0 * rng.standard_normal(15))) > 0.0


@settings(max_examples=50, deadline=None)
@given(C=st.integers(1, 9), seed=st.integers(0, 2**31 - 1))
def test_vech_round_trip(C, seed):
    S = random_sym(np.random.default_rng(seed), C)
    v = vech(S)
    assert v.shape == (tangent_dim(C),)
    assert np.linalg.norm(v) == pytest.approx(np.linalg.norm(S), rel=1e-12)
    np.testing.assert_allclose(unvech(v), S, atol=1e-14)
    assert n_channels_from_dim(v.size) == C


def test_non_triangular_dim():
    with pytest.raises(ShapeError):
        unvech(np.zeros(5))


def test_zero_head_outputs_identity(rng):
    head = ReconHead.zeros(3)
    seq = np.stack([random_spd(rng, 3) for _ in range(4)])
    np.testing.assert_allclose(reconstruct(head, seq), np.stack([np.eye(3)] * 4), atol=1e-15)


def test_head_shapes(rng):
    head = ReconHead.init(4, rng)
    assert head.w1.shape == (10, 40) and head.w2.shape == (40, 10)


def test_random_head_outputs_spd(rng):
    head = ReconHead.init(4, rng)
    head.w2 *= 3.0
    seq = np.stack([random_spd(rng, 4, spread=2.0) for _ in range(6)])
    assert np.all(min_eigenvalue(reconstruct(head, seq)) > 0.0)


def test_head_can_fit_identity(rng):
    # least-squares output layer on top of random tanh features recovers inputs
    C = 3
    head = ReconHead.init(C, rng, width_mult=8)
    seq = np.stack([random_spd(rng, C, spread=0.3) for _ in range(12)])
    v = tangent_vectorize(seq)
    _, hidden = head.tangent_forward(v)
    design = np.hstack([hidden, np.ones((12, 1))])
    coef, *_ = np.linalg.lstsq(design, v, rcond=None)
    head.w2, head.b2 = coef[:-1], coef[-1]
    assert np.max(le_distance(reconstruct(head, seq), seq)) < 1e-8


def test_loss_zero_on_equal(rng):
    seq = np.stack([random_spd(rng, 3) for _ in range(2)])
    assert recon_loss(seq, seq) == 0.0
    assert recon_loss(seq, seq, "euclid") == 0.0


def test_loss_scalar_example():
    e2 = np.exp(2.0)
    assert recon_loss(np.eye(2)[None], np.diag([e2, e2])[None]) == pytest.approx(8.0, abs=1e-12)


@pytest.mark.parametrize("domain", ["log", "euclid"])
def test_loss_symmetric_and_positive(rng, domain):
    a = np.stack([random_spd(rng, 3) for _ in range(3)])
    b = np.stack([random_spd(rng, 3) for _ in range(3)])
    assert recon_loss(a, b, domain) == pytest.approx(recon_loss(b, a, domain), rel=1e-14)
    assert recon_loss(a, b, domain) > 0.0


def test_loss_euclid_is_frobenius(rng):
    a = np.stack([random_spd(rng, 3) for _ in range(2)])
    b = np.stack([random_spd(rng, 3) for _ in range(2)])
    ref = np.mean([np.sum((x - y) ** 2) for x, y in zip(a, b)])
    assert recon_loss(a, b, "euclid") == pytest.approx(ref, rel=1e-14)


def test_loss_errors():
    with pytest.raises(ShapeError):
        recon_loss(np.stack([np.eye(2)] * 2), np.eye(2)[None])
    with pytest.raises(ParameterError):
        recon_loss(np.eye(2)[None], np.eye(2)[None], "cosine")


@pytest.mark.parametrize("kind,check", [
    ("none", lambda m: not m.any()),
    ("segment", lambda m: m.any(axis=0).sum() == 32),
    ("channel", lambda m: set(np.flatnonzero(m.any(axis=1))) == {0, 1}),
])
def test_pretrain_pair(rng, kind, check):
    C, T = 4, 64
    x = Recording(rng.standard_normal((C, T)))
    p = FrontendParams.identity(C, T, n_segments=4)
    layout = ElectrodeLayout.ring(C)
    masked, target = pretrain_target_and_input(x, CorruptionSpec(kind, seed=2), p, layout)
    mask = masked.data == 0.0
    assert check(mask)
    assert np.array_equal(masked.data[~mask], x.data[~mask])
    np.testing.assert_array_equal(target, build_state_sequence(p, layout, x))
