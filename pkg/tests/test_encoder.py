"""Triplet encoder: normalization contract, loss formulas, training."""

import numpy as np
import pytest
from gradcheck import numeric_grad
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import compactness_ref, triplet_loss_ref

from protodetect import numerics as nm
from protodetect.encoder import (
    EncoderConfig,
    TripletEncoder,
    TripletTrainConfig,
    compactness_loss,
    load_encoder,
    save_encoder,
    train_stage2,
    triplet_loss,
)

TINY = EncoderConfig(width=3, dims=1, hidden=4, embed_dim=2)


def _unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _chord_pair(dist):
    """Two 2-D unit vectors exactly ``dist`` apart (chord of the unit circle)."""
    theta = 2.0 * np.arcsin(dist / 2.0)
    return np.array([1.0, 0.0]), np.array([np.cos(theta), np.sin(theta)])


# -- embedding contract -------------------------------------------------------


def test_embeddings_unit_norm():
    enc = TripletEncoder(EncoderConfig(width=10, dims=2, hidden=16, embed_dim=8),
                         np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(32, 10, 2))
    z = enc.embed(x)
    assert z.shape == (32, 8)
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)


def test_embedding_deterministic():
    enc = TripletEncoder(TINY, np.random.default_rng(2))
    x = np.random.default_rng(3).normal(size=(4, 3, 1))
    assert enc.embed(x).tobytes() == enc.embed(x).tobytes()


def test_embedding_shape_mismatch():
    enc = TripletEncoder(TINY, np.random.default_rng(2))
    with pytest.raises(nm.ShapeError):
        enc.embed(np.zeros((2, 5, 1)))


# -- loss formulas ------------------------------------------------------------


def test_triplet_loss_satisfied_margin_is_zero():
    a, p = _chord_pair(0.1)
    _, n = _chord_pair(1.0)
    loss = triplet_loss(nm.Tensor(a[None]), nm.Tensor(p[None]), nm.Tensor(n[None]), 0.5)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_triplet_loss_equal_legs_equals_margin():
    rng = np.random.default_rng(4)
    a = _unit_rows(rng, 5, 3)
    pn = _unit_rows(rng, 5, 3)
    loss = triplet_loss(nm.Tensor(a), nm.Tensor(pn), nm.Tensor(pn), 0.5)
    assert loss.item() == pytest.approx(0.5, abs=1e-9)


def test_triplet_loss_zero_margin_separated():
    a, p = _chord_pair(0.2)
    _, n = _chord_pair(1.5)
    loss = triplet_loss(nm.Tensor(a[None]), nm.Tensor(p[None]), nm.Tensor(n[None]), 0.0)
    assert loss.item() == 0.0


@given(st.integers(1, 8), st.floats(0.0, 1.0), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_triplet_loss_matches_reference_and_bound(batch, margin, seed):
    rng = np.random.default_rng(seed)
    a, p, n = (_unit_rows(rng, batch, 4) for _ in range(3))
    loss = triplet_loss(nm.Tensor(a), nm.Tensor(p), nm.Tensor(n), margin).item()
    assert loss == pytest.approx(triplet_loss_ref(a, p, n, margin), abs=1e-8)
    assert 0.0 <= loss <= 2.0 + margin + 1e-9


def test_compactness_identical_views():
    z = _unit_rows(np.random.default_rng(5), 4, 3)
    assert compactness_loss(nm.Tensor(z), nm.Tensor(z)).item() == 0.0


def test_compactness_unit_opposite_vectors():
    z = _unit_rows(np.random.default_rng(6), 4, 3)
    assert compactness_loss(nm.Tensor(z), nm.Tensor(-z)).item() == pytest.approx(4.0)


@given(st.integers(1, 8), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_compactness_nonnegative_and_matches_reference(batch, seed):
    rng = np.random.default_rng(seed)
    a, p = _unit_rows(rng, batch, 4), _unit_rows(rng, batch, 4)
    loss = compactness_loss(nm.Tensor(a), nm.Tensor(p)).item()
    assert loss >= 0.0
    assert loss == pytest.approx(compactness_ref(a, p), abs=1e-10)


# -- gradients through the encoder -------------------------------------------


def _fd_param_check(encoder, loss_fn, rtol=1e-4):
    encoder.params.zero_grad()
    loss = loss_fn()
    nm.backward(loss, encoder.params)
    analytic = {k: p.grad.copy() for k, p in encoder.params.items()}
    for name, p in encoder.params.items():
        original = p.data.copy()

        def f(arr):
            p.data = arr
            value = loss_fn().item()
            p.data = original
            return value

        numeric = numeric_grad(f, [original], 0, h=1e-6)
        np.testing.assert_allclose(analytic[name], numeric, rtol=rtol, atol=1e-7,
                                   err_msg=f"grad mismatch for {name}")


def test_triplet_and_compactness_gradients_match_fd():
    rng = np.random.default_rng(7)
    enc = TripletEncoder(TINY, rng)
    anchors = rng.normal(size=(3, 3, 1))
    views = anchors + rng.normal(0, 0.05, size=anchors.shape)
    negs = rng.normal(size=(3, 3, 1))

    _fd_param_check(enc, lambda: triplet_loss(
        enc.forward(anchors), enc.forward(views), enc.forward(negs), 0.5))
    _fd_param_check(enc, lambda: compactness_loss(enc.forward(anchors), enc.forward(views)))


# -- training -----------------------------------------------------------------


def _toy_pools(n=96, width=6, seed=8):
    rng = np.random.default_rng(seed)
    t = np.arange(n + width)
    series = np.sin(2 * np.pi * t / 12.0)
    pos = np.stack([series[i : i + width, None] for i in range(n)])
    pos = pos + rng.normal(0, 0.02, size=pos.shape)
    neg = pos + rng.normal(0, 0.4, size=pos.shape)  # displaced stand-ins
    return pos, neg


def test_train_stage2_zero_lambda_total_equals_triplet():
    pos, neg = _toy_pools()
    enc = TripletEncoder(EncoderConfig(width=6, hidden=8, embed_dim=4), np.random.default_rng(9))
    cfg = TripletTrainConfig(epochs=2, compact_weight=0.0, batch_size=32)
    history = train_stage2(enc, pos, neg, cfg, np.random.default_rng(10))
    for row in history:
        assert row["total"] == pytest.approx(row["triplet"], rel=1e-12)


def test_train_stage2_zero_epochs_unchanged():
    pos, neg = _toy_pools()
    enc = TripletEncoder(EncoderConfig(width=6, hidden=8, embed_dim=4), np.random.default_rng(11))
    before = enc.params.snapshot()
    history = train_stage2(enc, pos, neg, TripletTrainConfig(epochs=0), np.random.default_rng(12))
    assert history == []
    after = enc.params.snapshot()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_train_stage2_rejects_bad_pools():
    pos, neg = _toy_pools()
    enc = TripletEncoder(EncoderConfig(width=6, hidden=8, embed_dim=4), np.random.default_rng(13))
    with pytest.raises(ValueError):
        train_stage2(enc, pos[:0], neg[:0], TripletTrainConfig(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        train_stage2(enc, pos, neg[:-1], TripletTrainConfig(), np.random.default_rng(0))


def test_training_separates_negatives_from_positives():
    pos, neg = _toy_pools(n=128)
    held_pos, held_neg = pos[-32:], neg[-32:]
    pos, neg = pos[:-32], neg[:-32]
    enc = TripletEncoder(EncoderConfig(width=6, hidden=16, embed_dim=4), np.random.default_rng(14))
    cfg = TripletTrainConfig(epochs=15, batch_size=32)
    history = train_stage2(enc, pos, neg, cfg, np.random.default_rng(15))
    assert history[-1]["triplet"] < history[0]["triplet"]

    z_a = enc.embed(held_pos)
    z_p = enc.embed(np.stack([w * 1.01 for w in held_pos]))
    z_n = enc.embed(held_neg)
    d_pos = np.linalg.norm(z_a - z_p, axis=1).mean()
    d_neg = np.linalg.norm(z_a - z_n, axis=1).mean()
    assert d_neg > d_pos


def test_encoder_checkpoint_roundtrip(tmp_path):
    enc = TripletEncoder(TINY, np.random.default_rng(16))
    path = tmp_path / "encoder.npz"
    save_encoder(enc, path)
    loaded = load_encoder(path)
    x = np.random.default_rng(17).normal(size=(5, 3, 1))
    assert loaded.embed(x).tobytes() == enc.embed(x).tobytes()
