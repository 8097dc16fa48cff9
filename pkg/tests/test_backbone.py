import numpy as np
import pytest

from streamdiff import autodiff as ad
from streamdiff.backbone import (
    Backbone,
    BackboneConfig,
    ConditionSet,
    UnifiedSequence,
    condition_block,
    context_block,
    video_block,
)
from streamdiff.kvcache import historical_withdraw
from streamdiff.masking import CLEAN, NOISY, attention_rules, build_tf_mask, tf_layout
from streamdiff.session import commit_chunk, new_cache

CFG = BackboneConfig(layers=2, heads=2, head_dim=4, d_model=8, tokens=2, channels=3, time_dim=8, chunk=2)


@pytest.fixture(scope="module")
def model():
    return Backbone(CFG, seed=3)


def cond(rng, B=2):
    return ConditionSet(rng.standard_normal((B, CFG.tokens, CFG.channels)), rng.standard_normal((B, CFG.tokens, CFG.channels)))


def test_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(heads=3, head_dim=4, d_model=8)
    with pytest.raises(ValueError):
        BackboneConfig(heads=1, head_dim=7, d_model=7)
    with pytest.raises(ValueError):
        ConditionSet(np.zeros((1, 2, 3)), np.zeros((1, 3, 3)))


def test_shape_errors(model):
    rng = np.random.default_rng(0)
    c = cond(rng)
    seq = UnifiedSequence.concat(context_block(2, 3), condition_block(c))
    with pytest.raises(ValueError):
        model.forward(seq, np.ones((3, 3), dtype=bool))
    bad = np.ones((len(seq), len(seq)), dtype=bool)
    bad[0] = False
    with pytest.raises(ValueError):
        model.forward(seq, bad)


def test_condition_kv_is_deterministic_and_garment_does_not_leak_into_reference(model):
    rng = np.random.default_rng(1)
    c = cond(rng)
    kv1 = model.condition_kv(c)
    kv2 = model.condition_kv(c)
    for (k1, v1), (k2, v2) in zip(kv1, kv2):
        np.testing.assert_array_equal(k1, k2)
        np.testing.assert_array_equal(v1, v2)
    swapped = ConditionSet(c.reference, rng.standard_normal(c.garment.shape))
    P = CFG.tokens
    for (k1, v1), (k2, v2) in zip(kv1, model.condition_kv(swapped)):
        np.testing.assert_array_equal(k1[:, :, : 1 + P], k2[:, :, : 1 + P])
        np.testing.assert_array_equal(v1[:, :, : 1 + P], v2[:, :, : 1 + P])
        assert not np.allclose(k1[:, :, 1 + P :], k2[:, :, 1 + P :])


def test_condition_kv_equals_clean_condition_kv_of_tf_forward(model):
    rng = np.random.default_rng(2)
    c = cond(rng)
    f = 4
    z = rng.standard_normal((2, f, CFG.tokens, CFG.channels))
    seq = UnifiedSequence.concat(
        context_block(2, 3), condition_block(c, CLEAN), video_block(z, 0.0, np.arange(f), CFG.chunk, CLEAN),
        condition_block(c, NOISY), video_block(z, 0.5, np.arange(f), CFG.chunk, NOISY),
    )
    res = model.forward(seq, build_tf_mask(f, CFG.tokens, CFG.chunk))
    n = 1 + 2 * CFG.tokens
    for (k, v), (kc, vc) in zip(res.kv, model.condition_kv(c)):
        np.testing.assert_allclose(k[:, :, :n], kc, atol=1e-12)
        np.testing.assert_allclose(v[:, :, :n], vc, atol=1e-12)


def full_sequence_prediction(model, c, history, t, z):
    """Chunk prediction from one forward over ``[conditions | history | chunk]``."""
    B, h = history.shape[:2]
    n = z.shape[1]
    seq = UnifiedSequence.concat(
        context_block(B, CFG.channels),
        condition_block(c),
        video_block(history, 0.0, np.arange(h), CFG.chunk, CLEAN),
        video_block(z, t, np.arange(h, h + n), CFG.chunk, NOISY),
    )
    lay = seq.layout
    allowed = attention_rules(lay, lay)
    noisy = lay.half == NOISY
    allowed[noisy] = True  # the new chunk sees every earlier token and itself
    pred = model.forward(seq, allowed).pred.data
    return pred[:, h * CFG.tokens :].reshape(z.shape)


def test_incremental_matches_full_forward_over_three_chunks(model):
    rng = np.random.default_rng(4)
    c = cond(rng)
    cache = new_cache(model, c, None)
    hist = np.zeros((2, 0, CFG.tokens, CFG.channels))
    for k in range(3):
        frames = np.arange(k * CFG.chunk, (k + 1) * CFG.chunk)
        z = rng.standard_normal((2, CFG.chunk, CFG.tokens, CFG.channels))
        inc = model.forward_incremental(video_block(z, 0.75, frames, CFG.chunk, NOISY), cache).pred.data.reshape(z.shape)
        full = full_sequence_prediction(model, c, hist, 0.75, z)
        np.testing.assert_allclose(inc, full, atol=1e-10)
        x0 = rng.standard_normal(z.shape)
        cache = commit_chunk(model, cache, x0, frames)
        hist = np.concatenate([hist, x0], axis=1)


def test_withdrawn_history_matches_pruned_oracle(model):
    rng = np.random.default_rng(5)
    c = cond(rng)
    cache = new_cache(model, c, None)
    for k in range(2):
        frames = np.arange(k * CFG.chunk, (k + 1) * CFG.chunk)
        cache = commit_chunk(model, cache, rng.standard_normal((2, CFG.chunk, CFG.tokens, CFG.channels)), frames)
    cache = historical_withdraw(cache)
    frames = np.arange(2 * CFG.chunk, 3 * CFG.chunk)
    z = rng.standard_normal((2, CFG.chunk, CFG.tokens, CFG.channels))
    inc = model.forward_incremental(video_block(z, 1.0, frames, CFG.chunk, NOISY), cache).pred.data
    # oracle: conditions followed directly by the chunk
    seq = UnifiedSequence.concat(context_block(2, 3), condition_block(c), video_block(z, 1.0, frames, CFG.chunk, NOISY))
    allowed = attention_rules(seq.layout, seq.layout)
    allowed[seq.layout.half == NOISY] = True
    full = model.forward(seq, allowed).pred.data
    np.testing.assert_allclose(inc, full, atol=1e-10)


def test_masked_attention_weights_are_exactly_zero(model):
    rng = np.random.default_rng(6)
    c = cond(rng)
    f = 4
    z = rng.standard_normal((2, f, CFG.tokens, CFG.channels))
    m = build_tf_mask(f, CFG.tokens, CFG.chunk, duplicate_conditions=False)
    seq = UnifiedSequence.concat(
        context_block(2, 3), condition_block(c), video_block(z, 0.0, np.arange(f), CFG.chunk, CLEAN),
        video_block(z, 0.5, np.arange(f), CFG.chunk, NOISY),
    )
    assert len(seq) == len(tf_layout(f, CFG.tokens, CFG.chunk, False))
    res = model.forward(seq, m, record_attention=True)
    for w in res.attention:
        assert (w[..., ~m.allowed] == 0.0).all()
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)


def test_state_dict_round_trip_and_copy_independence(model):
    other = Backbone(CFG, seed=99)
    other.load_state_dict(model.state_dict())
    rng = np.random.default_rng(7)
    c = cond(rng)
    z = rng.standard_normal((2, 2, CFG.tokens, CFG.channels))
    np.testing.assert_array_equal(model.velocity(z, 0.3, c).data, other.velocity(z, 0.3, c).data)
    dup = model.copy()
    dup.params["head.b"] = ad.Tensor(dup.params["head.b"].data + 1.0)
    assert not np.allclose(dup.velocity(z, 0.3, c).data, model.velocity(z, 0.3, c).data)
    with pytest.raises(KeyError):
        other.load_state_dict({})
