import numpy as np
import pytest

from streamdiff.backbone import Backbone, BackboneConfig
from streamdiff.codec import LatentCodec
from streamdiff.kvcache import expected_retained
from streamdiff.session import SwitchCommand, enqueue_switch, parse_switch_line, run, start, step

CFG = BackboneConfig(layers=1, heads=2, head_dim=4, d_model=8, tokens=2, channels=4, time_dim=8, chunk=3)


@pytest.fixture(scope="module")
def parts():
    rng = np.random.default_rng(0)
    return Backbone(CFG, seed=2), LatentCodec(2, 4, 16, seed=1), rng.standard_normal((2, 2, 4)), rng.standard_normal((2, 2, 4))


def test_session_is_deterministic(parts):
    model, codec, ref, gar = parts
    a = run(start(model, codec, ref, gar, seed=7, max_cache=8), 4)
    b = run(start(model, codec, ref, gar, seed=7, max_cache=8), 4)
    c = run(start(model, codec, ref, gar, seed=8, max_cache=8), 4)
    assert a.shape == (2, 12, 2, 4)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_cache_follows_closed_form_over_long_rollout(parts):
    model, codec, ref, gar = parts
    s = start(model, codec, ref[:1], gar[:1], seed=0, max_cache=11)
    for c in range(80):
        step(s)
        k = 3 * c + 2
        assert s.trace[-1]["retained_frames"] == expected_retained(k, 11)
        assert s.trace[-1]["cache_slots"] <= 11


def test_switch_events_rebuild_the_cache(parts):
    model, codec, ref, gar = parts
    s = start(model, codec, ref, gar, seed=1, max_cache=11, record_attention=True)
    run(s, 2)
    new_gar = np.random.default_rng(5).standard_normal((2, 4))
    enqueue_switch(s, SwitchCommand(3, new_gar))
    run(s, 3)
    assert [r["event"] for r in s.trace] == ["none", "none", "none", "refresh+withdraw+disentangle", "none"]
    # the first chunk after the switch starts a fresh history with its own sink
    assert s.trace[3]["retained_frames"] == [9, 10, 11]
    np.testing.assert_allclose(s.cache.garment_latent, np.broadcast_to(new_gar, (2, 2, 4)))
    assert s.trace[3]["historical_mass"] == 0.0
    with pytest.raises(ValueError):
        enqueue_switch(s, SwitchCommand(2, new_gar))


def test_refresh_only_keeps_history(parts):
    model, codec, ref, gar = parts
    s = start(model, codec, ref, gar, seed=1, max_cache=None)
    run(s, 2)
    enqueue_switch(s, SwitchCommand(2, gar[0], withdraw=False, disentangle=False))
    step(s)
    assert s.trace[-1]["event"] == "refresh"
    assert s.trace[-1]["retained_frames"] == list(range(9))


def test_condition_shape_is_checked(parts):
    model, codec, _, _ = parts
    with pytest.raises(ValueError):
        start(model, codec, np.zeros((1, 3, 4)), np.zeros((1, 3, 4)), seed=0)


@pytest.mark.parametrize(
    "line,default,expected",
    [
        ("6 3", None, (6, 3, True, True)),
        ("6 3 --no-withdraw", None, (6, 3, False, True)),
        ("  4 1 --no-disentangle --no-withdraw # comment", None, (4, 1, False, False)),
        ("5", 9, (9, 5, True, True)),
        ("# only a comment", None, None),
        ("", None, None),
    ],
)
def test_parse_switch_line(line, default, expected):
    assert parse_switch_line(line, default) == expected


@pytest.mark.parametrize("line", ["6", "1 2 3", "6 3 --flush", "a b"])
def test_parse_switch_line_rejects(line):
    with pytest.raises(ValueError):
        parse_switch_line(line)
