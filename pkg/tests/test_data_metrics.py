import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamdiff.data import DataConfig, World, generate_dataset, make_sample, write_dataset_csv
from streamdiff.metrics import (
    StreamingSwitchMetrics,
    garment_error,
    mean_attention_mass,
    motion_deltas,
    nearest_code,
    switch_metrics,
    window_means,
)
from streamdiff.rng import make_rng


@pytest.fixture(scope="module")
def world():
    return World(DataConfig(seed=3))


def test_dataset_is_deterministic(world):
    a = generate_dataset(world, 6, 6, seed=1)
    b = generate_dataset(World(DataConfig(seed=3)), 6, 6, seed=1)
    np.testing.assert_array_equal(a.arrays()["latents"], b.arrays()["latents"])
    np.testing.assert_array_equal(a.arrays()["garment"], b.arrays()["garment"])
    c = generate_dataset(world, 6, 6, seed=2)
    assert not np.allclose(a.arrays()["latents"], c.arrays()["latents"])


def test_split_and_shapes(world):
    ds = generate_dataset(world, 16, 3, seed=0)
    assert len(ds.train_index) == 14 and len(ds.eval_index) == 2
    arr = ds.arrays(ds.eval_index)
    assert arr["latents"].shape == (2, 3, 4, 16)
    assert arr["reference"].shape == arr["garment"].shape == (2, 4, 16)
    with pytest.raises(ValueError):
        generate_dataset(world, 0, 3, seed=0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_sample_invariants(world, seed):
    s = make_sample(world, make_rng(seed), 3)
    assert s.worn_id != s.garment_id
    # video frames carry the target code exactly; the reference wears the other code
    g = world.garment_readout(s.latents)
    np.testing.assert_allclose(g, np.broadcast_to(world.codebook[s.garment_id], g.shape), atol=1e-10)
    np.testing.assert_allclose(world.garment_readout(s.reference_latent), world.codebook[s.worn_id], atol=1e-10)
    # the garment image has no motion
    np.testing.assert_allclose(world.motion_readout(s.garment_latent), 0.0, atol=1e-10)


def test_dataset_csv(tmp_path, world):
    ds = generate_dataset(world, 2, 2, seed=0)
    p = tmp_path / "d.csv"
    write_dataset_csv(p, ds)
    lines = p.read_text().splitlines()
    assert lines[0].startswith("sample,frame,p0")
    assert len(lines) == 1 + 2 * 5


def synthetic_stream(world, rng, B=3, n=12):
    x = rng.standard_normal((B, n, world.cfg.tokens, world.cfg.channels))
    return x


def test_garment_error_and_nearest_code(world):
    B, n = 2, 4
    codes = np.array([1, 5])
    x = np.zeros((B, n, 4, 16))
    x[..., :4] = world.codebook[codes][:, None]
    np.testing.assert_allclose(garment_error(x, codes, world), 0.0, atol=1e-15)
    assert (nearest_code(x, world) == codes[:, None]).all()
    assert (garment_error(x, np.array([2, 2]), world) > 0).all()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000), switch=st.integers(1, 11), chunk=st.sampled_from([1, 3, 4]))
def test_streaming_metrics_match_whole_array(world, seed, switch, chunk):
    rng = np.random.default_rng(seed)
    x = synthetic_stream(world, rng)
    old, new = rng.integers(0, 8, 3), rng.integers(0, 8, 3)
    whole = switch_metrics(x, switch, old, new, world)
    acc = StreamingSwitchMetrics(world, switch, old, new)
    for lo in range(0, x.shape[1], chunk):
        acc.update(x[:, lo : lo + chunk])
    got = acc.result()
    for k, v in whole.as_dict().items():
        assert abs(getattr(got, k) - v) <= 1e-12 * max(1.0, abs(v)), k


def test_continuity_ratio_detects_a_jump(world):
    n = 12
    s = np.arange(n)[None, :, None, None] * 0.1
    x = np.zeros((1, n, 4, 16)) + s
    x[:, 6:, :, 4:] += 5.0
    m = switch_metrics(x, 6, [0], [1], world)
    assert m.continuity_ratio > 10
    assert motion_deltas(x, world).shape == (1, n - 1)
    with pytest.raises(ValueError):
        switch_metrics(x, 0, [0], [1], world)


def test_attention_and_window_helpers():
    trace = [
        {"chunk": 0, "conditional_mass": 1.0, "historical_mass": 0.0, "intra_mass": 0.0},
        {"chunk": 1, "conditional_mass": 0.2, "historical_mass": 0.7, "intra_mass": 0.1},
        {"chunk": 2, "conditional_mass": 0.4, "historical_mass": 0.5, "intra_mass": 0.1},
        {"chunk": 3},
    ]
    m = mean_attention_mass(trace, chunks=range(1, 4))
    assert m == pytest.approx({"conditional_mass": 0.3, "historical_mass": 0.6, "intra_mass": 0.1})
    with pytest.raises(ValueError):
        mean_attention_mass(trace, chunks=[3])
    assert window_means([1, 2, 3, 4], [(0, 2), (2, 4)]) == [1.5, 3.5]
