"""Attention blocks, Cox loss, and training behavior."""

import numpy as np
import pytest

from slidesurv import autodiff as ad
from slidesurv import network as net
from slidesurv.errors import ConfigError, UntrainableClusterError
from slidesurv.oracles import (
    oracle_channel_gate,
    oracle_cox_loss,
    oracle_coxgrad,
    oracle_feature_gate,
    oracle_spatial_gate,
)

DESK = net.NetConfig(input_side=64, epochs=3, batch_size=8, lr0=0.01)


def _zero(module):
    for _, t in module.params():
        t.data = np.zeros_like(t.data)


def test_channel_gate_zero_init_is_half():
    rng = np.random.default_rng(0)
    cam = net.ChannelAttention(8, 4, rng)
    _zero(cam)
    x = ad.tensor(rng.standard_normal((2, 8, 5, 5)))
    np.testing.assert_array_equal(cam(x).data, np.full((2, 8, 1, 1), 0.5))


def test_spatial_gate_zero_init_is_half():
    rng = np.random.default_rng(1)
    sam = net.SpatialAttention(rng)
    _zero(sam)
    x = ad.tensor(rng.standard_normal((2, 8, 5, 5)))
    np.testing.assert_array_equal(sam(x).data, np.full((2, 1, 5, 5), 0.5))


def test_cbam_zero_init_quarters_input():
    rng = np.random.default_rng(2)
    blk = net.Cbam(8, 4, rng)
    _zero(blk.channel)
    _zero(blk.spatial)
    x = rng.standard_normal((2, 8, 5, 5))
    np.testing.assert_allclose(blk(ad.tensor(x)).data, 0.25 * x, rtol=0, atol=1e-15)


def test_cbam_saturated_gates_pass_input_through():
    rng = np.random.default_rng(3)
    blk = net.Cbam(8, 4, rng)
    _zero(blk.channel)
    _zero(blk.spatial)
    blk.channel.fc2.b.data = np.full(8, 500.0)
    blk.spatial.b.data = np.array([500.0])
    x = rng.standard_normal((2, 8, 5, 5))
    np.testing.assert_allclose(blk(ad.tensor(x)).data, x, atol=1e-6)


def test_channel_gate_matches_loop_oracle():
    rng = np.random.default_rng(4)
    cam = net.ChannelAttention(6, 2, rng)
    x = rng.standard_normal((3, 6, 4, 4))
    got = cam(ad.tensor(x)).data[:, :, 0, 0]
    expect = np.array(oracle_channel_gate(
        x, cam.fc1.w.data, cam.fc1.b.data, cam.fc2.w.data, cam.fc2.b.data))
    np.testing.assert_allclose(got, expect, atol=1e-10)


def test_spatial_gate_matches_loop_oracle():
    rng = np.random.default_rng(5)
    sam = net.SpatialAttention(rng)
    x = rng.standard_normal((2, 5, 8, 8))
    got = sam(ad.tensor(x)).data[:, 0]
    expect = np.array(oracle_spatial_gate(x, sam.w.data, sam.b.data))
    np.testing.assert_allclose(got, expect, atol=1e-10)


def test_feature_gate_matches_loop_oracle():
    rng = np.random.default_rng(6)
    nam = net.FeatureAttention(8, 4, rng)
    x = rng.standard_normal((5, 8))
    got = nam(ad.tensor(x)).data
    gates = np.array(oracle_feature_gate(
        x, nam.fc1.w.data, nam.fc1.b.data, nam.fc2.w.data, nam.fc2.b.data))
    np.testing.assert_allclose(got, x * gates, atol=1e-10)


def test_attention_is_elementwise_contraction():
    rng = np.random.default_rng(7)
    blk = net.Cbam(8, 4, rng)
    nam = net.FeatureAttention(16, 4, rng)
    for _ in range(10):
        x = rng.standard_normal((2, 8, 6, 6)) * 3.0
        assert np.all(np.abs(blk(ad.tensor(x)).data) <= np.abs(x))
        v = rng.standard_normal((4, 16)) * 3.0
        assert np.all(np.abs(nam(ad.tensor(v)).data) <= np.abs(v))


def test_flatten_dim_follows_architecture_table():
    assert net.NetConfig(input_side=512).flatten_dim == 2048
    assert net.NetConfig(input_side=64).flatten_dim == 32
    model = net.SurvivalCnn(net.NetConfig(input_side=512), seed=0)
    assert model.fc.w.data.shape == (2048, 32)


def test_forward_shapes_desk():
    model = net.SurvivalCnn(DESK, seed=0)
    x = net.prepare_batch(np.zeros((3, 64, 64, 3), dtype=np.uint8))
    risk, feats = model.forward(x, training=True)
    assert risk.data.shape == (3,)
    assert feats.data.shape == (3, 32)


def test_net_config_validation():
    with pytest.raises(ConfigError):
        net.NetConfig(input_side=32).validate()
    with pytest.raises(ConfigError):
        net.NetConfig(input_side=96).validate()
    with pytest.raises(ConfigError):
        net.NetConfig(channels=30).validate()


def test_cox_loss_two_subject_closed_form():
    # event at t=1 with risk a, censored at t=2 with risk b:
    # loss = log(e^a + e^b) - a
    a, b = 0.7, -0.3
    risks = ad.tensor(np.array([a, b]))
    loss = net.cox_loss(risks, np.array([1.0, 2.0]), np.array([True, False]))
    assert abs(float(loss.data) - (np.log(np.exp(a) + np.exp(b)) - a)) < 1e-12


def test_cox_loss_single_subject_event_is_zero():
    loss = net.cox_loss(ad.tensor(np.array([1.3])), np.array([5.0]), np.array([True]))
    assert float(loss.data) == 0.0


def test_cox_loss_no_events_raises():
    with pytest.raises(ValueError):
        net.cox_loss(ad.tensor(np.zeros(3)), np.arange(3.0), np.zeros(3, dtype=bool))


def test_cox_loss_matches_literal_oracle_with_ties():
    rng = np.random.default_rng(8)
    for _ in range(20):
        n = int(rng.integers(2, 12))
        times = rng.integers(1, 5, n).astype(float)  # force ties
        events = rng.random(n) < 0.7
        if not events.any():
            events[0] = True
        risks = rng.standard_normal(n)
        got = float(net.cox_loss(ad.tensor(risks), times, events).data)
        assert abs(got - oracle_cox_loss(times, events, risks)) < 1e-10


def test_cox_loss_translation_and_permutation_invariance():
    rng = np.random.default_rng(9)
    n = 16
    times = rng.uniform(1, 100, n)
    events = rng.random(n) < 0.5
    events[0] = True
    risks = rng.standard_normal(n)
    base = float(net.cox_loss(ad.tensor(risks), times, events).data)
    shifted = float(net.cox_loss(ad.tensor(risks + 37.5), times, events).data)
    assert abs(base - shifted) < 1e-10
    perm = rng.permutation(n)
    permuted = float(net.cox_loss(ad.tensor(risks[perm]), times[perm], events[perm]).data)
    assert abs(base - permuted) < 1e-10


def test_cox_loss_gradient_matches_fd_oracle():
    rng = np.random.default_rng(10)
    n = 10
    times = np.concatenate([rng.uniform(1, 50, n - 3), rng.choice([7.0, 7.0, 9.0], 3)])
    events = rng.random(n) < 0.6
    events[:2] = True
    risks = ad.tensor(rng.standard_normal(n), requires_grad=True)
    with ad.Tape() as tape:
        loss = net.cox_loss(risks, times, events)
    tape.backward(loss)
    fd = np.array(oracle_coxgrad(times, events, risks.data))
    np.testing.assert_allclose(risks.grad, fd, atol=1e-7)


def test_lr_schedule():
    assert net.lr_at(0, 0.1, 20) == 0.1
    assert net.lr_at(19, 0.1, 20) == 0.1
    assert net.lr_at(20, 0.1, 20) == 0.05
    assert net.lr_at(45, 0.1, 20) == 0.025


def test_stratified_batches_always_have_events():
    rng = np.random.default_rng(11)
    for _ in range(50):
        n = int(rng.integers(5, 60))
        events = rng.random(n) < rng.uniform(0.1, 0.6)
        if events.sum() == 0:
            events[int(rng.integers(n))] = True
        batches = net.stratified_batches(events, batch_size=8, rng=rng)
        seen = np.concatenate(batches)
        assert sorted(seen) == list(range(n))  # a partition
        for b in batches:
            assert events[b].any()


def _planted_patches(n, side, seed):
    """Darker patches for shorter survival: a learnable intensity signal."""
    rng = np.random.default_rng(seed)
    z = rng.uniform(-1, 1, n)
    pixels = np.empty((n, side, side, 3), dtype=np.uint8)
    for i in range(n):
        base = 140.0 - 60.0 * z[i]
        img = base + rng.normal(0, 10, (side, side, 3))
        pixels[i] = np.clip(img, 0, 255).astype(np.uint8)
    times = np.exp(1.5 * -z + rng.normal(0, 0.3, n)) * 100.0
    events = rng.random(n) < 0.8
    events[:2] = True
    return pixels, times, events


def test_training_reduces_loss_on_planted_signal():
    pixels, times, events = _planted_patches(32, 64, seed=12)
    cfg = net.NetConfig(input_side=64, epochs=10, batch_size=16, lr0=0.01)
    model, trace = net.train_cluster_model(pixels, times, events, cfg, seed=3)
    first, last = trace[0][1], trace[-1][1]
    assert last < 0.8 * first, f"loss did not drop 20%: {first} -> {last}"


def test_training_is_deterministic():
    pixels, times, events = _planted_patches(12, 64, seed=13)
    cfg = net.NetConfig(input_side=64, epochs=2, batch_size=6, lr0=0.01)
    m1, t1 = net.train_cluster_model(pixels, times, events, cfg, seed=5)
    m2, t2 = net.train_cluster_model(pixels, times, events, cfg, seed=5)
    assert t1 == t2
    for a, b in zip(m1.params(), m2.params()):
        np.testing.assert_array_equal(a.data, b.data)


def test_training_rejects_too_few_events():
    pixels = np.zeros((6, 64, 64, 3), dtype=np.uint8)
    times = np.arange(1.0, 7.0)
    events = np.array([True, False, False, False, False, False])
    with pytest.raises(UntrainableClusterError):
        net.train_cluster_model(pixels, times, events, DESK, seed=0)


def test_checkpoint_round_trip_preserves_inference(tmp_path):
    pixels, times, events = _planted_patches(10, 64, seed=14)
    cfg = net.NetConfig(input_side=64, epochs=1, batch_size=5, lr0=0.01)
    model, _ = net.train_cluster_model(pixels, times, events, cfg, seed=6)
    path = tmp_path / "m.bin"
    model.save(path)
    back = net.SurvivalCnn.load(path, cfg)
    r1, f1 = model.infer(pixels)
    r2, f2 = back.infer(pixels)
    np.testing.assert_array_equal(r1, r2)
    np.testing.assert_array_equal(f1, f2)


def test_end_to_end_gradients_match_fd():
    """Tape gradients through the whole net vs central differences.

    Samples a few coordinates per parameter tensor; relative error is guarded
    below 1e-6 magnitude to keep FD round-off out of the comparison.
    """
    rng = np.random.default_rng(15)
    pixels = rng.integers(0, 256, (3, 64, 64, 3), dtype=np.uint8)
    times = np.array([3.0, 1.0, 2.0])
    events = np.array([True, True, False])
    model = net.SurvivalCnn(DESK, seed=7)
    params = model.params()
    x = net.prepare_batch(pixels)

    def loss_value() -> float:
        risk, _ = model.forward(x, training=True)
        return float(net.cox_loss(risk, times, events).data)

    for p in params:
        p.zero_grad()
    with ad.Tape() as tape:
        risk, _ = model.forward(x, training=True)
        loss = net.cox_loss(risk, times, events)
    tape.backward(loss, params=params)

    h = 1e-5
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        coords = rng.choice(flat.size, size=min(2, flat.size), replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = loss_value()
            flat[c] = orig - h
            fm = loss_value()
            flat[c] = orig
            fd = (fp - fm) / (2 * h)
            rel = abs(gflat[c] - fd) / max(abs(gflat[c]), abs(fd), 1e-6)
            worst = max(worst, rel)
    assert worst < 1e-3, f"worst relative gradient error {worst}"
