import dataclasses

import numpy as np
import pytest

from rpsnet import autodiff as ad
from rpsnet.autodiff import Tensor
from rpsnet.model import (ConfigError, FreezeError, NetworkConfig, active_module_mflops, apply_freeze,
                          build_network, forward, frozen_first_layer, layer_forward, load_checkpoint,
                          masked_logits, module_names, ppr_coefficient, predict_logits, save_checkpoint, unfreeze)
from rpsnet.objective import cross_entropy_seen
from rpsnet.paths import Path, sample_training_path


def np_module(net, layer, m, x):
    w1, b1, w2, b2 = (p.data for p in net.module_params(layer, m))
    return np.maximum(x @ w1 + b1, 0.0) @ w2 + b2


def np_skip(net, layer, x):
    if not net.has_skip_params(layer):
        return x
    w, b = (p.data for p in net.skip_params(layer))
    return x @ w + b


def test_two_modules_match_per_module_sum(tiny_net, rng):
    x = rng.standard_normal((5, 5))
    path = Path([[1, 0, 1], [0, 0, 0]])
    out = layer_forward(tiny_net, 0, path, Tensor(x))
    want = np_skip(tiny_net, 0, x) + np_module(tiny_net, 0, 0, x) + np_module(tiny_net, 0, 2, x)
    np.testing.assert_allclose(out.data, want, atol=1e-12)


def test_single_module_identity_skips_is_residual_mlp(rng):
    cfg = NetworkConfig(layers=3, modules=1, input_dim=6, hidden_dims=[6, 6, 6], num_classes=4, attention=False)
    net = build_network(cfg, rng)
    assert net.skip_params(0) == [] and net.always_trained() == net.classifier_params()
    x = rng.standard_normal((7, 6))
    h = x
    for layer in range(3):
        h = h + np_module(net, layer, 0, h)
    want = h @ net.params["fc.w"].data + net.params["fc.b"].data
    got = forward(net, Path([[1], [1], [1]]), x).data
    assert np.abs(got - want).max() < 1e-10


def test_module_sum_is_additive(tiny_net, rng):
    x = Tensor(rng.standard_normal((4, 5)))
    a, b = Path([[1, 0, 0], [0, 0, 0]]), Path([[0, 1, 1], [0, 0, 0]])
    lhs = layer_forward(tiny_net, 0, a, x).data + layer_forward(tiny_net, 0, b, x).data
    lhs -= tiny_net.skip_forward(0, x).data
    assert np.abs(lhs - layer_forward(tiny_net, 0, a | b, x).data).max() < 1e-10


def test_attention_with_unit_peak_is_neutral(tiny_net, rng):
    w1, b1, w2, b2 = tiny_net.module_params(1, 1)
    w2.data[...] = 0.0
    b2.data[...] = [1.0, 0.5, -1.0, 0.2]  # every example's module output peaks at exactly 1
    x = Tensor(rng.standard_normal((6, 4)))
    p = Path([[0, 0, 0], [0, 1, 0]])
    att = layer_forward(tiny_net, 1, p, x, attention=True).data
    plain = layer_forward(tiny_net, 1, p, x, attention=False).data
    assert np.abs(att - plain).max() < 1e-10


def test_attention_scales_by_row_peak(tiny_net, rng):
    x = rng.standard_normal((3, 4))
    p = Path([[0, 0, 0], [1, 0, 1]])
    got = layer_forward(tiny_net, 1, p, Tensor(x), attention=True).data
    want = x.copy()
    for m in (0, 2):
        o = np_module(tiny_net, 1, m, x)
        want += o * o.max(axis=1, keepdims=True)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_ppr_coefficient():
    assert ppr_coefficient(np.array([[0.2, 3.0], [-1.0, 0.5]])) == 3.0
    assert ppr_coefficient(Tensor(np.zeros((2, 3)))) == 0.0
    with pytest.raises(ValueError):
        ppr_coefficient(np.zeros(0))


@pytest.mark.parametrize("attention", [False, True])
def test_full_forward_grad_check(tiny_cfg, rng, monkeypatch, attention):
    import rpsnet.model as model_mod

    net = build_network(NetworkConfig(**{**tiny_cfg.__dict__, "attention": attention}), rng)
    path = Path([[1, 1, 0], [0, 1, 1]])
    net.set_trainable(path)
    x = rng.standard_normal((5, 5))
    y = rng.integers(0, 4, size=5)
    if attention:
        # tau is a constant in backward, so the finite differences must hold it fixed too
        taus = []
        with ad.no_grad():
            monkeypatch.setattr(model_mod, "ppr_rows", lambda t: taus.append(t.data.max(axis=1)) or taus[-1])
            forward(net, path, x)
        calls = []

        def fixed(t):
            calls.append(None)
            return taus[(len(calls) - 1) % len(taus)]

        monkeypatch.setattr(model_mod, "ppr_rows", fixed)
    err = ad.grad_check(lambda: cross_entropy_seen(forward(net, path, x), y, 2, 2), net.params.trainable(),
                        samples=8)
    assert err < 1e-4


def test_freeze_all_then_train_is_bit_identical(tiny_net, rng):
    from rpsnet.trainer import TaskData, TrainerConfig, train_path_on

    everything = Path(np.ones((2, 3), dtype=bool))
    apply_freeze(tiny_net, everything)
    before = {p.name: p.data.copy() for p in tiny_net.params}
    x, y = rng.standard_normal((40, 5)), rng.integers(0, 2, size=40)
    data = TaskData(1, 2, x, y, 0, None, x[:0], y[:0])
    train_path_on(tiny_net, everything, everything, data, TrainerConfig(epochs=1, batch_size=8), 1.0, rng)
    for layer in range(2):
        for m in range(3):
            for p in tiny_net.module_params(layer, m):
                assert np.array_equal(p.data, before[p.name])
    # skips and classifier still learn
    assert not np.array_equal(tiny_net.params["fc.w"].data, before["fc.w"])
    assert not np.array_equal(tiny_net.params["layer0.skip.w"].data, before["layer0.skip.w"])


def test_gradients_reach_skip_and_classifier_when_all_frozen(tiny_net, rng):
    full = Path(np.ones((2, 3), dtype=bool))
    apply_freeze(tiny_net, full)
    tiny_net.set_trainable(full)
    loss = cross_entropy_seen(forward(tiny_net, full, rng.standard_normal((4, 5))), np.array([0, 1, 2, 3]), 2, 2)
    ad.backward(loss)
    assert tiny_net.params["fc.w"].grad.any() and tiny_net.params["layer0.skip.w"].grad.any()
    assert not any(p.grad.any() for p in tiny_net.module_params(0, 0))


def test_freeze_contract(tiny_net):
    before = tiny_net.frozen.copy()
    apply_freeze(tiny_net, Path.zeros(2, 3))
    assert np.array_equal(tiny_net.frozen, before)
    apply_freeze(tiny_net, Path([[0, 1, 0], [0, 0, 0]]))
    apply_freeze(tiny_net, Path([[0, 0, 0], [1, 0, 0]]))
    assert tiny_net.frozen.tolist() == [[False, True, False], [True, False, False]]
    with pytest.raises(FreezeError):
        unfreeze(tiny_net, Path([[0, 1, 0], [0, 0, 0]]))
    with pytest.raises(ValueError):
        tiny_net.frozen[0, 0] = True
    with pytest.raises(ValueError):
        apply_freeze(tiny_net, Path.zeros(3, 3))


def test_masked_logits(rng):
    logits = Tensor(rng.standard_normal((2, 6)))
    assert masked_logits(logits, 3, 2) is logits
    np.testing.assert_array_equal(masked_logits(logits, 1, 2).data, logits.data[:, :2])
    twice = masked_logits(masked_logits(logits, 2, 2), 1, 2)
    np.testing.assert_array_equal(twice.data, logits.data[:, :2])
    with pytest.raises(ValueError):
        masked_logits(logits, 4, 2)


def test_frozen_first_layer_cache_matches_full_forward(tiny_cfg, rng):
    for attention_layer in (1, 2):
        cfg = NetworkConfig(**{**tiny_cfg.__dict__, "attention_layer": attention_layer})
        net = build_network(cfg, rng)
        apply_freeze(net, Path([[1, 1, 0], [1, 0, 0]]))
        path = Path([[1, 1, 1], [1, 0, 1]])
        x = rng.standard_normal((9, 5))
        cached = forward(net, path, x, frozen_first_layer(net, path, x, batch_size=4)).data
        assert np.abs(cached - forward(net, path, x).data).max() < 1e-10


def test_predict_logits_batches(tiny_net, rng):
    p = sample_training_path(2, 3, rng)
    x = rng.standard_normal((11, 5))
    np.testing.assert_allclose(predict_logits(tiny_net, p, x, batch_size=3), forward(tiny_net, p, x).data,
                               atol=1e-12)
    assert predict_logits(tiny_net, p, x[:0]).shape == (0, 6)


def test_checkpoint_round_trip(tiny_net, tmp_path):
    apply_freeze(tiny_net, Path([[1, 0, 0], [0, 0, 1]]))
    ip = Path([[1, 1, 0], [0, 0, 1]])
    save_checkpoint(tiny_net, ip, tmp_path / "net.npz")
    back, back_ip = load_checkpoint(tmp_path / "net.npz")
    assert back_ip == ip and back.state_equal(tiny_net)
    assert np.array_equal(back.frozen, tiny_net.frozen)
    assert back.params["layer0.module0.w1"].frozen


def test_config_validation():
    with pytest.raises(ConfigError):
        NetworkConfig(layers=2, hidden_dims=[400])
    with pytest.raises(ConfigError):
        NetworkConfig(modules=0)
    with pytest.raises(ConfigError):
        NetworkConfig(attention_layer=3)
    with pytest.raises(ConfigError):
        NetworkConfig(branch_gain=-0.1)
    cfg = NetworkConfig()
    assert (cfg.L, cfg.M, cfg.D, cfg.C, cfg.attended_layer) == (2, 8, 400, 10, 1)


def test_branch_gain_scales_only_module_output_weights(tiny_cfg):
    a = build_network(dataclasses.replace(tiny_cfg, branch_gain=1.0), np.random.default_rng(3))
    b = build_network(dataclasses.replace(tiny_cfg, branch_gain=0.25), np.random.default_rng(3))
    w2 = {module_names(l, m)[2] for l in range(tiny_cfg.L) for m in range(tiny_cfg.M)}
    for p in a.params:
        want = 0.25 * p.data if p.name in w2 else p.data
        assert np.allclose(b.params[p.name].data, want, rtol=1e-15, atol=0)


def test_forward_rejects_bad_input(tiny_net):
    with pytest.raises(ValueError):
        forward(tiny_net, Path.zeros(2, 3), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        forward(tiny_net, Path.zeros(2, 2), np.zeros((2, 5)))


def test_mflops_formula():
    cfg = NetworkConfig()
    one = Path.from_indices([0, 0], 8)
    # one module per layer plus the 784->400 input projection and the classifier
    want = (784 * 400 + 400 * 400) + (400 * 400 + 400 * 400) + 784 * 400 + 400 * 10
    assert active_module_mflops(cfg, one) == pytest.approx(want / 1e6)
