import math
from dataclasses import replace

import numpy as np
import pytest

import deepnet
from deepnet import (
    RMSprop,
    TrainConfig,
    backward,
    block_downsample,
    bce,
    conv3d_backward,
    conv3d_forward,
    decision_signature,
    forward,
    load_network,
    loss,
    lr_schedule,
    maxpool_backward,
    maxpool_forward,
    predict_proba,
    prepare_input,
    save_network,
    train,
    train_on_studies,
    write_training_log,
)
from errors import ConfigError, PrognosisError, SingleClassError, TrainingDivergedError
from models import ConvNetModel, NetworkSpec
from synthio import PhantomSpec, generate_cohort, generate_phantom

TINY = NetworkSpec(input_dims=(4, 4, 2), channels=2, filters=(2, 3), kernel=(3, 3, 2), padding="same", fc_units=4,
                   dropout=0.0)


def _model(spec=TINY, seed=0):
    return ConvNetModel(spec, seed=seed, dtype=np.float64)


def _batch(n=3, spec=TINY, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n,) + spec.input_dims + (spec.channels,))


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_schedule(1, cfg) == 5e-4
    assert lr_schedule(10, cfg) == 5e-4
    assert lr_schedule(35, cfg) == pytest.approx(math.sqrt(5e-4 * 1e-5))
    assert lr_schedule(60, cfg) == 1e-5
    assert lr_schedule(120, cfg) == 1e-5


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr_final=1e-3)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_hold_until=70)


def test_block_downsample():
    arr = np.arange(16, dtype=float).reshape(4, 2, 2, 1)
    out = block_downsample(arr, (2, 2, 2))
    assert out.shape == (2, 1, 1, 1)
    assert out[0, 0, 0, 0] == pytest.approx(arr[:2].mean())
    # remainders are cropped
    assert block_downsample(np.ones((5, 3, 3)), (2, 2, 2)).shape == (2, 1, 1)
    with pytest.raises(ConfigError):
        block_downsample(arr, (8, 1, 1))


def test_prepare_input_channels():
    study = generate_phantom(PhantomSpec(seed=0, dims=(32, 32, 4)))
    x = prepare_input(study)
    assert x.shape == (32, 32, 4, 8)
    np.testing.assert_allclose(x[..., 0], study.volume.data / 1000.0)
    np.testing.assert_array_equal(x[..., 3], study.masks["aorta"].bits)
    assert prepare_input(study, (2, 2, 2)).shape == (16, 16, 2, 8)


def _direct_conv(x, W, b, padding):
    """Literal cross-correlation, one output voxel at a time."""
    kx, ky, kz, C, O = W.shape
    if padding == "same":
        pads = [((k - 1) // 2, k - 1 - (k - 1) // 2) for k in (kx, ky, kz)]
        xp = np.pad(x, [(0, 0)] + pads + [(0, 0)])
    else:
        xp = x
    N = x.shape[0]
    X, Y, Z = xp.shape[1] - kx + 1, xp.shape[2] - ky + 1, xp.shape[3] - kz + 1
    out = np.zeros((N, X, Y, Z, O))
    for n in range(N):
        for p in range(X):
            for q in range(Y):
                for r in range(Z):
                    window = xp[n, p:p + kx, q:q + ky, r:r + kz, :]
                    out[n, p, q, r] = np.tensordot(window, W, axes=([0, 1, 2, 3], [0, 1, 2, 3])) + b
    return out


@pytest.mark.parametrize("padding", ["valid", "same"])
def test_conv_forward_matches_direct_sum(padding):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 6, 6, 4, 2))
    W = rng.normal(size=(3, 3, 2, 2, 2))
    b = rng.normal(size=2)
    out, _ = conv3d_forward(x, W, b, padding)
    expected = _direct_conv(x, W, b, padding)
    assert out.shape == expected.shape == ((2, 4, 4, 3, 2) if padding == "valid" else x.shape)
    np.testing.assert_allclose(out, expected, atol=1e-10)


def test_conv_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 3, 3, 2, 2))
    W = rng.normal(size=(2, 3, 2, 2, 2))
    b = rng.normal(size=2)
    R = rng.normal(size=(1, 3, 3, 2, 2))
    out, xp = conv3d_forward(x, W, b, "same")
    dx, dW, db = conv3d_backward(R, xp, W, x.shape, "same")
    h = 1e-6
    for idx in [(0, 0, 0, 0, 0), (1, 2, 1, 1, 0), (0, 1, 0, 0, 1)]:
        Wp, Wm = W.copy(), W.copy()
        Wp[idx] += h
        Wm[idx] -= h
        num = ((conv3d_forward(x, Wp, b, "same")[0] - conv3d_forward(x, Wm, b, "same")[0]) * R).sum() / (2 * h)
        assert dW[idx] == pytest.approx(num, rel=1e-6, abs=1e-8)
    for idx in [(0, 0, 0, 0, 0), (0, 2, 2, 1, 1)]:
        xp_, xm_ = x.copy(), x.copy()
        xp_[idx] += h
        xm_[idx] -= h
        num = ((conv3d_forward(xp_, W, b, "same")[0] - conv3d_forward(xm_, W, b, "same")[0]) * R).sum() / (2 * h)
        assert dx[idx] == pytest.approx(num, rel=1e-6, abs=1e-8)
    np.testing.assert_allclose(db, R.reshape(-1, 2).sum(axis=0))


def test_maxpool_forward_backward():
    x = np.zeros((1, 2, 2, 1, 1))
    x[0, 1, 0, 0, 0] = 3.0
    x[0, 0, 1, 0, 0] = 3.0
    out, arg = maxpool_forward(x, (2, 2, 1))
    assert out.shape == (1, 1, 1, 1, 1)
    assert out[0, 0, 0, 0, 0] == 3.0
    dx = maxpool_backward(np.ones_like(out), arg, (2, 2, 1), x.shape)
    # ties route to the first maximum in block order
    assert dx.sum() == 1.0
    assert dx[0, 0, 1, 0, 0] == 1.0


def test_maxpool_keeps_trailing_remainder_as_zero_gradient():
    x = np.arange(3, dtype=float).reshape(1, 3, 1, 1, 1)
    out, arg = maxpool_forward(x, (2, 1, 1))
    assert out.ravel().tolist() == [1.0]
    dx = maxpool_backward(np.ones_like(out), arg, (2, 1, 1), x.shape)
    assert dx.ravel().tolist() == [0.0, 1.0, 0.0]


def test_forward_shapes_and_probabilities():
    model = _model()
    probs, cache = forward(model, _batch(3))
    assert probs.shape == (3, 2)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    assert cache["flat"].shape == (3, TINY.flat_features)
    single, _ = forward(model, _batch(1)[0])
    assert single.shape == (1, 2)


def test_forward_rejects_wrong_input_shape():
    with pytest.raises(PrognosisError):
        forward(_model(), np.zeros((1, 4, 4, 3, 2)))


def test_zero_network_outputs_half_and_bias_gradient():
    model = _model()
    model.set_weights({k: np.zeros_like(v) for k, v in model.params.items()})
    x = _batch(1)
    probs, cache = forward(model, x)
    np.testing.assert_allclose(probs, [[0.5, 0.5]])
    assert loss(probs, [1]) == pytest.approx(math.log(2))
    grads = backward(model, cache, [0])
    np.testing.assert_allclose(grads["out.b"], [-0.5, 0.5])
    grads = backward(model, cache, [1])
    np.testing.assert_allclose(grads["out.b"], [0.5, -0.5])


def test_bce_clamps_probabilities():
    assert bce([0.0], [1])[0] == pytest.approx(-math.log(deepnet.PROB_CLAMP))
    assert math.isfinite(bce([1.0], [0])[0])


@pytest.mark.parametrize("activations", [("relu", "relu", "relu"), ("identity", "identity", "identity")])
def test_backward_matches_finite_differences(activations):
    spec = replace(TINY, activations=activations)
    model = _model(spec, seed=3)
    for name in model.params:
        if name.endswith(".b"):
            model.params[name] += 0.05 * np.random.default_rng(4).normal(size=model.params[name].shape)
    x = _batch(2, spec, seed=5)
    y = np.array([0, 1])
    _, cache = forward(model, x)
    grads = backward(model, cache, y)

    h = 1e-5
    rng = np.random.default_rng(6)
    checked = 0
    for name, w in model.params.items():
        for flat in rng.choice(w.size, size=min(4, w.size), replace=False):
            idx = np.unravel_index(flat, w.shape)
            old = w[idx]
            w[idx] = old + h
            p_plus, c_plus = forward(model, x)
            w[idx] = old - h
            p_minus, c_minus = forward(model, x)
            w[idx] = old
            if decision_signature(c_plus) != decision_signature(c_minus):
                continue  # a ReLU or max-pool choice flips inside the step
            num = (loss(p_plus, y) - loss(p_minus, y)) / (2 * h)
            assert grads[name][idx] == pytest.approx(num, rel=1e-4, abs=1e-7), name
            checked += 1
    assert checked >= 16


MICRO = {
    "valid": NetworkSpec(input_dims=(6, 6, 4), channels=2, filters=(2, 2), kernel=(2, 2, 1), fc_units=3, dropout=0.0),
    "same": NetworkSpec(input_dims=(6, 6, 4), channels=2, filters=(2, 2), kernel=(3, 3, 2), padding="same",
                        fc_units=3, dropout=0.0),
}


@pytest.mark.parametrize("padding", sorted(MICRO))
def test_micro_net_gradients_match_central_differences(padding):
    spec = MICRO[padding]
    model = _model(spec, seed=12)
    for name in model.params:
        if name.endswith(".b"):
            model.params[name] += 0.05 * np.random.default_rng(13).normal(size=model.params[name].shape)
    x = 0.1 * _batch(2, spec, seed=14)
    y = np.array([1, 0])
    _, cache = forward(model, x)
    grads = backward(model, cache, y)

    h = 1e-3
    checked = total = 0
    for name, w in model.params.items():
        for idx in np.ndindex(w.shape):
            total += 1
            old = w[idx]
            w[idx] = old + h
            p_plus, c_plus = forward(model, x)
            w[idx] = old - h
            p_minus, c_minus = forward(model, x)
            w[idx] = old
            if decision_signature(c_plus) != decision_signature(c_minus):
                continue
            num = (loss(p_plus, y) - loss(p_minus, y)) / (2 * h)
            assert grads[name][idx] == pytest.approx(num, rel=1e-6, abs=1e-9), (name, idx)
            checked += 1
    assert checked >= total // 2


def test_dropout_only_in_training_mode():
    spec = replace(TINY, dropout=0.5)
    model = _model(spec)
    x = _batch(2, spec)
    eval_a, _ = forward(model, x, train=False, rng=np.random.default_rng(0))
    eval_b, _ = forward(model, x)
    np.testing.assert_array_equal(eval_a, eval_b)
    train_a, cache = forward(model, x, train=True, rng=np.random.default_rng(0))
    assert cache["keep_fc"] is not None
    assert set(np.unique(cache["keep_fc"])) <= {0.0, 2.0}


def test_rmsprop_first_step():
    params = {"w": np.array([1.0, -1.0])}
    opt = RMSprop(params, rho=0.9, eps=1e-6)
    opt.step(params, {"w": np.array([2.0, -0.5])}, lr=0.01)
    np.testing.assert_allclose(params["w"], [1.0 - 0.01 * math.sqrt(10), -1.0 + 0.01 * math.sqrt(10)], rtol=1e-5)
    np.testing.assert_allclose(opt.state["w"], [0.4, 0.025])


def test_training_is_seeded_and_logged(tmp_path):
    X = _batch(6, seed=7)
    y = np.array([0, 1, 0, 1, 0, 1])
    cfg = TrainConfig(epochs=3, batch_size=4, seed=11, dtype="float64", lr_initial=1e-2, lr_final=1e-3,
                      lr_hold_until=1, lr_decay_until=3)
    m1, opt, log = train(TINY, X, y, cfg)
    m2, _, _ = train(TINY, X, y, cfg)
    for name in m1.params:
        np.testing.assert_array_equal(m1.params[name], m2.params[name])
    assert [e.epoch for e in log] == [1, 2, 3]
    assert [e.lr for e in log] == [lr_schedule(e, cfg) for e in (1, 2, 3)]
    assert all(math.isfinite(e.mean_loss) and 0 <= e.train_accuracy <= 1 for e in log)

    path = tmp_path / "log.csv"
    write_training_log(log, str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,lr,mean_loss,train_accuracy"
    assert len(lines) == 4


def test_training_learns_a_separable_problem():
    rng = np.random.default_rng(8)
    y = np.array([0, 1] * 6)
    X = rng.normal(scale=0.1, size=(12,) + TINY.input_dims + (TINY.channels,))
    X[y == 1, ..., 0] += 1.0
    cfg = TrainConfig(epochs=60, batch_size=4, seed=0, dtype="float64", lr_initial=5e-3, lr_final=1e-3,
                      lr_hold_until=30, lr_decay_until=60)
    _, _, log = train(TINY, X, y, cfg)
    assert log[-1].mean_loss < log[0].mean_loss
    assert log[-1].train_accuracy == 1.0


def test_early_stop_on_accuracy():
    X = _batch(4, seed=9)
    cfg = TrainConfig(epochs=10, seed=0, stop_at_accuracy=0.0)
    _, _, log = train(TINY, X, [0, 1, 0, 1], cfg)
    assert len(log) == 1


def test_training_input_errors():
    with pytest.raises(SingleClassError):
        train(TINY, _batch(2), [1, 1], TrainConfig(epochs=1))
    with pytest.raises(PrognosisError):
        train(TINY, _batch(2), [0, 1, 1], TrainConfig(epochs=1))


def test_non_finite_loss_raises(monkeypatch):
    monkeypatch.setattr(deepnet, "loss", lambda probs, y: float("nan"))
    with pytest.raises(TrainingDivergedError) as info:
        train(TINY, _batch(2), [0, 1], TrainConfig(epochs=1))
    assert info.value.epoch == 1 and info.value.batch == 0


def test_train_on_studies():
    studies = generate_cohort(1, dims=(32, 32, 4), seed=0)
    spec = NetworkSpec(input_dims=(8, 8, 2), filters=(2,), kernel=(3, 3, 1), fc_units=3)
    model, _, log = train_on_studies(spec, studies, TrainConfig(epochs=1), downsample=(4, 4, 2))
    assert len(log) == 1
    assert predict_proba(model, np.stack([prepare_input(s, (4, 4, 2)) for s in studies])).shape == (2,)


def test_network_file_roundtrip_is_byte_stable(tmp_path):
    X = _batch(4, seed=10)
    cfg = TrainConfig(epochs=1, seed=1)
    model, opt, _ = train(TINY, X, [0, 1, 0, 1], cfg)
    a, b = tmp_path / "a.npz", tmp_path / "b.npz"
    save_network(str(a), model, opt, cfg)
    save_network(str(b), model, opt, cfg)
    assert a.read_bytes() == b.read_bytes()

    loaded, rms, header = load_network(str(a))
    assert loaded.spec == TINY
    assert header["train_config"]["seed"] == 1
    for name in model.params:
        np.testing.assert_array_equal(loaded.params[name], model.params[name])
        np.testing.assert_array_equal(rms[name], opt.state[name])
    np.testing.assert_array_equal(predict_proba(loaded, X), predict_proba(model, X))


def test_load_network_rejects_foreign_archives(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, header=np.array('{"format": "other", "version": 1}'))
    with pytest.raises(PrognosisError):
        load_network(str(path))
