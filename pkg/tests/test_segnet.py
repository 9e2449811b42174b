import numpy as np
import pytest

from segadv import segnet
from segadv import tensor_core as tc

SMALL = segnet.ModelConfig(image_size=(16, 16), input_scale=4.0)
PLAIN = segnet.ModelConfig(image_size=(16, 16))


def _rand_batch(seed, n=1, size=16):
    rng = np.random.default_rng(seed)
    return rng.random((n, 3, size, size)).astype(np.float32), rng.integers(0, 5, (n, size, size))


def _f64(params):
    return {k: v.astype(np.float64) for k, v in params.items()}


def test_build_is_deterministic():
    a, b = segnet.build_model(SMALL, 3), segnet.build_model(SMALL, 3)
    assert segnet.to_bytes(a) == segnet.to_bytes(b)
    c = segnet.build_model(SMALL, 4)
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)


def test_zero_input_gives_finite_logits():
    z = segnet.logits(segnet.build_model(segnet.ModelConfig(), 0), np.zeros((3, 64, 64), np.float32))
    assert z.shape == (5, 64, 64) and np.all(np.isfinite(z))


@pytest.mark.parametrize("bad", [
    dict(num_classes=1), dict(widths=()), dict(skips=(3,)), dict(skips=(0,)),
    dict(image_size=(20, 16)),
])
def test_invalid_config(bad):
    with pytest.raises(segnet.ConfigError):
        segnet.build_model(segnet.ModelConfig(**{**SMALL.to_dict(), **bad}), 0)


def test_parameters_are_read_only():
    m = segnet.build_model(SMALL, 0)
    with pytest.raises(ValueError):
        m.params["score.bias"][0] = 1.0


def test_predict_invariants():
    m = segnet.build_model(SMALL, 1)
    x, _ = _rand_batch(0)
    p = segnet.predict(m, x[0])
    np.testing.assert_allclose(p.probs.sum(axis=0), 1.0, atol=1e-5)
    np.testing.assert_array_equal(p.labels, p.probs.argmax(axis=0))
    q = segnet.predict(m, x[0])
    assert p.probs.tobytes() == q.probs.tobytes()


def test_predict_rejects_wrong_shape():
    with pytest.raises(tc.ShapeError):
        segnet.predict(segnet.build_model(SMALL, 0), np.zeros((3, 32, 32), np.float32))


def test_labels_tie_break_and_shift_invariance():
    z = np.zeros((3, 2, 2), np.float32)
    z[1, 0, 0] = z[2, 0, 0] = 1.0
    assert segnet.labels_from_probs(z)[0, 0] == 1
    assert segnet.labels_from_probs(z)[1, 1] == 0
    rng = np.random.default_rng(0)
    z = rng.standard_normal((4, 5, 5)).astype(np.float32)
    shift = rng.standard_normal((1, 5, 5)).astype(np.float32) * 10
    np.testing.assert_array_equal(segnet.labels_from_probs(z), segnet.labels_from_probs(z + shift))


def _network_fd_error(cfg, seed, step):
    m = segnet.build_model(cfg, seed)
    x, y = _rand_batch(seed)
    out, tape = segnet.forward(m.params, cfg, x, keep=True)
    _, dl = tc.softmax_xent_map(out, y)
    lg = segnet.backward(m.params, cfg, tape, dl)
    p64 = _f64(m.params)
    f = lambda v: tc.softmax_xent_map(segnet.forward(p64, cfg, v), y)[0]
    rng = np.random.default_rng(seed)
    errs = [tc.grad_check(f, x, lg.input_grad, step, rng.choice(x.size, 96, replace=False))]
    for name in ("enc1_down.kernel", "enc3_conv.kernel", "score.bias", "skip2.kernel"):
        def fp(v, name=name):
            return tc.softmax_xent_map(segnet.forward({**p64, name: v}, cfg, x.astype(np.float64)), y)[0]
        idx = rng.choice(m.params[name].size, min(24, m.params[name].size), replace=False)
        errs.append(tc.grad_check(fp, m.params[name], lg.param_grads[name], step, idx))
    return max(errs)


@pytest.mark.parametrize("seed", range(20))
def test_network_gradients_finite_differences(seed):
    """Composed network: input and parameter gradients vs central differences."""
    assert _network_fd_error(PLAIN, seed, 1e-3) < 1e-3


@pytest.mark.parametrize("seed", range(20))
def test_scaled_network_gradients(seed):
    # input_scale multiplies first-layer preactivations, so the step shrinks by the same factor
    assert _network_fd_error(SMALL, seed, 1e-3 / SMALL.input_scale) < 1e-3


def test_input_gradient_fully_masked_is_zero():
    m = segnet.build_model(SMALL, 0)
    x, _ = _rand_batch(1)
    pred = segnet.predict(m, x[0])
    # every pixel is predicted as its target with probability above 1/C > tau
    tau = float(pred.probs.max(axis=0).min()) * 0.99
    g = segnet.input_gradient(m, x[0], pred.labels, None, tau)
    assert not g.any()


def test_input_gradient_tau_one_is_unmasked():
    m = segnet.build_model(SMALL, 2)
    x, y = _rand_batch(2)
    g = segnet.input_gradient(m, x, y, None, 1.0)
    out, tape = segnet.forward(m.params, SMALL, x, keep=True)
    _, dl = tc.softmax_xent_map(out, y)
    ref = segnet.backward(m.params, SMALL, tape, dl, need_params=False).input_grad
    np.testing.assert_array_equal(g, ref)


def test_input_gradient_rejects_bad_tau_and_shape():
    m = segnet.build_model(SMALL, 0)
    x, y = _rand_batch(0)
    with pytest.raises(ValueError):
        segnet.input_gradient(m, x, y, None, 0.0)
    with pytest.raises(tc.ShapeError):
        segnet.input_gradient(m, x, y[:, :8], None, 0.5)


@pytest.mark.parametrize("seed", range(5))
def test_masked_input_gradient_finite_differences(seed):
    m = segnet.build_model(SMALL, seed)
    x, _ = _rand_batch(seed)
    pred = segnet.predict(m, x)
    y = pred.labels.copy()
    y[:, ::2] = (y[:, ::2] + 1) % 5  # half the pixels disagree with the prediction
    w = np.random.default_rng(seed).uniform(0, 1, y.shape).astype(np.float32)
    tau = 0.3
    g = segnet.input_gradient(m, x, y, w, tau)
    mask = segnet.tau_mask(pred.probs, y, tau)
    assert mask.any() and not mask.all()
    frozen = np.where(mask, 0, w)
    p64 = _f64(m.params)
    f = lambda v: tc.softmax_xent_map(segnet.forward(p64, SMALL, v), y, frozen)[0]
    probe = np.random.default_rng(seed).choice(x.size, 96, replace=False)
    assert tc.grad_check(f, x, g, 1e-3, probe) < 1e-3


def test_batched_gradient_slices_are_per_image():
    m = segnet.build_model(SMALL, 5)
    x, y = _rand_batch(5, n=3)
    g = segnet.input_gradient(m, x, y, None, 0.75)
    for k in range(3):
        np.testing.assert_allclose(g[k], segnet.input_gradient(m, x[k], y[k], None, 0.75), rtol=1e-4, atol=1e-8)


def test_train_reduces_loss_and_is_reproducible():
    x, y = _rand_batch(7, n=12)
    y = (x.mean(axis=1) > 0.5).astype(int)  # learnable: bright pixels are class 1
    m0 = segnet.build_model(SMALL, 0)
    m1 = segnet.train(m0, (x, y), 8, 0.2, seed=1, batch_size=4)
    m2 = segnet.train(m0, (x, y), 8, 0.2, seed=1, batch_size=4)
    assert segnet.dataset_loss(m1, (x, y)) < segnet.dataset_loss(m0, (x, y))
    assert m1.meta["final_loss"] == m2.meta["final_loss"]
    assert segnet.to_bytes(m1) == segnet.to_bytes(m2)
    m3 = segnet.train(m0, (x, y), 0, 0.2, seed=1)
    assert all(np.array_equal(m0.params[k], m3.params[k]) for k in m0.params)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_rejects_empty_and_detects_divergence():
    with pytest.raises(ValueError):
        segnet.train(segnet.build_model(SMALL, 0), [], 1, 0.1, 0)
    x, y = _rand_batch(0, n=4)
    with pytest.raises(segnet.TrainingDiverged):
        segnet.train(segnet.build_model(SMALL, 0), (x, y), 3, 1e9, 0)


def test_save_load_roundtrip(tmp_path):
    m = segnet.train(segnet.build_model(SMALL, 0), _rand_batch(1, n=4), 1, 0.1, 0)
    segnet.save(m, tmp_path / "m.ckpt")
    m2 = segnet.load(tmp_path / "m.ckpt")
    assert m2.config == m.config and m2.meta == m.meta
    assert segnet.to_bytes(m2) == segnet.to_bytes(m)
    x, _ = _rand_batch(2)
    assert segnet.predict(m, x).probs.tobytes() == segnet.predict(m2, x).probs.tobytes()


def test_load_truncated_and_corrupt(tmp_path):
    data = segnet.to_bytes(segnet.build_model(SMALL, 0))
    with pytest.raises(segnet.CheckpointError) as err:
        segnet.from_bytes(data[:-10])
    assert err.value.field == sorted(segnet.param_shapes(SMALL))[-1]
    with pytest.raises(segnet.CheckpointError, match="magic"):
        segnet.from_bytes(b"junk" + data)
    bad = data.replace(b'"num_classes": 5', b'"num_classes": 1')
    with pytest.raises(segnet.CheckpointError, match="'config'"):
        segnet.from_bytes(bad)
