import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from a2d import data, nn
from gradcheck import gradient_check


def reference_forward(model, x):
    """Straight-line re-implementation: explicit dot products per unit."""
    h = [float(v) for v in x]
    for layer in model.layers:
        if isinstance(layer, nn.Dense):
            w, b = layer.weights, layer.bias
            h = [sum(h[i] * w[i, j] for i in range(len(h))) + b[j] for j in range(w.shape[1])]
        else:
            h = [v if v > 0 else 0.0 for v in h]
    return np.array(h)


# ---------------------------------------------------------------- forward / predict

def test_identity_dense():
    m = nn.Model([nn.Dense(np.eye(2), np.zeros(2))])
    assert np.array_equal(nn.forward(m, [1.0, 2.0]), [1.0, 2.0])


def test_bias_only():
    m = nn.Model([nn.Dense(np.eye(2), [0.5, -0.5])])
    assert np.array_equal(nn.forward(m, [0.0, 0.0]), [0.5, -0.5])


def test_forward_matches_reference_evaluator():
    m = nn.mlp([7, 5, 4, 3], seed=11)
    rng = np.random.default_rng(0)
    for x in rng.uniform(0, 1, (20, 7)):
        assert np.allclose(nn.forward(m, x), reference_forward(m, x), rtol=0, atol=1e-12)


def test_forward_batch_equals_rows():
    m = nn.mlp([6, 4, 3], seed=2)
    x = np.random.default_rng(1).uniform(0, 1, (5, 6))
    batch = nn.forward(m, x)
    assert batch.shape == (5, 3)
    for i in range(5):
        assert np.allclose(batch[i], nn.forward(m, x[i]), atol=1e-14)


def test_forward_rejects_wrong_dimension():
    m = nn.mlp([4, 3, 2])
    with pytest.raises(nn.ShapeError):
        nn.forward(m, np.zeros(5))
    with pytest.raises(nn.ShapeError):
        nn.forward(m, np.zeros((2, 3)))


def test_forward_rejects_non_finite():
    m = nn.mlp([2, 2])
    with pytest.raises(ValueError):
        nn.forward(m, [np.nan, 0.0])


def test_layer_dimension_mismatch_rejected():
    with pytest.raises(nn.ShapeError):
        nn.Model([nn.Dense(np.zeros((3, 4)), np.zeros(4)), nn.ReLU(4), nn.Dense(np.zeros((5, 2)), np.zeros(2))])


def test_predict_uniform_logits_tie_goes_low():
    m = nn.Model([nn.Dense(np.zeros((3, 4)), np.zeros(4))])
    label, probs = nn.predict(m, np.ones(3))
    assert label == 0
    assert np.allclose(probs, 0.25, atol=1e-15)


def test_predict_two_class_closed_form():
    m = nn.Model([nn.Dense(np.zeros((1, 2)), [10.0, 0.0])])
    label, probs = nn.predict(m, [0.0])
    assert label == 0
    assert abs(probs[0] - 1.0 / (1.0 + np.exp(-10.0))) < 1e-15


logit_rows = st.lists(st.floats(-50, 50, allow_nan=False), min_size=2, max_size=12)


@given(logit_rows)
def test_softmax_matches_direct_exponentiation(z):
    z = np.array(z)
    e = np.exp(z - z.max())
    assert np.allclose(nn.softmax(z), e / e.sum(), rtol=1e-12, atol=1e-15)


@given(logit_rows, st.floats(-100, 100, allow_nan=False))
def test_softmax_normalized_and_shift_invariant(z, shift):
    z = np.array(z)
    p = nn.softmax(z)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p >= 0)
    q = nn.softmax(z + shift)
    assert np.max(np.abs(p - q)) <= 1e-12
    # argmax is shift invariant unless the shift itself rounds logits together
    if np.unique(z + shift).size == np.unique(z).size:
        assert np.argmax(z) == np.argmax(z + shift)


# ---------------------------------------------------------------- losses and gradients

@given(st.lists(st.floats(-20, 20, allow_nan=False), min_size=2, max_size=10), st.data())
def test_margin_loss_value_brute_force(z, draw):
    z = np.array(z)
    t = draw.draw(st.integers(0, len(z) - 1))
    kappa = draw.draw(st.floats(0, 30))
    others = max(z[i] for i in range(len(z)) if i != t)
    expected = max(others - z[t], -kappa)
    values, _ = nn.loss_and_output_grad(z[None, :], nn.MarginCW(t, kappa))
    assert values[0] == expected


def test_margin_clamped_branch_has_zero_gradient():
    m = nn.mlp([5, 6, 3], seed=4)
    x = np.random.default_rng(2).uniform(0, 1, 5)
    label = int(nn.predict_labels(m, x))
    value, g = nn.input_gradient(m, x, nn.MarginCW(label, kappa=0.0))
    # the predicted class already wins, so the margin sits below -kappa = 0
    assert value == 0.0
    assert np.all(g == 0)


def test_constant_model_has_zero_gradient():
    m = nn.Model([nn.Dense(np.zeros((4, 3)), [1.0, 2.0, 3.0])])
    _, g = nn.input_gradient(m, np.full(4, 0.5), nn.CrossEntropy(2))
    assert np.all(g == 0)


def test_loss_rejects_bad_labels():
    m = nn.mlp([3, 2])
    with pytest.raises(ValueError):
        nn.input_gradient(m, np.zeros(3), nn.CrossEntropy(2))
    with pytest.raises(ValueError):
        nn.MarginCW(0, kappa=-1.0)


@pytest.mark.parametrize("loss_name", ["ce", "cw", "mse"])
def test_gradient_matches_finite_differences(loss_name):
    rng = np.random.default_rng(7)
    worst, checked = gradient_check(loss_name, rng, nets=12, coords_per_net=60)
    assert checked >= 300
    assert worst < 1e-4


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["ce", "cw", "mse"]))
def test_gradient_property(seed, loss_name):
    worst, _ = gradient_check(loss_name, np.random.default_rng(seed), nets=1, coords_per_net=20)
    assert worst < 1e-4


def test_jacobian_rows_are_logit_gradients():
    m = nn.mlp([6, 5, 3], seed=9)
    x = np.random.default_rng(3).uniform(0, 1, (2, 6))
    z, jac = nn.jacobian(m, x)
    assert jac.shape == (2, 3, 6)
    for c in range(3):
        # gradient of Z_c equals the MarginCW gradient pieces; check with finite differences
        h = 1e-6
        for i in range(6):
            e = np.zeros(6)
            e[i] = h
            fd = (nn.forward(m, x + e)[:, c] - nn.forward(m, x - e)[:, c]) / (2 * h)
            assert np.allclose(jac[:, c, i], fd, atol=1e-7)


# ---------------------------------------------------------------- training

def test_training_separable_blobs():
    blobs = data.synthetic_blobs(2, 100, 2, 0.03, seed=5)
    model, history = nn.train(nn.mlp([2, 8, 2], seed=0), blobs, nn.TrainConfig(0.5, 50, 16, seed=1))
    assert len(history) == 50
    assert [h["epoch"] for h in history] == list(range(1, 51))
    assert history[-1]["accuracy"] >= 0.99
    assert nn.evaluate_accuracy(model, blobs.images, blobs.labels) >= 0.99


def test_zero_learning_rate_keeps_weights():
    blobs = data.synthetic_blobs(3, 20, 4, 0.1, seed=1)
    start = nn.mlp([4, 5, 3], seed=3)
    model, history = nn.train(start, blobs, nn.TrainConfig(0.0, 3, 8, seed=0))
    for a, b in zip(start.dense_layers(), model.dense_layers()):
        assert np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)
    assert len({h["loss"] for h in history}) == 1


def test_training_is_deterministic_and_frozen():
    blobs = data.synthetic_blobs(3, 30, 5, 0.1, seed=2)
    cfg = nn.TrainConfig(0.1, 4, 10, seed=42)
    a, ha = nn.train(nn.mlp([5, 6, 3], seed=1), blobs, cfg)
    b, hb = nn.train(nn.mlp([5, 6, 3], seed=1), blobs, cfg)
    for la, lb in zip(a.dense_layers(), b.dense_layers()):
        assert la.weights.tobytes() == lb.weights.tobytes()
        assert la.bias.tobytes() == lb.bias.tobytes()
    assert ha == hb
    assert a.frozen
    with pytest.raises(ValueError):
        a.dense_layers()[0].weights[0, 0] = 1.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_errors():
    empty = data.Dataset(np.zeros((0, 3)), np.zeros(0, dtype=int), 2)
    with pytest.raises(ValueError):
        nn.train(nn.mlp([3, 2]), empty, nn.TrainConfig())
    blobs = data.synthetic_blobs(2, 10, 3, 0.1)
    with pytest.raises(nn.TrainingDiverged):
        nn.train(nn.mlp([3, 4, 2], seed=0), blobs, nn.TrainConfig(1e300, 1, 4))
    with pytest.raises(ValueError):
        nn.TrainConfig(epochs=0)


# ---------------------------------------------------------------- persistence

def test_save_load_round_trip(tmp_path):
    m = nn.mlp([9, 7, 5, 4], seed=8)
    path = tmp_path / "m.a2dm"
    nn.save_model(m, path)
    back = nn.load_model(path)
    x = np.random.default_rng(0).uniform(0, 1, (100, 9))
    assert np.array_equal(nn.forward(m, x), nn.forward(back, x))
    for a, b in zip(m.dense_layers(), back.dense_layers()):
        assert a.weights.tobytes() == b.weights.tobytes()
    assert (back.input_dim, back.num_classes) == (9, 4)


def test_file_header_layout(tmp_path):
    m = nn.mlp([3, 2], seed=0)
    path = tmp_path / "m.a2dm"
    nn.save_model(m, path)
    raw = path.read_bytes()
    assert raw[:4] == b"A2DM"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 1
    assert len(raw) == 12 + 9 + 8 * (3 * 2 + 2)


def test_bad_magic(tmp_path):
    path = tmp_path / "m.a2dm"
    nn.save_model(nn.mlp([3, 2]), path)
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"XXXX"
    with pytest.raises(nn.FormatError) as err:
        nn.model_from_bytes(bytes(raw))
    assert err.value.offset == 0


def test_truncated_and_trailing(tmp_path):
    path = tmp_path / "m.a2dm"
    nn.save_model(nn.mlp([3, 4, 2]), path)
    buf = path.read_bytes()
    with pytest.raises(nn.FormatError, match="truncated"):
        nn.model_from_bytes(buf[:-3])
    with pytest.raises(nn.FormatError, match="trailing"):
        nn.model_from_bytes(buf + b"\0")


def test_mismatched_layer_dims_named():
    # layer 0: Dense 3->4, layer 1: Dense declared 5->2
    import struct
    parts = [b"A2DM", struct.pack("<II", 1, 2)]
    parts += [struct.pack("<BII", 1, 3, 4), np.zeros(12).tobytes(), np.zeros(4).tobytes()]
    parts += [struct.pack("<BII", 1, 5, 2), np.zeros(10).tobytes(), np.zeros(2).tobytes()]
    with pytest.raises(nn.FormatError, match="layer 1"):
        nn.model_from_bytes(b"".join(parts))
