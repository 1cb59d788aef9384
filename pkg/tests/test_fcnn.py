import json

import numpy as np
import pytest

from enkf_fcnn import fcnn as F
from enkf_fcnn.errors import (
    ContractViolation,
    CorruptFileError,
    ShapeMismatchError,
    TrainingDivergedError,
    TrainingError,
    VersionMismatchError,
)


def linear_task(n=400, n_in=6, n_out=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, n_in))
    W = rng.standard_normal((n_out, n_in))
    return X, X @ W.T + 0.5


def raw_loss(model, Z, T):
    return F.loss_mse(F.forward_normalized(model, Z), T)


# -- input layout ------------------------------------------------------------

def test_input_sizes():
    assert F.input_size(7, 3, 3) == 27
    assert F.input_size(7, 10, 5) == 85


def test_input_vector_layout():
    S = np.array([[1.0, 2.0], [3.0, 4.0]])
    v = F.build_input_vector(S, np.array([9.0]), np.array([7.0, 8.0]))
    assert v.tolist() == [1.0, 3.0, 2.0, 4.0, 9.0, 7.0, 8.0]
    assert np.array_equal(F.build_input_vector(np.zeros((3, 7)), np.zeros(3), np.zeros(3)), np.zeros(27))
    with pytest.raises(ContractViolation):
        F.build_input_vector(S, np.array([9.0]), np.array([7.0]))


# -- forward pass ------------------------------------------------------------

def test_forward_examples():
    cfg = F.FcnnConfig((4, 3, 2))
    assert np.array_equal(F.forward(F.zero_model(cfg), np.ones(4)), np.zeros(2))
    single = F.FcnnConfig((3, 3))
    model = F.zero_model(single)
    model.weights[0][:] = np.eye(3)
    x = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(F.forward(model, x), x)  # no activation on the output layer
    assert F.relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]


def test_forward_batch_matches_single_calls():
    model = F.init_model(F.FcnnConfig((5, 8, 2), seed=3))
    X = np.random.default_rng(0).standard_normal((6, 5))
    batch = F.forward(model, X)
    for i in range(6):
        np.testing.assert_allclose(batch[i], F.forward(model, X[i]), rtol=1e-14, atol=1e-15)


def test_forward_rejects_bad_input():
    model = F.init_model(F.FcnnConfig((5, 4, 2)))
    with pytest.raises(ContractViolation):
        F.forward(model, np.ones(4))
    with pytest.raises(ContractViolation):
        F.forward(model, np.array([1.0, np.nan, 0.0, 0.0, 0.0]))


def test_relu_network_is_positively_homogeneous():
    model = F.init_model(F.FcnnConfig((5, 7, 6, 3), seed=1))
    x = np.random.default_rng(1).standard_normal(5)
    for alpha in (0.5, 2.0, 10.0):
        np.testing.assert_allclose(F.forward(model, alpha * x), alpha * F.forward(model, x), rtol=1e-12)


def test_he_uniform_bounds():
    model = F.init_model(F.FcnnConfig((50, 20, 4)))
    assert np.abs(model.weights[0]).max() <= np.sqrt(6 / 50)
    assert np.abs(model.weights[1]).max() <= np.sqrt(6 / 20)
    assert all(not b.any() for b in model.biases)


# -- loss and gradients ------------------------------------------------------

def test_loss_examples():
    assert F.loss_mse(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert F.loss_mse(np.array([0.0, 0.0]), np.array([1.0, 3.0])) == 5.0
    with pytest.raises(ContractViolation):
        F.loss_mse(np.zeros(2), np.zeros(3))


def test_gradients_vanish_at_perfect_fit():
    model = F.init_model(F.FcnnConfig((5, 4, 3), seed=2))
    x = np.random.default_rng(2).standard_normal((4, 5))
    gW, gb = F.backward(model, x, F.forward(model, x))
    assert all(not g.any() for g in gW + gb)


def test_gradients_match_finite_differences():
    model = F.init_model(F.FcnnConfig((5, 4, 3), seed=4))
    rng = np.random.default_rng(4)
    for b in model.biases:
        b[:] = rng.uniform(0.05, 0.2, b.shape)
    h = 1e-6
    for trial in range(20):
        x = rng.standard_normal(5)
        t = rng.standard_normal(3)
        gW, gb = F.backward(model, x, t)
        Z, T = x[None], t[None]
        for params, grads in ((model.weights, gW), (model.biases, gb)):
            for p, g in zip(params, grads):
                numeric = np.empty_like(p)
                for idx in np.ndindex(p.shape):
                    old = p[idx]
                    p[idx] = old + h
                    up = raw_loss(model, Z, T)
                    p[idx] = old - h
                    down = raw_loss(model, Z, T)
                    p[idx] = old
                    numeric[idx] = (up - down) / (2 * h)
                err = np.linalg.norm(numeric - g) / max(np.linalg.norm(numeric) + np.linalg.norm(g), 1e-12)
                assert err < 1e-4, f"input {trial}: relative error {err}"


def test_dead_relu_unit_gets_no_gradient():
    model = F.init_model(F.FcnnConfig((4, 3, 2), seed=5))
    model.biases[0][1] = -1e6
    gW, gb = F.backward(model, np.ones(4), np.ones(2))
    assert not gW[0][1].any() and gb[0][1] == 0.0
    assert not gW[1][:, 1].any()


# -- training ----------------------------------------------------------------

def test_constant_targets_are_learned():
    X = np.random.default_rng(0).standard_normal((64, 4))
    Y = np.tile([1.5, -2.0], (64, 1))
    model = F.train(F.FcnnConfig((4, 8, 2), batch_size=8, epochs=2000, patience=500), (X, Y))
    assert model.output_constant == [0, 1]
    assert model.training_meta["final_train_mse"] < 1e-6


def test_linear_task_is_learned():
    X, Y = linear_task()
    cfg = F.FcnnConfig((6, 32, 3), learning_rate=3e-3, epochs=200)
    model = F.train(cfg, (X, Y), test_pairs=(X[:100], Y[:100]))
    var = Y.var(axis=0).mean()
    assert model.training_meta["final_train_mse"] < 0.02 * var
    assert model.training_meta["final_test_mse"] < 0.02 * var
    assert model.training_meta["test_target_variance"] > 0


def test_first_epochs_decrease_loss():
    X, Y = linear_task()
    model = F.train(F.FcnnConfig((6, 16, 3), epochs=5), (X, Y))
    losses = [h["train_loss"] for h in model.history]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_training_is_deterministic():
    X, Y = linear_task()
    cfg = F.FcnnConfig((6, 8, 3), epochs=10, seed=11)
    a, b = F.train(cfg, (X, Y)), F.train(cfg, (X, Y))
    for Wa, Wb in zip(a.weights + a.biases, b.weights + b.biases):
        assert np.array_equal(Wa, Wb)
    c = F.train(F.FcnnConfig((6, 8, 3), epochs=10, seed=12), (X, Y))
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_normalization_comes_from_training_pairs():
    X, Y = linear_task()
    Xv, Yv = 10 + X[:50], Y[:50]
    model = F.train(F.FcnnConfig((6, 8, 3), epochs=3), (X, Y), val_pairs=(Xv, Yv))
    np.testing.assert_allclose(model.input_mean, X.mean(axis=0), rtol=1e-14)
    np.testing.assert_allclose(model.output_std, Y.std(axis=0), rtol=1e-14)


def test_early_stopping_keeps_best_weights():
    X, Y = linear_task()
    rng = np.random.default_rng(9)
    noise = (X[:40], rng.standard_normal((40, 3)) * 100)  # validation data the model cannot fit
    model = F.train(F.FcnnConfig((6, 16, 3), epochs=200, patience=3), (X, Y), val_pairs=noise)
    meta = model.training_meta
    assert meta["epochs_run"] < 200
    best = min(h["val_loss"] for h in model.history)
    assert model.history[meta["best_epoch"]]["val_loss"] == best


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    X, Y = linear_task()
    with pytest.raises(TrainingDivergedError):
        F.train(F.FcnnConfig((6, 8, 3), learning_rate=1e300, epochs=5), (X, Y))


def test_training_contracts():
    with pytest.raises(TrainingError):
        F.train(F.FcnnConfig((6, 3)), (np.empty((0, 6)), np.empty((0, 3))))
    with pytest.raises(ContractViolation):
        F.train(F.FcnnConfig((6, 3)), (np.ones((4, 5)), np.ones((4, 3))))
    with pytest.raises(ContractViolation):
        F.FcnnConfig((6,))


# -- serialization -----------------------------------------------------------

@pytest.fixture
def trained(tmp_path):
    X, Y = linear_task()
    model = F.train(F.FcnnConfig((6, 8, 3), epochs=3), (X, Y), layout={"n_inputs": 6})
    return model, F.save_model(model, tmp_path / "model.json")


def test_save_load_round_trip_is_bit_exact(trained):
    model, path = trained
    loaded = F.load_model(path)
    X = np.random.default_rng(7).standard_normal((100, 6))
    assert np.array_equal(F.forward(model, X), F.forward(loaded, X))
    assert loaded.config == model.config
    assert loaded.layout == {"n_inputs": 6}


def _rewrite(path, edit):
    doc = json.loads(path.read_text())
    edit(doc)
    path.write_text(json.dumps(doc))


def test_wrong_weight_shape_is_rejected(trained):
    _, path = trained
    _rewrite(path, lambda d: d["layers"][0].update(weight=[[0.0] * 5] * 8))
    with pytest.raises(ShapeMismatchError):
        F.load_model(path)


def test_missing_normalization_is_rejected(trained):
    _, path = trained
    _rewrite(path, lambda d: d.pop("normalization"))
    with pytest.raises(CorruptFileError):
        F.load_model(path)


def test_version_mismatch_is_rejected(trained):
    _, path = trained
    _rewrite(path, lambda d: d.update(version=2))
    with pytest.raises(VersionMismatchError):
        F.load_model(path)


def test_truncated_file_is_rejected(trained):
    _, path = trained
    path.write_text(path.read_text()[:200])
    with pytest.raises(CorruptFileError):
        F.load_model(path)
