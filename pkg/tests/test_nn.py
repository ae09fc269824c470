import numpy as np
import pytest

from mherlab.nn import (
    AdamState,
    GradientBundle,
    MeanSquaredError,
    MlpModel,
    NetworkError,
    NumericalError,
    OutputActivation,
    RegressionBatch,
    ShapeMismatchError,
    adam_step,
    backward,
    forward,
    grad_check,
    init_mlp,
    load_mlp,
    polyak_update,
    save_mlp,
)


def scalar_model(w: float) -> MlpModel:
    return MlpModel((1, 1), (np.array([[w]]),), (np.zeros(1),))


def square_batch() -> RegressionBatch:
    # loss = (w * 1 - 0)^2 = w^2
    return RegressionBatch(np.ones((1, 1)), np.zeros((1, 1)))


class TestInit:
    def test_same_seed_gives_identical_parameters(self):
        a = init_mlp([2, 4, 1], rng=np.random.default_rng(0))
        b = init_mlp([2, 4, 1], rng=np.random.default_rng(0))
        for p, q in zip(a.parameters(), b.parameters()):
            assert np.array_equal(p, q)

    def test_single_layer_size_rejected(self):
        with pytest.raises(ShapeMismatchError):
            init_mlp([2])

    def test_actor_shapes_chain(self):
        model = init_mlp([4, 256, 256, 256, 2], rng=np.random.default_rng(0))
        assert [w.shape for w in model.weights] == [(4, 256), (256, 256), (256, 256), (256, 2)]
        assert forward(model, np.zeros((3, 4))).shape == (3, 2)

    def test_squash_needs_box(self):
        with pytest.raises(NetworkError):
            init_mlp([2, 2], output_activation=OutputActivation.SQUASH)


class TestForward:
    def test_zero_weights_return_output_bias(self):
        model = init_mlp([3, 5, 2], rng=np.random.default_rng(1))
        params = [np.zeros_like(p) for p in model.parameters()]
        params[-1] = np.array([0.25, -1.5])
        out = forward(model.with_parameters(params), np.random.default_rng(2).normal(size=(6, 3)))
        assert np.array_equal(out, np.tile([0.25, -1.5], (6, 1)))

    def test_identity_network(self):
        model = MlpModel((3, 3), (np.eye(3),), (np.zeros(3),))
        x = np.array([[1.0, -2.0, 0.5]])
        assert np.array_equal(forward(model, x), x)

    def test_single_row_keeps_rank(self):
        model = MlpModel((3, 3), (np.eye(3),), (np.zeros(3),))
        assert forward(model, np.array([1.0, 2.0, 3.0])).shape == (3,)

    def test_squashed_output_stays_inside_box(self):
        model = init_mlp([2, 8, 2], OutputActivation.SQUASH, np.random.default_rng(3), [-1, -1], [1, 1])
        big = model.with_parameters([p * 100 for p in model.parameters()])
        out = forward(big, np.random.default_rng(4).normal(scale=50, size=(500, 2)))
        assert np.all(out > -1) and np.all(out < 1)

    def test_width_mismatch(self):
        model = init_mlp([3, 2], rng=np.random.default_rng(0))
        with pytest.raises(ShapeMismatchError):
            forward(model, np.zeros((2, 4)))


class TestBackward:
    def test_square_gradient(self):
        loss, grads = backward(scalar_model(1.0), MeanSquaredError(), square_batch())
        assert loss == 1.0
        assert grads.weights[0][0, 0] == pytest.approx(2.0)

    def test_dead_unit_has_exactly_zero_gradient(self):
        model = init_mlp([2, 4, 1], rng=np.random.default_rng(5))
        params = list(model.parameters())
        params[1] = params[1].copy()
        params[1][0] = -100.0
        model = model.with_parameters(params)
        x = np.random.default_rng(6).uniform(-1, 1, size=(10, 2))
        _, grads = backward(model, MeanSquaredError(), RegressionBatch(x, np.ones((10, 1))))
        assert np.all(grads.weights[1][0] == 0.0)
        assert np.all(grads.weights[0][:, 0] == 0.0)

    def test_empty_batch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            backward(scalar_model(1.0), MeanSquaredError(), RegressionBatch(np.zeros((0, 1)), np.zeros((0, 1))))

    def test_non_finite_input_rejected(self):
        batch = RegressionBatch(np.array([[np.nan]]), np.zeros((1, 1)))
        with pytest.raises(NumericalError):
            backward(scalar_model(1.0), MeanSquaredError(), batch)

    def test_empty_mask_gives_zero_loss(self):
        model = init_mlp([2, 3, 1], rng=np.random.default_rng(0))
        batch = RegressionBatch(np.ones((4, 2)), np.ones((4, 1)), np.zeros(4, dtype=bool))
        loss, grads = backward(model, MeanSquaredError(), batch)
        assert loss == 0.0
        assert all(np.all(g == 0) for g in grads.parameters())


class TestGradCheck:
    def test_random_two_layer_net(self):
        rng = np.random.default_rng(7)
        model = init_mlp([2, 16, 1], rng=rng)
        batch = RegressionBatch(rng.normal(size=(8, 2)), rng.normal(size=(8, 1)))
        assert grad_check(model, MeanSquaredError(), batch, h=1e-5) < 1e-4

    def test_random_three_layer_squashed_net(self):
        rng = np.random.default_rng(8)
        model = init_mlp([3, 12, 12, 2], OutputActivation.SQUASH, rng, [-1, -2], [1, 2])
        batch = RegressionBatch(rng.normal(size=(6, 3)), rng.uniform(-1, 1, size=(6, 2)))
        assert grad_check(model, MeanSquaredError(), batch, h=1e-5) < 1e-4

    def test_linear_model_at_noise_floor(self):
        rng = np.random.default_rng(9)
        model = init_mlp([3, 2], rng=rng)
        batch = RegressionBatch(rng.normal(size=(5, 3)), rng.normal(size=(5, 2)))
        assert grad_check(model, MeanSquaredError(), batch) < 1e-7

    def test_corrupted_gradient_detected(self):
        rng = np.random.default_rng(10)
        model = init_mlp([2, 8, 1], rng=rng)
        batch = RegressionBatch(rng.normal(size=(8, 2)), rng.normal(size=(8, 1)))
        _, grads = backward(model, MeanSquaredError(), batch)
        weights = [w.copy() for w in grads.weights]
        i = np.unravel_index(np.argmax(np.abs(weights[0])), weights[0].shape)
        weights[0][i] *= 2.0
        corrupted = GradientBundle(tuple(weights), grads.biases)
        assert grad_check(model, MeanSquaredError(), batch, gradients=corrupted) > 0.1


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        model = scalar_model(1.0)
        _, grads = backward(model, MeanSquaredError(), square_batch())
        updated, state = adam_step(model, grads, AdamState.for_model(model), 1e-3)
        assert updated.weights[0][0, 0] == pytest.approx(0.999, abs=1e-9)
        assert state.step == 1

    def test_zero_gradient_is_a_no_op(self):
        model = init_mlp([2, 3, 1], rng=np.random.default_rng(0))
        state = AdamState.for_model(model)
        updated, new_state = adam_step(model, GradientBundle.zeros_like(model), state, 1e-3)
        for p, q in zip(model.parameters(), updated.parameters()):
            assert np.array_equal(p, q)
        assert all(np.all(m == 0) for m in new_state.first_moment)
        assert new_state.step == 1

    def test_deterministic(self):
        model = init_mlp([2, 3, 1], rng=np.random.default_rng(0))
        batch = RegressionBatch(np.ones((2, 2)), np.zeros((2, 1)))
        _, grads = backward(model, MeanSquaredError(), batch)
        state = AdamState.for_model(model)
        a, _ = adam_step(model, grads, state, 1e-3)
        b, _ = adam_step(model, grads, state, 1e-3)
        for p, q in zip(a.parameters(), b.parameters()):
            assert np.array_equal(p, q)

    def test_non_positive_learning_rate(self):
        model = scalar_model(1.0)
        with pytest.raises(NetworkError):
            adam_step(model, GradientBundle.zeros_like(model), AdamState.for_model(model), 0.0)


class TestPolyak:
    def test_mixing(self):
        target = polyak_update(scalar_model(1.0), scalar_model(0.0), 0.9)
        assert target.weights[0][0, 0] == pytest.approx(0.9)

    def test_hard_and_frozen_updates(self):
        online = init_mlp([2, 3, 1], rng=np.random.default_rng(0))
        target = init_mlp([2, 3, 1], rng=np.random.default_rng(1))
        copied = polyak_update(target, online, 0.0)
        frozen = polyak_update(target, online, 1.0)
        for p, q in zip(copied.parameters(), online.parameters()):
            assert np.array_equal(p, q)
        for p, q in zip(frozen.parameters(), target.parameters()):
            assert np.array_equal(p, q)

    def test_geometric_convergence(self):
        online = scalar_model(0.0)
        target = scalar_model(1.0)
        for _ in range(10):
            target = polyak_update(target, online, 0.9)
        assert target.weights[0][0, 0] == pytest.approx(0.9 ** 10)

    def test_incongruent_models(self):
        with pytest.raises(ShapeMismatchError):
            polyak_update(init_mlp([2, 3, 1]), init_mlp([2, 4, 1]), 0.5)


def test_checkpoint_restores_squashed_model(tmp_path):
    model = init_mlp([4, 6, 2], OutputActivation.SQUASH, np.random.default_rng(2), [-1, -3], [1, 3])
    save_mlp(model, tmp_path / 'actor.bin')
    restored = load_mlp(tmp_path / 'actor.bin')
    assert restored.layer_sizes == model.layer_sizes
    assert restored.output_activation == OutputActivation.SQUASH
    x = np.random.default_rng(3).normal(size=(5, 4))
    assert np.array_equal(forward(restored, x), forward(model, x))


def test_truncated_checkpoint_rejected(tmp_path):
    path = tmp_path / 'model.bin'
    save_mlp(init_mlp([2, 2], rng=np.random.default_rng(0)), path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(NetworkError):
        load_mlp(path)
