import numpy as np
import pytest

from app.core.exceptions import ArtifactError, NumericalError
from app.core.random import derive_rng
from app.models.network import Activation, DipNetConfig, TrainConfig
from app.services.dipnet_service import (
    Dataset,
    DipNet,
    ResidualLayer,
    dipnet_service,
    l2_accuracy_from_outputs,
    split_indices,
)
from app.services.forward_service import LinearMap
from app.services.prior_service import prior_service
from app.services.reduction_service import ReducedBases


def orthonormal(rows, cols, seed):
    return np.linalg.qr(derive_rng(seed).standard_normal((rows, cols)))[0]


def make_bases(n=6, d=4, r_M=3, r_F=3, seed=0):
    return ReducedBases(
        V=orthonormal(n, r_M, seed),
        lambda_as=np.ones(r_M),
        Phi=orthonormal(d, r_F, seed + 1),
        lambda_pod=np.ones(r_F),
        n_samples_as=1,
        n_samples_pod=1,
    )


def make_dataset(inputs, outputs, seed=0):
    train, validation, test = split_indices(inputs.shape[0], 0.2, 0.2, seed)
    return Dataset(inputs, outputs, train, validation, test, seed)


def randomize(net, seed, scale=0.5):
    net.set_parameter_vector(scale * derive_rng(seed).standard_normal(net.parameter_vector().size))
    return net


def unit(size, seed):
    v = derive_rng(seed).standard_normal(size)
    return v / np.linalg.norm(v)


class TestForward:
    def test_zero_residual_weights_give_linear_map(self):
        bases = make_bases()
        net = dipnet_service.build_net(DipNetConfig(breadth=3, depth=2, layer_rank=1), bases, seed=0)
        for layer in net.layers:
            layer.w1[...] = 0.0
        m = derive_rng(1).standard_normal(6)
        np.testing.assert_allclose(net.evaluate(m), bases.Phi @ bases.V.T @ m, atol=1e-14)

    def test_zero_input_returns_output_bias(self):
        net = randomize(dipnet_service.build_net(DipNetConfig(breadth=3, depth=3, layer_rank=2), make_bases(), seed=0), 2)
        for layer in net.layers:
            layer.b[...] = 0.0
        np.testing.assert_array_equal(net.evaluate(np.zeros(6)), net.output_bias)

    def test_hand_composition(self):
        config = DipNetConfig(breadth=3, depth=1, layer_rank=1)
        w1 = np.array([[0.3, -0.2, 0.5]])
        w2 = np.array([[1.0], [-2.0], [0.5]])
        b = np.array([0.1])
        bias = np.array([0.0, 1.0, -1.0])
        net = DipNet(config, np.identity(3), np.identity(3), [ResidualLayer(w1, w2, b)], bias)
        m = np.array([0.5, -1.0, 2.0])
        pre = 0.3 * 0.5 + (-0.2) * (-1.0) + 0.5 * 2.0 + 0.1
        expected = m + np.tanh(pre) * np.array([1.0, -2.0, 0.5]) + bias
        np.testing.assert_allclose(net.evaluate(m), expected, rtol=0, atol=1e-14)

    def test_input_length_checked(self):
        net = dipnet_service.build_net(DipNetConfig(breadth=3, depth=1, layer_rank=1), make_bases(), seed=0)
        with pytest.raises(ValueError, match="does not match network input dimension"):
            net.evaluate(np.zeros(5))

    def test_encoder_null_space_invariance(self):
        bases = make_bases()
        net = randomize(dipnet_service.build_net(DipNetConfig(breadth=3, depth=2, layer_rank=2), bases, seed=0), 3)
        m = derive_rng(4).standard_normal(6)
        q = derive_rng(5).standard_normal(6)
        q -= bases.V @ (bases.V.T @ q)
        np.testing.assert_allclose(net.evaluate(m + q), net.evaluate(m), atol=1e-13)

    def test_appended_layer_is_neutral(self):
        net = randomize(dipnet_service.build_net(DipNetConfig(breadth=3, depth=2, layer_rank=2), make_bases(), seed=0), 6)
        ms = derive_rng(7).standard_normal((10, 6))
        before = net.evaluate_batch(ms)
        net.append_layer(derive_rng(8))
        assert net.depth == 3
        np.testing.assert_array_equal(net.evaluate_batch(ms), before)

    def test_restriction_layer_when_ranks_differ(self):
        bases = make_bases(r_M=4, r_F=2)
        net = dipnet_service.build_net(DipNetConfig(breadth=3, depth=1, layer_rank=1), bases, seed=0)
        assert net.restriction.shape == (2, 3)
        assert net.evaluate(np.ones(6)).shape == (4,)

    def test_breadth_above_input_rank(self):
        with pytest.raises(ValueError, match="exceeds the input basis rank"):
            dipnet_service.build_net(DipNetConfig(breadth=5, depth=1, layer_rank=1), make_bases(), seed=0)


class TestGradientCheck:
    @pytest.mark.parametrize("trial", range(20))
    def test_backprop_matches_finite_differences(self, trial):
        activation = Activation.TANH if trial % 2 == 0 else Activation.SOFTPLUS
        r_F = 3 if trial % 3 else 2
        config = DipNetConfig(breadth=3, depth=1 + trial % 3, layer_rank=1 + trial % 2, activation=activation)
        net = randomize(dipnet_service.build_net(config, make_bases(r_F=r_F, seed=trial), seed=trial), 100 + trial)
        rng = derive_rng(200 + trial)
        ms = rng.standard_normal((3, 6))
        ys = rng.standard_normal((3, 4))
        error = dipnet_service.gradient_check(net, ms, unit(net.parameter_vector().size, 300 + trial), ys)
        assert error < 1e-5

    def test_linear_path_closed_form(self):
        bases = make_bases()
        net = dipnet_service.build_net(DipNetConfig(breadth=3, depth=1, layer_rank=1), bases, seed=0)
        net.output_bias[...] = [0.1, 0.2, -0.1, 0.0]
        m = derive_rng(9).standard_normal(6)
        y = derive_rng(10).standard_normal(4)
        _, grads = net.loss_and_gradient(m[None, :], y[None, :])
        residual = bases.Phi @ bases.V.T @ m + net.output_bias - y
        np.testing.assert_allclose(grads["output_bias"], 2.0 * residual, atol=1e-10)
        np.testing.assert_allclose(grads["layer0.w1"], 0.0, atol=1e-10)
        np.testing.assert_allclose(grads["layer0.b"], 0.0, atol=1e-10)

    def test_saturated_activations(self):
        net = randomize(dipnet_service.build_net(DipNetConfig(breadth=3, depth=2, layer_rank=2), make_bases(), seed=1), 11)
        ms = 50.0 * derive_rng(12).standard_normal((2, 6))
        error = dipnet_service.gradient_check(net, ms, unit(net.parameter_vector().size, 13))
        assert error < 1e-5

    def test_direction_must_be_unit(self):
        net = dipnet_service.build_net(DipNetConfig(breadth=3, depth=1, layer_rank=1), make_bases(), seed=0)
        with pytest.raises(ValueError, match="unit norm"):
            dipnet_service.gradient_check(net, np.zeros(6), np.ones(net.parameter_vector().size))


class TestTraining:
    def test_zero_target(self):
        bases = make_bases()
        null = np.identity(6) - bases.V @ bases.V.T
        inputs = derive_rng(14).standard_normal((50, 6)) @ null
        dataset = make_dataset(inputs, np.zeros((50, 4)))
        net = dipnet_service.build_net(DipNetConfig(breadth=3, depth=2, layer_rank=1), bases, seed=0)
        report = dipnet_service.train(net, dataset, TrainConfig(epochs=20, batch=8), seed=0)
        np.testing.assert_allclose(net.output_bias, 0.0, atol=1e-8)
        assert report.best_val_loss < 1e-8

    def test_realizable_linear_target(self):
        bases = make_bases()
        inputs = derive_rng(15).standard_normal((200, 6))
        outputs = inputs @ (bases.Phi @ bases.V.T).T
        dataset = make_dataset(inputs, outputs, seed=1)
        net = dipnet_service.build_net(DipNetConfig(breadth=3, depth=2, layer_rank=1), bases, seed=1)
        dipnet_service.train(net, dataset, TrainConfig(epochs=300, batch=32, patience=300), seed=1)
        val = dataset.validation
        predicted = net.evaluate_batch(inputs[val])
        relative = np.linalg.norm(predicted - outputs[val]) / np.linalg.norm(outputs[val])
        assert relative < 0.01

    def test_same_seed_same_weights(self):
        bases = make_bases()
        inputs = derive_rng(16).standard_normal((60, 6))
        outputs = np.tanh(inputs[:, :4])
        dataset = make_dataset(inputs, outputs)
        config = DipNetConfig(breadth=3, depth=2, layer_rank=1)
        vectors = []
        for _ in range(2):
            net = dipnet_service.build_net(config, bases, seed=3)
            dipnet_service.train(net, dataset, TrainConfig(epochs=15, batch=8), seed=3)
            vectors.append(net.parameter_vector())
        np.testing.assert_array_equal(vectors[0], vectors[1])

    def test_best_validation_never_exceeds_start(self):
        bases = make_bases()
        inputs = derive_rng(17).standard_normal((60, 6))
        dataset = make_dataset(inputs, np.sin(inputs[:, 2:]))
        net = dipnet_service.build_net(DipNetConfig(breadth=3, depth=1, layer_rank=1), bases, seed=0)
        report = dipnet_service.train(net, dataset, TrainConfig(epochs=10, batch=8, lr=0.5), seed=0)
        assert report.best_val_loss <= report.val_losses[0]
        assert report.best_val_loss == min(report.val_losses)

    def test_monotone_capacity(self):
        bases = make_bases()
        inputs = derive_rng(18).standard_normal((80, 6))
        dataset = make_dataset(inputs, np.tanh(inputs @ bases.V) @ bases.Phi.T)
        net = dipnet_service.build_net(DipNetConfig(breadth=3, depth=1, layer_rank=1), bases, seed=2)
        shallow = dipnet_service.train(net, dataset, TrainConfig(epochs=30, batch=16), seed=2)
        rng = derive_rng(19)
        for _ in range(3):
            net.append_layer(rng)
        deep = dipnet_service.train(net, dataset, TrainConfig(epochs=30, batch=16, init_output_bias=False), seed=2)
        assert net.depth == 4
        assert deep.best_val_loss <= shallow.best_val_loss

    def test_adaptive_growth_until_max_depth(self):
        bases = make_bases()
        inputs = derive_rng(20).standard_normal((40, 6))
        dataset = make_dataset(inputs, np.cos(inputs[:, :4]))
        config = DipNetConfig(breadth=3, depth=1, layer_rank=1, adaptive=True, max_depth=3)
        net = dipnet_service.build_net(config, bases, seed=0)
        report = dipnet_service.train(net, dataset, TrainConfig(epochs=50, batch=8, patience=1, min_improvement=1.0), seed=0)
        assert report.depth_history == [1, 2]
        assert report.epochs_run == 3

    def test_empty_training_split(self):
        inputs = np.zeros((4, 6))
        dataset = Dataset(inputs, np.zeros((4, 4)), np.array([], dtype=int), np.array([0, 1]), np.array([2, 3]))
        net = dipnet_service.build_net(DipNetConfig(breadth=3, depth=1, layer_rank=1), make_bases(), seed=0)
        with pytest.raises(ValueError, match="training split is empty"):
            dipnet_service.train(net, dataset, TrainConfig(), seed=0)


class TestDataset:
    def test_split_is_disjoint_and_complete(self):
        train, validation, test = split_indices(100, 0.2, 0.25, seed=4)
        assert (train.size, validation.size, test.size) == (60, 20, 20)
        assert np.unique(np.concatenate([train, validation, test])).size == 100

    def test_rejects_non_finite_outputs(self):
        outputs = np.zeros((3, 2))
        outputs[1, 0] = np.nan
        with pytest.raises(NumericalError):
            Dataset(np.zeros((3, 2)), outputs, np.array([0]), np.array([1]), np.array([2]))

    def test_rejects_overlapping_splits(self):
        with pytest.raises(ValueError, match="overlap"):
            Dataset(np.zeros((3, 2)), np.zeros((3, 2)), np.array([0, 1]), np.array([1]), np.array([2]))

    def test_generate_from_linear_map(self, diag321):
        prior = prior_service.build_dense_prior(0.0, np.identity(3))
        dataset = dipnet_service.generate_dataset(diag321, prior, 20, seed=5)
        np.testing.assert_allclose(dataset.outputs, dataset.inputs @ diag321.matrix.T)
        assert dataset.size == 20
        assert dataset.pde_solves == 0

    def test_generate_counts_pde_solves(self, elliptic_map):
        prior = prior_service.build_prior(elliptic_map.grid, 0.1, 1.0)
        dataset = dipnet_service.generate_dataset(elliptic_map, prior, 6, seed=0, threads=2)
        assert dataset.pde_solves == 6

    def test_dataset_round_trip(self, tmp_path, diag321):
        prior = prior_service.build_dense_prior(0.0, np.identity(3))
        dataset = dipnet_service.generate_dataset(diag321, prior, 10, seed=5)
        dipnet_service.save_dataset(dataset, tmp_path / "dataset")
        loaded = dipnet_service.load_dataset(tmp_path / "dataset")
        np.testing.assert_array_equal(loaded.inputs, dataset.inputs)
        np.testing.assert_array_equal(loaded.test, dataset.test)


class TestL2Accuracy:
    def test_exact_net_scores_100(self):
        bases = make_bases()
        net = dipnet_service.build_net(DipNetConfig(breadth=3, depth=1, layer_rank=1), bases, seed=0)
        model = LinearMap(bases.Phi @ bases.V.T)
        inputs = derive_rng(21).standard_normal((10, 6))
        assert dipnet_service.l2_accuracy(net, model, inputs) == pytest.approx(100.0)

    def test_zero_prediction_scores_0(self):
        reference = derive_rng(22).standard_normal((5, 3))
        assert l2_accuracy_from_outputs(np.zeros_like(reference), reference) == pytest.approx(0.0)

    def test_scaled_prediction_scores_90(self):
        reference = derive_rng(23).standard_normal((5, 3))
        assert l2_accuracy_from_outputs(0.9 * reference, reference) == pytest.approx(90.0)

    def test_zero_reference_is_undefined(self):
        with pytest.raises(ValueError, match="undefined"):
            l2_accuracy_from_outputs(np.ones((2, 2)), np.zeros((2, 2)))


class TestPersistence:
    @pytest.mark.parametrize("r_F", [3, 2])
    def test_round_trip_is_bitwise(self, tmp_path, r_F):
        config = DipNetConfig(breadth=3, depth=2, layer_rank=2, activation=Activation.SOFTPLUS)
        net = randomize(dipnet_service.build_net(config, make_bases(r_F=r_F), seed=0), 24)
        dipnet_service.save(net, tmp_path / "net")
        loaded = dipnet_service.load(tmp_path / "net")
        np.testing.assert_array_equal(loaded.parameter_vector(), net.parameter_vector())
        m = derive_rng(25).standard_normal(6)
        np.testing.assert_array_equal(loaded.evaluate(m), net.evaluate(m))

    def test_truncated_payload_names_block(self, tmp_path):
        net = dipnet_service.build_net(DipNetConfig(breadth=3, depth=1, layer_rank=1), make_bases(), seed=0)
        _, payload = dipnet_service.save(net, tmp_path / "net")
        payload.write_bytes(payload.read_bytes()[:-8])
        with pytest.raises(ArtifactError, match="output_bias"):
            dipnet_service.load(tmp_path / "net")

    def test_header_shape_conflict(self, tmp_path):
        net = dipnet_service.build_net(DipNetConfig(breadth=3, depth=1, layer_rank=1), make_bases(), seed=0)
        header, _ = dipnet_service.save(net, tmp_path / "net")
        header.write_text(header.read_text().replace('"n": 6', '"n": 5'))
        with pytest.raises(ArtifactError, match="header implies"):
            dipnet_service.load(tmp_path / "net")


@pytest.mark.slow
class TestAdrDeskTraining:
    def test_desk_split_sizes(self, adr_desk):
        assert (adr_desk.model.n, adr_desk.model.d) == (256, 25)
        assert adr_desk.dataset.train.size == 400
        assert adr_desk.dataset.test.size == 128

    def test_held_out_accuracy_best_of_three(self, adr_desk):
        inputs, outputs = adr_desk.held_out()
        breadth = adr_desk.config.network.breadth
        accuracies = [
            l2_accuracy_from_outputs(adr_desk.net(breadth, seed).evaluate_batch(inputs), outputs)
            for seed in range(3)
        ]
        assert max(accuracies) >= 85.0
