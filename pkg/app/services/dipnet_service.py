import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.special import expit

from app.core.exceptions import ArtifactError, ConvergenceError, NumericalError
from app.core.random import PRIOR_STREAM, SPLIT_STREAM, TRAIN_STREAM, derive_rng
from app.db.container import read_container, require_shape, write_container
from app.models.network import Activation, DipNetConfig, TrainConfig, TrainReport
from app.services.forward_service import ObservableMap
from app.services.prior_service import GaussianPrior
from app.services.reduction_service import ReducedBases


logger = logging.getLogger(__name__)

INIT_TAG = 0
SHUFFLE_TAG = 1
GROWTH_TAG = 2


def activate(kind: Activation, a: np.ndarray) -> np.ndarray:
    if kind == Activation.SOFTPLUS:
        return np.logaddexp(0.0, a)
    return np.tanh(a)


def activate_derivative(kind: Activation, a: np.ndarray) -> np.ndarray:
    if kind == Activation.SOFTPLUS:
        return expit(a)
    return 1.0 - np.tanh(a) ** 2


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


@dataclass
class ResidualLayer:
    """z + w2 σ(w1 z + b) with w1: k×r, w2: r×k, b: k."""
    w1: np.ndarray
    w2: np.ndarray
    b: np.ndarray

    def copy(self) -> "ResidualLayer":
        return ResidualLayer(self.w1.copy(), self.w2.copy(), self.b.copy())


class DipNet:
    """Projected low-rank ResNet F̃(m) = Φ f_r(Vᵀm) + b."""

    kind = "surrogate"

    def __init__(
        self,
        config: DipNetConfig,
        V: np.ndarray,
        Phi: np.ndarray,
        layers: List[ResidualLayer],
        output_bias: np.ndarray,
        restriction: Optional[np.ndarray] = None,
        seed: Optional[int] = None,
    ):
        self.config = config
        self.V = np.asarray(V, dtype=float)
        self.Phi = np.asarray(Phi, dtype=float)
        self.layers = layers
        self.output_bias = np.asarray(output_bias, dtype=float)
        self.restriction = restriction
        self.seed = seed
        self.summary: Dict[str, float] = {}
        r = config.breadth
        if self.V.shape[1] != r:
            raise ValueError(f"input basis has {self.V.shape[1]} columns, breadth is {r}")
        if self.Phi.shape[1] != r and restriction is None:
            raise ValueError(f"output basis rank {self.Phi.shape[1]} differs from breadth {r} without a restriction layer")
        if restriction is not None and restriction.shape != (self.Phi.shape[1], r):
            raise ValueError(f"restriction has shape {restriction.shape}, expected ({self.Phi.shape[1]}, {r})")
        if self.output_bias.shape != (self.d,):
            raise ValueError(f"output bias has shape {self.output_bias.shape}, expected ({self.d},)")

    @property
    def n(self) -> int:
        return self.V.shape[0]

    @property
    def d(self) -> int:
        return self.Phi.shape[0]

    @property
    def r(self) -> int:
        return self.config.breadth

    @property
    def depth(self) -> int:
        return len(self.layers)

    def append_layer(self, rng: np.random.Generator) -> None:
        """Add an output-neutral residual layer (w2 = 0, b = 0)."""
        k = self.config.layer_rank
        self.layers.append(ResidualLayer(glorot_uniform(rng, k, self.r), np.zeros((self.r, k)), np.zeros(k)))

    def _check_inputs(self, ms: np.ndarray) -> np.ndarray:
        ms = np.asarray(ms, dtype=float)
        if ms.shape[-1] != self.n:
            raise ValueError(f"input length {ms.shape[-1]} does not match network input dimension {self.n}")
        return ms

    def _forward_cache(self, ms: np.ndarray):
        z = ms @ self.V
        cache = []
        for layer in self.layers:
            pre = z @ layer.w1.T + layer.b
            act = activate(self.config.activation, pre)
            cache.append((z, pre, act))
            z = z + act @ layer.w2.T
        coeffs = z @ self.restriction.T if self.restriction is not None else z
        return coeffs @ self.Phi.T + self.output_bias, z, cache

    def evaluate(self, m: np.ndarray) -> np.ndarray:
        m = self._check_inputs(m)
        if m.ndim != 1:
            raise ValueError("evaluate takes a single parameter vector")
        return self._forward_cache(m[None, :])[0][0]

    def evaluate_batch(self, ms: np.ndarray, threads: int = 1) -> np.ndarray:
        return self._forward_cache(np.atleast_2d(self._check_inputs(ms)))[0]

    def parameters(self) -> Dict[str, np.ndarray]:
        """Trainable arrays by name (live references)."""
        params: Dict[str, np.ndarray] = {}
        if self.restriction is not None:
            params["restriction"] = self.restriction
        for i, layer in enumerate(self.layers):
            params[f"layer{i}.w1"] = layer.w1
            params[f"layer{i}.w2"] = layer.w2
            params[f"layer{i}.b"] = layer.b
        params["output_bias"] = self.output_bias
        return params

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters().values()])

    def set_parameter_vector(self, vector: np.ndarray) -> None:
        offset = 0
        for p in self.parameters().values():
            p[...] = vector[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        if offset != vector.size:
            raise ValueError(f"parameter vector has {vector.size} entries, network has {offset}")

    def loss(self, ms: np.ndarray, ys: np.ndarray) -> float:
        """Batch mean of ‖F̃(m) − y‖²."""
        out = self.evaluate_batch(ms)
        return float(np.mean(np.sum((out - ys) ** 2, axis=1)))

    def loss_and_gradient(self, ms: np.ndarray, ys: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
        ms = np.atleast_2d(self._check_inputs(ms))
        ys = np.atleast_2d(ys)
        count = ms.shape[0]
        out, z_last, cache = self._forward_cache(ms)
        residual = out - ys
        loss = float(np.mean(np.sum(residual**2, axis=1)))

        grads: Dict[str, np.ndarray] = {}
        d_out = 2.0 * residual / count
        grads["output_bias"] = d_out.sum(axis=0)
        d_coeffs = d_out @ self.Phi
        if self.restriction is not None:
            grads["restriction"] = d_coeffs.T @ z_last
            dz = d_coeffs @ self.restriction
        else:
            dz = d_coeffs
        for i in range(self.depth - 1, -1, -1):
            layer = self.layers[i]
            z, pre, act = cache[i]
            grads[f"layer{i}.w2"] = dz.T @ act
            d_pre = (dz @ layer.w2) * activate_derivative(self.config.activation, pre)
            grads[f"layer{i}.w1"] = d_pre.T @ z
            grads[f"layer{i}.b"] = d_pre.sum(axis=0)
            dz = dz + d_pre @ layer.w1
        return loss, grads

    def snapshot(self) -> Tuple[List[ResidualLayer], np.ndarray, Optional[np.ndarray]]:
        restriction = None if self.restriction is None else self.restriction.copy()
        return [layer.copy() for layer in self.layers], self.output_bias.copy(), restriction

    def restore(self, state: Tuple[List[ResidualLayer], np.ndarray, Optional[np.ndarray]]) -> None:
        layers, bias, restriction = state
        self.layers = [layer.copy() for layer in layers]
        self.output_bias = bias.copy()
        self.restriction = None if restriction is None else restriction.copy()


class AdamOptimizer:
    """First-order adaptive moment updates keyed by parameter name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.moments: Dict[str, Tuple[np.ndarray, np.ndarray, int]] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        for name, grad in grads.items():
            first, second, t = self.moments.get(name, (np.zeros_like(grad), np.zeros_like(grad), 0))
            t += 1
            first = self.beta1 * first + (1.0 - self.beta1) * grad
            second = self.beta2 * second + (1.0 - self.beta2) * grad**2
            self.moments[name] = (first, second, t)
            corrected = first / (1.0 - self.beta1**t)
            scale = np.sqrt(second / (1.0 - self.beta2**t)) + self.eps
            params[name] -= self.lr * corrected / scale

    def reset(self) -> None:
        self.moments.clear()


@dataclass
class Dataset:
    """Prior samples with their observables and a disjoint train/validation/test split."""
    inputs: np.ndarray
    outputs: np.ndarray
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    seed: Optional[int] = None
    pde_solves: int = 0

    def __post_init__(self):
        if self.inputs.shape[0] != self.outputs.shape[0]:
            raise ValueError("inputs and outputs have different sample counts")
        if not np.all(np.isfinite(self.outputs)):
            raise NumericalError("dataset outputs contain non-finite values")
        seen = np.concatenate([self.train, self.validation, self.test]).astype(np.int64)
        if np.unique(seen).size != seen.size:
            raise ValueError("dataset splits overlap")
        if seen.size and (seen.min() < 0 or seen.max() >= self.size):
            raise ValueError("dataset split index out of range")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def n(self) -> int:
        return self.inputs.shape[1]

    @property
    def d(self) -> int:
        return self.outputs.shape[1]


def split_indices(count: int, test_fraction: float, validation_fraction: float, seed: int):
    order = derive_rng(seed, SPLIT_STREAM).permutation(count)
    n_test = int(round(test_fraction * count))
    pool = order[n_test:]
    n_val = int(round(validation_fraction * pool.size))
    return np.sort(pool[n_val:]), np.sort(pool[:n_val]), np.sort(order[:n_test])


def l2_accuracy_from_outputs(predicted: np.ndarray, reference: np.ndarray) -> float:
    """100 (1 − ‖F̃ − F‖ / ‖F‖) with norms stacked over samples."""
    norm = np.linalg.norm(reference)
    if norm == 0.0:
        raise ValueError("reference outputs are identically zero; accuracy undefined")
    return float(100.0 * (1.0 - np.linalg.norm(np.asarray(predicted) - reference) / norm))


class DipNetService:
    """Service for surrogate construction, training and persistence."""

    @staticmethod
    def build_net(config: DipNetConfig, bases: ReducedBases, seed: int, d_bias: Optional[np.ndarray] = None) -> DipNet:
        """Network over the leading `breadth` AS directions and the full POD basis."""
        r = config.breadth
        if bases.r_M < r:
            raise ValueError(f"breadth {r} exceeds the input basis rank {bases.r_M}")
        rng = derive_rng(seed, TRAIN_STREAM, INIT_TAG)
        restriction = None if bases.r_F == r else glorot_uniform(rng, bases.r_F, r)
        bias = np.zeros(bases.d) if d_bias is None else np.asarray(d_bias, dtype=float)
        net = DipNet(config, bases.V[:, :r], bases.Phi, [], bias, restriction, seed)
        for _ in range(config.depth):
            net.append_layer(rng)
        return net

    @staticmethod
    def forward(net: DipNet, m: np.ndarray) -> np.ndarray:
        return net.evaluate(m)

    @staticmethod
    def generate_dataset(
        model: ObservableMap,
        prior: GaussianPrior,
        n_samples: int,
        seed: int,
        test_fraction: float = 0.2,
        validation_fraction: float = 0.2,
        threads: int = 1,
    ) -> Dataset:
        """Prior draws, their observables and a seeded split."""
        inputs = np.array([prior.sample(derive_rng(seed, PRIOR_STREAM, i)) for i in range(n_samples)])
        before = model.solves.total
        outputs = model.evaluate_batch(inputs, threads)
        train, validation, test = split_indices(n_samples, test_fraction, validation_fraction, seed)
        dataset = Dataset(inputs, outputs, train, validation, test, seed, model.solves.total - before)
        logger.info(
            "dataset generated: %d samples (%d train, %d validation, %d test), %d PDE solves",
            n_samples, train.size, validation.size, test.size, dataset.pde_solves,
        )
        return dataset

    @staticmethod
    def train(net: DipNet, dataset: Dataset, config: TrainConfig, seed: int) -> TrainReport:
        """Adam on the training split, best-validation weights kept; optional adaptive depth growth."""
        if dataset.train.size == 0:
            raise ValueError("training split is empty")
        x_train, y_train = dataset.inputs[dataset.train], dataset.outputs[dataset.train]
        if dataset.validation.size:
            x_val, y_val = dataset.inputs[dataset.validation], dataset.outputs[dataset.validation]
        else:
            logger.warning("validation split is empty; validating on the training split")
            x_val, y_val = x_train, y_train

        if config.init_output_bias:
            net.output_bias[...] = y_train.mean(axis=0)

        shuffle = derive_rng(seed, TRAIN_STREAM, SHUFFLE_TAG)
        growth = derive_rng(seed, TRAIN_STREAM, GROWTH_TAG)
        optimizer = AdamOptimizer(config.lr)

        best_val = net.loss(x_val, y_val)
        if not np.isfinite(best_val):
            raise ConvergenceError("initial validation loss is not finite", 0)
        train_losses = [net.loss(x_train, y_train)]
        val_losses = [best_val]
        best_state, best_epoch = net.snapshot(), 0
        stalled = 0
        depth_history: List[int] = []
        epoch = 0

        for epoch in range(1, config.epochs + 1):
            order = shuffle.permutation(x_train.shape[0])
            for start in range(0, order.size, config.batch):
                batch = order[start:start + config.batch]
                _, grads = net.loss_and_gradient(x_train[batch], y_train[batch])
                optimizer.step(net.parameters(), grads)

            train_loss = net.loss(x_train, y_train)
            val_loss = net.loss(x_val, y_val)
            if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
                raise ConvergenceError("non-finite training loss", epoch)
            train_losses.append(train_loss)
            val_losses.append(val_loss)

            if val_loss < best_val * (1.0 - config.min_improvement):
                stalled = 0
            else:
                stalled += 1
            if val_loss < best_val:
                best_val, best_state, best_epoch = val_loss, net.snapshot(), epoch

            if epoch % config.log_every == 0:
                logger.info("epoch %d: train %.4e, validation %.4e, depth %d", epoch, train_loss, val_loss, net.depth)

            if stalled >= config.patience:
                if net.config.adaptive and net.depth < net.config.depth_limit:
                    net.append_layer(growth)
                    depth_history.append(epoch)
                    stalled = 0
                    logger.info("validation stalled at epoch %d; depth grown to %d", epoch, net.depth)
                else:
                    logger.info("early stop at epoch %d", epoch)
                    break

        net.restore(best_state)
        net.summary = {"best_epoch": best_epoch, "best_val_loss": best_val, "epochs_run": epoch}
        return TrainReport(
            train_losses=train_losses,
            val_losses=val_losses,
            best_epoch=best_epoch,
            best_val_loss=best_val,
            depth_history=depth_history,
            final_depth=net.depth,
            epochs_run=epoch,
            seed=seed,
        )

    @staticmethod
    def gradient_check(
        net: DipNet,
        m: np.ndarray,
        direction: np.ndarray,
        y: Optional[np.ndarray] = None,
        step: float = 1e-6,
    ) -> float:
        """Relative gap between the backpropagated directional derivative and central differences."""
        direction = np.asarray(direction, dtype=float)
        if not np.isclose(np.linalg.norm(direction), 1.0):
            raise ValueError("direction must have unit norm")
        ms = np.atleast_2d(m)
        ys = np.zeros((ms.shape[0], net.d)) if y is None else np.atleast_2d(y)

        _, grads = net.loss_and_gradient(ms, ys)
        analytic = float(np.concatenate([grads[name].ravel() for name in net.parameters()]) @ direction)

        base = net.parameter_vector()
        try:
            net.set_parameter_vector(base + step * direction)
            plus = net.loss(ms, ys)
            net.set_parameter_vector(base - step * direction)
            minus = net.loss(ms, ys)
        finally:
            net.set_parameter_vector(base)
        numeric = (plus - minus) / (2.0 * step)
        return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)

    @staticmethod
    def l2_accuracy(net: DipNet, model: ObservableMap, inputs: np.ndarray, threads: int = 1) -> float:
        inputs = np.atleast_2d(inputs)
        if inputs.shape[0] == 0:
            raise ValueError("test set is empty")
        return l2_accuracy_from_outputs(net.evaluate_batch(inputs), model.evaluate_batch(inputs, threads))

    @staticmethod
    def save(net: DipNet, base: Union[str, Path]) -> list:
        header = {
            "n": net.n,
            "d": net.d,
            "r": net.r,
            "r_F": net.Phi.shape[1],
            "depth": net.depth,
            "layer_rank": net.config.layer_rank,
            "activation": net.config.activation.value,
            "adaptive": net.config.adaptive,
            "max_depth": net.config.max_depth,
            "restriction": net.restriction is not None,
            "seed": net.seed,
            "training": net.summary,
        }
        blocks = [("V", net.V), ("Phi", net.Phi)]
        if net.restriction is not None:
            blocks.append(("restriction", net.restriction))
        for i, layer in enumerate(net.layers):
            blocks += [(f"layer{i}.w1", layer.w1), (f"layer{i}.w2", layer.w2), (f"layer{i}.b", layer.b)]
        blocks.append(("output_bias", net.output_bias))
        return write_container(base, header, blocks)

    @staticmethod
    def load(base: Union[str, Path]) -> DipNet:
        header, arrays = read_container(base)
        try:
            n, d, r, r_F, depth, k = (int(header[key]) for key in ("n", "d", "r", "r_F", "depth", "layer_rank"))
            config = DipNetConfig(
                breadth=r,
                depth=max(depth, 1),
                layer_rank=k,
                activation=Activation(header["activation"]),
                adaptive=bool(header.get("adaptive", False)),
                max_depth=header.get("max_depth"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ArtifactError(f"corrupt network header: {e}")
        restriction = require_shape(arrays, "restriction", (r_F, r)) if header.get("restriction") else None
        layers = [
            ResidualLayer(
                require_shape(arrays, f"layer{i}.w1", (k, r)),
                require_shape(arrays, f"layer{i}.w2", (r, k)),
                require_shape(arrays, f"layer{i}.b", (k,)),
            )
            for i in range(depth)
        ]
        net = DipNet(
            config,
            require_shape(arrays, "V", (n, r)),
            require_shape(arrays, "Phi", (d, r_F)),
            layers,
            require_shape(arrays, "output_bias", (d,)),
            restriction,
            header.get("seed"),
        )
        net.summary = header.get("training") or {}
        return net

    @staticmethod
    def save_dataset(dataset: Dataset, base: Union[str, Path]) -> list:
        header = {
            "n": dataset.n,
            "d": dataset.d,
            "n_samples": dataset.size,
            "seed": dataset.seed,
            "pde_solves": dataset.pde_solves,
            "train": dataset.train.tolist(),
            "validation": dataset.validation.tolist(),
            "test": dataset.test.tolist(),
        }
        return write_container(base, header, [("inputs", dataset.inputs), ("outputs", dataset.outputs)])

    @staticmethod
    def load_dataset(base: Union[str, Path]) -> Dataset:
        header, arrays = read_container(base)
        try:
            n, d, count = int(header["n"]), int(header["d"]), int(header["n_samples"])
            split = [np.asarray(header[key], dtype=np.int64) for key in ("train", "validation", "test")]
        except (KeyError, TypeError, ValueError) as e:
            raise ArtifactError(f"corrupt dataset header: {e}")
        return Dataset(
            require_shape(arrays, "inputs", (count, n)),
            require_shape(arrays, "outputs", (count, d)),
            *split,
            seed=header.get("seed"),
            pde_solves=int(header.get("pde_solves", 0)),
        )


dipnet_service = DipNetService()
