"""Fully connected networks with exact reverse-mode gradients.

This module is the small numerical engine behind every actor, critic and
dynamics network. Models are immutable values: ``adam_step`` and
``polyak_update`` return new models and never touch their inputs. All
arithmetic is float64.

The checkpoint byte layout written by ``save_mlp`` is documented in
``docs/checkpoint_format.md``.
"""

import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np


class NetworkError(Exception):
    """Base exception for network construction and training."""
    pass


class ShapeMismatchError(NetworkError):
    """Raised when array shapes do not chain with a model's layer sizes."""
    pass


class NumericalError(NetworkError):
    """Raised when NaN or Inf shows up in inputs, parameters, losses or gradients."""
    pass


class OutputActivation:
    """Enumeration of output activations."""
    IDENTITY = "identity"
    SQUASH = "squash"  # tanh scaled to a box

    @classmethod
    def is_valid(cls, name: str) -> bool:
        """Check if an output activation is valid."""
        return name in {cls.IDENTITY, cls.SQUASH}


# tanh is clipped here so squashed outputs stay strictly inside the box.
_SQUASH_LIMIT = 1.0 - 1e-12

_CHECKPOINT_MAGIC = b'MHERMLP1'
_ACTIVATION_CODES = {OutputActivation.IDENTITY: 0, OutputActivation.SQUASH: 1}


def _as_tuple(arrays: Sequence[np.ndarray]) -> Tuple[np.ndarray, ...]:
    return tuple(np.asarray(a, dtype=np.float64) for a in arrays)


@dataclass(frozen=True, eq=False)
class MlpModel:
    """Parameters of one fully connected network.

    Hidden layers use the rectifier; the output is either the identity or a
    tanh squash scaled to ``[output_low, output_high]``. ``weights[i]`` has
    shape ``(layer_sizes[i], layer_sizes[i + 1])``.
    """

    layer_sizes: Tuple[int, ...]
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    output_activation: str = OutputActivation.IDENTITY
    output_low: Optional[np.ndarray] = None
    output_high: Optional[np.ndarray] = None

    def __post_init__(self):
        sizes = self.layer_sizes
        if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
            raise ShapeMismatchError(f"Invalid layer sizes: {list(sizes)}")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ShapeMismatchError("Number of parameter arrays does not match layer sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise ShapeMismatchError(
                    f"Layer {i} parameters have shapes {w.shape} and {b.shape}, "
                    f"expected ({sizes[i]}, {sizes[i + 1]}) and ({sizes[i + 1]},)"
                )
        if not OutputActivation.is_valid(self.output_activation):
            raise NetworkError(f"Unknown output activation: {self.output_activation}")
        if self.output_activation == OutputActivation.SQUASH:
            if self.output_low is None or self.output_high is None:
                raise NetworkError("Squashed output needs output_low and output_high")
            if self.output_low.shape != (sizes[-1],) or self.output_high.shape != (sizes[-1],):
                raise ShapeMismatchError("Output box does not match the output width")
            if np.any(self.output_high <= self.output_low):
                raise NetworkError("Output box must have high > low in every dimension")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def output_center(self) -> np.ndarray:
        """Center of the output box (zeros for identity outputs)."""
        if self.output_activation != OutputActivation.SQUASH:
            return np.zeros(self.output_dim)
        return (self.output_high + self.output_low) / 2.0

    @property
    def output_half_range(self) -> np.ndarray:
        """Half-width of the output box (ones for identity outputs)."""
        if self.output_activation != OutputActivation.SQUASH:
            return np.ones(self.output_dim)
        return (self.output_high - self.output_low) / 2.0

    def parameters(self) -> Tuple[np.ndarray, ...]:
        """Parameters in canonical order: W0, b0, W1, b1, ..."""
        return tuple(p for pair in zip(self.weights, self.biases) for p in pair)

    def with_parameters(self, parameters: Sequence[np.ndarray]) -> 'MlpModel':
        """Return a model with the same structure and new parameters."""
        parameters = list(parameters)
        return MlpModel(
            layer_sizes=self.layer_sizes,
            weights=_as_tuple(parameters[0::2]),
            biases=_as_tuple(parameters[1::2]),
            output_activation=self.output_activation,
            output_low=self.output_low,
            output_high=self.output_high,
        )

    def copy(self) -> 'MlpModel':
        """Deep copy of the parameters."""
        return self.with_parameters([p.copy() for p in self.parameters()])


@dataclass(frozen=True, eq=False)
class GradientBundle:
    """Partial derivatives of a scalar loss, shaped like an MlpModel's parameters."""

    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]

    @classmethod
    def zeros_like(cls, model: MlpModel) -> 'GradientBundle':
        return cls(
            weights=tuple(np.zeros_like(w) for w in model.weights),
            biases=tuple(np.zeros_like(b) for b in model.biases),
        )

    def parameters(self) -> Tuple[np.ndarray, ...]:
        """Gradients in the model's canonical parameter order."""
        return tuple(p for pair in zip(self.weights, self.biases) for p in pair)

    def __add__(self, other: 'GradientBundle') -> 'GradientBundle':
        return GradientBundle(
            weights=tuple(a + b for a, b in zip(self.weights, other.weights)),
            biases=tuple(a + b for a, b in zip(self.biases, other.biases)),
        )

    def scaled(self, factor: float) -> 'GradientBundle':
        return GradientBundle(
            weights=tuple(w * factor for w in self.weights),
            biases=tuple(b * factor for b in self.biases),
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.parameters())

    def matches(self, model: MlpModel) -> bool:
        """Whether every gradient array has its parameter's shape."""
        params = model.parameters()
        grads = self.parameters()
        return len(params) == len(grads) and all(
            p.shape == g.shape for p, g in zip(params, grads)
        )


@dataclass(frozen=True, eq=False)
class AdamState:
    """Adam moment accumulators for one model."""

    first_moment: Tuple[np.ndarray, ...]
    second_moment: Tuple[np.ndarray, ...]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_model(
        cls,
        model: MlpModel,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8
    ) -> 'AdamState':
        """Zero-initialized state shaped like the model's parameters."""
        zeros = tuple(np.zeros_like(p) for p in model.parameters())
        return cls(
            first_moment=zeros,
            second_moment=tuple(z.copy() for z in zeros),
            step=0,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def init_mlp(
    layer_sizes: Sequence[int],
    output_activation: str = OutputActivation.IDENTITY,
    rng: Optional[np.random.Generator] = None,
    output_low: Optional[Sequence[float]] = None,
    output_high: Optional[Sequence[float]] = None
) -> MlpModel:
    """Create a network with fan-in scaled uniform weights and zero biases.

    Weights of layer i are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    layer by layer, from ``rng``.

    Args:
        layer_sizes: Input width, hidden widths..., output width
        output_activation: ``OutputActivation.IDENTITY`` or ``OutputActivation.SQUASH``
        rng: Random generator; the same seed gives bit-identical parameters
        output_low: Lower corner of the output box (squash only)
        output_high: Upper corner of the output box (squash only)

    Returns:
        New model

    Raises:
        ShapeMismatchError: If there are fewer than two sizes or any is not positive
    """
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or any(s <= 0 for s in sizes):
        raise ShapeMismatchError(
            f"layer_sizes needs an input and an output layer of positive width, got {list(layer_sizes)}"
        )
    rng = rng if rng is not None else np.random.default_rng()

    weights = []
    biases = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))

    low = high = None
    if output_activation == OutputActivation.SQUASH:
        if output_low is None or output_high is None:
            raise NetworkError("Squashed output needs output_low and output_high")
        low = np.asarray(output_low, dtype=np.float64).reshape(sizes[-1])
        high = np.asarray(output_high, dtype=np.float64).reshape(sizes[-1])

    return MlpModel(
        layer_sizes=sizes,
        weights=tuple(weights),
        biases=tuple(biases),
        output_activation=output_activation,
        output_low=low,
        output_high=high,
    )


class ForwardCache(NamedTuple):
    """Intermediate values of a forward pass needed by ``backprop``."""

    layer_inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    squashed: Optional[np.ndarray]


def _as_batch(model: MlpModel, input_batch: np.ndarray) -> np.ndarray:
    x = np.asarray(input_batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeMismatchError(
            f"Input of shape {np.shape(input_batch)} does not match input width {model.input_dim}"
        )
    return x


def forward_with_cache(model: MlpModel, input_batch: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """Run the network on a 2-D batch and keep what ``backprop`` needs."""
    x = _as_batch(model, input_batch)
    layer_inputs = []
    pre_activations = []
    last = len(model.weights) - 1
    activation = x
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        layer_inputs.append(activation)
        z = activation @ w + b
        pre_activations.append(z)
        activation = np.maximum(z, 0.0) if i < last else z

    squashed = None
    output = activation
    if model.output_activation == OutputActivation.SQUASH:
        squashed = np.clip(np.tanh(activation), -_SQUASH_LIMIT, _SQUASH_LIMIT)
        output = model.output_center + model.output_half_range * squashed
    return output, ForwardCache(layer_inputs, pre_activations, squashed)


def forward(model: MlpModel, input_batch: np.ndarray) -> np.ndarray:
    """Evaluate the network.

    Args:
        model: Network
        input_batch: Array of shape (N, input_dim), or a single row of shape (input_dim,)

    Returns:
        Outputs of shape (N, output_dim), or (output_dim,) for a single row

    Raises:
        ShapeMismatchError: If the input width does not match
    """
    output, _ = forward_with_cache(model, input_batch)
    if np.ndim(input_batch) == 1:
        return output[0]
    return output


def backprop(
    model: MlpModel,
    cache: ForwardCache,
    d_output: np.ndarray
) -> Tuple[GradientBundle, np.ndarray]:
    """Propagate dLoss/dOutput back through the network.

    Args:
        model: Network the cache was produced with
        cache: Result of ``forward_with_cache``
        d_output: Gradient of the loss with respect to the outputs, shape (N, output_dim)

    Returns:
        Parameter gradients and the gradient with respect to the inputs
    """
    d_z = np.asarray(d_output, dtype=np.float64)
    if cache.squashed is not None:
        d_z = d_z * model.output_half_range * (1.0 - cache.squashed ** 2)

    n_layers = len(model.weights)
    d_weights: List[np.ndarray] = [None] * n_layers
    d_biases: List[np.ndarray] = [None] * n_layers
    d_input = None
    for i in reversed(range(n_layers)):
        d_weights[i] = cache.layer_inputs[i].T @ d_z
        d_biases[i] = d_z.sum(axis=0)
        d_input = d_z @ model.weights[i].T
        if i > 0:
            d_z = d_input * (cache.pre_activations[i - 1] > 0.0)
    return GradientBundle(tuple(d_weights), tuple(d_biases)), d_input


class LossDefinition(ABC):
    """A scalar loss of one network's parameters over a batch.

    Subclasses compute the loss value and its exact gradient with respect to
    the network being trained; any other network a loss chains through is
    held fixed.
    """

    @abstractmethod
    def value_and_gradient(self, model: MlpModel, batch) -> Tuple[float, GradientBundle]:
        """Return the mean loss over the batch and its gradient."""

    def value(self, model: MlpModel, batch) -> float:
        """Return the loss value only."""
        return self.value_and_gradient(model, batch)[0]

    def arrays(self, batch) -> Sequence[np.ndarray]:
        """Arrays of the batch that must be finite."""
        return [a for a in batch if isinstance(a, np.ndarray) and a.dtype.kind == 'f']

    def constant_models(self) -> Sequence[MlpModel]:
        """Other networks the loss evaluates but does not differentiate."""
        return ()


class RegressionBatch(NamedTuple):
    """Inputs, regression targets and an optional row mask."""

    inputs: np.ndarray
    targets: np.ndarray
    mask: Optional[np.ndarray] = None


class MeanSquaredError(LossDefinition):
    """Mean over (masked) rows of the squared Euclidean norm ``||target - f(input)||^2``.

    With a mask the mean runs over the rows where the mask is true; with no
    true rows the loss is 0 and so is its gradient.
    """

    def value_and_gradient(self, model: MlpModel, batch: RegressionBatch) -> Tuple[float, GradientBundle]:
        inputs, targets, mask = batch
        output, cache = forward_with_cache(model, inputs)
        targets = np.asarray(targets, dtype=np.float64).reshape(output.shape)
        weights = _row_weights(mask, output.shape[0])
        count = weights.sum()
        if count == 0:
            return 0.0, GradientBundle.zeros_like(model)
        residual = output - targets
        loss = float(np.sum(weights * np.sum(residual ** 2, axis=1)) / count)
        d_output = (2.0 / count) * residual * weights[:, None]
        grads, _ = backprop(model, cache, d_output)
        return loss, grads


def _row_weights(mask: Optional[np.ndarray], n_rows: int) -> np.ndarray:
    if mask is None:
        return np.ones(n_rows)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.shape[0] != n_rows:
        raise ShapeMismatchError(f"Mask of length {mask.shape[0]} for {n_rows} rows")
    return mask.astype(np.float64)


def _check_finite(arrays: Sequence[np.ndarray], what: str) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"Non-finite values in {what}")


def backward(model: MlpModel, loss_definition: LossDefinition, batch) -> Tuple[float, GradientBundle]:
    """Compute a loss and its exact gradient with respect to ``model``.

    Args:
        model: Network being differentiated
        loss_definition: Loss to evaluate
        batch: Batch in the form the loss expects

    Returns:
        Tuple of (loss value, gradients)

    Raises:
        ShapeMismatchError: If the batch is empty
        NumericalError: If inputs, parameters, the loss or the gradients are not finite
    """
    arrays = loss_definition.arrays(batch)
    if not arrays or np.shape(arrays[0])[0] == 0:
        raise ShapeMismatchError("Cannot differentiate a loss over an empty batch")
    _check_finite(model.parameters(), "model parameters")
    for other in loss_definition.constant_models():
        _check_finite(other.parameters(), "fixed network parameters")
    _check_finite(arrays, "batch")

    loss, grads = loss_definition.value_and_gradient(model, batch)
    if not np.isfinite(loss):
        raise NumericalError(f"Loss is not finite: {loss}")
    if not grads.is_finite():
        raise NumericalError("Gradient is not finite")
    return float(loss), grads


def adam_step(
    model: MlpModel,
    grads: GradientBundle,
    adam_state: AdamState,
    learning_rate: float
) -> Tuple[MlpModel, AdamState]:
    """Apply one bias-corrected Adam update.

    Args:
        model: Current parameters
        grads: Gradients shaped like the parameters
        adam_state: Current moment accumulators
        learning_rate: Step size, must be positive

    Returns:
        Tuple of (updated model, updated state)

    Raises:
        ShapeMismatchError: If the gradients do not match the model
        NetworkError: If the learning rate is not positive
    """
    if not learning_rate > 0:
        raise NetworkError(f"learning_rate must be positive, got {learning_rate}")
    if not grads.matches(model) or len(adam_state.first_moment) != len(model.parameters()):
        raise ShapeMismatchError("Gradients or optimizer state do not match the model")

    step = adam_state.step + 1
    beta1, beta2, eps = adam_state.beta1, adam_state.beta2, adam_state.epsilon
    bias1 = 1.0 - beta1 ** step
    bias2 = 1.0 - beta2 ** step

    new_params = []
    new_m = []
    new_v = []
    for p, g, m, v in zip(model.parameters(), grads.parameters(),
                          adam_state.first_moment, adam_state.second_moment):
        if m.shape != p.shape:
            raise ShapeMismatchError("Optimizer state does not match the model")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        new_params.append(p - learning_rate * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)

    new_state = AdamState(
        first_moment=tuple(new_m),
        second_moment=tuple(new_v),
        step=step,
        beta1=beta1,
        beta2=beta2,
        epsilon=eps,
    )
    return model.with_parameters(new_params), new_state


def polyak_update(target_model: MlpModel, online_model: MlpModel, coefficient: float) -> MlpModel:
    """Mix target parameters toward the online ones.

    Every parameter becomes ``coefficient * target + (1 - coefficient) * online``.

    Raises:
        NetworkError: If the coefficient is outside [0, 1]
        ShapeMismatchError: If the two models are not congruent
    """
    if not 0.0 <= coefficient <= 1.0:
        raise NetworkError(f"Polyak coefficient must be in [0, 1], got {coefficient}")
    if target_model.layer_sizes != online_model.layer_sizes:
        raise ShapeMismatchError(
            f"Target {target_model.layer_sizes} and online {online_model.layer_sizes} differ"
        )
    return target_model.with_parameters([
        coefficient * t + (1.0 - coefficient) * o
        for t, o in zip(target_model.parameters(), online_model.parameters())
    ])


def grad_check(
    model: MlpModel,
    loss_definition: LossDefinition,
    batch,
    h: float = 1e-5,
    gradients: Optional[GradientBundle] = None
) -> float:
    """Compare analytic gradients with central finite differences.

    The relative error of one entry is ``|a - n| / max(|a| + |n|, 1e-6)``.

    Args:
        model: Network
        loss_definition: Loss to check
        batch: Batch for the loss
        h: Finite-difference step, must be positive
        gradients: Gradients to check; ``backward`` output when omitted

    Returns:
        Largest relative error over all parameters
    """
    if not h > 0:
        raise NetworkError(f"Finite-difference step must be positive, got {h}")
    if gradients is None:
        _, gradients = backward(model, loss_definition, batch)

    params = [p.copy() for p in model.parameters()]
    worst = 0.0
    for k, analytic in enumerate(gradients.parameters()):
        flat = params[k].reshape(-1)
        analytic = analytic.reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + h
            loss_plus = loss_definition.value(model.with_parameters(params), batch)
            flat[j] = original - h
            loss_minus = loss_definition.value(model.with_parameters(params), batch)
            flat[j] = original
            numeric = (loss_plus - loss_minus) / (2.0 * h)
            error = abs(analytic[j] - numeric) / max(abs(analytic[j]) + abs(numeric), 1e-6)
            worst = max(worst, error)
    return worst


def save_mlp(model: MlpModel, path: Union[str, Path]) -> None:
    """Write a model checkpoint (layout in docs/checkpoint_format.md)."""
    sizes = model.layer_sizes
    with open(path, 'wb') as f:
        f.write(_CHECKPOINT_MAGIC)
        f.write(struct.pack('<I', len(sizes)))
        f.write(struct.pack(f'<{len(sizes)}I', *sizes))
        f.write(struct.pack('<I', _ACTIVATION_CODES[model.output_activation]))
        for p in model.parameters():
            f.write(np.ascontiguousarray(p, dtype='<f8').tobytes())
        if model.output_activation == OutputActivation.SQUASH:
            f.write(np.ascontiguousarray(model.output_low, dtype='<f8').tobytes())
            f.write(np.ascontiguousarray(model.output_high, dtype='<f8').tobytes())


def load_mlp(path: Union[str, Path]) -> MlpModel:
    """Read a model checkpoint written by ``save_mlp``.

    Raises:
        NetworkError: If the file is not a valid checkpoint
    """
    data = Path(path).read_bytes()
    if not data.startswith(_CHECKPOINT_MAGIC):
        raise NetworkError(f"Not a model checkpoint: {path}")
    offset = len(_CHECKPOINT_MAGIC)
    try:
        (count,) = struct.unpack_from('<I', data, offset)
        offset += 4
        sizes = struct.unpack_from(f'<{count}I', data, offset)
        offset += 4 * count
        (code,) = struct.unpack_from('<I', data, offset)
        offset += 4
    except struct.error as e:
        raise NetworkError(f"Truncated checkpoint header: {e}")
    activations = {v: k for k, v in _ACTIVATION_CODES.items()}
    if code not in activations:
        raise NetworkError(f"Unknown activation code {code} in {path}")

    def take(shape: Tuple[int, ...]) -> np.ndarray:
        nonlocal offset
        n = int(np.prod(shape))
        end = offset + 8 * n
        if end > len(data):
            raise NetworkError(f"Truncated checkpoint: {path}")
        array = np.frombuffer(data[offset:end], dtype='<f8').astype(np.float64).reshape(shape)
        offset = end
        return array

    weights = []
    biases = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(take((fan_in, fan_out)))
        biases.append(take((fan_out,)))
    low = high = None
    if activations[code] == OutputActivation.SQUASH:
        low = take((sizes[-1],))
        high = take((sizes[-1],))
    if offset != len(data):
        raise NetworkError(f"Trailing bytes in checkpoint: {path}")
    return MlpModel(tuple(sizes), tuple(weights), tuple(biases), activations[code], low, high)
