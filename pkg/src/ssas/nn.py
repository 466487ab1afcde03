"""Trainable layers and the momentum-SGD optimizer.

Layers hold plain float64 arrays (``Parameter``) and build their forward
graphs on whatever tape the incoming tensor lives on. Train/eval mode is a
layer attribute; eval-mode forwards are pure functions of (parameters, input).
"""

from __future__ import annotations

from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class NnError(Exception):
    pass


class Parameter:
    """Named, mutable float64 array updated in place by the optimizer."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(np.asarray(value, dtype=np.float64))

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


class LinearLayer:
    """Affine map x -> x @ weight.T + bias with weight [out, in]."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray, name: str = "linear"):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise NnError(f"{name}: weight {weight.shape} and bias {bias.shape} inconsistent")
        self.weight = Parameter(f"{name}.weight", weight)
        self.bias = Parameter(f"{name}.bias", bias)

    @property
    def in_features(self) -> int:
        return self.weight.value.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.value.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


def linear_forward(layer: LinearLayer, x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != layer.in_features:
        raise ag.ShapeMismatchError(
            f"linear: input {x.shape} incompatible with weight "
            f"{layer.weight.value.shape}"
        )
    tape = x.tape
    w = tape.param_leaf(layer.weight)
    b = tape.param_leaf(layer.bias)
    return ag.add_bias(ag.matmul(x, ag.transpose(w)), b)


class BatchNormLayer:
    """Feature-wise normalization with running statistics.

    Train mode normalizes with the biased batch mean/variance and updates the
    running stats as ``running <- (1 - momentum) * running + momentum * batch``;
    eval mode uses the running statistics only.
    """

    def __init__(self, num_features: int, momentum: float = 0.1, epsilon: float = 1e-5,
                 name: str = "bn"):
        if not (0.0 < momentum < 1.0):
            raise NnError(f"{name}: momentum must be in (0, 1), got {momentum}")
        if epsilon <= 0:
            raise NnError(f"{name}: epsilon must be positive")
        self.gamma = Parameter(f"{name}.gamma", np.ones(num_features))
        self.beta = Parameter(f"{name}.beta", np.zeros(num_features))
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.momentum = momentum
        self.epsilon = epsilon
        self.mode = "train"

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]


def batchnorm_forward(layer: BatchNormLayer, x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != layer.gamma.value.shape[0]:
        raise ag.ShapeMismatchError(
            f"batchnorm: input {x.shape} incompatible with {layer.gamma.value.shape[0]} features"
        )
    tape = x.tape
    if layer.mode == "train":
        if x.shape[0] < 2:
            raise NnError("batchnorm: train-mode batch of size 1 is degenerate")
        batch_mean = x.data.mean(axis=0)
        batch_var = x.data.var(axis=0)
        out = ag.batchnorm_train(
            x, tape.param_leaf(layer.gamma), tape.param_leaf(layer.beta),
            eps=layer.epsilon,
        )
        m = layer.momentum
        layer.running_mean = (1.0 - m) * layer.running_mean + m * batch_mean
        layer.running_var = (1.0 - m) * layer.running_var + m * batch_var
        return out
    # Eval: affine transform with constants folded from the running stats.
    inv_std = 1.0 / np.sqrt(layer.running_var + layer.epsilon)
    col_scale = layer.gamma.value * inv_std
    shift = layer.beta.value - layer.running_mean * col_scale
    return ag.add_bias(ag.mul_rowvec(x, tape.leaf(col_scale)), tape.leaf(shift))


class GaussianNoiseLayer:
    """Adds zero-mean Gaussian noise of variance ``v`` during training only.

    The draw is a constant with respect to differentiation, so the gradient
    passes through unchanged. Eval mode is the identity.
    """

    def __init__(self, variance: float, rng: np.random.Generator):
        if variance < 0:
            raise NnError(f"noise variance must be nonnegative, got {variance}")
        self.variance = float(variance)
        self.rng = rng
        self.mode = "train"


def gaussian_noise_forward(layer: GaussianNoiseLayer, z: Tensor) -> Tensor:
    if layer.mode != "train" or layer.variance == 0.0:
        return z
    delta = layer.rng.normal(0.0, np.sqrt(layer.variance), size=z.shape)
    return ag.add(z, z.tape.leaf(delta))


class SlrHead:
    """Softmax classifier on a radius-r sphere.

    ``omega`` holds one unit-norm direction per class; class scores are
    ``omega_k . z + b_k`` turned into probabilities by a row softmax. The
    unit-norm constraint is re-imposed after every optimizer step by
    :func:`renormalize_slr_weights`.
    """

    SPHERE_TOL = 1e-6

    def __init__(self, omega: np.ndarray, bias: np.ndarray, radius: float = 1.0,
                 name: str = "slr"):
        omega = np.asarray(omega, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if omega.ndim != 2 or bias.shape != (omega.shape[0],):
            raise NnError(f"{name}: omega {omega.shape} and bias {bias.shape} inconsistent")
        if radius <= 0:
            raise NnError(f"{name}: sphere radius must be positive, got {radius}")
        self.omega = Parameter(f"{name}.omega", omega)
        self.bias = Parameter(f"{name}.bias", bias)
        self.radius = float(radius)
        renormalize_slr_weights(self)

    @property
    def num_classes(self) -> int:
        return self.omega.value.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.omega, self.bias]

    def predict(self, z_values: np.ndarray) -> np.ndarray:
        """Probability matrix from raw feature values (no tape, no gradient)."""
        z_values = np.asarray(z_values, dtype=np.float64)
        _check_on_sphere(z_values, self.radius)
        logits = z_values @ self.omega.value.T + self.bias.value
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)


def _check_on_sphere(z_values: np.ndarray, radius: float):
    norms = np.linalg.norm(z_values, axis=1)
    worst = np.abs(norms - radius).max(initial=0.0)
    if worst > SlrHead.SPHERE_TOL:
        raise NnError(
            f"slr: input rows must lie on the radius-{radius} sphere "
            f"(worst norm deviation {worst:.3e})"
        )


def slr_forward(head: SlrHead, z: Tensor) -> Tensor:
    _check_on_sphere(z.data, head.radius)
    tape = z.tape
    omega = tape.param_leaf(head.omega)
    b = tape.param_leaf(head.bias)
    return ag.row_softmax(ag.add_bias(ag.matmul(z, ag.transpose(omega)), b))


def sphere_project(z: Tensor, radius: float) -> Tensor:
    """Rescale every row of z to Euclidean norm ``radius``."""
    return ag.sphere_project(z, radius)


def renormalize_slr_weights(head: SlrHead) -> SlrHead:
    """Divide each class direction by its norm (projected-gradient step)."""
    norms = np.linalg.norm(head.omega.value, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise NnError(f"slr: zero row {int(zero[0])} in omega cannot be normalized")
    head.omega.value /= norms[:, None]
    return head


class SgdOptimizer:
    """SGD with classic momentum and coupled weight decay.

    Update rule per parameter:
        v <- momentum * v + grad + weight_decay * param
        param <- param - lr * v
    Velocity buffers start at zero and persist across steps.
    """

    def __init__(self, learning_rate: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._velocity: dict[int, np.ndarray] = {}


def sgd_step(opt: SgdOptimizer, params: Sequence[Parameter],
             grads: Mapping[Parameter, np.ndarray] | Iterable[np.ndarray]) -> None:
    """Apply one update to every parameter; aborts on non-finite gradients."""
    if isinstance(grads, Mapping):
        pairs = [(p, grads[p]) for p in params]
    else:
        pairs = list(zip(params, grads))
        if len(pairs) != len(params):
            raise NnError("sgd: gradients not aligned with parameters")
    for p, g in pairs:
        if g.shape != p.value.shape:
            raise NnError(f"sgd: gradient shape {g.shape} does not match {p!r}")
        if not np.all(np.isfinite(g)):
            raise NnError(f"sgd: non-finite gradient for {p.name}; step aborted")
    for p, g in pairs:
        v = opt._velocity.get(id(p))
        if v is None:
            v = np.zeros_like(p.value)
            opt._velocity[id(p)] = v
        v *= opt.momentum
        v += g + opt.weight_decay * p.value
        p.value -= opt.learning_rate * v
