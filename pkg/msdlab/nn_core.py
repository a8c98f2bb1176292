"""
Feed-forward networks with exact reverse-mode gradients.

Provides:
- Mlp: SiLU hidden layers, linear output, float64 parameters
- mlp_forward / mlp_backward with an explicit ForwardCache
- finite_diff_grad: central-difference oracle for the backward pass
- AdamW with decoupled weight decay, global-norm gradient clipping
"""

from __future__ import annotations

import hashlib
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import expit

from msdlab.errors import NumericalError, ShapeError, ValidationError


class Activation(Enum):
    """Elementwise nonlinearities available to Mlp layers."""

    SILU = "silu"
    IDENTITY = "identity"

    def apply(self, z: np.ndarray) -> np.ndarray:
        if self is Activation.SILU:
            return z * expit(z)
        return z

    def derivative(self, z: np.ndarray) -> np.ndarray:
        if self is Activation.SILU:
            s = expit(z)
            return s * (1.0 + z * (1.0 - s))
        return np.ones_like(z)


@dataclass
class Mlp:
    """Fully connected network; weights[i] has shape (layer_sizes[i+1], layer_sizes[i])."""

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: Activation = Activation.SILU
    output_activation: Activation = Activation.IDENTITY

    def __post_init__(self) -> None:
        if len(self.layer_sizes) < 2 or any(s < 1 for s in self.layer_sizes):
            raise ShapeError(f"invalid layer sizes {self.layer_sizes}")
        if len(self.weights) != self.num_layers or len(self.biases) != self.num_layers:
            raise ShapeError(
                f"expected {self.num_layers} weight/bias pairs, "
                f"got {len(self.weights)}/{len(self.biases)}"
            )
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if w.shape != expected:
                raise ShapeError(f"weight shape {w.shape}, expected {expected}", layer=i)
            if b.shape != (expected[0],):
                raise ShapeError(f"bias shape {b.shape}, expected {(expected[0],)}", layer=i)

    @classmethod
    def init(
        cls,
        layer_sizes: Sequence[int],
        rng: np.random.Generator,
        activation: Activation = Activation.SILU,
    ) -> Mlp:
        """He fan-in initialization, zero biases."""
        sizes = list(layer_sizes)
        weights = [
            rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
            for fan_in, fan_out in zip(sizes[:-1], sizes[1:])
        ]
        biases = [np.zeros(fan_out) for fan_out in sizes[1:]]
        return cls(sizes, weights, biases, activation)

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int], activation: Activation = Activation.SILU) -> Mlp:
        sizes = list(layer_sizes)
        weights = [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
        biases = [np.zeros(o) for o in sizes[1:]]
        return cls(sizes, weights, biases, activation)

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in canonical order W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> Mlp:
        return Mlp(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            self.output_activation,
        )

    def trunk(self) -> Mlp:
        """All layers but the last, ending on an activated hidden layer.

        Shares parameter arrays with self.
        """
        if self.num_layers < 2:
            raise ShapeError("network has no hidden layer to expose")
        return Mlp(
            self.layer_sizes[:-1],
            self.weights[:-1],
            self.biases[:-1],
            self.activation,
            self.activation,
        )

    def flatten(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    @classmethod
    def from_flat(
        cls,
        layer_sizes: Sequence[int],
        flat: np.ndarray,
        activation: Activation = Activation.SILU,
    ) -> Mlp:
        net = cls.zeros(layer_sizes, activation)
        if flat.shape != (net.num_params,):
            raise ShapeError(f"flat payload has {flat.size} values, expected {net.num_params}")
        offset = 0
        for p in net.parameters():
            p[...] = flat[offset : offset + p.size].reshape(p.shape)
            offset += p.size
        return net

    def checksum(self) -> str:
        """SHA256 of the parameter bytes, first 16 hex chars."""
        digest = hashlib.sha256()
        for p in self.parameters():
            digest.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return digest.hexdigest()[:16]

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.parameters())


@dataclass
class ForwardCache:
    """Per-layer pre- and post-activations of one forward pass."""

    inputs: np.ndarray
    pre_activations: list[np.ndarray] = field(default_factory=list)
    post_activations: list[np.ndarray] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.pre_activations)

    @property
    def output(self) -> np.ndarray:
        return self.post_activations[-1]


@dataclass
class Gradients:
    """Parameter-shaped gradients plus the gradient with respect to the input batch."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_grad: np.ndarray | None = None

    @classmethod
    def zeros_like(cls, net: Mlp) -> Gradients:
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def global_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(a * a) for a in self.arrays())))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def scaled(self, factor: float) -> Gradients:
        return Gradients(
            [w * factor for w in self.weights],
            [b * factor for b in self.biases],
            None if self.input_grad is None else self.input_grad * factor,
        )

    def plus(self, other: Gradients, weight: float = 1.0) -> Gradients:
        """self + weight * other; input gradients are dropped."""
        if len(other.weights) != len(self.weights):
            raise ShapeError("gradient depth mismatch")
        return Gradients(
            [a + weight * b for a, b in zip(self.weights, other.weights)],
            [a + weight * b for a, b in zip(self.biases, other.biases)],
        )

    def check_congruent(self, net: Mlp) -> None:
        for i, (g, w) in enumerate(zip(self.weights, net.weights)):
            if g.shape != w.shape:
                raise ShapeError(f"gradient shape {g.shape} vs weight {w.shape}", layer=i)
        for i, (g, b) in enumerate(zip(self.biases, net.biases)):
            if g.shape != b.shape:
                raise ShapeError(f"gradient shape {g.shape} vs bias {b.shape}", layer=i)
        if len(self.weights) != net.num_layers:
            raise ShapeError("gradient depth does not match network")


def mlp_forward(net: Mlp, inputs: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate the network on a (batch, input_dim) array."""
    if inputs.ndim != 2 or inputs.shape[1] != net.input_dim:
        raise ShapeError(f"input shape {inputs.shape}, expected (batch, {net.input_dim})", layer=0)
    cache = ForwardCache(inputs=inputs)
    h = inputs
    last = net.num_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        act = net.output_activation if i == last else net.activation
        h = act.apply(z)
        cache.pre_activations.append(z)
        cache.post_activations.append(h)
    return h, cache


def mlp_backward(net: Mlp, cache: ForwardCache, output_grad: np.ndarray) -> Gradients:
    """Exact gradients of sum(output_grad * output) for the cached pass."""
    if cache.depth != net.num_layers:
        raise ShapeError(f"cache depth {cache.depth} does not match {net.num_layers} layers")
    if output_grad.shape != cache.output.shape:
        raise ShapeError(
            f"output gradient shape {output_grad.shape}, expected {cache.output.shape}",
            layer=net.num_layers - 1,
        )
    grad_w: list[np.ndarray] = [np.empty(0)] * net.num_layers
    grad_b: list[np.ndarray] = [np.empty(0)] * net.num_layers
    g = output_grad
    last = net.num_layers - 1
    for i in range(last, -1, -1):
        act = net.output_activation if i == last else net.activation
        dz = g * act.derivative(cache.pre_activations[i])
        below = cache.inputs if i == 0 else cache.post_activations[i - 1]
        if below.shape[1] != net.weights[i].shape[1]:
            raise ShapeError("cached activations do not match the network", layer=i)
        grad_w[i] = dz.T @ below
        grad_b[i] = dz.sum(axis=0)
        g = dz @ net.weights[i]
    return Gradients(grad_w, grad_b, input_grad=g)


def finite_diff_grad(
    loss_fn: Callable[[Mlp], float], net: Mlp, step: float = 1e-5
) -> Gradients:
    """Central-difference estimate of d loss / d parameter for every parameter.

    Parameters are perturbed in place and restored bitwise.
    """
    if step <= 0:
        raise ValidationError(f"step must be positive, got {step}")
    grads = Gradients.zeros_like(net)
    for param, grad in zip(net.parameters(), grads.arrays()):
        for idx in np.ndindex(param.shape):
            original = param[idx]
            param[idx] = original + step
            plus = float(loss_fn(net))
            param[idx] = original - step
            minus = float(loss_fn(net))
            param[idx] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NumericalError(f"non-finite loss while perturbing parameter {idx}")
            grad[idx] = (plus - minus) / (2.0 * step)
    return grads


@dataclass
class AdamWState:
    """First/second moment accumulators, parameter-shaped, in Mlp.parameters() order."""

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValidationError(f"betas must lie in (0, 1), got ({self.beta1}, {self.beta2})")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be positive")
        if self.step < 0:
            raise ValidationError("step counter must be non-negative")

    @classmethod
    def for_net(
        cls, net: Mlp, betas: tuple[float, float] = (0.9, 0.999), epsilon: float = 1e-8
    ) -> AdamWState:
        params = net.parameters()
        return cls(
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params],
            0,
            betas[0],
            betas[1],
            epsilon,
        )

    def copy(self) -> AdamWState:
        return AdamWState(
            [m.copy() for m in self.first_moment],
            [v.copy() for v in self.second_moment],
            self.step,
            self.beta1,
            self.beta2,
            self.epsilon,
        )


def adamw_step(
    state: AdamWState,
    net: Mlp,
    grads: Gradients,
    lr: float,
    weight_decay: float = 0.0,
) -> tuple[AdamWState, Mlp]:
    """One AdamW update in place; returns (state, net) for chaining."""
    if lr <= 0:
        raise ValidationError(f"learning rate must be positive, got {lr}")
    if weight_decay < 0:
        raise ValidationError(f"weight decay must be non-negative, got {weight_decay}")
    grads.check_congruent(net)
    if not grads.is_finite():
        raise NumericalError("non-finite gradient passed to adamw_step", step=state.step)
    params = net.parameters()
    if len(state.first_moment) != len(params):
        raise ShapeError("optimizer state does not match network")

    state.step += 1
    bias1 = 1.0 - state.beta1**state.step
    bias2 = 1.0 - state.beta2**state.step
    decay = 1.0 - lr * weight_decay
    for p, g, m, v in zip(params, grads.arrays(), state.first_moment, state.second_moment):
        if m.shape != p.shape:
            raise ShapeError(f"moment shape {m.shape} vs parameter {p.shape}")
        if weight_decay:
            p *= decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)
    return state, net


def clip_grad_norm(grads: Gradients, max_norm: float) -> tuple[Gradients, float]:
    """Rescale so the global l2 norm is at most max_norm; returns (grads, scale applied)."""
    if max_norm <= 0:
        raise ValidationError(f"max_norm must be positive, got {max_norm}")
    norm = grads.global_norm()
    if not np.isfinite(norm):
        raise NumericalError("non-finite gradient norm")
    if norm <= max_norm:
        return grads, 1.0
    scale = max_norm / norm
    return grads.scaled(scale), scale
