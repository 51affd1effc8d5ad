"""Minimal feed-forward network substrate.

Plain numpy MLPs with hand-written reverse-mode gradients, a
bias-corrected Adam optimizer and a finite-difference gradient checker.
Everything above this module treats a network as a differentiable
parametric function; float64 throughout so runs are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Raised when an input does not match a network's declared shape."""


ACTIVATIONS = ("tanh", "relu", "leaky_relu", "identity")
LEAKY_SLOPE = 0.2


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "leaky_relu":
        return np.where(z > 0.0, z, LEAKY_SLOPE * z)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class MlpParams:
    """Fully-connected net: weights[i] has shape (layer_sizes[i+1], layer_sizes[i])."""

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "MlpParams":
        return MlpParams(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )


@dataclass
class MlpGrads:
    """Gradient congruent to MlpParams, plus the gradient wrt the input."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray


def init_mlp(layer_sizes: list[int], activation: str, rng: np.random.Generator) -> MlpParams:
    """Scaled-uniform fan-in (Xavier) initialization, zero biases."""
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(list(layer_sizes), weights, biases, activation)


def _check_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise ShapeError(
            f"input has {x.shape[-1]} features, network expects layer_sizes[0]={params.in_dim}"
        )
    return x


def forward_cached(params: MlpParams, x: np.ndarray) -> list[np.ndarray]:
    """Forward pass keeping every layer activation; x may be (in,) or (batch, in).

    Returns [a0, a1, ..., aL] where a0 = x and aL is the (linear) output.
    """
    x = _check_input(params, x)
    acts = [x]
    a = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        a = z if i == last else _act(params.activation, z)
        acts.append(a)
    return acts


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Network output for a single input vector (or a batch of row vectors)."""
    return forward_cached(params, x)[-1]


def mlp_backward(
    params: MlpParams,
    x: np.ndarray,
    output_grad: np.ndarray,
    acts: list[np.ndarray] | None = None,
) -> MlpGrads:
    """Reverse-mode gradient of output . output_grad wrt parameters and input.

    Works on a single vector or on a batch (gradients are summed over the
    batch for parameters; the input gradient keeps the batch dimension).
    Pass `acts` from :func:`forward_cached` to reuse a forward pass.
    """
    x = _check_input(params, x)
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape[-1] != params.out_dim:
        raise ShapeError(
            f"output_grad has {g.shape[-1]} features, network output is layer_sizes[-1]={params.out_dim}"
        )
    if x.ndim != g.ndim:
        raise ShapeError(f"input ndim {x.ndim} does not match output_grad ndim {g.ndim}")
    if acts is None:
        acts = forward_cached(params, x)

    batched = x.ndim == 2
    w_grads: list[np.ndarray] = [np.empty(0)] * len(params.weights)
    b_grads: list[np.ndarray] = [np.empty(0)] * len(params.biases)
    last = len(params.weights) - 1
    dz = g
    for i in range(last, -1, -1):
        if i != last:
            # acts[i+1] is post-activation; recover the local derivative from it
            a = acts[i + 1]
            # pre-activation sign is recoverable from the activation for our
            # monotone activations; recompute z only where needed
            if params.activation == "tanh":
                dz = dz * (1.0 - a * a)
            elif params.activation == "relu":
                dz = dz * (a > 0.0)
            elif params.activation == "leaky_relu":
                dz = dz * np.where(a > 0.0, 1.0, LEAKY_SLOPE)
            # identity: dz unchanged
        a_prev = acts[i]
        if batched:
            w_grads[i] = dz.T @ a_prev
            b_grads[i] = dz.sum(axis=0)
        else:
            w_grads[i] = np.outer(dz, a_prev)
            b_grads[i] = dz.copy()
        dz = dz @ params.weights[i]
    return MlpGrads(w_grads, b_grads, input=dz)


def zeros_like_grads(params: MlpParams) -> MlpGrads:
    return MlpGrads(
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
        input=np.zeros(params.in_dim),
    )


def add_grads(acc: MlpGrads, extra: MlpGrads, scale: float = 1.0) -> None:
    for i in range(len(acc.weights)):
        acc.weights[i] += scale * extra.weights[i]
        acc.biases[i] += scale * extra.biases[i]


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators congruent to one MlpParams."""

    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    step: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_adam(params: MlpParams, learning_rate: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    return AdamState(
        m_w=[np.zeros_like(w) for w in params.weights],
        v_w=[np.zeros_like(w) for w in params.weights],
        m_b=[np.zeros_like(b) for b in params.biases],
        v_b=[np.zeros_like(b) for b in params.biases],
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def adam_step(params: MlpParams, grads: MlpGrads, state: AdamState) -> tuple[MlpParams, AdamState]:
    """One Adam update in place. Rejects non-finite gradients, leaving params untouched."""
    for gw, gb, w, b in zip(grads.weights, grads.biases, params.weights, params.biases):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ShapeError(f"gradient shape {gw.shape} does not match parameter shape {w.shape}")
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise ValueError("non-finite gradient entries; parameters left untouched")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for i in range(len(params.weights)):
        for p, g, m, v in (
            (params.weights[i], grads.weights[i], state.m_w[i], state.v_w[i]),
            (params.biases[i], grads.biases[i], state.m_b[i], state.v_b[i]),
        ):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


def param_checksum(params: MlpParams) -> bytes:
    """Exact digest of the parameter values (for before/after comparisons)."""
    import hashlib

    h = hashlib.blake2s()
    for w, b in zip(params.weights, params.biases):
        h.update(np.ascontiguousarray(w).tobytes())
        h.update(np.ascontiguousarray(b).tobytes())
    return h.digest()


def pack_params(params: MlpParams) -> np.ndarray:
    """Flatten all parameters into one vector (weights then bias, layer by layer)."""
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def unpack_params(params: MlpParams, flat: np.ndarray) -> MlpParams:
    """Write `flat` (layout of :func:`pack_params`) into `params` in place."""
    flat = np.asarray(flat, dtype=np.float64)
    offset = 0
    for w, b in zip(params.weights, params.biases):
        w[...] = flat[offset : offset + w.size].reshape(w.shape)
        offset += w.size
        b[...] = flat[offset : offset + b.size]
        offset += b.size
    if offset != flat.size:
        raise ShapeError(f"flat vector has {flat.size} entries, parameters need {offset}")
    return params


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool
    worst_entry: str = ""
    entries_checked: int = 0


LossAndGrad = Callable[[MlpParams], tuple[float, MlpGrads]]


def gradient_check(
    fn: LossAndGrad,
    params: MlpParams,
    tolerance: float,
    fd_step: float = 1e-5,
    abs_floor: float = 1e-7,
) -> GradCheckReport:
    """Compare analytic gradients of a scalar loss against central differences.

    Entries where both gradients are below `abs_floor` in magnitude count as
    matching (finite differences cannot resolve them). Diagnostic only: never
    raises.
    """
    _, analytic = fn(params)
    max_rel = 0.0
    worst = ""
    checked = 0
    tensors = []
    for i in range(len(params.weights)):
        tensors.append((f"W{i}", params.weights[i], analytic.weights[i]))
        tensors.append((f"b{i}", params.biases[i], analytic.biases[i]))
    for name, tensor, grad in tensors:
        flat = tensor.ravel()
        gflat = grad.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + fd_step
            f_plus, _ = fn(params)
            flat[j] = orig - fd_step
            f_minus, _ = fn(params)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * fd_step)
            a = gflat[j]
            checked += 1
            err = abs(a - numeric)
            if err <= abs_floor and max(abs(a), abs(numeric)) <= abs_floor:
                continue
            rel = err / max(abs(a), abs(numeric), abs_floor)
            if rel > max_rel:
                max_rel = rel
                worst = f"{name}[{j}] analytic={a:.6g} numeric={numeric:.6g}"
    return GradCheckReport(
        max_rel_error=max_rel,
        tolerance=tolerance,
        passed=max_rel <= tolerance,
        worst_entry=worst,
        entries_checked=checked,
    )
