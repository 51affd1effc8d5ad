"""Probabilistic dynamics models and ensembles.

Each ensemble member is an MLP mapping a normalized (state, action) pair
to a diagonal Gaussian over the next-state change (residual
parameterization: predicted mean = state + delta). Multi-step prediction
feeds the mean back recursively. Members train on a negative
log-likelihood in normalized-delta space; an ensemble shares one
normalizer fitted from the replayed data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .nets import (
    AdamState,
    MlpGrads,
    MlpParams,
    ShapeError,
    adam_step,
    add_grads,
    forward_cached,
    init_adam,
    init_mlp,
    mlp_backward,
    zeros_like_grads,
)

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 4.0
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray


@dataclass
class Trajectory:
    """A (context, actions, future) window: C past states, H actions, H future states."""

    context: np.ndarray  # (C, S)
    actions: np.ndarray  # (H, A)
    future: np.ndarray   # (H, S)

    def __post_init__(self) -> None:
        self.context = np.atleast_2d(np.asarray(self.context, dtype=np.float64))
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=np.float64))
        self.future = np.atleast_2d(np.asarray(self.future, dtype=np.float64))
        if self.context.shape[1] != self.future.shape[1]:
            raise ShapeError(
                f"context state dim {self.context.shape[1]} != future state dim {self.future.shape[1]}"
            )
        if self.actions.shape[0] != self.future.shape[0]:
            raise ShapeError(
                f"{self.actions.shape[0]} actions but {self.future.shape[0]} future states"
            )


@dataclass
class TrajectoryBatch:
    """Stacked trajectories: context (N,C,S), actions (N,H,A), future (N,H,S)."""

    context: np.ndarray
    actions: np.ndarray
    future: np.ndarray

    def __len__(self) -> int:
        return self.context.shape[0]

    def select(self, idx: np.ndarray) -> "TrajectoryBatch":
        return TrajectoryBatch(self.context[idx], self.actions[idx], self.future[idx])

    @staticmethod
    def stack(trajectories: list[Trajectory]) -> "TrajectoryBatch":
        return TrajectoryBatch(
            np.stack([t.context for t in trajectories]),
            np.stack([t.actions for t in trajectories]),
            np.stack([t.future for t in trajectories]),
        )


@dataclass
class GaussianPrediction:
    """Per-step predicted mean and diagonal log-variance over the horizon."""

    means: np.ndarray          # (H, S)
    log_variances: np.ndarray  # (H, S)


@dataclass
class Normalizer:
    """Per-dimension mean/std of states, actions and next-state deltas."""

    s_mean: np.ndarray
    s_std: np.ndarray
    a_mean: np.ndarray
    a_std: np.ndarray
    d_mean: np.ndarray
    d_std: np.ndarray

    STD_FLOOR = 1e-6

    @staticmethod
    def identity(state_dim: int, action_dim: int) -> "Normalizer":
        return Normalizer(
            np.zeros(state_dim), np.ones(state_dim),
            np.zeros(action_dim), np.ones(action_dim),
            np.zeros(state_dim), np.ones(state_dim),
        )

    def fit(self, states: np.ndarray, actions: np.ndarray, deltas: np.ndarray) -> None:
        floor = self.STD_FLOOR
        self.s_mean = states.mean(axis=0)
        self.s_std = np.maximum(states.std(axis=0), floor)
        self.a_mean = actions.mean(axis=0)
        self.a_std = np.maximum(actions.std(axis=0), floor)
        self.d_mean = deltas.mean(axis=0)
        self.d_std = np.maximum(deltas.std(axis=0), floor)

    def fit_batch(self, batch: TrajectoryBatch) -> None:
        states, actions, deltas = _one_step_rows(batch)
        self.fit(states, actions, deltas)

    def norm_input(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return np.concatenate(
            [(states - self.s_mean) / self.s_std, (actions - self.a_mean) / self.a_std],
            axis=-1,
        )


def _one_step_rows(batch: TrajectoryBatch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flatten trajectory windows into one-step (state, action, delta) rows."""
    prev = np.concatenate([batch.context[:, -1:, :], batch.future[:, :-1, :]], axis=1)
    s_dim = batch.future.shape[2]
    a_dim = batch.actions.shape[2]
    states = prev.reshape(-1, s_dim)
    actions = batch.actions.reshape(-1, a_dim)
    deltas = batch.future.reshape(-1, s_dim) - states
    return states, actions, deltas


@dataclass
class DynamicsMember:
    """One probabilistic predictor: net maps norm(state, action) -> (delta mean, log var)."""

    net: MlpParams
    opt: AdamState
    normalizer: Normalizer  # shared across the ensemble
    index: int = 0

    @property
    def state_dim(self) -> int:
        return self.net.out_dim // 2


@dataclass
class DynamicsEnsemble:
    members: list[DynamicsMember]
    normalizer: Normalizer

    @property
    def size(self) -> int:
        return len(self.members)


def make_ensemble(
    state_dim: int,
    action_dim: int,
    size: int,
    seed: int,
    hidden: tuple[int, ...] = (64, 64),
    activation: str = "tanh",
    learning_rate: float = 1e-4,
    stream_name: str = "init/dynamics",
) -> DynamicsEnsemble:
    if size < 1:
        raise ValueError(f"ensemble size must be >= 1, got {size}")
    normalizer = Normalizer.identity(state_dim, action_dim)
    layer_sizes = [state_dim + action_dim, *hidden, 2 * state_dim]
    members = []
    for k in range(size):
        net = init_mlp(layer_sizes, activation, rngmod.substream(seed, stream_name, k))
        members.append(DynamicsMember(net, init_adam(net, learning_rate), normalizer, index=k))
    return DynamicsEnsemble(members, normalizer)


def predict_one_step(
    member: DynamicsMember, state: np.ndarray, action: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One-step Gaussian over the next state: (mean, log-variance), env units."""
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    n = member.normalizer
    if state.shape[-1] != n.s_mean.shape[0]:
        raise ShapeError(f"state dim {state.shape[-1]} != model state dim {n.s_mean.shape[0]}")
    if action.shape[-1] != n.a_mean.shape[0]:
        raise ShapeError(f"action dim {action.shape[-1]} != model action dim {n.a_mean.shape[0]}")
    out = forward_cached(member.net, n.norm_input(state, action))[-1]
    s = member.state_dim
    delta_norm = out[..., :s]
    lv = np.clip(out[..., s:], LOG_VAR_MIN, LOG_VAR_MAX)
    mean = state + n.d_mean + n.d_std * delta_norm
    log_var = np.clip(lv + 2.0 * np.log(n.d_std), LOG_VAR_MIN, LOG_VAR_MAX)
    return mean, log_var


def rollout(member: DynamicsMember, context: np.ndarray, actions: np.ndarray) -> GaussianPrediction:
    """Open-loop multi-step prediction, feeding each mean back as the next state."""
    context = np.atleast_2d(np.asarray(context, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    horizon = actions.shape[0]
    if horizon < 1:
        raise ShapeError("rollout needs at least one action")
    means, log_vars = rollout_batch(member, context[-1][None, :], actions[None, :, :])
    return GaussianPrediction(means[0], log_vars[0])


def rollout_batch(
    member: DynamicsMember, start_states: np.ndarray, actions: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized rollout: start_states (B,S), actions (B,H,A) -> means/log-vars (B,H,S)."""
    b, horizon = actions.shape[0], actions.shape[1]
    s_dim = start_states.shape[1]
    means = np.empty((b, horizon, s_dim))
    log_vars = np.empty((b, horizon, s_dim))
    state = start_states
    for t in range(horizon):
        state, log_vars[:, t] = predict_one_step(member, state, actions[:, t])
        means[:, t] = state
    return means, log_vars


@dataclass
class RolloutTape:
    """Forward-pass record needed to backpropagate through a mean-feedback rollout."""

    acts: list[list[np.ndarray]]      # per step: layer activations of the member net
    lv_raw_mask: list[np.ndarray]     # per step: 1 where the raw log-var clamp is inactive
    lv_env_mask: list[np.ndarray]     # per step: 1 where the env-space clamp is inactive
    means: np.ndarray                 # (B, H, S)
    log_vars: np.ndarray              # (B, H, S)


def rollout_batch_taped(
    member: DynamicsMember, start_states: np.ndarray, actions: np.ndarray
) -> RolloutTape:
    """Like :func:`rollout_batch` but records everything backprop needs."""
    n = member.normalizer
    b, horizon = actions.shape[0], actions.shape[1]
    s = member.state_dim
    means = np.empty((b, horizon, s))
    log_vars = np.empty((b, horizon, s))
    acts_tape: list[list[np.ndarray]] = []
    raw_masks: list[np.ndarray] = []
    env_masks: list[np.ndarray] = []
    state = start_states
    for t in range(horizon):
        x = n.norm_input(state, actions[:, t])
        acts = forward_cached(member.net, x)
        out = acts[-1]
        lv_raw = out[:, s:]
        lv = np.clip(lv_raw, LOG_VAR_MIN, LOG_VAR_MAX)
        lv_env_pre = lv + 2.0 * np.log(n.d_std)
        mean = state + n.d_mean + n.d_std * out[:, :s]
        means[:, t] = mean
        log_vars[:, t] = np.clip(lv_env_pre, LOG_VAR_MIN, LOG_VAR_MAX)
        acts_tape.append(acts)
        raw_masks.append(((lv_raw > LOG_VAR_MIN) & (lv_raw < LOG_VAR_MAX)).astype(np.float64))
        env_masks.append(((lv_env_pre > LOG_VAR_MIN) & (lv_env_pre < LOG_VAR_MAX)).astype(np.float64))
        state = mean
    return RolloutTape(acts_tape, raw_masks, env_masks, means, log_vars)


def rollout_backward(
    member: DynamicsMember,
    tape: RolloutTape,
    mean_grads: np.ndarray,
    log_var_grads: np.ndarray | None = None,
) -> MlpGrads:
    """Backpropagate loss gradients on rollout means (and optionally log-vars)
    through the recursive mean feedback into the member parameters."""
    n = member.normalizer
    b, horizon, s = tape.means.shape
    grads = zeros_like_grads(member.net)
    carry = np.zeros((b, s))
    for t in range(horizon - 1, -1, -1):
        g_mean = mean_grads[:, t] + carry
        d_out = np.empty((b, 2 * s))
        d_out[:, :s] = g_mean * n.d_std
        if log_var_grads is None:
            d_out[:, s:] = 0.0
        else:
            d_out[:, s:] = log_var_grads[:, t] * tape.lv_env_mask[t] * tape.lv_raw_mask[t]
        acts = tape.acts[t]
        step_grads = mlp_backward(member.net, acts[0], d_out, acts=acts)
        add_grads(grads, step_grads)
        carry = g_mean + step_grads.input[:, :s] / n.s_std
    grads.input = carry  # gradient wrt the rollout start state
    return grads


def nll_loss(prediction: GaussianPrediction, target: np.ndarray) -> float:
    """Mean Gaussian negative log density, entry-wise over the horizon."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != prediction.means.shape:
        raise ShapeError(f"target shape {target.shape} != prediction shape {prediction.means.shape}")
    lv = prediction.log_variances
    resid = target - prediction.means
    return float(np.mean(0.5 * (LOG_2PI + lv + resid * resid * np.exp(-lv))))


def _nll_forward_backward(
    member: DynamicsMember, states: np.ndarray, actions: np.ndarray, deltas: np.ndarray
) -> tuple[float, MlpGrads]:
    """Teacher-forced NLL (normalized-delta space) and its parameter gradients."""
    n = member.normalizer
    s = member.state_dim
    x = n.norm_input(states, actions)
    acts = forward_cached(member.net, x)
    out = acts[-1]
    m = out[:, :s]
    lv_raw = out[:, s:]
    lv = np.clip(lv_raw, LOG_VAR_MIN, LOG_VAR_MAX)
    y = (deltas - n.d_mean) / n.d_std
    inv_var = np.exp(-lv)
    resid = m - y
    loss = float(np.mean(0.5 * (LOG_2PI + lv + resid * resid * inv_var)))
    cnt = m.size
    d_out = np.empty_like(out)
    d_out[:, :s] = resid * inv_var / cnt
    mask = (lv_raw > LOG_VAR_MIN) & (lv_raw < LOG_VAR_MAX)
    d_out[:, s:] = 0.5 * (1.0 - resid * resid * inv_var) / cnt * mask
    return loss, mlp_backward(member.net, x, d_out, acts=acts)


def nll_training_step(member: DynamicsMember, batch: TrajectoryBatch) -> float:
    """One Adam step on the teacher-forced NLL over a batch of windows."""
    states, actions, deltas = _one_step_rows(batch)
    loss, grads = _nll_forward_backward(member, states, actions, deltas)
    adam_step(member.net, grads, member.opt)
    return loss


def train_ensemble(
    ensemble: DynamicsEnsemble,
    buffer: TrajectoryBatch | list[Trajectory],
    epochs: int,
    batch_size: int,
    seed: int,
) -> list[list[float]]:
    """NLL-train every member on its own bootstrap resample of the buffer.

    Returns the per-member loss history (one entry per batch step). The
    shared normalizer is refitted from the buffer before training.
    """
    data = TrajectoryBatch.stack(buffer) if isinstance(buffer, list) else buffer
    if len(data) == 0:
        raise ValueError("empty buffer")
    ensemble.normalizer.fit_batch(data)
    histories: list[list[float]] = [[] for _ in ensemble.members]
    n = len(data)
    streams = [rngmod.substream(seed, "bootstrap", m.index) for m in ensemble.members]
    for _ in range(epochs):
        for start in range(0, n, batch_size):
            size = min(batch_size, n - start)
            for member, st in zip(ensemble.members, streams):
                idx = st.integers(0, n, size=size)
                histories[member.index].append(nll_training_step(member, data.select(idx)))
    return histories


def ensemble_predict(
    ensemble: DynamicsEnsemble, context: np.ndarray, actions: np.ndarray
) -> list[GaussianPrediction]:
    """Per-member rollouts, ordered by member index."""
    return [rollout(m, context, actions) for m in ensemble.members]


def one_step_l2(
    member: DynamicsMember, states: np.ndarray, actions: np.ndarray, next_states: np.ndarray
) -> float:
    """Mean L2-norm error of one-step mean predictions over a transition set."""
    means, _ = predict_one_step(member, states, actions)
    return float(np.mean(np.linalg.norm(means - next_states, axis=-1)))
