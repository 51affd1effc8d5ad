"""Trajectory-realism discriminator and joint adversarial training.

The discriminator is a binary classifier over flattened (context,
actions, future) triples: recorded trajectories are labelled real,
model rollouts fake. The model side trains on an L1 + GAN objective
whose gradients flow through the rollout means and through the frozen
discriminator back into the dynamics member.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .dynamics import (
    DynamicsEnsemble,
    DynamicsMember,
    Normalizer,
    TrajectoryBatch,
    nll_training_step,
    rollout_backward,
    rollout_batch,
    rollout_batch_taped,
)
from .nets import (
    MlpGrads,
    MlpParams,
    ShapeError,
    adam_step,
    forward_cached,
    init_adam,
    init_mlp,
    mlp_backward,
    pack_params,
    unpack_params,
)

LOGIT_CLAMP = 30.0


@dataclass
class Discriminator:
    net: MlpParams  # flatten(context, actions, future) -> 1 logit
    opt: "object"
    context_len: int
    horizon: int
    state_dim: int
    action_dim: int
    training_threshold: float = 0.75

    @property
    def input_width(self) -> int:
        return self.context_len * self.state_dim + self.horizon * (self.action_dim + self.state_dim)


@dataclass
class AdversarialWeights:
    gan_weight: float = 0.001
    l1_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.gan_weight < 0 or self.l1_weight < 0:
            raise ValueError("loss weights must be non-negative")


def make_discriminator(
    state_dim: int,
    action_dim: int,
    context_len: int,
    horizon: int,
    seed: int,
    hidden: tuple[int, ...] = (64, 64),
    learning_rate: float = 1e-4,
    training_threshold: float = 0.75,
    stream_name: str = "init/disc",
) -> Discriminator:
    width = context_len * state_dim + horizon * (action_dim + state_dim)
    net = init_mlp([width, *hidden, 1], "leaky_relu", rngmod.stream(seed, stream_name))
    return Discriminator(
        net, init_adam(net, learning_rate), context_len, horizon, state_dim, action_dim,
        training_threshold=training_threshold,
    )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


def flatten_trajectories(context: np.ndarray, actions: np.ndarray, future: np.ndarray) -> np.ndarray:
    """(B,C,S), (B,H,A), (B,H,S) -> (B, C*S + H*A + H*S) discriminator input."""
    b = context.shape[0]
    return np.concatenate(
        [context.reshape(b, -1), actions.reshape(b, -1), future.reshape(b, -1)], axis=1
    )


def _disc_logits(disc: Discriminator, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    """Returns (clamped logits, clamp-pass-through mask, forward activations)."""
    if x.shape[-1] != disc.input_width:
        raise ShapeError(f"trajectory width {x.shape[-1]} != discriminator input {disc.input_width}")
    acts = forward_cached(disc.net, x)
    raw = acts[-1][..., 0]
    mask = (np.abs(raw) < LOGIT_CLAMP).astype(np.float64)
    return np.clip(raw, -LOGIT_CLAMP, LOGIT_CLAMP), mask, acts


def disc_score(disc: Discriminator, context: np.ndarray, actions: np.ndarray, future: np.ndarray) -> float:
    """Realism score in (0,1) for one (context, actions, future) triple."""
    x = flatten_trajectories(
        np.asarray(context, dtype=np.float64)[None],
        np.asarray(actions, dtype=np.float64)[None],
        np.asarray(future, dtype=np.float64)[None],
    )
    logits, _, _ = _disc_logits(disc, x)
    return float(_sigmoid(logits)[0])


def disc_score_batch(disc: Discriminator, context, actions, future) -> np.ndarray:
    logits, _, _ = _disc_logits(disc, flatten_trajectories(context, actions, future))
    return _sigmoid(logits)


@dataclass
class DiscStepResult:
    loss: float
    accuracy: float
    skipped: bool


def disc_train_step(
    disc: Discriminator, real: TrajectoryBatch, fake: TrajectoryBatch
) -> DiscStepResult:
    """One binary-cross-entropy step (real=1, fake=0).

    Skipped (parameters untouched) when the pre-step batch accuracy already
    exceeds the training threshold; loss and accuracy are reported either way.
    """
    if len(real) == 0 or len(fake) == 0:
        raise ValueError("empty discriminator batch")
    if len(real) != len(fake):
        raise ValueError(f"real batch size {len(real)} != fake batch size {len(fake)}")
    x_real = flatten_trajectories(real.context, real.actions, real.future)
    x_fake = flatten_trajectories(fake.context, fake.actions, fake.future)
    z_r, mask_r, acts_r = _disc_logits(disc, x_real)
    z_f, mask_f, acts_f = _disc_logits(disc, x_fake)
    s_r = _sigmoid(z_r)
    s_f = _sigmoid(z_f)
    n = len(real)
    accuracy = (float(np.sum(s_r > 0.5)) + float(np.sum(s_f < 0.5))) / (2 * n)
    loss = float((np.sum(_softplus(-z_r)) + np.sum(_softplus(z_f))) / (2 * n))
    if accuracy > disc.training_threshold:
        return DiscStepResult(loss, accuracy, skipped=True)
    dz_r = (s_r - 1.0) / (2 * n) * mask_r
    dz_f = s_f / (2 * n) * mask_f
    g_r = mlp_backward(disc.net, x_real, dz_r[:, None], acts=acts_r)
    g_f = mlp_backward(disc.net, x_fake, dz_f[:, None], acts=acts_f)
    for i in range(len(g_r.weights)):
        g_r.weights[i] += g_f.weights[i]
        g_r.biases[i] += g_f.biases[i]
    adam_step(disc.net, g_r, disc.opt)
    return DiscStepResult(loss, accuracy, skipped=False)


@dataclass
class AdvLossResult:
    loss: float
    l1_term: float
    gan_term: float
    grads: MlpGrads


def model_adv_loss(
    disc: Discriminator,
    member: DynamicsMember,
    batch: TrajectoryBatch,
    weights: AdversarialWeights,
) -> AdvLossResult:
    """Combined loss l1_weight*mean|h - rollout| + gan_weight*mean log(1 - D(c,a,rollout)).

    Gradients flow through the rollout means and through the (frozen)
    discriminator into the member parameters only.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    tape = rollout_batch_taped(member, batch.context[:, -1], batch.actions)
    pred = tape.means
    b = len(batch)
    cnt = pred.size

    resid = pred - batch.future
    l1_term = float(np.mean(np.abs(resid)))
    mean_grads = weights.l1_weight * np.sign(resid) / cnt

    x = flatten_trajectories(batch.context, batch.actions, pred)
    z, mask, acts = _disc_logits(disc, x)
    gan_term = float(np.mean(-_softplus(z)))  # mean log(1 - D)
    if weights.gan_weight != 0.0:
        dz = -_sigmoid(z) / b * mask * weights.gan_weight
        disc_grads = mlp_backward(disc.net, x, dz[:, None], acts=acts)
        fut_offset = disc.context_len * disc.state_dim + disc.horizon * disc.action_dim
        mean_grads = mean_grads + disc_grads.input[:, fut_offset:].reshape(pred.shape)

    grads = rollout_backward(member, tape, mean_grads)
    loss = weights.l1_weight * l1_term + weights.gan_weight * gan_term
    return AdvLossResult(loss, l1_term, gan_term, grads)


def model_adv_training_step(
    disc: Discriminator,
    member: DynamicsMember,
    batch: TrajectoryBatch,
    weights: AdversarialWeights,
) -> AdvLossResult:
    result = model_adv_loss(disc, member, batch, weights)
    adam_step(member.net, result.grads, member.opt)
    return result


@dataclass
class JointHistory:
    model_nll: list[float] = field(default_factory=list)
    model_combined: list[float] = field(default_factory=list)
    disc_loss: list[float] = field(default_factory=list)
    disc_accuracy: list[float] = field(default_factory=list)
    disc_skipped: list[bool] = field(default_factory=list)


def joint_train(
    ensemble: DynamicsEnsemble,
    disc: Discriminator,
    buffer: TrajectoryBatch | list,
    epochs: int,
    batch_size: int,
    weights: AdversarialWeights,
    seed: int,
    adversarial_model: bool = True,
) -> JointHistory:
    """Alternating schedule, per batch: (1) every member takes an NLL step on
    its own bootstrap resample, (2) the round-robin member takes a combined
    L1+GAN step (skipped when `adversarial_model` is false), (3) one
    discriminator step against that member's rollouts, subject to the
    accuracy threshold."""
    data = TrajectoryBatch.stack(buffer) if isinstance(buffer, list) else buffer
    n = len(data)
    if n == 0:
        raise ValueError("empty buffer")
    ensemble.normalizer.fit_batch(data)
    eff = min(batch_size, n)
    shuffle = rngmod.stream(seed, "joint/shuffle")
    boot = [rngmod.substream(seed, "joint/bootstrap", m.index) for m in ensemble.members]
    history = JointHistory()
    step = 0
    for _ in range(epochs):
        order = shuffle.permutation(n)
        for start in range(0, n - eff + 1, eff):
            batch = data.select(order[start : start + eff])
            nlls = []
            for member, st in zip(ensemble.members, boot):
                idx = st.integers(0, n, size=eff)
                nlls.append(nll_training_step(member, data.select(idx)))
            history.model_nll.append(float(np.mean(nlls)))

            member = ensemble.members[step % ensemble.size]
            if adversarial_model:
                adv = model_adv_training_step(disc, member, batch, weights)
                history.model_combined.append(adv.loss)
            else:
                history.model_combined.append(float("nan"))

            means, _ = rollout_batch(member, batch.context[:, -1], batch.actions)
            fake = TrajectoryBatch(batch.context, batch.actions, means)
            disc_result = disc_train_step(disc, batch, fake)
            history.disc_loss.append(disc_result.loss)
            history.disc_accuracy.append(disc_result.accuracy)
            history.disc_skipped.append(disc_result.skipped)
            step += 1
    return history


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_FORMAT = "v1"


def _net_entry(name: str, net: MlpParams, step: int) -> dict:
    return {
        "file": f"{name}.bin",
        "layer_sizes": list(net.layer_sizes),
        "activation": net.activation,
        "adam_step": step,
    }


def save_checkpoint(
    directory: str | Path,
    ensemble: DynamicsEnsemble,
    disc: Discriminator | None,
    seed: int | None = None,
    extra: dict | None = None,
) -> Path:
    """JSON manifest plus one little-endian float64 parameter blob per network."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    networks: dict[str, dict] = {}
    blobs: dict[str, MlpParams] = {}
    for m in ensemble.members:
        name = f"member{m.index}"
        networks[name] = _net_entry(name, m.net, m.opt.step)
        blobs[name] = m.net
    if disc is not None:
        networks["discriminator"] = _net_entry("discriminator", disc.net, disc.opt.step)
        networks["discriminator"].update(
            context_len=disc.context_len,
            horizon=disc.horizon,
            training_threshold=disc.training_threshold,
        )
        blobs["discriminator"] = disc.net
    norm = ensemble.normalizer
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "seed": seed,
        "state_dim": norm.s_mean.shape[0],
        "action_dim": norm.a_mean.shape[0],
        "networks": networks,
        "normalizer": {
            k: getattr(norm, k).tolist()
            for k in ("s_mean", "s_std", "a_mean", "a_std", "d_mean", "d_std")
        },
        "extra": extra or {},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for name, net in blobs.items():
        (directory / f"{name}.bin").write_bytes(pack_params(net).astype("<f8").tobytes())
    return directory / "manifest.json"


def load_checkpoint(directory: str | Path) -> tuple[DynamicsEnsemble, Discriminator | None, dict]:
    """Rebuild the ensemble and discriminator saved by :func:`save_checkpoint`.

    Adam moment accumulators restart from zero; step counts come from the
    manifest."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest["format"] != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest['format']!r}")
    norm_d = manifest["normalizer"]
    normalizer = Normalizer(**{k: np.asarray(norm_d[k], dtype=np.float64) for k in norm_d})

    def load_net(name: str) -> tuple[MlpParams, int]:
        entry = manifest["networks"][name]
        sizes = entry["layer_sizes"]
        net = MlpParams(
            list(sizes),
            [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])],
            [np.zeros(o) for o in sizes[1:]],
            entry["activation"],
        )
        blob = (directory / entry["file"]).read_bytes()
        unpack_params(net, np.frombuffer(blob, dtype="<f8"))
        return net, entry["adam_step"]

    members = []
    k = 0
    while f"member{k}" in manifest["networks"]:
        net, step = load_net(f"member{k}")
        opt = init_adam(net)
        opt.step = step
        members.append(DynamicsMember(net, opt, normalizer, index=k))
        k += 1
    ensemble = DynamicsEnsemble(members, normalizer)

    disc = None
    if "discriminator" in manifest["networks"]:
        entry = manifest["networks"]["discriminator"]
        net, step = load_net("discriminator")
        opt = init_adam(net)
        opt.step = step
        disc = Discriminator(
            net, opt,
            context_len=entry["context_len"],
            horizon=entry["horizon"],
            state_dim=manifest["state_dim"],
            action_dim=manifest["action_dim"],
            training_threshold=entry["training_threshold"],
        )
    return ensemble, disc, manifest["extra"]
