"""Truncated-BPTT behaviour-cloning loop with Adam and warmup resets.

One epoch draws one padded batch, runs the policy over it in windows of
``update_period`` steps, and applies an Adam update after each window.  The
carried :class:`~groqloco.model.PolicyState` is detached after every update
and, during the first ``warmup_epochs`` epochs, reset to zero as well.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .data import pad_and_batch
from .errors import EmptyWindowError, NumericalError, ShapeError, ValidationError
from .loss import DEFAULT_DELTA, masked_sequence_loss
from .model import History, ModelParams, PolicyState, forward_sequence
from .numerics import Tape, Tensor


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 400
    update_period: int = 20
    warmup_epochs: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    clip_norm: float | None = None
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if self.update_period < 1:
            raise ValidationError("update_period must be >= 1")
        if self.warmup_epochs < 0 or self.epochs < 0:
            raise ValidationError("epochs and warmup_epochs must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValidationError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValidationError("Adam needs 0 <= beta < 1 and eps > 0")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValidationError("clip_norm must be positive when given")
        if not self.delta > 0:
            raise ValidationError("delta must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainerState:
    params: ModelParams
    m: dict
    v: dict
    adam_step: int = 0
    epoch: int = 0
    policy: PolicyState | None = None
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, params, epoch=0):
        zeros = {k: np.zeros_like(a) for k, a in params.items()}
        return cls(params, zeros, {k: z.copy() for k, z in zeros.items()}, epoch=epoch)


def adam_update(params, grads, moments, cfg, step):
    """One bias-corrected Adam step.

    ``moments`` is ``(m, v)``; ``step`` is the 1-based step index.  Returns
    ``(new_params, (new_m, new_v))``; nothing is modified in place.
    """
    m, v = moments
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - cfg.beta1 ** step
    c2 = 1.0 - cfg.beta2 ** step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or m[name].shape != p.shape or v[name].shape != p.shape:
            raise ShapeError(f"{name}: gradient or moment shape differs from {p.shape}")
        new_m[name] = cfg.beta1 * m[name] + (1.0 - cfg.beta1) * g
        new_v[name] = cfg.beta2 * v[name] + (1.0 - cfg.beta2) * g * g
        new_p[name] = p - cfg.lr * (new_m[name] / c1) / (np.sqrt(new_v[name] / c2) + cfg.eps)
    return new_p, (new_m, new_v)


def clip_gradients(grads, max_norm):
    total = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or total <= max_norm:
        return grads, total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


def window_pass(param_set, state, obs, act, mask, delta=DEFAULT_DELTA):
    """Forward one window on a fresh tape; returns (loss, tape, new_state)."""
    with Tape() as tape:
        preds, new_state = forward_sequence(obs, state, param_set)
        loss = masked_sequence_loss(preds, act, mask, param_set["loss.log_sigma"], delta)
    return loss, tape, new_state


def carry(state, epoch, cfg):
    """State handed to the next window: detached, and zeroed during warmup."""
    state = state.detach()
    return state.reset() if epoch <= cfg.warmup_epochs else state


def train_epoch(trajectories, state, cfg, on_update=None, batch=None):
    """Run one epoch (one sampled batch); returns (new TrainerState, metrics dict).

    ``on_update(epoch, window, policy_state)`` is called after each update
    with the state carried into the next window.  ``batch`` replaces the
    sampled :class:`~groqloco.data.PaddedBatch` when given.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise ValidationError("training needs a non-empty dataset")
    epoch = state.epoch + 1
    arch = state.params.config
    if batch is None:
        batch = pad_and_batch(trajectories, cfg.batch_size,
                              np.random.default_rng([cfg.seed, epoch]))
    policy = state.policy
    if policy is None or policy.batch_size != cfg.batch_size:
        policy = PolicyState.initial(arch, cfg.batch_size)
    params, m, v, k = state.params, state.m, state.v, state.adam_step
    window_losses, weights, skipped = [], [], 0
    for w, start in enumerate(range(0, batch.n_max, cfg.update_period)):
        sl = slice(start, start + cfg.update_period)
        obs, act, mask = batch.obs[:, sl], batch.act[:, sl], batch.mask[:, sl]
        if not mask.any():
            _, policy = forward_sequence(obs, policy, params)
            policy = carry(policy, epoch, cfg)
            skipped += 1
            continue
        ps = params.tensors(requires_grad=True)
        loss, tape, policy = window_pass(ps, policy, obs, act, mask, cfg.delta)
        value = loss.item()
        if not math.isfinite(value):
            err = NumericalError(f"non-finite loss {value} at epoch {epoch}, window {w}")
            err.state = replace(state, params=params, m=m, v=v, adam_step=k)
            raise err
        tape.backward(loss)
        grads = {name: (ps[name].grad if ps[name].grad is not None
                        else np.zeros_like(params[name])) for name in params}
        grads, _ = clip_gradients(grads, cfg.clip_norm)
        k += 1
        new_arrays, (m, v) = adam_update(dict(params.items()), grads, (m, v), cfg, k)
        params = params.with_arrays(new_arrays)
        policy = carry(policy, epoch, cfg)
        if on_update is not None:
            on_update(epoch, w, policy)
        window_losses.append(value)
        weights.append(float(mask.sum()))
    if not window_losses:
        raise EmptyWindowError("every window of the batch was padding")
    epoch_loss = math.fsum(l * c for l, c in zip(window_losses, weights)) / math.fsum(weights)
    metrics = {
        "epoch": epoch,
        "loss": epoch_loss,
        "window_losses": window_losses,
        "log_sigma": params["loss.log_sigma"].tolist(),
        "updates": len(window_losses),
        "skipped_windows": skipped,
    }
    new_state = TrainerState(params, m, v, k, epoch, policy, state.history + [epoch_loss])
    return new_state, metrics


def train(trajectories, params, cfg, state=None, on_epoch=None):
    """Train for ``cfg.epochs`` epochs beyond ``state.epoch``."""
    state = state or TrainerState.fresh(params)
    trajectories = list(trajectories)
    for _ in range(cfg.epochs):
        state, metrics = train_epoch(trajectories, state, cfg)
        if on_epoch is not None:
            on_epoch(metrics)
    return state


# ---------------------------------------------------------------------------
# diagnostics

def _probed(state, probe):
    """``state`` with ``probe`` added to the hidden state and every history entry."""
    def hist(h):
        return History(tuple(e + probe for e in h.entries))
    return PolicyState(state.gru_hidden + probe, hist(state.obs_history),
                       hist(state.gru_history), state.step)


def _constant(state):
    def hist(h):
        return History(tuple(Tensor(e.data.copy()) for e in h.entries))
    return PolicyState(Tensor(state.gru_hidden.data.copy()), hist(state.obs_history),
                       hist(state.gru_history), state.step)


def detach_boundary_check(params, obs, act, mask, cfg, epoch=None):
    """Confirm gradients of a window do not reach state built before it.

    Runs two consecutive windows of ``update_period`` steps (``obs`` needs at
    least twice that many).  A zero-valued probe leaf is added to the state
    at the boundary, before the trainer's :func:`carry`; its gradient from
    the second window's loss must be zero.  As a negative control the same
    probe without detachment must receive a nonzero gradient.  Finally the
    second window's parameter gradients are compared with an isolated
    forward started from a constant copy of the carried state.
    """
    T = cfg.update_period
    if obs.shape[1] < 2 * T:
        raise ValidationError("need two full windows of observations")
    epoch = cfg.warmup_epochs + 1 if epoch is None else epoch
    b = obs.shape[0]
    first, second = slice(0, T), slice(T, 2 * T)

    def run(detach):
        ps = params.tensors(requires_grad=True)
        probe = Tensor(np.zeros((b, params.config.d_emb)), requires_grad=True)
        with Tape() as tape:
            _, state = forward_sequence(obs[:, first], PolicyState.initial(params.config, b), ps)
            state = _probed(state, probe)
            if detach:
                state = carry(state, epoch, cfg)
                ps = params.tensors(requires_grad=True)
            preds, _ = forward_sequence(obs[:, second], state, ps)
            loss = masked_sequence_loss(preds, act[:, second], mask[:, second],
                                        ps["loss.log_sigma"], cfg.delta)
        tape.backward(loss)
        g = probe.grad
        return (0.0 if g is None else float(np.abs(g).max())), ps, state

    probe_detached, ps_detached, carried = run(True)
    probe_control, _, _ = run(False)

    isolated = params.tensors(requires_grad=True)
    loss, tape, _ = window_pass(isolated, _constant(carried), obs[:, second], act[:, second],
                                mask[:, second], cfg.delta)
    tape.backward(loss)
    diff = max(float(np.abs(ps_detached[k].grad - isolated[k].grad).max()) for k in params)
    return {
        "probe_grad_detached": probe_detached,
        "probe_grad_without_detach": probe_control,
        "isolated_forward_max_diff": diff,
        "passed": probe_detached == 0.0 and probe_control > 0.0 and diff <= 1e-12,
    }
