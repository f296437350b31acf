"""Recurrent attention policy: encoder, two single-query attentions, GRU, MLP head.

The same code runs under a :class:`~groqloco.numerics.Tape` for training and
without one for evaluation.  Every array carries a leading batch axis
internally; unbatched observations are accepted and the batch axis dropped
again on output.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError, ShapeError, ValidationError
from .numerics import Tensor

# (name, width) in observation order; widths are per joint count where marked.
OBS_FIELDS = ("q", "dq", "a_prev1", "a_prev2", "gravity", "omega", "v_cmd")
_PER_JOINT = {"q", "dq", "a_prev1", "a_prev2"}


def obs_layout(n_joints=12):
    """Slices of each observation field inside the flat observation vector."""
    out, start = {}, 0
    for name in OBS_FIELDS:
        width = n_joints if name in _PER_JOINT else 3
        out[name] = slice(start, start + width)
        start += width
    return out


def obs_width(n_joints=12):
    return 4 * n_joints + 9


@dataclass
class Observation:
    q: np.ndarray
    dq: np.ndarray
    a_prev1: np.ndarray
    a_prev2: np.ndarray
    gravity: np.ndarray
    omega: np.ndarray
    v_cmd: np.ndarray
    robot_enc: np.ndarray | None = None

    def flatten(self):
        parts = [np.asarray(getattr(self, name), dtype=np.float64).ravel()
                 for name in OBS_FIELDS]
        if self.robot_enc is not None:
            parts.append(np.asarray(self.robot_enc, dtype=np.float64).ravel())
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, vec, n_joints=12):
        vec = np.asarray(vec, dtype=np.float64)
        layout = obs_layout(n_joints)
        base = obs_width(n_joints)
        if vec.shape[-1] < base:
            raise DimensionError(f"observation needs at least {base} values")
        kwargs = {name: vec[..., sl].copy() for name, sl in layout.items()}
        enc = vec[..., base:].copy() if vec.shape[-1] > base else None
        return cls(robot_enc=enc, **kwargs)


@dataclass(frozen=True)
class ArchConfig:
    d_obs: int = 57
    d_act: int = 12
    d_emb: int = 64
    n_heads: int = 4
    window: int = 100
    mlp_hidden: int = 256
    mlp_depth: int = 2
    use_robot_encoding: bool = False
    d_robot_enc: int = 0
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("d_obs", "d_act", "d_emb", "n_heads", "window", "mlp_hidden"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.mlp_depth < 0:
            raise ValidationError("mlp_depth must be >= 0")
        if self.d_emb % self.n_heads:
            raise ValidationError("d_emb must be divisible by n_heads")
        if self.d_emb < 2:
            raise ValidationError("d_emb must be >= 2 for layer norm")
        if self.use_robot_encoding and self.d_robot_enc < 1:
            raise ValidationError("robot encoding enabled with zero width")
        if not self.ln_eps > 0:
            raise ValidationError("ln_eps must be positive")

    @property
    def d_in(self):
        return self.d_obs + (self.d_robot_enc if self.use_robot_encoding else 0)

    @property
    def d_head(self):
        return self.d_emb // self.n_heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(cfg):
    """Ordered manifest of parameter names and shapes for ``cfg``."""
    d, h = cfg.d_emb, cfg.mlp_hidden
    shapes = {
        "encoder.weight": (d, cfg.d_in),
        "encoder.bias": (d,),
        "encoder.ln_gamma": (d,),
        "encoder.ln_beta": (d,),
    }
    for proj in ("q", "k", "v", "out"):
        shapes[f"obs_attn.{proj}_weight"] = (d, d)
    for gate in ("z", "r", "n"):
        shapes[f"gru.w_{gate}"] = (d, 2 * d)
        shapes[f"gru.u_{gate}"] = (d, d)
        shapes[f"gru.b_{gate}"] = (d,)
    for proj in ("q", "k", "v", "out"):
        shapes[f"gru_attn.{proj}_weight"] = (d, d)
    width = 3 * d
    for i in range(cfg.mlp_depth):
        shapes[f"mlp.{i}.weight"] = (h, width)
        shapes[f"mlp.{i}.bias"] = (h,)
        width = h
    shapes["mlp.out.weight"] = (cfg.d_act, width)
    shapes["mlp.out.bias"] = (cfg.d_act,)
    shapes["loss.log_sigma"] = (cfg.d_act,)
    return shapes


def parameter_count(cfg):
    d, h, a = cfg.d_emb, cfg.mlp_hidden, cfg.d_act
    encoder = d * cfg.d_in + 3 * d
    attention = 2 * 4 * d * d
    gru = 3 * (2 * d * d + d * d + d)
    if cfg.mlp_depth:
        mlp = (3 * d * h + h) + (cfg.mlp_depth - 1) * (h * h + h) + (h * a + a)
    else:
        mlp = 3 * d * a + a
    return encoder + attention + gru + mlp + a


_tokens = itertools.count(1)


class ParamSet(dict):
    """Name -> :class:`Tensor` view of a parameter set.

    ``token`` identifies the view; cached key/value projections inside a
    :class:`PolicyState` are only reused under the same token.
    """

    def __init__(self, config, tensors):
        super().__init__(tensors)
        self.config = config
        self.token = next(_tokens)


class ModelParams:
    """Every learnable array of the policy, in manifest order.

    Arrays are treated as immutable; updates build a new instance through
    :meth:`with_arrays`.
    """

    def __init__(self, config, arrays):
        shapes = param_shapes(config)
        missing = set(shapes) - set(arrays)
        extra = set(arrays) - set(shapes)
        if missing or extra:
            raise ShapeError(f"parameter names differ: missing={sorted(missing)} "
                             f"extra={sorted(extra)}")
        self.config = config
        self._arrays = {}
        for name, shape in shapes.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {arr.shape}")
            self._arrays[name] = arr
        self._inference = None

    def __getitem__(self, name):
        return self._arrays[name]

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    @property
    def names(self):
        return list(self._arrays)

    @property
    def size(self):
        return int(sum(a.size for a in self._arrays.values()))

    def with_arrays(self, arrays):
        return ModelParams(self.config, arrays)

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.items()})

    def tensors(self, requires_grad=False):
        """A fresh :class:`ParamSet`; leaves require grad when asked."""
        if not requires_grad:
            if self._inference is None:
                self._inference = ParamSet(
                    self.config, {k: Tensor(v, name=k) for k, v in self.items()})
            return self._inference
        return ParamSet(self.config, {k: Tensor(v, requires_grad=True, name=k)
                                      for k, v in self.items()})

    def equal(self, other):
        return (self.config == other.config
                and all(np.array_equal(self[k], other[k]) for k in self))


def init_params(cfg, seed=0):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, unit LN gain, zero log sigma."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(cfg)
    fan_in = {}
    for name, shape in shapes.items():
        if len(shape) == 2:
            fan_in[name.rsplit(".", 1)[0]] = shape[1]
    arrays = {}
    for name, shape in shapes.items():
        if name == "encoder.ln_gamma":
            arrays[name] = np.ones(shape)
        elif name in ("encoder.ln_beta", "loss.log_sigma"):
            arrays[name] = np.zeros(shape)
        else:
            if len(shape) == 2:
                fan = shape[1]
            elif name.startswith("gru.b_"):
                fan = 2 * cfg.d_emb
            else:
                fan = fan_in[name.rsplit(".", 1)[0]]
            bound = 1.0 / math.sqrt(fan)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(cfg, arrays)


def as_param_set(params):
    if isinstance(params, ParamSet):
        return params
    if isinstance(params, ModelParams):
        return params.tensors()
    raise TypeError(f"expected ModelParams or ParamSet, got {type(params).__name__}")


# ---------------------------------------------------------------------------
# building blocks

def positional_table(first, length, d_emb):
    """Sinusoidal embeddings for positions ``first .. first+length-1``."""
    pos = np.arange(first, first + length, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_emb, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / d_emb)
    pe = np.empty((length, d_emb))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_emb // 2])
    return pe


def positional_embedding(t, d_emb):
    if t < 0:
        raise ContractError("positional index must be non-negative")
    return positional_table(t, 1, d_emb)[0]


def _batched(x, width):
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.shape[-1] != width:
        raise DimensionError(f"expected width {width}, got {data.shape[-1]}")
    if data.ndim == 1:
        return (nx.reshape(x, (1, width)) if isinstance(x, Tensor)
                else Tensor(data[None])), True
    return (x if isinstance(x, Tensor) else Tensor(data)), False


def encode(o, params):
    """``LayerNorm(ELU(W_e o + b_e))``."""
    p = as_param_set(params)
    if isinstance(o, Observation):
        o = o.flatten()
    x, single = _batched(o, p.config.d_in)
    e = nx.layer_norm(
        nx.elu(nx.linear(x, p["encoder.weight"], p["encoder.bias"])),
        p["encoder.ln_gamma"], p["encoder.ln_beta"], p.config.ln_eps)
    return e[0] if single else e


def _heads(x, n_heads):
    """[b, L, d] -> [b, H, L, dk]."""
    b, length, d = x.shape
    return nx.transpose(nx.reshape(x, (b, length, n_heads, d // n_heads)), (0, 2, 1, 3))


def _attention_core(q, keys, values, out_weight):
    """Multi-head attention of one query row per batch element.

    q: [b, d]; keys/values: [b, H, L, dk].  Returns ([b, d], weights [b, H, L]).
    """
    b, n_heads, _, dk = keys.shape
    mixed, weights = nx.attend(nx.reshape(q, (b, n_heads, dk)), keys, values)
    return nx.linear(nx.reshape(mixed, (b, n_heads * dk)), out_weight), weights


def single_query_attention(query, history, proj, n_heads, base_step):
    """Attention of the newest entry over ``history`` (oldest first).

    ``query`` is the raw newest entry (it is normally ``history[-1]``);
    positional embeddings for ``base_step ..`` are added to every history
    entry, and the newest position's embedding to the query, before the
    Q/K/V projections.  ``proj`` maps ``q``, ``k``, ``v``, ``out`` to [d, d]
    weight tensors.  Returns ``(output, weights)`` with per-head weights.
    """
    if len(history) == 0:
        raise ContractError("attention over an empty history")
    query, single = _batched(query, proj["q"].shape[1])
    hist = [_batched(h, proj["k"].shape[1])[0] for h in history]
    length, d = len(hist), query.shape[-1]
    pe = positional_table(base_step, length, d)
    stacked = nx.add(nx.stack(hist, axis=1), pe)
    keys = _heads(nx.linear(stacked, proj["k"]), n_heads)
    values = _heads(nx.linear(stacked, proj["v"]), n_heads)
    q = nx.linear(nx.add(query, pe[-1]), proj["q"])
    out, weights = _attention_core(q, keys, values, proj["out"])
    if single:
        return out[0], weights[0]
    return out, weights


def gru_step(x, h, params):
    """One GRU update with gates z (update), r (reset), n (candidate)."""
    p = as_param_set(params)
    d = p.config.d_emb
    x, single = _batched(x, 2 * d)
    h, _ = _batched(h, d)
    z = nx.sigmoid(nx.add(nx.linear(x, p["gru.w_z"], p["gru.b_z"]),
                          nx.linear(h, p["gru.u_z"])))
    r = nx.sigmoid(nx.add(nx.linear(x, p["gru.w_r"], p["gru.b_r"]),
                          nx.linear(h, p["gru.u_r"])))
    n = nx.tanh(nx.add(nx.linear(x, p["gru.w_n"], p["gru.b_n"]),
                       nx.mul(r, nx.linear(h, p["gru.u_n"]))))
    out = nx.add(nx.mul(nx.sub(1.0, z), n), nx.mul(z, h))
    return out[0] if single else out


def mlp_head(x, params):
    p = as_param_set(params)
    for i in range(p.config.mlp_depth):
        x = nx.elu(nx.linear(x, p[f"mlp.{i}.weight"], p[f"mlp.{i}.bias"]))
    return nx.linear(x, p["mlp.out.weight"], p["mlp.out.bias"])


# ---------------------------------------------------------------------------
# state

@dataclass(frozen=True)
class History:
    """Up to ``window`` raw entries plus their cached projections.

    ``entries`` are oldest first.  ``store`` holds the projected
    (entry + positional embedding) rows split into heads, and rows
    ``start:stop`` of it line up with ``entries``.  The projections are valid
    only for the parameter view ``token``.
    """

    entries: tuple = ()
    store: nx.KVStore | None = None
    start: int = 0
    stop: int = 0
    token: int | None = None

    def __len__(self):
        return len(self.entries)

    def detach(self):
        return History(tuple(e.detach() for e in self.entries))


@dataclass(frozen=True)
class PolicyState:
    gru_hidden: Tensor
    obs_history: History = field(default_factory=History)
    gru_history: History = field(default_factory=History)
    step: int = 0

    @classmethod
    def initial(cls, config, batch_size=1):
        return cls(Tensor(np.zeros((batch_size, config.d_emb))))

    @property
    def batch_size(self):
        return self.gru_hidden.shape[0]

    def reset(self):
        """Zero hidden state, empty histories, step counter back to 0."""
        return PolicyState(Tensor(np.zeros(self.gru_hidden.shape)))

    def detach(self):
        """Stop gradients at this point; values are kept."""
        return PolicyState(self.gru_hidden.detach(), self.obs_history.detach(),
                           self.gru_history.detach(), self.step)

    def with_hidden(self, hidden):
        h = hidden if isinstance(hidden, Tensor) else Tensor(np.atleast_2d(hidden))
        return replace(self, gru_hidden=h)


def _project_history(hist, p, prefix, first_pos):
    cfg = p.config
    capacity = cfg.window + _STORE_SLACK
    if not hist.entries:
        return History(token=p.token), capacity
    pe = positional_table(first_pos, len(hist.entries), cfg.d_emb)
    stacked = nx.add(nx.stack(hist.entries, axis=1), pe)
    keys = _heads(nx.linear(stacked, p[f"{prefix}.k_weight"]), cfg.n_heads)
    values = _heads(nx.linear(stacked, p[f"{prefix}.v_weight"]), cfg.n_heads)
    store = nx.KVStore(keys, values, capacity)
    return History(hist.entries, store, 0, store.n, p.token), capacity


# extra rows allocated beyond the window when a store is created
_STORE_SLACK = 32


def _attend(hist, x_new, p, prefix, step):
    cfg = p.config
    capacity = cfg.window + _STORE_SLACK
    if hist.token != p.token:
        hist, capacity = _project_history(hist, p, prefix, step - len(hist))
    xp = nx.add(x_new, positional_table(step, 1, cfg.d_emb)[0])
    head_shape = (x_new.shape[0], cfg.n_heads, cfg.d_head)
    k = nx.reshape(nx.linear(xp, p[f"{prefix}.k_weight"]), head_shape)
    v = nx.reshape(nx.linear(xp, p[f"{prefix}.v_weight"]), head_shape)
    q = nx.reshape(nx.linear(xp, p[f"{prefix}.q_weight"]), head_shape)
    store = hist.store or nx.KVStore(None, None, capacity, head_shape)
    store, start, stop = store.append(k, v, hist.start, hist.stop, cfg.window)
    mixed, weights = store.attend(q, start, stop)
    out = nx.linear(nx.reshape(mixed, (head_shape[0], cfg.d_emb)),
                    p[f"{prefix}.out_weight"])
    entries = (hist.entries + (x_new,))[-cfg.window:]
    return out, weights, History(entries, store, start, stop, p.token)


def policy_step(o, state, params, capture=None):
    """Advance the policy by one control step.

    Returns ``(action, new_state)``.  When ``capture`` is a list, a dict with
    the per-head weights of both attentions ([b, H, L] arrays, exactly the
    ones used in this step) is appended to it.
    """
    p = as_param_set(params)
    cfg = p.config
    if isinstance(o, Observation):
        o = o.flatten()
    x, single = _batched(o, cfg.d_in)
    if x.shape[0] != state.batch_size:
        raise DimensionError(
            f"batch of {x.shape[0]} observations for a state of {state.batch_size}")
    t = state.step
    e = encode(x, p)
    h1, w1, obs_hist = _attend(state.obs_history, e, p, "obs_attn", t)
    g = gru_step(nx.concat([e, h1]), state.gru_hidden, p)
    h2, w2, gru_hist = _attend(state.gru_history, g, p, "gru_attn", t)
    action = mlp_head(nx.concat([e, g, h2]), p)
    if capture is not None:
        capture.append({"obs_attention": w1, "gru_attention": w2})
    new_state = PolicyState(g, obs_hist, gru_hist, t + 1)
    return (action[0] if single else action), new_state


def forward_sequence(obs, state, params, capture=None):
    """Run ``policy_step`` over ``obs`` [b, T, d_in]; returns ([b, T, d_act], state)."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim != 3:
        raise DimensionError("forward_sequence expects [batch, time, width]")
    actions = []
    for t in range(obs.shape[1]):
        a, state = policy_step(obs[:, t], state, params, capture)
        actions.append(a)
    return nx.stack(actions, axis=1), state


def rollout(obs, params, state=None):
    """Actions for one trajectory [N, d_in] from a fresh state, as an array."""
    p = as_param_set(params)
    state = state or PolicyState.initial(p.config, 1)
    out, _ = forward_sequence(np.asarray(obs)[None], state, p)
    return out.data[0]
