"""Checkpoint files and the allocation-free float32 inference runtime.

The runtime keeps every buffer (weights, key/value rings, scratch vectors)
inside a numba jitclass.  Python writes an observation into
:attr:`InferenceRuntime.observation`, a float32 array shared with the
compiled object, and calls :meth:`InferenceRuntime.step`, which takes no
arguments, so the compiled side never boxes or allocates an array.  Keys and
values are projected once when an entry enters its ring; eviction overwrites
the oldest slot.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numba import float32, float64, int64, njit
from numba.core.runtime import _nrt_python, rtsys
from numba.experimental import jitclass

from .errors import ChecksumError, ContractError, DimensionError, FormatError, ShapeError, \
    TruncatedFileError, VersionError
from .model import ArchConfig, ModelParams, Observation, init_params, param_shapes

CHECKPOINT_MAGIC = b"GRQC"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<4sBI")
_DIGEST = 32


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    config: ArchConfig
    params: ModelParams
    metadata: dict = field(default_factory=dict)


def encode_checkpoint(params, metadata=None):
    manifest, chunks, offset = [], [], 0
    for name, arr in params.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"arch": params.config.to_dict(), "manifest": manifest,
                         "metadata": metadata or {}},
                        sort_keys=True, separators=(",", ":")).encode()
    body = _PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)) + header \
        + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(raw):
    if len(raw) < _PREFIX.size + _DIGEST:
        raise TruncatedFileError("file shorter than prefix and checksum")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checksum mismatch")
    start = _PREFIX.size
    if len(body) < start + header_len:
        raise TruncatedFileError("header extends past payload")
    try:
        header = json.loads(body[start:start + header_len])
        config = ArchConfig.from_dict(header["arch"])
        manifest = header["manifest"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from None
    expected = param_shapes(config)
    names = [e["name"] for e in manifest]
    if names != list(expected):
        raise ShapeError("parameter manifest does not match the architecture")
    offset = 0
    for entry in manifest:
        shape = tuple(entry["shape"])
        if shape != expected[entry["name"]]:
            raise ShapeError(f"{entry['name']}: header shape {shape}, "
                             f"architecture needs {expected[entry['name']]}")
        if entry["offset"] != offset:
            raise FormatError(f"{entry['name']}: unexpected offset {entry['offset']}")
        offset += 4 * math.prod(shape)
    payload = body[start + header_len:]
    if len(payload) != offset:
        raise TruncatedFileError(f"payload holds {len(payload)} bytes, manifest needs {offset}")
    arrays = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        arrays[entry["name"]] = np.frombuffer(payload, "<f4", math.prod(shape),
                                              entry["offset"]).reshape(shape).astype(np.float64)
    return Checkpoint(config, ModelParams(config, arrays), header["metadata"])


def save_checkpoint(path, params, metadata=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(params, metadata))


def read_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


def load_checkpoint(path):
    """``(ArchConfig, ModelParams)`` from ``path``; float32 values widened to float64."""
    ckpt = read_checkpoint(path)
    return ckpt.config, ckpt.params


def round_to_f32(params):
    """The parameters a checkpoint round trip would give back."""
    return params.with_arrays({k: v.astype(np.float32).astype(np.float64)
                               for k, v in params.items()})


# ---------------------------------------------------------------------------
# compiled kernels

@njit(cache=True)
def _matvec(w, x, out):
    for i in range(w.shape[0]):
        acc = 0.0
        for j in range(w.shape[1]):
            acc += w[i, j] * x[j]
        out[i] = acc


@njit(cache=True)
def _matvec_add(w, x, out):
    for i in range(w.shape[0]):
        acc = out[i]
        for j in range(w.shape[1]):
            acc += w[i, j] * x[j]
        out[i] = acc


@njit(cache=True)
def _elu(x):
    for i in range(x.shape[0]):
        if x[i] < 0:
            x[i] = math.expm1(x[i])


@njit(cache=True)
def _sigmoid(v):
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


@njit(cache=True)
def _attend(q, keys, values, count, n_heads, scores, out):
    dk = q.shape[0] // n_heads
    c = 1.0 / math.sqrt(dk)
    for h in range(n_heads):
        lo = h * dk
        top = -np.inf
        for j in range(count):
            acc = 0.0
            for k in range(dk):
                acc += q[lo + k] * keys[j, lo + k]
            scores[j] = acc * c
            if scores[j] > top:
                top = scores[j]
        total = 0.0
        for j in range(count):
            scores[j] = math.exp(scores[j] - top)
            total += scores[j]
        for k in range(dk):
            acc = 0.0
            for j in range(count):
                acc += scores[j] * values[j, lo + k]
            out[lo + k] = acc / total


_spec = [
    ("d", int64), ("n_heads", int64), ("window", int64), ("depth", int64),
    ("eps", float64), ("t", int64), ("count", int64), ("slot", int64),
    ("observation", float32[::1]), ("action", float32[::1]),
    ("enc_w", float32[:, ::1]), ("enc_b", float32[::1]),
    ("ln_g", float32[::1]), ("ln_b", float32[::1]),
    ("attn", float32[:, :, ::1]),
    ("gru_w", float32[:, :, ::1]), ("gru_u", float32[:, :, ::1]), ("gru_b", float32[:, ::1]),
    ("mlp_first", float32[:, ::1]), ("mlp_rest", float32[:, :, ::1]), ("mlp_b", float32[:, ::1]),
    ("out_w", float32[:, ::1]), ("out_b", float32[::1]),
    ("inv_freq", float64[::1]),
    ("keys", float32[:, :, ::1]), ("values", float32[:, :, ::1]),
    ("hidden", float32[::1]), ("e", float32[::1]), ("x", float32[::1]), ("q", float32[::1]),
    ("mixed", float32[::1]), ("attn_out", float32[::1]), ("gru_in", float32[::1]),
    ("gates", float32[:, ::1]), ("un", float32[::1]), ("g", float32[::1]),
    ("head_in", float32[::1]), ("ha", float32[::1]), ("hb", float32[::1]),
    ("scores", float32[::1]),
]


@jitclass(_spec)
class _Core:
    def __init__(self, observation, action, enc_w, enc_b, ln_g, ln_b, attn, gru_w, gru_u,
                 gru_b, mlp_first, mlp_rest, mlp_b, out_w, out_b, n_heads, window, eps):
        self.observation = observation
        self.action = action
        self.enc_w = enc_w
        self.enc_b = enc_b
        self.ln_g = ln_g
        self.ln_b = ln_b
        self.attn = attn
        self.gru_w = gru_w
        self.gru_u = gru_u
        self.gru_b = gru_b
        self.mlp_first = mlp_first
        self.mlp_rest = mlp_rest
        self.mlp_b = mlp_b
        self.out_w = out_w
        self.out_b = out_b
        d = enc_w.shape[0]
        self.d = d
        self.n_heads = n_heads
        self.window = window
        self.depth = mlp_b.shape[0]
        self.eps = eps
        self.inv_freq = np.empty((d + 1) // 2)
        for i in range(self.inv_freq.shape[0]):
            self.inv_freq[i] = 1.0 / 10000.0 ** (2.0 * i / d)
        self.keys = np.zeros((2, window, d), dtype=np.float32)
        self.values = np.zeros((2, window, d), dtype=np.float32)
        self.hidden = np.zeros(d, dtype=np.float32)
        self.e = np.zeros(d, dtype=np.float32)
        self.x = np.zeros(d, dtype=np.float32)
        self.q = np.zeros(d, dtype=np.float32)
        self.mixed = np.zeros(d, dtype=np.float32)
        self.attn_out = np.zeros(d, dtype=np.float32)
        self.gru_in = np.zeros(2 * d, dtype=np.float32)
        self.gates = np.zeros((3, d), dtype=np.float32)
        self.un = np.zeros(d, dtype=np.float32)
        self.g = np.zeros(d, dtype=np.float32)
        self.head_in = np.zeros(3 * d, dtype=np.float32)
        width = mlp_first.shape[0] if self.depth > 0 else 3 * d
        self.ha = np.zeros(width, dtype=np.float32)
        self.hb = np.zeros(width, dtype=np.float32)
        self.scores = np.zeros(window, dtype=np.float32)
        self.t = 0
        self.count = 0
        self.slot = 0

    def reset(self):
        self.hidden[:] = 0
        self.t = 0
        self.count = 0
        self.slot = 0

    def _attention(self, which, entry, out):
        # entry + PE(t) -> new key/value row and the query
        for i in range(self.d):
            angle = self.t * self.inv_freq[i // 2]
            pe = math.sin(angle) if i % 2 == 0 else math.cos(angle)
            self.x[i] = entry[i] + pe
        base = 4 * which
        _matvec(self.attn[base + 1], self.x, self.keys[which, self.slot])
        _matvec(self.attn[base + 2], self.x, self.values[which, self.slot])
        _matvec(self.attn[base], self.x, self.q)
        n = min(self.count + 1, self.window)
        _attend(self.q, self.keys[which], self.values[which], n, self.n_heads,
                self.scores, self.mixed)
        _matvec(self.attn[base + 3], self.mixed, out)

    def step(self):
        d = self.d
        # encoder
        _matvec(self.enc_w, self.observation, self.e)
        mean = 0.0
        for i in range(d):
            self.e[i] += self.enc_b[i]
            if self.e[i] < 0:
                self.e[i] = math.expm1(self.e[i])
            mean += self.e[i]
        mean /= d
        var = 0.0
        for i in range(d):
            var += (self.e[i] - mean) ** 2
        inv = 1.0 / math.sqrt(var / d + self.eps)
        for i in range(d):
            self.e[i] = (self.e[i] - mean) * inv * self.ln_g[i] + self.ln_b[i]

        self._attention(0, self.e, self.attn_out)

        # GRU on [e; attention]
        for i in range(d):
            self.gru_in[i] = self.e[i]
            self.gru_in[d + i] = self.attn_out[i]
        for k in range(3):
            _matvec(self.gru_w[k], self.gru_in, self.gates[k])
        _matvec(self.gru_u[2], self.hidden, self.un)
        _matvec_add(self.gru_u[0], self.hidden, self.gates[0])
        _matvec_add(self.gru_u[1], self.hidden, self.gates[1])
        for i in range(d):
            z = _sigmoid(self.gates[0, i] + self.gru_b[0, i])
            r = _sigmoid(self.gates[1, i] + self.gru_b[1, i])
            n = math.tanh(self.gates[2, i] + self.gru_b[2, i] + r * self.un[i])
            self.g[i] = (1.0 - z) * n + z * self.hidden[i]

        self._attention(1, self.g, self.attn_out)

        # MLP head on [e; g; attention]
        for i in range(d):
            self.head_in[i] = self.e[i]
            self.head_in[d + i] = self.g[i]
            self.head_in[2 * d + i] = self.attn_out[i]
        if self.depth == 0:
            _matvec(self.out_w, self.head_in, self.action)
        else:
            _matvec(self.mlp_first, self.head_in, self.ha)
            for i in range(self.ha.shape[0]):
                self.ha[i] += self.mlp_b[0, i]
            _elu(self.ha)
            for layer in range(self.depth - 1):
                _matvec(self.mlp_rest[layer], self.ha, self.hb)
                for i in range(self.hb.shape[0]):
                    self.ha[i] = self.hb[i] + self.mlp_b[layer + 1, i]
                _elu(self.ha)
            _matvec(self.out_w, self.ha, self.action)
        for i in range(self.action.shape[0]):
            self.action[i] += self.out_b[i]

        for i in range(d):
            self.hidden[i] = self.g[i]
        self.slot = (self.slot + 1) % self.window
        self.count = min(self.count + 1, self.window)
        self.t += 1


class InferenceRuntime:
    """Stateful single-robot policy evaluation in float32.

    Write the observation into :attr:`observation` and call :meth:`step`
    for the allocation-free path; :meth:`infer_step` wraps both and returns
    a copy of the action.
    """

    def __init__(self, params):
        if not isinstance(params, ModelParams):
            raise TypeError("InferenceRuntime needs ModelParams")
        cfg = params.config
        self.config = cfg
        f32 = lambda a: np.ascontiguousarray(a, dtype=np.float32)
        d, hidden = cfg.d_emb, cfg.mlp_hidden
        attn = np.stack([params[f"{src}.{p}_weight"] for src in ("obs_attn", "gru_attn")
                         for p in ("q", "k", "v", "out")])
        depth = cfg.mlp_depth
        if depth:
            first = params["mlp.0.weight"]
            rest = (np.stack([params[f"mlp.{i}.weight"] for i in range(1, depth)])
                    if depth > 1 else np.zeros((0, hidden, hidden)))
            biases = np.stack([params[f"mlp.{i}.bias"] for i in range(depth)])
        else:
            first, rest, biases = np.zeros((0, 3 * d)), np.zeros((0, 0, 0)), np.zeros((0, 0))
        self.observation = np.zeros(cfg.d_in, dtype=np.float32)
        self.action = np.zeros(cfg.d_act, dtype=np.float32)
        self._core = _Core(
            self.observation, self.action,
            f32(params["encoder.weight"]), f32(params["encoder.bias"]),
            f32(params["encoder.ln_gamma"]), f32(params["encoder.ln_beta"]), f32(attn),
            f32(np.stack([params[f"gru.w_{g}"] for g in "zrn"])),
            f32(np.stack([params[f"gru.u_{g}"] for g in "zrn"])),
            f32(np.stack([params[f"gru.b_{g}"] for g in "zrn"])),
            f32(first), f32(rest), f32(biases),
            f32(params["mlp.out.weight"]), f32(params["mlp.out.bias"]),
            cfg.n_heads, cfg.window, float(cfg.ln_eps))

    @classmethod
    def from_checkpoint(cls, path):
        return cls(read_checkpoint(path).params)

    @property
    def step_count(self):
        return self._core.t

    @property
    def history_length(self):
        return self._core.count

    def reset(self):
        self._core.reset()

    def step(self):
        """Advance one step on the contents of :attr:`observation`."""
        self._core.step()

    def infer_step(self, o):
        if isinstance(o, Observation):
            o = o.flatten()
        o = np.asarray(o)
        if o.shape != self.observation.shape:
            raise DimensionError(f"expected observation of width {self.observation.size}, "
                                 f"got shape {o.shape}")
        self.observation[:] = o
        self._core.step()
        return self.action.copy()

    def run(self, observations):
        """Actions for a stream [N, d_in], continuing from the current state."""
        return np.stack([self.infer_step(o) for o in np.asarray(observations)])


# ---------------------------------------------------------------------------
# benchmarking

def _allocations():
    return rtsys.get_allocation_stats().alloc


@dataclass
class LatencyReport:
    times: list
    p50: float
    p99: float
    max: float
    allocations: int
    steps: int
    warmup: int
    config: dict

    def to_dict(self, include_times=False):
        d = asdict(self)
        if not include_times:
            d.pop("times")
        return d


def bench(config=None, steps=1000, warmup=None, seed=0, params=None):
    """Per-step latency of :class:`InferenceRuntime` in the full-window regime.

    ``warmup`` unmeasured steps (at least the window) run first so the
    history rings are full; ``steps`` further steps are timed one by one on
    precomputed observations.  ``allocations`` counts compiled-side heap
    allocations during the timed steps.
    """
    params = params if params is not None else init_params(config or ArchConfig(), seed)
    cfg = params.config
    if steps < cfg.window:
        raise ContractError(f"bench needs at least window={cfg.window} steps, got {steps}")
    warmup = cfg.window + 10 if warmup is None else warmup
    if warmup < cfg.window:
        raise ContractError("warmup must cover the history window")
    _nrt_python.memsys_enable_stats()
    rt = InferenceRuntime(params)
    obs = np.random.default_rng(seed).standard_normal((warmup + steps, cfg.d_in)).astype(np.float32)
    for i in range(warmup):
        rt.observation[:] = obs[i]
        rt.step()
    times = np.empty(steps)
    buf, core, clock = rt.observation, rt._core, time.perf_counter
    before = _allocations()
    for i in range(steps):
        row = obs[warmup + i]
        t0 = clock()
        buf[:] = row
        core.step()
        times[i] = clock() - t0
    allocations = _allocations() - before
    return LatencyReport(times.tolist(), float(np.percentile(times, 50)),
                         float(np.percentile(times, 99)), float(times.max()),
                         int(allocations), steps, warmup, cfg.to_dict())
