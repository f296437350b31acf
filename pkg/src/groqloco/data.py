"""Trajectories, padded batches, synthetic gait experts and the dataset file format.

Trajectory arrays are kept in float32, the on-disk precision, so writing and
reading a dataset is bit-exact.  Consumers widen to float64 as needed.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, TruncatedFileError, ValidationError, VersionError
from .model import obs_layout, obs_width

BEHAVIORS = ("periodic_flat", "nonperiodic_stair")

DATASET_MAGIC = b"GRQD"
DATASET_VERSION = 1
_PREFIX = struct.Struct("<4sBI")


@dataclass(frozen=True)
class Trajectory:
    observations: np.ndarray
    actions: np.ndarray
    morphology_id: str
    behavior: str = "periodic_flat"
    robot_enc: np.ndarray | None = None

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=np.float32)
        act = np.asarray(self.actions, dtype=np.float32)
        if obs.ndim != 2 or act.ndim != 2:
            raise DimensionError("observations and actions must be 2-D")
        if len(obs) != len(act) or len(obs) < 1:
            raise DimensionError(f"lengths differ or are empty: {len(obs)} vs {len(act)}")
        if self.behavior not in BEHAVIORS:
            raise ValidationError(f"unknown behavior {self.behavior!r}")
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "actions", act)
        if self.robot_enc is not None:
            object.__setattr__(self, "robot_enc", np.asarray(self.robot_enc, dtype=np.float32))

    def __len__(self):
        return len(self.actions)

    @property
    def d_obs(self):
        return self.observations.shape[1]

    @property
    def d_act(self):
        return self.actions.shape[1]

    def equals(self, other):
        enc_equal = (self.robot_enc is None and other.robot_enc is None) or (
            self.robot_enc is not None and other.robot_enc is not None
            and np.array_equal(self.robot_enc, other.robot_enc))
        return (self.morphology_id == other.morphology_id
                and self.behavior == other.behavior and enc_equal
                and np.array_equal(self.observations, other.observations)
                and np.array_equal(self.actions, other.actions))


@dataclass(frozen=True)
class PaddedBatch:
    obs: np.ndarray
    act: np.ndarray
    mask: np.ndarray
    indices: np.ndarray

    @property
    def n_max(self):
        return self.mask.shape[1]


# ---------------------------------------------------------------------------
# synthetic experts

@dataclass(frozen=True)
class GaitSpec:
    """Parameters of one synthetic gait expert.

    ``amplitude``, ``phase`` and ``offset`` are per joint (radians),
    ``frequency`` in Hz and ``dt`` in seconds.  The stair behaviour adds a
    slow incommensurate phase wobble of size ``phase_jitter`` and offset ramps
    of ``ramp_slope`` rad/s lasting ``ramp_duration`` seconds, triggered every
    ``event_spacing`` seconds on average.
    """

    amplitude: tuple
    phase: tuple
    offset: tuple
    frequency: float = 1.5
    dt: float = 0.02
    behavior: str = "periodic_flat"
    morphology_id: str = "m0"
    v_cmd: tuple = (0.5, 0.0, 0.0)
    omega_noise: float = 0.01
    action_noise: tuple | float = 0.0
    phase_jitter: float = 0.3
    ramp_slope: float = 0.4
    ramp_duration: float = 0.3
    event_spacing: float = 0.8
    tilt: float = 0.2

    def __post_init__(self):
        for name in ("amplitude", "phase", "offset"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64))
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} must be finite")
            object.__setattr__(self, name, tuple(float(x) for x in arr))
        n = len(self.amplitude)
        if len(self.phase) != n or len(self.offset) != n:
            raise ValidationError("amplitude, phase and offset need one value per joint")
        noise = np.broadcast_to(np.asarray(self.action_noise, dtype=np.float64), (n,))
        object.__setattr__(self, "action_noise", tuple(float(x) for x in noise))
        object.__setattr__(self, "v_cmd", tuple(float(x) for x in self.v_cmd))
        if len(self.v_cmd) != 3:
            raise ValidationError("v_cmd has three components")
        if not (self.frequency > 0 and self.dt > 0):
            raise ValidationError("frequency and dt must be positive")
        if self.behavior not in BEHAVIORS:
            raise ValidationError(f"unknown behavior {self.behavior!r}")
        if self.event_spacing <= 0 or self.ramp_duration < 0 or self.omega_noise < 0:
            raise ValidationError("stair timing and noise scales must be non-negative")
        if min(self.action_noise) < 0:
            raise ValidationError("action_noise must be non-negative")

    @property
    def n_joints(self):
        return len(self.amplitude)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown gait keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(str(exc)) from None


def _stair_profile(spec, tau, rng):
    """Offset ramp value and its time derivative at times ``tau``."""
    total = tau[-1] + spec.dt
    starts, t = [], rng.uniform(0.2, 1.0) * spec.event_spacing
    while t < total:
        starts.append(t)
        t += spec.event_spacing * rng.uniform(0.6, 1.4)
    ramp = np.zeros_like(tau)
    rate = np.zeros_like(tau)
    for s in starts:
        active = (tau >= s) & (tau < s + spec.ramp_duration)
        ramp += spec.ramp_slope * np.clip(tau - s, 0.0, spec.ramp_duration)
        rate += spec.ramp_slope * active
    return ramp, rate


def generate_trajectory(spec, length, seed=0, time_offset=0.0):
    """Expert trajectory of ``length`` steps; the action is the next joint target."""
    if length < 3:
        raise ValidationError("trajectories need at least 3 steps")
    rng = np.random.default_rng(seed)
    n = spec.n_joints
    amp, phase, offset = (np.asarray(getattr(spec, k)) for k in ("amplitude", "phase", "offset"))
    tau = time_offset + np.arange(length + 1) * spec.dt
    w = 2 * math.pi * spec.frequency
    theta = w * tau[:, None] + phase
    dtheta = np.full_like(theta, w)
    gravity = np.tile([0.0, 0.0, -1.0], (length + 1, 1))
    ramp = np.zeros((length + 1, 1))
    ramp_rate = np.zeros((length + 1, 1))
    if spec.behavior == "nonperiodic_stair":
        w_p = w * (math.sqrt(5) - 1) / 2
        theta = theta + spec.phase_jitter * np.sin(w_p * tau)[:, None]
        dtheta = dtheta + spec.phase_jitter * w_p * np.cos(w_p * tau)[:, None]
        r, rr = _stair_profile(spec, tau - time_offset, rng)
        ramp, ramp_rate = r[:, None], rr[:, None]
        pitch = spec.tilt * rr / spec.ramp_slope if spec.ramp_slope else 0.0 * rr
        gravity = np.stack([np.sin(pitch), np.zeros_like(pitch), -np.cos(pitch)], axis=1)
    q = offset + amp * np.sin(theta) + ramp
    dq = amp * np.cos(theta) * dtheta + ramp_rate

    actions = q[1:].copy()
    noise = np.asarray(spec.action_noise)
    if noise.any():
        actions += noise * rng.standard_normal((length, n))
    prev1 = np.vstack([np.zeros((1, n)), actions[:-1]])
    prev2 = np.vstack([np.zeros((2, n)), actions[:-2]])
    omega = spec.omega_noise * rng.standard_normal((length, 3))
    v_cmd = np.tile(spec.v_cmd, (length, 1))
    obs = np.concatenate([q[:-1], dq[:-1], prev1, prev2, gravity[:-1], omega, v_cmd], axis=1)
    return Trajectory(obs, actions, spec.morphology_id, spec.behavior)


# ---------------------------------------------------------------------------
# generator documents

def default_morphologies(n_joints=12):
    """Three periodic training gaits, one stair gait and one held-out gait."""
    j = np.arange(n_joints)
    base_phase = (j % 3) * 2 * math.pi / 3 + (j // 3) * math.pi / 2

    def gait(mid, amp, freq, off, shift, behavior="periodic_flat"):
        return {
            "morphology_id": mid, "behavior": behavior, "frequency": freq,
            "amplitude": [amp * (1.0 + 0.2 * (k % 3)) for k in j],
            "phase": [float(p + shift) for p in base_phase],
            "offset": [off * (-1) ** (k % 3) for k in j],
        }

    return [
        gait("quad_a", 0.30, 1.2, 0.10, 0.0),
        gait("quad_b", 0.45, 1.8, 0.25, 0.6),
        gait("quad_c", 0.20, 2.4, 0.40, 1.3),
        gait("quad_s", 0.30, 1.5, 0.20, 0.3, "nonperiodic_stair"),
        dict(gait("quad_h", 0.35, 1.6, 0.30, 0.9), held_out=True),
    ]


def default_generator_spec(n_joints=12, length=40):
    return {"n_joints": n_joints, "length": length, "dt": 0.02,
            "morphologies": default_morphologies(n_joints)}


def parse_generator_spec(doc):
    """Validate a generator document; returns (specs, held_out ids, length range, encodings)."""
    if not isinstance(doc, dict) or not doc.get("morphologies"):
        raise ValidationError("generator spec needs a non-empty 'morphologies' list")
    length = doc.get("length", 40)
    lo, hi = (length, length) if isinstance(length, int) else tuple(length)
    if lo < 3 or hi < lo:
        raise ValidationError(f"invalid length {length!r}")
    n_joints = doc.get("n_joints")
    specs, held_out, encodings = [], [], {}
    for entry in doc["morphologies"]:
        entry = dict(entry)
        if entry.pop("held_out", False):
            held_out.append(entry.get("morphology_id"))
        enc = entry.pop("encoding", None)
        entry.setdefault("dt", doc.get("dt", 0.02))
        spec = GaitSpec.from_dict(entry)
        if n_joints is not None and spec.n_joints != n_joints:
            raise ValidationError(f"{spec.morphology_id}: expected {n_joints} joints")
        if enc is not None:
            encodings[spec.morphology_id] = np.asarray(enc, dtype=np.float32)
        specs.append(spec)
    ids = [s.morphology_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValidationError("morphology ids must be unique")
    if len({s.n_joints for s in specs}) != 1:
        raise ValidationError("all morphologies need the same joint count")
    widths = {len(v) for v in encodings.values()}
    if encodings and (len(encodings) != len(specs) or len(widths) != 1):
        raise ValidationError("encodings must be given for every morphology with one width")
    return specs, held_out, (lo, hi), encodings


@dataclass
class Dataset:
    trajectories: list
    held_out: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def split(self):
        """(in-distribution, held-out) trajectory lists."""
        held = set(self.held_out)
        return ([t for t in self.trajectories if t.morphology_id not in held],
                [t for t in self.trajectories if t.morphology_id in held])

    @property
    def morphologies(self):
        return sorted({t.morphology_id for t in self.trajectories})

    def equals(self, other):
        return (len(self) == len(other) and self.held_out == other.held_out
                and self.meta == other.meta
                and all(a.equals(b) for a, b in zip(self, other)))


def generate_dataset(doc, count, seed=0):
    """``count`` trajectories cycling through the morphologies of ``doc``.

    Trajectory ``i`` draws its randomness from ``(seed, i)`` only.
    """
    if count < 1:
        raise ValidationError("count must be >= 1")
    specs, held_out, (lo, hi), encodings = parse_generator_spec(doc)
    trajectories = []
    for i in range(count):
        spec = specs[i % len(specs)]
        rng = np.random.default_rng([seed, i])
        length = int(rng.integers(lo, hi + 1))
        offset = float(rng.uniform(0.0, 1.0 / spec.frequency))
        traj = generate_trajectory(spec, length, int(rng.integers(2**63)), offset)
        if spec.morphology_id in encodings:
            traj = attach_robot_encoding(traj, encodings[spec.morphology_id])
        trajectories.append(traj)
    return Dataset(trajectories, held_out, {"generator": doc, "seed": seed, "count": count})


# ---------------------------------------------------------------------------
# batching and robot encodings

def pad_and_batch(trajectories, batch_size, rng):
    """Draw ``batch_size`` trajectories with replacement and zero-pad them.

    ``rng`` is a seed or a ``numpy.random.Generator``.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise ValidationError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ValidationError("batch size must be >= 1")
    rng = np.random.default_rng(rng)
    idx = rng.integers(0, len(trajectories), size=batch_size)
    chosen = [trajectories[i] for i in idx]
    d_obs, d_act = chosen[0].d_obs, chosen[0].d_act
    if any(t.d_obs != d_obs or t.d_act != d_act for t in chosen):
        raise DimensionError("trajectories in a batch must share widths")
    n_max = max(len(t) for t in chosen)
    obs = np.zeros((batch_size, n_max, d_obs))
    act = np.zeros((batch_size, n_max, d_act))
    mask = np.zeros((batch_size, n_max))
    for b, t in enumerate(chosen):
        n = len(t)
        obs[b, :n] = t.observations
        act[b, :n] = t.actions
        mask[b, :n] = 1.0
    return PaddedBatch(obs, act, mask, idx)


def attach_robot_encoding(traj, encoding, config=None):
    """Append ``encoding`` to every observation row.

    With an :class:`~groqloco.model.ArchConfig` the width is checked against
    its ``d_robot_enc``.
    """
    enc = np.asarray(encoding, dtype=np.float32).ravel()
    if traj.robot_enc is not None:
        raise ValidationError("trajectory already carries a robot encoding")
    if config is not None and (not config.use_robot_encoding or config.d_robot_enc != enc.size):
        raise DimensionError(
            f"encoding width {enc.size} does not match config ({config.d_robot_enc})")
    obs = np.concatenate([traj.observations, np.tile(enc, (len(traj), 1))], axis=1)
    return replace(traj, observations=obs, robot_enc=enc)


def remove_robot_encoding(traj):
    if traj.robot_enc is None:
        return traj
    width = traj.d_obs - traj.robot_enc.size
    return replace(traj, observations=traj.observations[:, :width], robot_enc=None)


def check_consistency(traj, n_joints=None):
    """True when the stored previous-action fields match the actions."""
    n = n_joints or traj.d_act
    layout = obs_layout(n)
    obs, act = traj.observations, traj.actions
    if obs.shape[1] < obs_width(n):
        return False
    prev1 = obs[1:, layout["a_prev1"]]
    prev2 = obs[2:, layout["a_prev2"]]
    return (np.array_equal(prev1, act[:-1]) and np.array_equal(prev2, act[:-2])
            and not obs[0, layout["a_prev1"]].any() and not obs[:2, layout["a_prev2"]].any())


# ---------------------------------------------------------------------------
# file format

def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def encode_dataset(dataset):
    entries, payload = [], []
    for t in dataset:
        entries.append({
            "morphology_id": t.morphology_id, "behavior": t.behavior, "length": len(t),
            "d_obs": t.d_obs, "d_act": t.d_act,
            "robot_enc": None if t.robot_enc is None else [float(x) for x in t.robot_enc],
        })
        payload.append(t.observations.astype("<f4").tobytes())
        payload.append(t.actions.astype("<f4").tobytes())
    header = _dumps({"dtype": "<f4", "held_out": list(dataset.held_out),
                     "meta": dataset.meta, "trajectories": entries})
    return _PREFIX.pack(DATASET_MAGIC, DATASET_VERSION, len(header)) + header + b"".join(payload)


def decode_dataset(raw):
    if len(raw) < _PREFIX.size:
        raise TruncatedFileError("file shorter than its fixed prefix")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise VersionError(f"unsupported dataset version {version}")
    start = _PREFIX.size
    if len(raw) < start + header_len:
        raise TruncatedFileError("header extends past end of file")
    try:
        header = json.loads(raw[start:start + header_len])
    except ValueError as exc:
        raise FormatError(f"unreadable header: {exc}") from None
    if header.get("dtype") != "<f4":
        raise FormatError(f"unsupported dtype {header.get('dtype')!r}")
    pos = start + header_len
    trajectories = []
    for e in header["trajectories"]:
        arrays = []
        for width in (e["d_obs"], e["d_act"]):
            nbytes = 4 * e["length"] * width
            if len(raw) < pos + nbytes:
                raise TruncatedFileError("payload ends early")
            arrays.append(np.frombuffer(raw, "<f4", e["length"] * width, pos)
                          .reshape(e["length"], width).astype(np.float32))
            pos += nbytes
        enc = None if e["robot_enc"] is None else np.asarray(e["robot_enc"], dtype=np.float32)
        trajectories.append(Trajectory(arrays[0], arrays[1], e["morphology_id"],
                                       e["behavior"], enc))
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} unexpected trailing bytes")
    return Dataset(trajectories, header["held_out"], header["meta"])


def write_dataset(path, dataset):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_dataset(dataset))


def read_dataset(path):
    return decode_dataset(Path(path).read_bytes())
