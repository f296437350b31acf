"""Residual and attention exporters (CSV plus companion JSON).

Floats are written with 9 significant digits.  The in-memory records hold
the same rounded values, so re-reading a CSV gives them back exactly.  A
CSV may start with ``#`` comment lines carrying provenance JSON.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import ContractError
from .model import ModelParams, PolicyState, forward_sequence, rollout

SOURCES = ("obs_attention", "gru_attention")


def round9(x):
    """Values as they read back from 9-significant-digit text."""
    arr = np.asarray(x, dtype=np.float64)
    return np.array([float(f"{v:.9g}") for v in arr.ravel()]).reshape(arr.shape)


def _fmt(v):
    return f"{v:.9g}"


def _open_csv(path, provenance):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = path.open("w", newline="")
    if provenance is not None:
        fh.write("# " + json.dumps(provenance, sort_keys=True) + "\n")
    return fh


def _read_rows(path):
    with Path(path).open(newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def read_provenance(path):
    with Path(path).open() as fh:
        first = fh.readline()
    return json.loads(first[2:]) if first.startswith("# ") else None


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# residuals

@dataclass
class ResidualRecord:
    joint: int
    step_tag: str
    residuals: np.ndarray
    variance: float
    sigma: float

    @property
    def count(self):
        return self.residuals.size


def compute_residuals(params, trajectories, predictions=None):
    """[sum of lengths, d_act] residuals ``prediction - target``.

    Every trajectory is rolled out from a fresh state unless
    ``predictions`` (one array per trajectory) is given.
    """
    trajectories = list(trajectories)
    if predictions is None:
        predictions = [rollout(np.asarray(t.observations, np.float64), params)
                       for t in trajectories]
    return np.concatenate([np.asarray(p, np.float64) - np.asarray(t.actions, np.float64)
                           for p, t in zip(predictions, trajectories)])


def residual_records(residuals, step_tag, log_sigma):
    """Per-joint records with the zero-mean Gaussian variance (mean of squares)."""
    r = round9(residuals)
    if r.size == 0:
        raise ContractError("no residual samples")
    sigma = np.exp(np.asarray(log_sigma, np.float64))
    return [ResidualRecord(j, str(step_tag), r[:, j], float(np.mean(r[:, j] ** 2)),
                           float(sigma[j])) for j in range(r.shape[1])]


def pooled_variance(records):
    return float(np.mean(np.concatenate([rec.residuals for rec in records]) ** 2))


def export_residuals(params, trajectories, step_tag, path, json_path=None,
                     provenance=None, predictions=None):
    """Write residual samples to ``path`` and per-joint summaries to JSON.

    Returns the records.  ``json_path`` defaults to ``path`` with a
    ``.json`` suffix.
    """
    res = compute_residuals(params, trajectories, predictions)
    records = residual_records(res, step_tag, params["loss.log_sigma"])
    with _open_csv(path, provenance) as fh:
        w = csv.writer(fh)
        w.writerow(["joint", "step_tag", "residual"])
        for t in range(res.shape[0]):
            for rec in records:
                w.writerow([rec.joint, rec.step_tag, _fmt(rec.residuals[t])])
    summary = {
        "step_tag": str(step_tag),
        "samples_per_joint": int(res.shape[0]),
        "joints": [{"joint": r.joint, "variance": r.variance, "exp_log_sigma": r.sigma}
                   for r in records],
        "pooled_variance": pooled_variance(records),
        "provenance": provenance,
    }
    _write_json(json_path or Path(path).with_suffix(".json"), summary)
    return records


def read_residuals(path):
    """Records rebuilt from a residual CSV (variance recomputed, sigma unknown)."""
    by_joint = {}
    for row in _read_rows(path):
        key = (int(row["joint"]), row["step_tag"])
        by_joint.setdefault(key, []).append(float(row["residual"]))
    out = []
    for (joint, tag), vals in sorted(by_joint.items()):
        r = np.array(vals)
        out.append(ResidualRecord(joint, tag, r, float(np.mean(r ** 2)), float("nan")))
    return out


# ---------------------------------------------------------------------------
# attention

@dataclass
class AttentionTrace:
    """Mean attention per source and head over the steady-state steps.

    ``mean_weights[source]`` is [H, W]; position 1 is the oldest entry and
    position W the newest.
    """

    mean_weights: dict
    steps: int
    max_sum_error: float
    chi_square: dict = field(default_factory=dict)

    def rows(self):
        for source in SOURCES:
            for h, profile in enumerate(self.mean_weights[source]):
                for pos, value in enumerate(profile, start=1):
                    yield source, h, pos, value


def capture_attention(params, observations):
    """Per-step weights of both attentions for one stream, oldest first."""
    obs = np.asarray(observations, dtype=np.float64)
    capture = []
    forward_sequence(obs[None], PolicyState.initial(params.config, 1), params, capture)
    return capture


def uniformity_test(mean_profile, steps):
    """Chi-square of pooled attention mass against a uniform profile.

    The weights of ``steps`` steps are pooled as pseudo-counts
    (``mean * steps``), each position expecting ``steps / W``.
    """
    counts = np.asarray(mean_profile) * steps
    expected = np.full(counts.shape, counts.sum() / counts.size)
    stat, p = stats.chisquare(counts, expected)
    return float(stat), float(p)


def source_uniformity(trace):
    """Per source, the head chi-squares summed into one test: (statistic, dof, p)."""
    out = {}
    for source, per_head in trace.chi_square.items():
        stat = math.fsum(s for s, _ in per_head)
        dof = len(per_head) * (trace.mean_weights[source].shape[1] - 1)
        out[source] = (stat, dof, float(stats.chi2.sf(stat, dof)))
    return out


def attention_trace(params, observations):
    obs = np.asarray(observations)
    window = params.config.window
    if obs.ndim != 2 or len(obs) < window:
        raise ContractError(f"attention export needs a stream of at least W={window} steps")
    capture = capture_attention(params, obs)
    steady = capture[window - 1:]
    means, chi, worst = {}, {}, 0.0
    for source in SOURCES:
        w = np.stack([c[source][0] for c in steady])
        worst = max(worst, float(np.abs(w.sum(-1) - 1.0).max()))
        means[source] = round9(w.mean(axis=0))
        chi[source] = [uniformity_test(w.mean(axis=0)[h], len(steady))
                       for h in range(w.shape[1])]
    return AttentionTrace(means, len(steady), worst, chi)


def export_attention(params, observations, path, json_path=None, provenance=None):
    trace = attention_trace(params, observations)
    with _open_csv(path, provenance) as fh:
        w = csv.writer(fh)
        w.writerow(["source", "head", "position", "mean_weight"])
        for source, head, pos, value in trace.rows():
            w.writerow([source, head, pos, _fmt(value)])
    summary = {
        "steady_state_steps": trace.steps,
        "max_step_sum_error": trace.max_sum_error,
        "chi_square_vs_uniform": {
            src: [{"head": h, "statistic": s, "p_value": p} for h, (s, p) in enumerate(v)]
            for src, v in trace.chi_square.items()},
        "pooled_heads_vs_uniform": {
            src: {"statistic": s, "dof": d, "p_value": p}
            for src, (s, d, p) in source_uniformity(trace).items()},
        "provenance": provenance,
    }
    _write_json(json_path or Path(path).with_suffix(".json"), summary)
    return trace


def read_attention(path):
    rows = _read_rows(path)
    grouped = {}
    for row in rows:
        grouped.setdefault(row["source"], {}).setdefault(int(row["head"]), []).append(
            (int(row["position"]), float(row["mean_weight"])))
    out = {}
    for source, heads in grouped.items():
        out[source] = np.array([[v for _, v in sorted(heads[h])] for h in sorted(heads)])
    return out
