import math

import numpy as np
import pytest

from groqloco.analysis import (
    AttentionTrace, attention_trace, compute_residuals, export_attention, export_residuals,
    pooled_variance, read_attention, read_provenance, read_residuals, round9,
    source_uniformity, uniformity_test,
)
from groqloco.data import Trajectory
from groqloco.errors import ContractError
from groqloco.model import ModelParams, init_params


def _trajs(cfg, rng, lengths=(5, 3)):
    return [Trajectory(rng.normal(size=(n, cfg.d_in)), rng.normal(size=(n, cfg.d_act)), "m")
            for n in lengths]


def test_perfect_clone_has_zero_residuals(tiny_cfg, rng, tmp_path):
    params = init_params(tiny_cfg)
    trajs = _trajs(tiny_cfg, rng)
    preds = [t.actions for t in trajs]
    records = export_residuals(params, trajs, "0", tmp_path / "r.csv", predictions=preds)
    assert all(r.variance == 0.0 and not r.residuals.any() for r in records)


def test_residual_rows_and_round_trip(tiny_cfg, rng, tmp_path):
    params = init_params(tiny_cfg, 1)
    trajs = _trajs(tiny_cfg, rng)
    path = tmp_path / "out" / "res.csv"
    records = export_residuals(params, trajs, "step7", path, provenance={"seed": 3})
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    assert len(lines) - 1 == 8 * tiny_cfg.d_act
    back = read_residuals(path)
    for a, b in zip(records, back):
        assert a.joint == b.joint and a.step_tag == b.step_tag
        np.testing.assert_array_equal(a.residuals, b.residuals)
        assert a.variance == b.variance
    assert read_provenance(path) == {"seed": 3}
    raw = compute_residuals(params, trajs)
    assert [r.variance for r in records] == pytest.approx(list((raw ** 2).mean(0)), rel=1e-7)
    assert pooled_variance(records) >= 0
    summary = (tmp_path / "out" / "res.json").read_text()
    assert "exp_log_sigma" in summary


def _zero_keys(cfg):
    arrays = dict(init_params(cfg, 2).items())
    for src in ("obs_attn", "gru_attn"):
        arrays[f"{src}.k_weight"] = np.zeros_like(arrays[f"{src}.k_weight"])
    return ModelParams(cfg, arrays)


def test_zero_projection_gives_uniform_means(tiny_cfg, rng, tmp_path):
    trace = export_attention(_zero_keys(tiny_cfg), rng.normal(size=(12, tiny_cfg.d_in)),
                             tmp_path / "a.csv")
    for source in ("obs_attention", "gru_attention"):
        np.testing.assert_array_equal(trace.mean_weights[source], 1 / tiny_cfg.window)
        for _, p in trace.chi_square[source]:
            assert p == pytest.approx(1.0)
    assert trace.steps == 12 - tiny_cfg.window + 1


def test_attention_round_trip_and_sums(tiny_cfg, rng, tmp_path):
    params = init_params(tiny_cfg, 5)
    path = tmp_path / "attn.csv"
    trace = export_attention(params, rng.normal(size=(20, tiny_cfg.d_in)), path)
    assert trace.max_sum_error <= 1e-12
    back = read_attention(path)
    for source in ("obs_attention", "gru_attention"):
        np.testing.assert_array_equal(back[source], trace.mean_weights[source])
        assert back[source].shape == (tiny_cfg.n_heads, tiny_cfg.window)


def test_attention_stream_too_short(tiny_cfg, rng):
    with pytest.raises(ContractError):
        attention_trace(init_params(tiny_cfg), rng.normal(size=(3, tiny_cfg.d_in)))


def test_uniformity_test_detects_peak():
    flat = np.full(10, 0.1)
    assert uniformity_test(flat, 50)[1] == pytest.approx(1.0)
    peaked = np.array([0.05] * 9 + [0.55])
    assert uniformity_test(peaked, 50)[1] < 1e-6


def test_source_uniformity_pools_heads():
    trace = AttentionTrace({"obs_attention": np.full((2, 5), 0.2)}, 30, 0.0,
                           {"obs_attention": [(3.0, 0.5), (7.5, 0.1)]})
    stat, dof, p = source_uniformity(trace)["obs_attention"]
    # even dof 2k: survival = exp(-x/2) * sum_{i<k} (x/2)^i / i!
    half = 10.5 / 2
    expected = math.exp(-half) * sum(half ** i / math.factorial(i) for i in range(4))
    assert (stat, dof) == (10.5, 8)
    assert p == pytest.approx(expected, rel=1e-12)


def test_round9():
    assert round9(1 / 3) == float("0.333333333")
    assert round9(np.array([1e-20 / 3]))[0] == float(f"{1e-20 / 3:.9g}")
