import hashlib
import json
import struct

import numpy as np
import pytest

from groqloco.errors import (
    ChecksumError, ContractError, DimensionError, FormatError, ShapeError, TruncatedFileError,
    VersionError,
)
from groqloco.model import ArchConfig, init_params, rollout
from groqloco.runtime import (
    InferenceRuntime, bench, decode_checkpoint, encode_checkpoint, load_checkpoint,
    read_checkpoint, round_to_f32, save_checkpoint,
)


@pytest.fixture(scope="module")
def small_cfg():
    return ArchConfig(d_obs=17, d_act=2, d_emb=8, n_heads=2, window=5, mlp_hidden=16)


def test_checkpoint_round_trip_is_byte_identical(tmp_path, small_cfg):
    params = init_params(small_cfg, 1)
    path = tmp_path / "a" / "m.grqc"
    save_checkpoint(path, params, {"epoch": 3, "run_config": {"seed": 1}})
    cfg, loaded = load_checkpoint(path)
    assert cfg == small_cfg
    assert loaded.equal(round_to_f32(params))
    ckpt = read_checkpoint(path)
    assert ckpt.metadata == {"epoch": 3, "run_config": {"seed": 1}}
    assert encode_checkpoint(ckpt.params, ckpt.metadata) == path.read_bytes()


def test_checkpoint_rejections(small_cfg):
    raw = bytearray(encode_checkpoint(init_params(small_cfg)))
    with pytest.raises(FormatError):
        decode_checkpoint(b"ABCD" + bytes(raw[4:]))
    bumped = bytearray(raw)
    bumped[4] = 9
    with pytest.raises(VersionError):
        decode_checkpoint(bytes(bumped))
    flipped = bytearray(raw)
    flipped[-40] ^= 0x01
    with pytest.raises(ChecksumError):
        decode_checkpoint(bytes(flipped))
    with pytest.raises(ChecksumError):
        decode_checkpoint(bytes(raw[:-5]))
    with pytest.raises(TruncatedFileError):
        decode_checkpoint(bytes(raw[:10]))


def _reseal(raw, edit):
    """Rewrite the header with ``edit`` and recompute the checksum."""
    _, version, n = struct.unpack_from("<4sBI", raw)
    header = json.loads(raw[9:9 + n])
    edit(header)
    new = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = struct.pack("<4sBI", b"GRQC", version, len(new)) + new + raw[9 + n:-32]
    return body + hashlib.sha256(body).digest()


def test_wrong_shape_in_header_is_a_shape_error(small_cfg):
    raw = encode_checkpoint(init_params(small_cfg))

    def bad_shape(h):
        h["manifest"][0]["shape"] = [8, 18]

    def bad_arch(h):
        h["arch"]["d_emb"] = 16

    for edit in (bad_shape, bad_arch):
        with pytest.raises(ShapeError):
            decode_checkpoint(_reseal(raw, edit))


def test_runtime_matches_training_path(small_cfg, rng):
    params = round_to_f32(init_params(small_cfg, 2))
    obs = rng.normal(size=(17, small_cfg.d_in))
    rt = InferenceRuntime(params)
    assert np.abs(rt.run(obs) - rollout(obs, params)).max() <= 1e-5
    assert rt.step_count == 17 and rt.history_length == 5


def test_f32_checkpoint_against_f64_training_path(tmp_path, small_cfg, rng):
    params = init_params(small_cfg, 5)
    save_checkpoint(tmp_path / "m.grqc", params)
    rt = InferenceRuntime.from_checkpoint(tmp_path / "m.grqc")
    obs = rng.normal(size=(3 * small_cfg.window, small_cfg.d_in))
    assert np.abs(rt.run(obs) - rollout(obs, params)).max() <= 1e-6


def test_runtime_reset_replays(small_cfg, rng):
    rt = InferenceRuntime(init_params(small_cfg, 3))
    obs = rng.normal(size=(9, small_cfg.d_in))
    first = rt.run(obs)
    rt.reset()
    np.testing.assert_array_equal(rt.run(obs), first)
    with pytest.raises(DimensionError):
        rt.infer_step(np.zeros(small_cfg.d_in + 1))


def test_runtime_without_hidden_mlp(rng):
    cfg = ArchConfig(d_obs=17, d_act=2, d_emb=4, n_heads=1, window=3, mlp_depth=0)
    params = round_to_f32(init_params(cfg, 4))
    obs = rng.normal(size=(6, 17))
    assert np.abs(InferenceRuntime(params).run(obs) - rollout(obs, params)).max() <= 1e-5


def test_bench_report(small_cfg):
    report = bench(small_cfg, steps=50)
    assert report.steps == len(report.times) == 50
    assert report.allocations == 0
    assert report.p50 <= report.p99 <= report.max
    with pytest.raises(ContractError):
        bench(small_cfg, steps=4)


def test_per_step_cost_flat_beyond_window(small_cfg):
    short = bench(small_cfg, steps=200).p50
    long = bench(small_cfg, steps=400).p50
    assert long < 2 * short
