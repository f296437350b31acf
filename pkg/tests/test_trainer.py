import numpy as np
import pytest

from groqloco.data import GaitSpec, PaddedBatch, Trajectory, generate_trajectory
from groqloco.errors import NumericalError, ShapeError, ValidationError
from groqloco.model import ArchConfig, init_params, obs_width
from groqloco.trainer import (
    TrainConfig, TrainerState, adam_update, clip_gradients, detach_boundary_check, train,
    train_epoch,
)

N_JOINTS = 2


@pytest.fixture
def cfg2():
    return ArchConfig(d_obs=obs_width(N_JOINTS), d_act=N_JOINTS, d_emb=8, n_heads=2, window=4,
                      mlp_hidden=16)


def _sinusoid(length=24, seed=0):
    spec = GaitSpec(amplitude=[0.4, 0.3], phase=[0.0, 1.5], offset=[0.1, -0.1],
                    frequency=1.0, dt=0.05, omega_noise=0.0)
    return generate_trajectory(spec, length, seed)


def test_config_validation():
    for bad in ({"update_period": 0}, {"warmup_epochs": -1}, {"batch_size": 0},
                {"lr": 0.0}, {"clip_norm": -1.0}):
        with pytest.raises(ValidationError):
            TrainConfig(**bad)
    with pytest.raises(ValidationError):
        TrainConfig.from_dict({"learning_rate": 1.0})
    assert TrainConfig().batch_size == 400 and TrainConfig().update_period == 20


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    m, v = {"w": np.array([0.5, 0.5])}, {"w": np.array([0.25, 0.25])}
    cfg = TrainConfig()
    new_p, (new_m, new_v) = adam_update(p, {"w": np.zeros(2)}, (m, v), cfg, 1)
    np.testing.assert_array_equal(new_m["w"], 0.9 * m["w"])
    np.testing.assert_array_equal(new_v["w"], 0.999 * v["w"])
    # moments are nonzero, so parameters still move; from zero moments they do not
    new_p, _ = adam_update(p, {"w": np.zeros(2)}, ({"w": np.zeros(2)}, {"w": np.zeros(2)}), cfg, 1)
    np.testing.assert_array_equal(new_p["w"], p["w"])


def test_adam_first_step_closed_form():
    g = np.array([3.0, -1e-3, 0.5])
    cfg = TrainConfig(lr=0.01)
    zeros = {"w": np.zeros(3)}
    new_p, _ = adam_update({"w": np.zeros(3)}, {"w": g}, (zeros, dict(zeros)), cfg, 1)
    np.testing.assert_allclose(new_p["w"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_constant_gradient_limit():
    cfg = TrainConfig(lr=0.01)
    p, g = {"w": np.zeros(2)}, {"w": np.array([2.0, -0.3])}
    moments = ({"w": np.zeros(2)}, {"w": np.zeros(2)})
    for k in range(1, 3001):
        prev = p["w"]
        p, moments = adam_update(p, g, moments, cfg, k)
    np.testing.assert_allclose(p["w"] - prev, -0.01 * np.sign(g["w"]), rtol=1e-6)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_update({"w": np.zeros(2)}, {"w": np.zeros(3)},
                    ({"w": np.zeros(2)}, {"w": np.zeros(2)}), TrainConfig(), 1)


def test_clip_gradients():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_gradients(grads, 1.0)
    assert norm == 5.0
    assert clipped["a"][0] == pytest.approx(0.6) and clipped["b"][0] == pytest.approx(0.8)
    assert clip_gradients(grads, None)[0] is grads


def test_one_update_when_window_covers_batch(cfg2):
    traj = _sinusoid(12)
    state = TrainerState.fresh(init_params(cfg2))
    _, metrics = train_epoch([traj], state, TrainConfig(batch_size=2, update_period=12))
    assert metrics["updates"] == 1
    _, metrics = train_epoch([traj], state, TrainConfig(batch_size=2, update_period=5))
    assert metrics["updates"] == 3


def test_all_padding_window_is_skipped(cfg2):
    traj = _sinusoid(8)
    obs = np.zeros((1, 8, cfg2.d_obs))
    act = np.zeros((1, 8, 2))
    mask = np.zeros((1, 8))
    obs[0, :4], act[0, :4], mask[0, :4] = traj.observations[:4], traj.actions[:4], 1
    batch = PaddedBatch(obs, act, mask, np.zeros(1, int))
    _, metrics = train_epoch([traj], TrainerState.fresh(init_params(cfg2)),
                             TrainConfig(batch_size=1, update_period=4), batch=batch)
    assert metrics["updates"] == 1 and metrics["skipped_windows"] == 1


def test_tiny_model_fits_one_sinusoid(cfg2):
    losses = []
    train([_sinusoid()], init_params(cfg2, 1),
          TrainConfig(epochs=200, batch_size=4, update_period=8, warmup_epochs=10, lr=3e-3),
          on_epoch=lambda m: losses.append(m["loss"]))
    assert losses[-1] < 0.1 * losses[0]
    assert np.median(losses[-20:]) < np.median(losses[:20])


def test_training_is_deterministic(cfg2):
    cfg = TrainConfig(epochs=4, batch_size=3, update_period=5, warmup_epochs=2, seed=9)
    data = [_sinusoid(10, 0), _sinusoid(14, 1)]
    a = train(data, init_params(cfg2, 2), cfg)
    b = train(data, init_params(cfg2, 2), cfg)
    assert a.params.equal(b.params)
    assert a.history == b.history


def test_warmup_resets_then_preserves(cfg2):
    seen = []

    def record(epoch, window, policy):
        hist_len = len(policy.obs_history) + len(policy.gru_history)
        seen.append((epoch, bool(policy.gru_hidden.data.any()), hist_len, policy.step))

    cfg = TrainConfig(batch_size=2, update_period=5, warmup_epochs=2)
    state = TrainerState.fresh(init_params(cfg2, 3))
    for _ in range(4):
        state, _ = train_epoch([_sinusoid(10)], state, cfg, on_update=record)
    for epoch, nonzero, hist_len, step in seen:
        if epoch <= 2:
            assert not nonzero and hist_len == 0 and step == 0
        else:
            assert nonzero and hist_len > 0 and step > 0
    # continuity across epochs after warmup
    assert seen[-1][3] == 20


def test_non_finite_loss_aborts(cfg2):
    traj = _sinusoid(6)
    bad = Trajectory(traj.observations, np.full_like(traj.actions, np.inf), "bad")
    with pytest.raises(NumericalError) as info, np.errstate(all="ignore"):
        train_epoch([bad], TrainerState.fresh(init_params(cfg2)), TrainConfig(batch_size=1))
    assert info.value.state.epoch == 0


def test_detach_boundary_check(cfg2, rng):
    params = init_params(cfg2, 4)
    obs = rng.normal(size=(2, 10, cfg2.d_obs))
    act = rng.normal(size=(2, 10, 2))
    mask = np.ones((2, 10))
    mask[1, 8:] = 0
    report = detach_boundary_check(params, obs, act, mask, TrainConfig(update_period=5))
    assert report["passed"]
    assert report["probe_grad_detached"] == 0.0
    assert report["probe_grad_without_detach"] > 0.0
