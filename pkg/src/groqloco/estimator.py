"""scikit-learn style wrapper around the policy, trainer and rollout."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .model import ArchConfig, init_params, rollout
from .trainer import TrainConfig, train
from .validation import check_observation_streams, check_positive_int, check_trajectories


class GroqLocoPolicy(BaseEstimator):
    """Behaviour-cloning policy with the estimator interface.

    ``fit`` takes trajectories (or padded arrays ``X`` [n, N, d_obs] with
    ``y`` [n, N, d_act]); ``predict`` rolls the policy out from a fresh state
    over each observation stream; ``score`` is the negative mean absolute
    action error.
    """

    def __init__(self, d_emb=64, n_heads=4, window=100, mlp_hidden=256, mlp_depth=2,
                 epochs=100, batch_size=32, update_period=20, warmup_epochs=50, lr=1e-3,
                 clip_norm=None, delta=0.5, seed=0):
        self.d_emb = d_emb
        self.n_heads = n_heads
        self.window = window
        self.mlp_hidden = mlp_hidden
        self.mlp_depth = mlp_depth
        self.epochs = epochs
        self.batch_size = batch_size
        self.update_period = update_period
        self.warmup_epochs = warmup_epochs
        self.lr = lr
        self.clip_norm = clip_norm
        self.delta = delta
        self.seed = seed

    def _configs(self, d_obs, d_act):
        arch = ArchConfig(d_obs=d_obs, d_act=d_act, d_emb=self.d_emb, n_heads=self.n_heads,
                          window=self.window, mlp_hidden=self.mlp_hidden,
                          mlp_depth=self.mlp_depth)
        tc = TrainConfig(epochs=check_positive_int(self.epochs, "epochs", 0),
                         batch_size=self.batch_size, update_period=self.update_period,
                         warmup_epochs=self.warmup_epochs, lr=self.lr, seed=self.seed,
                         clip_norm=self.clip_norm, delta=self.delta)
        return arch, tc

    def fit(self, X, y=None, callback=None):
        trajs = check_trajectories(X, y)
        arch, tc = self._configs(trajs[0].d_obs, trajs[0].d_act)
        trajs = check_trajectories(trajs, d_obs=arch.d_obs, d_act=arch.d_act)
        self.loss_history_ = []

        def on_epoch(metrics):
            self.loss_history_.append(metrics["loss"])
            if callback is not None:
                callback(metrics)

        state = train(trajs, init_params(arch, self.seed), tc, on_epoch=on_epoch)
        self.params_ = state.params
        self.config_ = arch
        self.n_features_in_ = arch.d_obs
        self.n_outputs_ = arch.d_act
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        streams, single = check_observation_streams(X, self.n_features_in_)
        out = [rollout(s, self.params_) for s in streams]
        return out[0] if single else (np.stack(out) if len({len(s) for s in out}) == 1 else out)

    def score(self, X, y=None):
        check_is_fitted(self, "params_")
        trajs = check_trajectories(X, y, self.n_features_in_, self.n_outputs_)
        errors = [np.abs(rollout(t.observations, self.params_) - t.actions).mean()
                  for t in trajs]
        return -float(np.mean(errors))
