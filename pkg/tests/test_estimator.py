import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from groqloco.data import GaitSpec, generate_trajectory
from groqloco.errors import DimensionError, NumericalError, ValidationError
from groqloco.estimator import GroqLocoPolicy
from groqloco.validation import (
    check_array, check_observation_streams, check_positive_int, check_trajectories,
)

SMALL = dict(d_emb=8, n_heads=2, window=4, mlp_hidden=16, epochs=3, batch_size=2,
             update_period=4, warmup_epochs=1)


def _trajs():
    spec = GaitSpec(amplitude=[0.3, 0.2], phase=[0, 1], offset=[0, 0], frequency=1.0, dt=0.05)
    return [generate_trajectory(spec, 8, s) for s in range(3)]


def test_params_round_trip():
    est = GroqLocoPolicy(**SMALL)
    assert est.get_params()["d_emb"] == 8
    other = clone(est).set_params(lr=0.01)
    assert other.lr == 0.01 and est.lr == 1e-3


def test_fit_predict_score():
    trajs = _trajs()
    est = GroqLocoPolicy(**SMALL).fit(trajs)
    assert len(est.loss_history_) == 3 and est.n_features_in_ == trajs[0].d_obs
    pred = est.predict(trajs[0].observations)
    assert pred.shape == (8, 2)
    assert est.predict([t.observations for t in trajs]).shape == (3, 8, 2)
    assert est.score(trajs) < 0
    with pytest.raises(DimensionError):
        est.predict(np.zeros((5, 3)))


def test_fit_arrays_matches_trajectories():
    trajs = _trajs()
    X = np.stack([t.observations for t in trajs])
    y = np.stack([t.actions for t in trajs])
    a = GroqLocoPolicy(**SMALL).fit(X, y)
    b = GroqLocoPolicy(**SMALL).fit(trajs)
    assert a.params_.equal(b.params_)


def test_unfitted():
    with pytest.raises(NotFittedError):
        GroqLocoPolicy().predict(np.zeros((3, 57)))


def test_validation_helpers():
    assert check_positive_int(3, "n") == 3
    for bad in (0, True, 2.5):
        with pytest.raises(ValidationError):
            check_positive_int(bad, "n")
    with pytest.raises(NumericalError):
        check_array([[np.nan]], 2)
    with pytest.raises(DimensionError):
        check_array(np.zeros(3), 2)
    with pytest.raises(ValidationError):
        check_trajectories(np.zeros((2, 4, 3)))
    with pytest.raises(DimensionError):
        check_trajectories(np.zeros((2, 4, 3)), np.zeros((2, 5, 1)))
    streams, single = check_observation_streams(np.zeros((4, 3)), 3)
    assert single and streams[0].shape == (4, 3)
