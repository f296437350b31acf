"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numpy as np

from .data import Dataset, Trajectory
from .errors import DimensionError, NumericalError, ValidationError


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < minimum:
        raise ValidationError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_array(x, ndim, name="X", width=None, finite=True):
    """``x`` as a float64 array of ``ndim`` dimensions with an optional last width."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if width is not None and arr.shape[-1] != width:
        raise DimensionError(f"{name} needs width {width}, got {arr.shape[-1]}")
    if finite and not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains NaN or infinite values")
    return arr


def check_trajectories(X, y=None, d_obs=None, d_act=None):
    """Normalise estimator input to a list of :class:`Trajectory`.

    Accepts a :class:`Dataset`, a list of trajectories, or arrays
    ``X`` [n, N, d_obs] / [N, d_obs] with matching ``y``.
    """
    if isinstance(X, Dataset):
        trajs = list(X.trajectories)
    elif isinstance(X, Trajectory):
        trajs = [X]
    elif isinstance(X, (list, tuple)) and X and all(isinstance(t, Trajectory) for t in X):
        trajs = list(X)
    else:
        if y is None:
            raise ValidationError("array input needs target actions y")
        obs = np.asarray(X, dtype=np.float64)
        act = np.asarray(y, dtype=np.float64)
        if obs.ndim == 2:
            obs, act = obs[None], act[None]
        obs = check_array(obs, 3, "X")
        act = check_array(act, 3, "y")
        if obs.shape[:2] != act.shape[:2]:
            raise DimensionError(f"X {obs.shape} and y {act.shape} disagree")
        trajs = [Trajectory(o, a, "unknown") for o, a in zip(obs, act)]
    if not trajs:
        raise ValidationError("no trajectories given")
    for t in trajs:
        if d_obs is not None and t.d_obs != d_obs:
            raise DimensionError(f"observation width {t.d_obs}, expected {d_obs}")
        if d_act is not None and t.d_act != d_act:
            raise DimensionError(f"action width {t.d_act}, expected {d_act}")
    return trajs


def check_observation_streams(X, width):
    """One stream [N, width] or several; returns (list of arrays, was_single)."""
    if isinstance(X, Trajectory):
        return [check_array(X.observations, 2, "X", width)], True
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], Trajectory):
        return [check_array(t.observations, 2, "X", width) for t in X], False
    if isinstance(X, (list, tuple)):
        return [check_array(x, 2, "X", width) for x in X], False
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        return [check_array(arr, 2, "X", width)], True
    return list(check_array(arr, 3, "X", width)), False
