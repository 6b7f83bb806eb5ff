"""Calibrated-camera smoother: the latent is the 3D world position and the
observation map stacks each camera's distortion-aware projection.

Views a point falls behind are masked for that step (NaN rows from the
observation map) instead of aborting the smoother.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .cameras import Rig, project_points, projection_jacobian_points, triangulate_median
from .ensembles import EnsembleSummary
from .errors import InsufficientViews
from .kalman import NLSSM, extended_kalman_smooth, loglik_function, maximize_loglik_log_s
from .linear import BASE_COV_JITTER, INITIAL_STATE_VAR, SmoothedTrack


@dataclass(frozen=True)
class NonlinearObsModel:
    """Camera-projection observation model for one keypoint."""

    rig: Rig
    base_cov: np.ndarray         # E, (3, 3)
    smoothing: float             # s
    init_track: np.ndarray       # (T, 3) triangulated initialization
    initial_mean: np.ndarray     # (3,)
    initial_cov: np.ndarray      # (3, 3)


def project_track(rig: Rig, points) -> np.ndarray:
    """Stack per-view projections of (T, 3) points into (T, 2V); rows a
    point falls behind come back NaN."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    cols = [project_points(cam, pts) for cam in rig.cameras]
    return np.concatenate(cols, axis=1)


def track_jacobians(rig: Rig, points) -> np.ndarray:
    """(T, 2V, 3) stacked projection Jacobians; NaN where masked."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    blocks = [projection_jacobian_points(cam, pts) for cam in rig.cameras]
    return np.concatenate(blocks, axis=1)


def build_obs_map(rig: Rig):
    """Observation map h: R^3 -> R^{2V} and its analytic Jacobian, stacking
    views in rig order.  Behind-camera views yield NaN rows (masked)."""

    def h(z):
        return project_track(rig, np.asarray(z).reshape(1, 3))[0]

    def jac(z):
        return track_jacobians(rig, np.asarray(z).reshape(1, 3))[0]

    return h, jac


def triangulated_track(rig: Rig, coords: np.ndarray) -> np.ndarray:
    """Median-of-pairs triangulation per frame with gap filling.

    Frames without two valid views are forward-filled from the previous
    valid frame; a missing frame 0 falls back to the component-wise median
    of all valid frames.  Raises InsufficientViews if no frame triangulates.
    """
    coords = np.asarray(coords, dtype=float)
    T = coords.shape[0]
    V = coords.shape[1] // 2
    track = np.full((T, 3), np.nan)
    for t in range(T):
        pts = coords[t].reshape(V, 2)
        try:
            track[t] = triangulate_median(rig, pts)
        except Exception:
            continue
    valid = np.all(np.isfinite(track), axis=1)
    if not valid.any():
        raise InsufficientViews("no frame could be triangulated")
    if not valid[0]:
        track[0] = np.median(track[valid], axis=0)
        valid[0] = True
    for t in range(1, T):
        if not valid[t]:
            track[t] = track[t - 1]
    return track


def fit_nonlinear(rig: Rig, summary: EnsembleSummary) -> NonlinearObsModel:
    """Initialize the 3D model from triangulation of the ensemble medians."""
    init = triangulated_track(rig, summary.median)
    if len(init) >= 3:
        E = np.atleast_2d(np.cov(np.diff(init, axis=0), rowvar=False))
    else:
        E = np.eye(3)
    E = E + BASE_COV_JITTER * np.eye(3)
    return NonlinearObsModel(
        rig=rig,
        base_cov=E,
        smoothing=1.0,
        init_track=init,
        initial_mean=init[0],
        initial_cov=INITIAL_STATE_VAR * np.eye(3),
    )


def _as_nlssm(model: NonlinearObsModel, obs_var: np.ndarray, s: float) -> NLSSM:
    h, jac = build_obs_map(model.rig)
    return NLSSM(
        state_dim=3,
        obs_dim=2 * model.rig.n_views,
        initial_mean=model.initial_mean,
        initial_cov=model.initial_cov,
        dynamics_cov=s * model.base_cov,
        obs_map=h,
        obs_jacobian=jac,
        obs_var=obs_var,
    )


def optimize_smoothing_nonlinear(model: NonlinearObsModel,
                                 summary: EnsembleSummary,
                                 obs_var: np.ndarray | None = None,
                                 learning_rate: float = 0.25,
                                 max_iter: int = 100,
                                 tol: float = 1e-3) -> float:
    """Same ascent contract as the linear path, evaluated through the
    extended smoother."""
    if obs_var is None:
        obs_var = summary.variance
    f = loglik_function(_as_nlssm(model, obs_var, 1.0), summary.median)
    s_best, _, _ = maximize_loglik_log_s(
        f, model.smoothing, learning_rate=learning_rate,
        max_iter=max_iter, tol=tol,
    )
    return s_best


def smooth_nonlinear(model: NonlinearObsModel, summary: EnsembleSummary,
                     obs_var: np.ndarray | None = None) -> SmoothedTrack:
    """Extended smoothing; per-view means are exact projections of the
    smoothed 3D track and pred_vars = diag(J P J^T) + D_t."""
    if obs_var is None:
        obs_var = summary.variance
    obs_var = np.asarray(obs_var, dtype=float)
    track = extended_kalman_smooth(_as_nlssm(model, obs_var, model.smoothing),
                                   summary.median)
    means = project_track(model.rig, track.smoothed_means)
    J = track_jacobians(model.rig, track.smoothed_means)
    proj_var = np.einsum("tri,tij,trj->tr", J, track.smoothed_covs, J)
    return SmoothedTrack(
        means=means,
        pred_vars=proj_var + obs_var,
        latent_means=track.smoothed_means,
        latent_covs=track.smoothed_covs,
        loglik=track.log_likelihood,
        s_selected=model.smoothing,
    )


def fit_and_smooth(rig: Rig, summary: EnsembleSummary,
                   obs_var: np.ndarray | None = None,
                   optimize: bool = True) -> tuple[SmoothedTrack, NonlinearObsModel]:
    """Triangulation-initialized fit, optional s selection, then smoothing."""
    if rig.n_views < 2:
        raise InsufficientViews("nonlinear smoothing needs >= 2 views")
    model = fit_nonlinear(rig, summary)
    if optimize:
        s = optimize_smoothing_nonlinear(model, summary, obs_var)
        model = replace(model, smoothing=s)
    return smooth_nonlinear(model, summary, obs_var), model
