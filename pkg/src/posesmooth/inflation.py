"""Cross-view consistency screening and iterative variance inflation.

For each (frame, view) the observation is compared against what the other
views predict for it under an uninformative latent prior; the squared
Mahalanobis distance through the posterior predictive covariance
Q^v = D^v + W^v B (W^v)^T is compared to a threshold.  Breaching views get
their ensemble variance doubled and the distances recomputed (using the
updated variances everywhere) until every distance falls below the
threshold or the doubling cap is hit.

With exactly two views a disagreement cannot be attributed to either side,
so the posterior uses both views and a breach inflates both views jointly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cameras import Rig
from .ensembles import EnsembleSummary
from .errors import DataError, RankDeficient
from .linear import LinearObsModel
from .nonlinear import NonlinearObsModel, project_track, track_jacobians

DEFAULT_THRESHOLD = 5.0
DEFAULT_FACTOR = 2.0
DEFAULT_MAX_DOUBLINGS = 30
_RANK_TOL = 1e-10
_GN_ITERS = 15
_GN_STEP_TOL = 1e-10


@dataclass(frozen=True)
class InflationReport:
    """Outcome of the inflation sweep for one keypoint."""

    inflated_vars: np.ndarray    # (T, 2V) pixels^2
    n_doublings: np.ndarray      # (T, V) ints
    final_distance: np.ndarray   # (T, V) squared Mahalanobis values
    threshold: float


# ---------------------------------------------------------------------------
# scalar surfaces (one frame at a time)


def latent_posterior_uninformative(W, obs_var, x, offset):
    """Posterior (mean, cov) of the latent given one frame's observations
    under a flat latent prior: B = (W^T D^-1 W)^-1.

    Rows whose observation is missing (NaN) are dropped first.  Raises
    RankDeficient if the remaining rows do not determine the latent.
    """
    W = np.asarray(W, dtype=float)
    x = np.asarray(x, dtype=float)
    offset = np.asarray(offset, dtype=float)
    var = np.broadcast_to(np.asarray(obs_var, dtype=float), x.shape)
    d = W.shape[1]
    keep = np.isfinite(x)
    Wk = W[keep]
    if Wk.shape[0] < d or np.linalg.matrix_rank(Wk) < d:
        raise RankDeficient(
            f"{int(keep.sum())} observed rows do not determine a "
            f"{d}-dimensional latent"
        )
    iv = 1.0 / var[keep]
    A = (Wk * iv[:, None]).T @ Wk
    try:
        B = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        try:
            B = np.linalg.inv(A + _RANK_TOL * np.eye(d))
        except np.linalg.LinAlgError as exc:
            raise RankDeficient("latent precision singular after jitter") from exc
    mean = B @ (Wk.T @ (iv * (x[keep] - offset[keep])))
    return mean, B


def mahalanobis_view(W, obs_var, x, offset, view: int,
                     leave_one_out: bool = True) -> float:
    """Squared Mahalanobis distance of view ``view``'s observation from the
    posterior predictive distribution implied by the other views.

    With ``leave_one_out=False`` the latent posterior conditions on all
    views including the scored one (the only option with two views).
    """
    x = np.asarray(x, dtype=float)
    var = np.broadcast_to(np.asarray(obs_var, dtype=float), x.shape)
    rows = slice(2 * view, 2 * view + 2)
    xv = x[rows]
    if not np.all(np.isfinite(xv)):
        raise DataError(f"view {view} observation is missing")
    x_fit = x.copy()
    if leave_one_out:
        x_fit[rows] = np.nan
    mean, B = latent_posterior_uninformative(W, var, x_fit, offset)
    Wv = np.asarray(W, dtype=float)[rows]
    xhat = Wv @ mean + np.asarray(offset, dtype=float)[rows]
    Q = np.diag(var[rows]) + Wv @ B @ Wv.T
    r = xv - xhat
    return float(r @ np.linalg.solve(Q, r))


# ---------------------------------------------------------------------------
# vectorized internals


def _batched_solve_psd(A):
    """Inverse of (T, d, d) PSD matrices; NaN blocks where rank-deficient."""
    sv = np.linalg.svd(A, compute_uv=False)
    ok = (sv[:, 0] > 0) & (sv[:, -1] > _RANK_TOL * sv[:, 0])
    B = np.full_like(A, np.nan)
    if ok.any():
        B[ok] = np.linalg.inv(A[ok])
    return B, ok


def _distances_from_parts(x_v, var_v, xhat, Wv, B):
    """Squared Mahalanobis through Q = diag(var_v) + Wv B Wv^T, batched.

    ``Wv`` may be (2, d) shared or (T, 2, d) per-frame.
    """
    if Wv.ndim == 2:
        Q = np.einsum("ai,tij,bj->tab", Wv, B, Wv)
    else:
        Q = np.einsum("tai,tij,tbj->tab", Wv, B, Wv)
    Q[:, 0, 0] += var_v[:, 0]
    Q[:, 1, 1] += var_v[:, 1]
    r = x_v - xhat
    det = Q[:, 0, 0] * Q[:, 1, 1] - Q[:, 0, 1] * Q[:, 1, 0]
    with np.errstate(invalid="ignore", divide="ignore"):
        dist = (Q[:, 1, 1] * r[:, 0] ** 2
                - (Q[:, 0, 1] + Q[:, 1, 0]) * r[:, 0] * r[:, 1]
                + Q[:, 0, 0] * r[:, 1] ** 2) / det
        dist = np.where(det > 0, dist, np.nan)
    return dist


def _linear_distances(X, var, W, offset, view, leave_one_out):
    """Per-frame squared distances for one view under the linear model."""
    rows = slice(2 * view, 2 * view + 2)
    finite = np.isfinite(X)
    iv = np.where(finite, 1.0 / var, 0.0)
    if leave_one_out:
        iv = iv.copy()
        iv[:, rows] = 0.0
    resid = np.where(finite, X - offset, 0.0)
    A = np.einsum("ri,tr,rj->tij", W, iv, W)
    g = np.einsum("ri,tr->ti", W, iv * resid)
    B, ok = _batched_solve_psd(A)
    mz = np.einsum("tij,tj->ti", B, g)
    Wv = W[rows]
    xhat = mz @ Wv.T + offset[rows]
    dist = _distances_from_parts(X[:, rows], var[:, rows], xhat, Wv, B)
    view_ok = finite[:, rows].all(axis=1)
    return np.where(ok & view_ok, dist, np.nan)


def _gauss_newton_latents(rig: Rig, X, iv, z0):
    """Weighted nonlinear least-squares 3D estimates, batched over frames.

    Minimizes sum_r iv_r * (x_r - f_r(z))^2 by Gauss-Newton from z0; rows
    with iv == 0 are excluded.  Frames whose normal matrix is singular come
    back NaN.
    """
    z = np.asarray(z0, dtype=float).copy()
    alive = np.ones(len(z), dtype=bool)
    for _ in range(_GN_ITERS):
        yhat = project_track(rig, z)
        J = track_jacobians(rig, z)
        w = np.where(np.isfinite(yhat) & (iv > 0), iv, 0.0)
        r = np.where(w > 0, X - yhat, 0.0)
        Jw = np.where(w[:, :, None] > 0, J, 0.0)
        A = np.einsum("tri,tr,trj->tij", Jw, w, Jw)
        g = np.einsum("tri,tr->ti", Jw, w * r)
        B, ok = _batched_solve_psd(A)
        alive &= ok
        step = np.einsum("tij,tj->ti", B, g)
        step = np.where(alive[:, None], step, 0.0)
        z = z + step
        if np.nanmax(np.abs(step), initial=0.0) < _GN_STEP_TOL:
            break
    z[~alive] = np.nan
    return z


def _nonlinear_distances(rig: Rig, X, var, view, z_init, leave_one_out):
    """Per-frame squared distances for one view under the camera model."""
    V = rig.n_views
    rows = slice(2 * view, 2 * view + 2)
    finite = np.isfinite(X)
    iv = np.where(finite, 1.0 / var, 0.0)
    if leave_one_out:
        iv = iv.copy()
        iv[:, rows] = 0.0
    z = _gauss_newton_latents(rig, X, iv, z_init)
    yhat = project_track(rig, z)
    J = track_jacobians(rig, z)
    w = np.where(np.isfinite(yhat) & (iv > 0), iv, 0.0)
    Jw = np.where(w[:, :, None] > 0, J, 0.0)
    A = np.einsum("tri,tr,trj->tij", Jw, w, Jw)
    B, ok = _batched_solve_psd(A)
    Jv = J[:, rows, :]
    dist = _distances_from_parts(X[:, rows], var[:, rows], yhat[:, rows], Jv, B)
    view_ok = (finite[:, rows].all(axis=1)
               & np.isfinite(yhat[:, rows]).all(axis=1)
               & np.all(np.isfinite(z), axis=1))
    return np.where(ok & view_ok, dist, np.nan)


# ---------------------------------------------------------------------------
# inflation sweep


def inflate(summary: EnsembleSummary, model,
            threshold: float = DEFAULT_THRESHOLD,
            factor: float = DEFAULT_FACTOR,
            max_doublings: int = DEFAULT_MAX_DOUBLINGS,
            leave_one_out: bool = True) -> InflationReport:
    """Iteratively double variances of cross-view-inconsistent observations.

    ``model`` is a fitted LinearObsModel or NonlinearObsModel.  Views are
    swept in ascending index order within each pass; passes repeat per frame
    until no distance breaches the threshold (or the cap is reached).  The
    two-view case inflates both views on any breach.
    """
    if threshold <= 0:
        raise DataError(f"threshold must be positive, got {threshold}")
    X = summary.median
    var = summary.variance.copy()
    T = X.shape[0]
    V = summary.n_views

    if isinstance(model, LinearObsModel):
        def dist_fn(idx, view, loo):
            return _linear_distances(X[idx], var[idx], model.loading,
                                     model.offset, view, loo)
    elif isinstance(model, NonlinearObsModel):
        if model.rig.n_views != V:
            raise DataError("rig view count does not match the summary")

        def dist_fn(idx, view, loo):
            return _nonlinear_distances(model.rig, X[idx], var[idx], view,
                                        model.init_track[idx], loo)
    else:
        raise DataError(f"unsupported model type {type(model).__name__}")

    n_doublings = np.zeros((T, V), dtype=int)
    final_distance = np.full((T, V), np.nan)
    two_view = V == 2
    active = np.arange(T)

    while active.size:
        breached = np.zeros(active.size, dtype=bool)
        if two_view:
            d0 = dist_fn(active, 0, False)
            d1 = dist_fn(active, 1, False)
            final_distance[active, 0] = d0
            final_distance[active, 1] = d1
            can = (n_doublings[active] < max_doublings).all(axis=1)
            br = ((d0 > threshold) | (d1 > threshold)) & can
            rows = active[br]
            var[rows] *= factor
            n_doublings[rows] += 1
            breached = br
        else:
            for v in range(V):
                dv = dist_fn(active, v, leave_one_out)
                final_distance[active, v] = dv
                br = (dv > threshold) & (n_doublings[active, v] < max_doublings)
                rows = active[br]
                var[rows, 2 * v: 2 * v + 2] *= factor
                n_doublings[rows, v] += 1
                breached |= br
        active = active[breached]

    return InflationReport(
        inflated_vars=var,
        n_doublings=n_doublings,
        final_distance=final_distance,
        threshold=threshold,
    )
