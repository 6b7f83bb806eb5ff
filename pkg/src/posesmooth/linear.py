"""Linear multi-view smoother: PCA initialization, automatic smoothing
selection, and posterior-predictive outputs.

All 2V pixel coordinates of one keypoint are modeled as a linear map of a
low-dimensional latent performing a random walk; observation noise per frame
comes from the ensemble variance.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .ensembles import EnsembleSummary
from .errors import DataError, InsufficientLowVarianceFrames
from .kalman import LGSSM, kalman_smooth, loglik_function, maximize_loglik_log_s

BASE_COV_JITTER = 1e-8
INITIAL_STATE_VAR = 1e2
DEFAULT_QUANTILE = 0.5


@dataclass(frozen=True)
class LinearObsModel:
    """PCA-derived observation model for one keypoint."""

    loading: np.ndarray          # W, (2V, d), orthonormal columns at init
    offset: np.ndarray           # mu_x, (2V,)
    base_cov: np.ndarray         # E, (d, d); dynamics noise is s * E
    smoothing: float             # s
    latent_dim: int
    initial_mean: np.ndarray     # (d,)
    initial_cov: np.ndarray      # (d, d)
    explained_variance: float    # PCA variance ratio captured by d components

    @property
    def n_coords(self) -> int:
        return self.loading.shape[0]


@dataclass(frozen=True)
class SmoothedTrack:
    """Smoothed per-view means with posterior predictive variances."""

    means: np.ndarray            # (T, 2V) pixels
    pred_vars: np.ndarray        # (T, 2V) pixels^2
    latent_means: np.ndarray     # (T, d)
    latent_covs: np.ndarray      # (T, d, d)
    loglik: float
    s_selected: float


def variance_explained_curve(coords: np.ndarray) -> np.ndarray:
    """Cumulative PCA variance-explained ratio for d = 1..n_coords."""
    X = np.asarray(coords, dtype=float)
    Xc = X - X.mean(axis=0)
    sv = np.linalg.svd(Xc, compute_uv=False)
    power = sv**2
    total = power.sum()
    if total == 0:
        return np.ones(X.shape[1])
    curve = np.cumsum(power) / total
    return np.pad(curve, (0, X.shape[1] - len(curve)), constant_values=1.0)


def choose_latent_dim(summary: EnsembleSummary, target: float = 0.99,
                      quantile: float = DEFAULT_QUANTILE) -> int:
    """Smallest latent dimension whose PCA variance explained >= target,
    computed on the low-variance frame subset used by fit_params."""
    keep = _low_variance_mask(summary, quantile)
    curve = variance_explained_curve(summary.median[keep])
    hits = np.nonzero(curve >= target)[0]
    return int(hits[0]) + 1 if hits.size else len(curve)


def _low_variance_mask(summary: EnsembleSummary, quantile: float) -> np.ndarray:
    if not 0 < quantile <= 1:
        raise DataError(f"quantile must lie in (0, 1], got {quantile}")
    per_frame = summary.variance.max(axis=1)
    return per_frame <= np.quantile(per_frame, quantile)


def fit_params(summary: EnsembleSummary, latent_dim: int,
               quantile: float = DEFAULT_QUANTILE) -> LinearObsModel:
    """Fit the observation model from low-ensemble-variance frames.

    PCA on the frames whose max per-frame ensemble variance lies below the
    ``quantile`` quantile gives the loading matrix and offset; the base
    dynamics covariance is the covariance of first differences of the PCA
    projections of all frames, so the initial smoothing scale is 1.
    """
    X = summary.median
    T, n = X.shape
    if latent_dim < 1 or latent_dim > n:
        raise DataError(f"latent_dim must be in [1, {n}], got {latent_dim}")
    if T < latent_dim + 2:
        raise DataError(f"need T >= d + 2 frames, got T={T}, d={latent_dim}")

    keep = _low_variance_mask(summary, quantile)
    if keep.sum() < latent_dim + 2:
        raise InsufficientLowVarianceFrames(
            f"only {int(keep.sum())} frames below the {quantile} variance "
            f"quantile; need >= {latent_dim + 2}"
        )

    mu = X[keep].mean(axis=0)
    Xc = X[keep] - mu
    _, sv, Vt = np.linalg.svd(Xc, full_matrices=False)
    W = Vt[:latent_dim].T
    power = sv**2
    explained = float(power[:latent_dim].sum() / power.sum()) if power.sum() > 0 else 1.0

    Z = (X - mu) @ W
    if T >= 3:
        E = np.atleast_2d(np.cov(np.diff(Z, axis=0), rowvar=False))
    else:
        E = np.eye(latent_dim)
    E = E + BASE_COV_JITTER * np.eye(latent_dim)

    return LinearObsModel(
        loading=W,
        offset=mu,
        base_cov=E,
        smoothing=1.0,
        latent_dim=latent_dim,
        initial_mean=Z[0],
        initial_cov=INITIAL_STATE_VAR * np.eye(latent_dim),
        explained_variance=explained,
    )


def _as_lgssm(model: LinearObsModel, obs_var: np.ndarray, s: float) -> LGSSM:
    return LGSSM(
        state_dim=model.latent_dim,
        initial_mean=model.initial_mean,
        initial_cov=model.initial_cov,
        dynamics_cov=s * model.base_cov,
        obs_matrix=model.loading,
        obs_offset=model.offset,
        obs_var=obs_var,
    )


def optimize_smoothing(model: LinearObsModel, summary: EnsembleSummary,
                       obs_var: np.ndarray | None = None,
                       learning_rate: float = 0.25, max_iter: int = 100,
                       tol: float = 1e-3) -> float:
    """Maximize the marginal log-likelihood over the smoothing scale.

    Adam ascent on log s starting from the model's current s; returns the
    best evaluated s (so its log-likelihood is >= the starting point's).
    """
    if obs_var is None:
        obs_var = summary.variance
    f = loglik_function(_as_lgssm(model, obs_var, 1.0), summary.median)
    s_best, _, _ = maximize_loglik_log_s(
        f, model.smoothing, learning_rate=learning_rate,
        max_iter=max_iter, tol=tol,
    )
    return s_best


def smooth(model: LinearObsModel, summary: EnsembleSummary,
           obs_var: np.ndarray | None = None) -> SmoothedTrack:
    """Run the Kalman smoother and map the latent posterior back to pixels.

    ``obs_var`` overrides the summary's ensemble variance (e.g. after
    inflation).  Posterior predictive variance per coordinate is
    diag(W P W^T) + D_t.
    """
    if obs_var is None:
        obs_var = summary.variance
    obs_var = np.asarray(obs_var, dtype=float)
    track = kalman_smooth(_as_lgssm(model, obs_var, model.smoothing),
                          summary.median)
    W = model.loading
    means = track.smoothed_means @ W.T + model.offset
    proj_var = np.einsum("ri,tij,rj->tr", W, track.smoothed_covs, W)
    return SmoothedTrack(
        means=means,
        pred_vars=proj_var + obs_var,
        latent_means=track.smoothed_means,
        latent_covs=track.smoothed_covs,
        loglik=track.log_likelihood,
        s_selected=model.smoothing,
    )


def fit_and_smooth(summary: EnsembleSummary, latent_dim: int,
                   quantile: float = DEFAULT_QUANTILE,
                   obs_var: np.ndarray | None = None,
                   optimize: bool = True) -> tuple[SmoothedTrack, LinearObsModel]:
    """Convenience wrapper: fit, optionally select s, then smooth."""
    model = fit_params(summary, latent_dim, quantile)
    if optimize:
        model = replace(model, smoothing=optimize_smoothing(model, summary, obs_var))
    return smooth(model, summary, obs_var), model
