"""Linear-Gaussian and extended Kalman filtering / RTS smoothing.

The latent dynamics are a random walk: z_t ~ N(z_{t-1}, Q) with Q = s * E,
where s is the scalar smoothing parameter.  Observations carry per-step
diagonal noise; NaN coordinates are missing and contribute neither to the
update nor to the marginal log-likelihood.

Two evaluation paths exist for the linear model:

* ``kalman_smooth`` - the exact sequential filter/smoother (Joseph-form
  updates, explicit symmetrization).  This is the reference path and the one
  producing posterior tracks.
* ``loglik_function`` - a fast log-likelihood-only path that assembles the
  banded posterior precision of the whole latent trajectory and evaluates
  the Gaussian marginal likelihood through one banded Cholesky per call.
  It agrees with the sequential filter to ~1e-10 and is what the smoothing
  parameter optimizer calls repeatedly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cho_solve_banded, cholesky_banded

from .errors import JacobianFailure, NumericalError, NumericalFailure

INNOVATION_JITTER = 1e-9
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class LGSSM:
    """Random-walk linear-Gaussian state-space model.

    ``obs_var`` is the diagonal of the per-step observation covariance,
    shape (T, n) or (n,) if constant.
    """

    state_dim: int
    initial_mean: np.ndarray        # (d,)
    initial_cov: np.ndarray         # (d, d)
    dynamics_cov: np.ndarray        # (d, d), Q = s * E
    obs_matrix: np.ndarray          # (n, d)
    obs_offset: np.ndarray          # (n,)
    obs_var: np.ndarray             # (T, n) or (n,)

    def __post_init__(self):
        for name in ("initial_mean", "initial_cov", "dynamics_cov",
                     "obs_matrix", "obs_offset", "obs_var"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))


@dataclass(frozen=True)
class NLSSM:
    """As LGSSM but with a differentiable observation map instead of a matrix.

    ``obs_map(z) -> (n,)`` may return NaN rows to mask a coordinate at that
    step (e.g. a view the point fell behind); ``obs_jacobian`` must return
    NaN on exactly the same rows.  If ``obs_jacobian`` is None a central
    finite-difference fallback is used.
    """

    state_dim: int
    obs_dim: int
    initial_mean: np.ndarray
    initial_cov: np.ndarray
    dynamics_cov: np.ndarray
    obs_map: Callable[[np.ndarray], np.ndarray]
    obs_jacobian: Callable[[np.ndarray], np.ndarray] | None
    obs_var: np.ndarray

    def __post_init__(self):
        for name in ("initial_mean", "initial_cov", "dynamics_cov", "obs_var"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))


@dataclass(frozen=True)
class PosteriorTrack:
    """Filtered and RTS-smoothed posterior over the latent trajectory."""

    filtered_means: np.ndarray      # (T, d)
    filtered_covs: np.ndarray       # (T, d, d)
    smoothed_means: np.ndarray      # (T, d)
    smoothed_covs: np.ndarray       # (T, d, d)
    log_likelihood: float


def fd_jacobian(h: Callable, z: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian of h at z.

    Raises JacobianFailure if the result contains non-finite entries.
    """
    z = np.asarray(z, dtype=float)
    cols = []
    for i in range(z.size):
        dz = np.zeros_like(z)
        dz[i] = step
        cols.append((np.asarray(h(z + dz)) - np.asarray(h(z - dz))) / (2.0 * step))
    J = np.stack(cols, axis=1)
    if not np.all(np.isfinite(J)):
        raise JacobianFailure("finite-difference Jacobian has non-finite entries")
    return J


def _expand_obs_var(obs_var: np.ndarray, T: int, n: int) -> np.ndarray:
    v = np.asarray(obs_var, dtype=float)
    if v.ndim == 1:
        v = np.broadcast_to(v, (T, n))
    if v.shape != (T, n):
        raise NumericalError(f"obs_var shape {v.shape} does not match (T={T}, n={n})")
    return v


def _chol_with_jitter(S: np.ndarray):
    try:
        return cho_factor(S, lower=True)
    except np.linalg.LinAlgError:
        pass
    S = S + INNOVATION_JITTER * np.eye(S.shape[0])
    try:
        return cho_factor(S, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(
            "innovation covariance not invertible after jitter"
        ) from exc


def _filter_smooth(m0, P0, Q, obs, obs_var, predict_obs) -> PosteriorTrack:
    """Shared forward filter + RTS backward pass.

    ``predict_obs(t, m_pred) -> (yhat, H)`` supplies the predicted
    observation and its Jacobian at the predicted mean; the linear and
    extended smoothers differ only in this callable.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    T, n = obs.shape
    d = m0.size
    obs_var = _expand_obs_var(obs_var, T, n)
    I = np.eye(d)

    fm = np.empty((T, d))
    fP = np.empty((T, d, d))
    pm = np.empty((T, d))
    pP = np.empty((T, d, d))
    loglik = 0.0

    m, P = m0.copy(), P0.copy()
    for t in range(T):
        if t > 0:
            P = P + Q
        pm[t], pP[t] = m, P

        yhat, H = predict_obs(t, m)
        row_ok = np.isfinite(yhat) & np.all(np.isfinite(H), axis=1)
        mask = np.isfinite(obs[t]) & row_ok
        if np.any(np.isfinite(obs[t]) & np.isfinite(yhat) & ~row_ok):
            raise JacobianFailure(
                f"non-finite Jacobian rows for finite observations at step {t}"
            )
        if np.any(mask):
            Hm = H[mask]
            r = obs_var[t, mask]
            v = obs[t, mask] - yhat[mask]
            PHt = P @ Hm.T
            S = Hm @ PHt
            S[np.diag_indices_from(S)] += r
            Sf = _chol_with_jitter(S)
            K = cho_solve(Sf, PHt.T).T
            m = m + K @ v
            A = I - K @ Hm
            P = A @ P @ A.T + (K * r) @ K.T
            P = 0.5 * (P + P.T)
            alpha = cho_solve(Sf, v)
            logdet = 2.0 * np.log(np.diag(Sf[0])).sum()
            loglik += -0.5 * (mask.sum() * LOG_2PI + logdet + v @ alpha)
        fm[t], fP[t] = m, P

    sm = np.empty_like(fm)
    sP = np.empty_like(fP)
    sm[-1], sP[-1] = fm[-1], fP[-1]
    for t in range(T - 2, -1, -1):
        # F = I, so the smoother gain is P_filt @ inv(P_pred_next)
        C = np.linalg.solve(pP[t + 1].T, fP[t].T).T
        sm[t] = fm[t] + C @ (sm[t + 1] - pm[t + 1])
        Pt = fP[t] + C @ (sP[t + 1] - pP[t + 1]) @ C.T
        sP[t] = 0.5 * (Pt + Pt.T)

    return PosteriorTrack(
        filtered_means=fm, filtered_covs=fP,
        smoothed_means=sm, smoothed_covs=sP,
        log_likelihood=float(loglik),
    )


def kalman_smooth(model: LGSSM, obs) -> PosteriorTrack:
    """Exact Kalman filter + RTS smoother for the linear model."""
    W = model.obs_matrix
    mu = model.obs_offset

    def predict_obs(t, m):
        return W @ m + mu, W

    return _filter_smooth(model.initial_mean, model.initial_cov,
                          model.dynamics_cov, obs, model.obs_var, predict_obs)


def extended_kalman_smooth(model: NLSSM, obs) -> PosteriorTrack:
    """First-order EKF forward pass (linearized at the predicted mean each
    step) followed by RTS smoothing on the linearized model.  For an affine
    observation map this reduces exactly to ``kalman_smooth``."""
    jac = model.obs_jacobian
    if jac is None:
        jac = lambda z: fd_jacobian(model.obs_map, z)

    def predict_obs(t, m):
        return np.asarray(model.obs_map(m), dtype=float), \
            np.asarray(jac(m), dtype=float)

    return _filter_smooth(model.initial_mean, model.initial_cov,
                          model.dynamics_cov, obs, model.obs_var, predict_obs)


# ---------------------------------------------------------------------------
# fast marginal log-likelihood (linear model, banded information form)
#
# For any z*, log p(x) = log p(z*) + log p(x | z*) - log p(z* | x).  Taking
# z* as the posterior mean and exploiting that the posterior precision J of
# the stacked trajectory is block-tridiagonal gives an exact evaluation with
# one banded Cholesky factorization.


class _BandedLoglik:
    """Reusable marginal-log-likelihood evaluator over the smoothing scale.

    Observation-side quantities are assembled once; each call for a new s
    only rescales the prior blocks, refactorizes, and re-evaluates the
    Gaussian densities.
    """

    def __init__(self, model: LGSSM, obs):
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        T, n = obs.shape
        d = model.state_dim
        W = model.obs_matrix
        mu = model.obs_offset
        var = _expand_obs_var(model.obs_var, T, n)

        mask = np.isfinite(obs)
        iv = np.where(mask, 1.0 / var, 0.0)            # zero precision = missing
        resid0 = np.where(mask, obs - mu, 0.0)

        self.T, self.d, self.n = T, d, n
        self.W, self.mu = W, mu
        self.mask, self.iv = mask, iv
        self.obs = np.where(mask, obs, 0.0)
        # obs precision blocks and information vectors, per step
        self.U = np.einsum("ri,tr,rj->tij", W, iv, W)  # (T, d, d)
        self.b_obs = (resid0 * iv) @ W                 # (T, d)
        self.n_obs = int(mask.sum())
        self.logdet_D = float(-np.log(iv[mask]).sum())
        self.m0 = model.initial_mean
        self.P0i = np.linalg.inv(model.initial_cov)
        _, self.logdet_P0 = np.linalg.slogdet(model.initial_cov)
        self.E = model.dynamics_cov
        self.Ei = np.linalg.inv(self.E)
        _, self.logdet_E = np.linalg.slogdet(self.E)

    def __call__(self, s: float) -> float:
        T, d = self.T, self.d
        Qi = self.Ei / s
        logdet_Q = self.logdet_E + d * np.log(s)

        Adiag = self.U.copy()
        Adiag[0] += self.P0i
        if T > 1:
            Adiag[:-1] += Qi
            Adiag[1:] += Qi
        b = self.b_obs.copy()
        b[0] += self.P0i @ self.m0

        # lower-banded storage of the block-tridiagonal precision
        N = T * d
        ab = np.zeros((2 * d, N))
        for i in range(d):
            for j in range(d):
                if i >= j:
                    ab[i - j, j::d] = Adiag[:, i, j]
                if T > 1:
                    ab[d + i - j, j:(T - 1) * d:d] = -Qi[i, j]
        try:
            cf = cholesky_banded(ab, lower=True)
        except np.linalg.LinAlgError:
            ab[0] += INNOVATION_JITTER
            try:
                cf = cholesky_banded(ab, lower=True)
            except np.linalg.LinAlgError as exc:
                raise NumericalFailure(
                    "posterior precision not factorizable after jitter"
                ) from exc
        z = cho_solve_banded((cf, True), b.ravel()).reshape(T, d)
        logdet_J = 2.0 * np.log(cf[0]).sum()

        e0 = z[0] - self.m0
        lp_prior = -0.5 * (e0 @ self.P0i @ e0 + d * LOG_2PI + self.logdet_P0)
        if T > 1:
            dz = np.diff(z, axis=0)
            quad = np.einsum("ti,ij,tj->", dz, Qi, dz)
            lp_prior += -0.5 * (quad + (T - 1) * (d * LOG_2PI + logdet_Q))

        resid = self.obs - (z @ self.W.T + self.mu)
        quad_obs = float((resid * resid * self.iv).sum())
        lp_obs = -0.5 * (quad_obs + self.n_obs * LOG_2PI + self.logdet_D)

        return float(lp_prior + lp_obs + 0.5 * N * LOG_2PI - 0.5 * logdet_J)


def marginal_loglik(model: LGSSM, obs) -> float:
    """Exact Gaussian marginal log-likelihood of the observed entries."""
    return _BandedLoglik(model, obs)(1.0)


def loglik_function(model, obs) -> Callable[[float], float]:
    """Return ``f(s) -> log p(x)`` with dynamics covariance s * E, where E is
    the model's ``dynamics_cov``.  Linear models get the banded fast path;
    nonlinear models run a forward-only EKF per call."""
    if isinstance(model, LGSSM):
        return _BandedLoglik(model, obs)

    def f(s: float) -> float:
        scaled = replace(model, dynamics_cov=s * model.dynamics_cov)
        return extended_kalman_smooth(scaled, obs).log_likelihood

    return f


FD_LOG_STEP = 1e-4


def marginal_loglik_grad_s(model, obs, s: float):
    """Log-likelihood at Q = s * E and its derivative w.r.t. log s, the
    latter by central finite differences with step FD_LOG_STEP in log s."""
    if s <= 0:
        raise NumericalError(f"smoothing scale must be positive, got {s}")
    f = loglik_function(model, obs)
    lam = np.log(s)
    ll = f(s)
    lp = f(np.exp(lam + FD_LOG_STEP))
    lm = f(np.exp(lam - FD_LOG_STEP))
    return ll, (lp - lm) / (2.0 * FD_LOG_STEP)


# ---------------------------------------------------------------------------
# smoothing-parameter selection


@dataclass
class AscentTrace:
    """Bookkeeping from the Adam ascent over log s."""

    s_path: list = field(default_factory=list)
    loglik_path: list = field(default_factory=list)
    n_iterations: int = 0
    converged: bool = False


def maximize_loglik_log_s(loglik_fn: Callable[[float], float], s_init: float,
                          learning_rate: float = 0.25, max_iter: int = 100,
                          tol: float = 1e-3, fd_step: float = FD_LOG_STEP):
    """Adam ascent on log s with finite-difference gradients.

    Every log-likelihood evaluation is exact, and the returned s is the best
    evaluated point (including s_init), so loglik(s*) >= loglik(s_init) holds
    by construction.  Stops when the proposed |step in log s| drops below
    ``tol`` or after ``max_iter`` iterations.

    Returns (s_best, loglik_best, trace).
    """
    trace = AscentTrace()

    def record(s, ll):
        trace.s_path.append(float(s))
        trace.loglik_path.append(float(ll))
        return ll

    lam = float(np.log(s_init))
    best_s, best_ll = float(s_init), record(s_init, loglik_fn(float(s_init)))

    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m1 = 0.0
    m2 = 0.0
    for it in range(1, max_iter + 1):
        sp, sm = float(np.exp(lam + fd_step)), float(np.exp(lam - fd_step))
        lp = record(sp, loglik_fn(sp))
        lm = record(sm, loglik_fn(sm))
        for s_cand, ll_cand in ((sp, lp), (sm, lm)):
            if ll_cand > best_ll:
                best_s, best_ll = s_cand, ll_cand
        grad = (lp - lm) / (2.0 * fd_step)

        m1 = beta1 * m1 + (1.0 - beta1) * grad
        m2 = beta2 * m2 + (1.0 - beta2) * grad * grad
        step = learning_rate * (m1 / (1.0 - beta1**it)) / (
            np.sqrt(m2 / (1.0 - beta2**it)) + eps)
        lam += step
        trace.n_iterations = it
        if abs(step) < tol:
            trace.converged = True
            break

    s_fin = float(np.exp(lam))
    ll_fin = record(s_fin, loglik_fn(s_fin))
    if ll_fin > best_ll:
        best_s, best_ll = s_fin, ll_fin
    return best_s, float(best_ll), trace
