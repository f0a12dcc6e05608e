"""Bayesian filters over a generic state-space model.

The hidden state ``z`` evolves as ``z_t = f(z_{t-1}, window_t) + q_t`` and
is observed as ``x_t = h_inv(z_t) + r_t``. Three estimators are provided:

* :func:`kf_step` -- the exact linear-Gaussian Kalman filter, used as the
  reference for the Monte Carlo filters,
* :func:`enkf_step` -- stochastic ensemble Kalman filter,
* :func:`pf_step` -- SIR particle filter with RBF likelihood, systematic
  resampling and prior rejuvenation.

Both Monte Carlo filters keep their members in hidden space and report the
predicted observation distribution used for anomaly scoring.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional, Protocol

import numpy as np

from .errors import DataError, NumericalError
from .neural import NeuralModel, NoiseEstimate, decode, encode, lstm_summary, transition_from_summary
from .timeseries import Dataset, window_array

log = logging.getLogger(__name__)

JITTER = 1e-9


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

class SystemModel(Protocol):
    """State-space model contract shared by every filter.

    ``f`` and ``h_inv`` act row-wise on a ``(N, latent_dim)`` batch and must be
    deterministic and safe for concurrent read-only use.
    """

    Q: np.ndarray
    R: np.ndarray

    def f(self, z: np.ndarray, window: np.ndarray) -> np.ndarray: ...

    def h_inv(self, z: np.ndarray) -> np.ndarray: ...

    def initial_state(self, window: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class LinearModel:
    """``f(z) = A z``, ``h_inv(z) = C z``; the window is ignored."""

    A: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    z0: np.ndarray

    def f(self, z, window=None):
        return np.asarray(z) @ np.asarray(self.A).T

    def h_inv(self, z):
        return np.asarray(z) @ np.asarray(self.C).T

    def initial_state(self, window=None):
        return np.asarray(self.z0, dtype=float)


@dataclass(frozen=True)
class NeuralSystem:
    """Adapter exposing a trained :class:`NeuralModel` as a :class:`SystemModel`."""

    model: NeuralModel
    noise: NoiseEstimate

    @property
    def Q(self):
        return self.noise.Q

    @property
    def R(self):
        return self.noise.R

    def f(self, z, window):
        return transition_from_summary(self.model, z, lstm_summary(self.model, window))

    def h_inv(self, z):
        return decode(self.model, z)

    def initial_state(self, window):
        return encode(self.model, window)


# ---------------------------------------------------------------------------
# state containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise DataError(f"covariance shape {cov.shape} does not match mean length {mean.shape[0]}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))


@dataclass
class SigmaEnsemble:
    members: np.ndarray  # (N, latent_dim)
    rng: np.random.Generator

    def __post_init__(self) -> None:
        if self.members.ndim != 2 or self.members.shape[0] < 2:
            raise DataError("an ensemble needs at least 2 members")

    @property
    def N(self) -> int:
        return self.members.shape[0]


@dataclass
class ParticleSet:
    particles: np.ndarray  # (N_s, latent_dim)
    weights: np.ndarray  # (N_s,)
    rng: np.random.Generator
    prior_mean: np.ndarray
    prior_var: float = 1e-2
    nt_fraction: float = 0.1
    nrs_percent: float = 1.0
    sigma_rbf: float = 1.0
    rejuvenate_every_step: bool = False

    def __post_init__(self) -> None:
        if self.particles.ndim != 2 or self.particles.shape[0] < 2:
            raise DataError("a particle set needs at least 2 particles")
        if self.weights.shape != (self.particles.shape[0],):
            raise DataError("one weight per particle required")
        if not self.sigma_rbf > 0:
            raise DataError("sigma_rbf must be positive")

    @property
    def N(self) -> int:
        return self.particles.shape[0]


@dataclass
class StepOutput:
    predicted_obs: GaussianBelief
    state: object
    weights_underflow: bool = False
    resampled: bool = False


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def psd_factor(S: np.ndarray) -> np.ndarray:
    """``L`` with ``L @ L.T == S`` for a symmetric PSD ``S`` (negative eigenvalues dropped).

    An eigendecomposition is used instead of a Cholesky factor so that a zero
    covariance yields exactly zero noise.
    """
    S = 0.5 * (np.asarray(S, dtype=float) + np.asarray(S, dtype=float).T)
    w, V = np.linalg.eigh(S)
    return V * np.sqrt(np.maximum(w, 0.0))


def sample_gaussian(rng: np.random.Generator, mean: np.ndarray, cov: np.ndarray, n: int) -> np.ndarray:
    L = psd_factor(cov)
    return mean + rng.standard_normal((n, L.shape[1])) @ L.T


def _solve_right(A: np.ndarray, S: np.ndarray, what: str) -> np.ndarray:
    """``A @ inv(S + JITTER I)`` for symmetric ``S``."""
    Sj = S + JITTER * np.eye(S.shape[0])
    try:
        c = np.linalg.cholesky(Sj)
    except np.linalg.LinAlgError:
        raise NumericalError(f"{what} is singular after {JITTER:g} jitter") from None
    # A inv(S) = (inv(S) A^T)^T = (L^-T L^-1 A^T)^T
    y = np.linalg.solve(c, A.T)
    return np.linalg.solve(c.T, y).T


def _ensemble_cov(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    da = a - a.mean(axis=0)
    db = b - b.mean(axis=0)
    return da.T @ db / (a.shape[0] - 1)


# ---------------------------------------------------------------------------
# exact Kalman filter
# ---------------------------------------------------------------------------

def kf_step(
    belief: GaussianBelief, A, C, Q, R, x_t
) -> tuple[GaussianBelief, GaussianBelief]:
    """One predict/update cycle of the linear-Gaussian Kalman filter.

    Returns
    -------
    posterior : GaussianBelief
        Hidden-state belief after assimilating ``x_t``.
    predicted_obs : GaussianBelief
        ``(C mu^-, C P^- C^T + R)`` -- the distribution of ``x_t`` before it is seen.
    """
    A, C, Q, R = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (A, C, Q, R))
    x_t = np.atleast_1d(np.asarray(x_t, dtype=float))
    mu_p = A @ belief.mean
    P_p = A @ belief.cov @ A.T + Q
    S = C @ P_p @ C.T + R
    K = _solve_right(P_p @ C.T, S, "innovation covariance")
    mu = mu_p + K @ (x_t - C @ mu_p)
    P = P_p - K @ S @ K.T
    return GaussianBelief(mu, P), GaussianBelief(C @ mu_p, S)


# ---------------------------------------------------------------------------
# ensemble Kalman filter
# ---------------------------------------------------------------------------

def enkf_init(z0, alpha: float = 100.0, N: int = 20, seed=0) -> SigmaEnsemble:
    """Draw ``N`` members i.i.d. from ``N(z0, alpha I)``."""
    if N < 2:
        raise DataError("ensemble size must be at least 2")
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    members = z0 + math.sqrt(alpha) * rng.standard_normal((N, z0.shape[0]))
    return SigmaEnsemble(members, rng)


def enkf_step(
    ensemble: SigmaEnsemble,
    model: SystemModel,
    window,
    x_t,
    score_source: Literal["predicted", "updated"] = "predicted",
    process_noise: bool = False,
) -> StepOutput:
    """Propagate, project and update every member with a perturbed observation.

    Process noise is not injected unless ``process_noise`` is set. The gain is
    ``P_xz inv(P_zz)`` with both cross- and auto-covariance using divisor
    ``N - 1``. With ``score_source="updated"`` the reported observation
    belief is built from the updated members instead of the forecast.
    """
    x_t = np.atleast_1d(np.asarray(x_t, dtype=float))
    rng = ensemble.rng
    Zf = model.f(ensemble.members, window)
    if process_noise:
        Zf = Zf + sample_gaussian(rng, 0.0, model.Q, ensemble.N)
    Xh = model.h_inv(Zf)
    R = np.atleast_2d(model.R)
    mu = Xh.mean(axis=0)
    Pzz = _ensemble_cov(Xh, Xh) + R
    Pxz = _ensemble_cov(Zf, Xh)
    K = _solve_right(Pxz, Pzz, "ensemble innovation covariance")
    e_r = sample_gaussian(rng, 0.0, R, ensemble.N)
    members = Zf + (x_t + e_r - Xh) @ K.T
    if not np.all(np.isfinite(members)):
        raise NumericalError("non-finite ensemble member after update")
    if score_source == "updated":
        Xu = model.h_inv(members)
        obs = GaussianBelief(Xu.mean(axis=0), _ensemble_cov(Xu, Xu) + R)
    else:
        obs = GaussianBelief(mu, Pzz)
    return StepOutput(obs, SigmaEnsemble(members, rng))


# ---------------------------------------------------------------------------
# particle filter
# ---------------------------------------------------------------------------

def pf_init(
    z0,
    alpha_small: float = 1e-2,
    N_s: int = 1000,
    seed=0,
    nt_fraction: float = 0.1,
    nrs_percent: float = 1.0,
    sigma_rbf: float = 1.0,
    rejuvenate_every_step: bool = False,
) -> ParticleSet:
    """Particles from ``N(z0, alpha_small I)`` with uniform weights."""
    if N_s < 2:
        raise DataError("particle count must be at least 2")
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    particles = z0 + math.sqrt(alpha_small) * rng.standard_normal((N_s, z0.shape[0]))
    return ParticleSet(
        particles, np.full(N_s, 1.0 / N_s), rng, z0, alpha_small,
        nt_fraction, nrs_percent, sigma_rbf, rejuvenate_every_step,
    )


def rbf_likelihood(x_t, x_pred, sigma: float) -> np.ndarray | float:
    """``exp(-|x_t - x_pred|^2 / (2 sigma^2))``; ``x_pred`` may be a batch of rows."""
    if not sigma > 0:
        raise DataError("sigma must be positive")
    d = np.asarray(x_pred, dtype=float) - np.asarray(x_t, dtype=float)
    value = np.exp(-np.sum(d * d, axis=-1) / (2.0 * sigma * sigma))
    return float(value) if np.ndim(value) == 0 else value


def _check_normalized(weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise DataError("weights must be a non-empty vector")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
        raise DataError(f"weights are not normalized (sum {w.sum():.9g})")
    return w


def effective_sample_size(weights) -> float:
    w = _check_normalized(weights)
    return float(1.0 / np.sum(w * w))


def systematic_resample(weights, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn by one uniform offset over ``N`` evenly spaced CDF positions.

    Index ``j`` is copied either ``floor(N w_j)`` or ``ceil(N w_j)`` times and
    the result is non-decreasing.
    """
    w = _check_normalized(weights)
    N = w.size
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    positions = (np.arange(N) + rng.uniform(0.0, 1.0)) / N
    return np.searchsorted(cdf, positions, side="right")


def _rejuvenation_count(particles: ParticleSet) -> int:
    return min(particles.N, math.ceil(particles.nrs_percent * particles.N / 100.0 - 1e-9))


def pf_step(particles: ParticleSet, model: SystemModel, window, x_t) -> StepOutput:
    """One SIR cycle: propagate with noise, weight by RBF, estimate, resample, rejuvenate.

    Weights are multiplied by the RBF likelihood of ``x_t`` under each
    particle's noisy observation projection and renormalised. If every
    product underflows to zero the weights are reset to uniform and
    ``weights_underflow`` is set on the output.
    """
    x_t = np.atleast_1d(np.asarray(x_t, dtype=float))
    rng = particles.rng
    N = particles.N
    Z = model.f(particles.particles, window)
    Z = Z + sample_gaussian(rng, 0.0, model.Q, N)
    X = model.h_inv(Z)
    X = X + sample_gaussian(rng, 0.0, model.R, N)

    w = particles.weights * rbf_likelihood(x_t, X, particles.sigma_rbf)
    total = w.sum()
    underflow = not (total > 0 and np.isfinite(total))
    if underflow:
        log.warning("all particle likelihoods underflowed; weights reset to uniform")
        w = np.full(N, 1.0 / N)
    else:
        w = w / total

    mu = w @ X
    d = X - mu
    P = (w[:, None] * d).T @ d / w.sum() + JITTER * np.eye(X.shape[1])
    obs = GaussianBelief(mu, P)

    resampled = False
    if effective_sample_size(w) < particles.nt_fraction * N:
        idx = systematic_resample(w, rng)
        Z = Z[idx]
        w = np.full(N, 1.0 / N)
        resampled = True
    if resampled or particles.rejuvenate_every_step:
        k = _rejuvenation_count(particles)
        if k > 0:
            # lowest weight first, ties broken by index
            victims = np.lexsort((np.arange(N), w))[:k]
            Z = Z.copy()
            Z[victims] = sample_gaussian(
                rng, particles.prior_mean, particles.prior_var * np.eye(Z.shape[1]), k
            )
            if not resampled:
                w = w.copy()
                w[victims] = 1.0 / N
                w = w / w.sum()

    new = ParticleSet(
        Z, w, rng, particles.prior_mean, particles.prior_var, particles.nt_fraction,
        particles.nrs_percent, particles.sigma_rbf, particles.rejuvenate_every_step,
    )
    return StepOutput(obs, new, underflow, resampled)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FilterParams:
    n_sigma: int = 20
    n_particles: int = 1000
    alpha_init: float = 100.0
    alpha_small: float = 1e-2
    sigma_rbf: float = 1.0
    nt_fraction: float = 0.1
    nrs_percent: float = 1.0
    score_source: Literal["predicted", "updated"] = "predicted"
    rejuvenate_every_step: bool = False
    enkf_process_noise: bool = False


def run_filter(
    kind: Literal["enkf", "pf"],
    model: SystemModel,
    dataset: Dataset | np.ndarray,
    params: FilterParams = FilterParams(),
    seed: int = 0,
    tau: Optional[int] = None,
) -> list[GaussianBelief]:
    """Predicted observation beliefs for ``t = tau .. T-1``.

    The filter starts from ``model.initial_state`` of the first window and
    steps over every subsequent window in time order. ``tau`` defaults to the
    neural model's window size.
    """
    if kind not in ("enkf", "pf"):
        raise DataError(f"unknown filter kind {kind!r}")
    if tau is None:
        tau = model.model.tau if isinstance(model, NeuralSystem) else 1
    values = dataset.values if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=float)
    ds = dataset if isinstance(dataset, Dataset) else Dataset(values)
    windows = window_array(ds, tau)
    z0 = model.initial_state(windows[0])
    rng = np.random.default_rng(seed)
    if kind == "enkf":
        state = enkf_init(z0, params.alpha_init, params.n_sigma, rng)
    else:
        state = pf_init(
            z0, params.alpha_small, params.n_particles, rng, params.nt_fraction,
            params.nrs_percent, params.sigma_rbf, params.rejuvenate_every_step,
        )
    out: list[GaussianBelief] = []
    for k, t in enumerate(range(tau, values.shape[0])):
        try:
            if kind == "enkf":
                step = enkf_step(
                    state, model, windows[k], values[t],
                    params.score_source, params.enkf_process_noise,
                )
            else:
                step = pf_step(state, model, windows[k], values[t])
        except NumericalError as exc:
            raise NumericalError(f"filter failed at timestep {t}: {exc}") from exc
        if step.weights_underflow:
            log.warning("particle weights underflowed at timestep %d", t)
        state = step.state
        out.append(step.predicted_obs)
    return out
