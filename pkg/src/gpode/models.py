"""Inference objectives for GP vector fields observed through trajectories.

Two evidence lower bounds share one Monte Carlo skeleton: draw a vector
field realization and Gaussian state draws by reparameterization, push them
through the solver, and score observations under an isotropic Gaussian
likelihood.

* `elbo_vanilla`: one initial state, one long integration through all
  observation times, minus the two analytic KL terms.
* `elbo_shooting`: one state variable per observation splits the
  integration into short segments solved jointly; segment endpoints are
  softly tied to the next state variable by a fixed tolerance, adding
  cross-entropy and entropy terms.

Both return the scalar estimate plus a dict of its signed additive terms
(KL entries appear negated), which sum to the estimate exactly. With a
single observation the shooting bound reduces to the vanilla one draw for
draw, and the two functions accumulate terms in the same order so the
reduction is bitwise.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import autodiff as ad
from . import gpfield
from . import kernel as kern
from . import odeint
from .errors import ContractError, DimensionError
from .rng import as_streams

LOG_2PI = float(np.log(2.0 * np.pi))
DEFAULT_SHOOTING_TOLERANCE = 1e-6


@dataclass
class Trajectory:
    """Observation times and noisy observations of one trajectory."""

    times: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.times.ndim != 1 or self.y.ndim != 2 or len(self.times) != len(self.y):
            raise DimensionError(
                f"times {self.times.shape} and observations {self.y.shape} do not align"
            )
        if np.any(np.diff(self.times) <= 0):
            raise ContractError("observation times must be strictly increasing")
        if not np.isfinite(self.y).all() or not np.isfinite(self.times).all():
            raise ContractError("observations must be finite")

    @property
    def count(self):
        return len(self.times)

    @property
    def dim(self):
        return self.y.shape[1]


class StatePosterior:
    """Gaussian variational factors for the initial/shooting states.

    `means` is (K, D); `raw_chols` is (K, D, D) unconstrained, mapped to
    valid Cholesky factors. Vanilla inference uses K = 1.
    """

    def __init__(self, means, raw_chols):
        self.means = ad.wrap(means)
        self.raw_chols = ad.wrap(raw_chols)
        k, d = self.means.shape
        if self.raw_chols.shape != (k, d, d):
            raise DimensionError(
                f"raw_chols must be {(k, d, d)}, got {self.raw_chols.shape}"
            )
        self.chols = ad.tril_with_softplus_diag(self.raw_chols)
        self.count = k
        self.dim = d

    def raw_values(self):
        return {
            "state_means": self.means.value.copy(),
            "state_raw_chols": self.raw_chols.value.copy(),
        }


class NoiseModel:
    """Trainable observation variance plus the fixed shooting tolerance."""

    def __init__(self, raw_obs_variance, shooting_tolerance=DEFAULT_SHOOTING_TOLERANCE):
        self.raw_obs_variance = ad.wrap(raw_obs_variance)
        if self.raw_obs_variance.ndim != 0:
            raise DimensionError("raw_obs_variance must be a scalar")
        self.obs_variance = ad.softplus(self.raw_obs_variance)
        self.shooting_tolerance = float(shooting_tolerance)
        if self.shooting_tolerance <= 0:
            raise ContractError("shooting tolerance must be positive")


@dataclass
class SolverSettings:
    """How ELBO evaluations integrate segments."""

    kind: str = "rk4"
    substeps: int = 20
    rtol: float = 1e-5
    atol: float = 1e-5
    max_steps: int = 100_000
    workers: int | None = None


def _draw_states(state_post, eps):
    """Reparameterized draws, one per row: means + chol @ eps."""
    scaled = ad.contract("nij,nj->ni", state_post.chols, ad.wrap(eps))
    return state_post.means + scaled


def _kl_state_row(state_post, row):
    """KL[N(a_row, L_row L_row^T) || N(0, I)]."""
    a = ad.reshape(ad.slice_rows(state_post.means, row, row + 1), (state_post.dim,))
    L = state_post.chols
    l_row = ad.slice_rows(ad.reshape(L, (L.shape[0], -1)), row, row + 1)
    diag = ad.slice_rows(ad.diag_part(L), row, row + 1)
    return (
        0.5 * (ad.reduce_sum(a * a) + ad.reduce_sum(l_row * l_row) - float(state_post.dim))
        - ad.reduce_sum(ad.log(diag))
    )


def _gaussian_loglik(resid, variance, n_entries):
    """Sum over entries of log N(resid | 0, variance), variance a scalar tensor."""
    sse = ad.reduce_sum(resid * resid)
    return (
        -0.5 * sse / variance
        - (0.5 * n_entries) * ad.log(variance)
        - 0.5 * n_entries * LOG_2PI
    )


def _row_vector(matrix, row, dim):
    return ad.reshape(ad.slice_rows(matrix, row, row + 1), (dim,))


def _vanilla_dt(times, t_start, substeps):
    span = float(times[-1]) - t_start
    if span <= 0.0:
        return 1.0
    intervals = int(np.sum(np.diff(np.concatenate([[t_start], times])) > 0))
    return span / (max(intervals, 1) * substeps)


def elbo_vanilla(
    traj,
    inducing,
    hyper,
    state_post,
    noise,
    rng,
    n_samples=1,
    fourier_count=256,
    solver=None,
    t_start=0.0,
):
    """Monte Carlo evidence lower bound of the single-shot model.

    Returns (scalar tensor, diagnostics). Diagnostic entries are the signed
    additive terms {likelihood, initial_state_kl, inducing_kl} and sum to
    the bound; the KL entries are therefore negative divergences.
    """
    if n_samples < 1:
        raise ContractError("n_samples must be >= 1")
    if state_post.count != 1:
        raise ContractError("vanilla objective uses a single initial-state factor")
    solver = solver or SolverSettings()
    streams = as_streams(rng)
    n, d = traj.count, traj.dim
    y = ad.wrap(traj.y)
    dt = _vanilla_dt(traj.times, t_start, solver.substeps)

    lik = None
    for _ in range(n_samples):
        path = gpfield.draw_path(inducing, hyper, fourier_count, streams.path)
        eps = streams.states.standard_normal((1, d))
        x0 = _row_vector(_draw_states(state_post, eps), 0, d)
        req = odeint.IvpRequest(
            x0=x0,
            t_start=t_start,
            output_times=traj.times,
            rhs=path,
            kind=solver.kind,
            dt=dt,
            rtol=solver.rtol,
            atol=solver.atol,
            max_steps=solver.max_steps,
        )
        states = odeint.solve(req).states
        ll = _gaussian_loglik(states - y, noise.obs_variance, n * d)
        lik = ll if lik is None else lik + ll
    lik = lik / float(n_samples)

    neg_kl_x0 = -1.0 * _kl_state_row(state_post, 0)
    neg_kl_u = -1.0 * gpfield.kl_inducing(inducing)
    total = lik + neg_kl_x0 + neg_kl_u
    diagnostics = {
        "likelihood": lik.item(),
        "initial_state_kl": neg_kl_x0.item(),
        "inducing_kl": neg_kl_u.item(),
    }
    return total, diagnostics


def elbo_shooting(
    traj,
    inducing,
    hyper,
    state_post,
    noise,
    rng,
    n_samples=1,
    fourier_count=256,
    solver=None,
    t_start=0.0,
):
    """Monte Carlo evidence lower bound of the shooting-augmented model.

    One state variable sits at the start of each of the N observation
    segments; all segments integrate jointly. Diagnostics hold the signed
    terms {likelihood, shooting_cross_entropy, shooting_entropy,
    initial_state_kl, inducing_kl} and sum to the bound.
    """
    if n_samples < 1:
        raise ContractError("n_samples must be >= 1")
    n, d = traj.count, traj.dim
    if state_post.count != n:
        raise ContractError(
            f"shooting needs one state variable per observation: "
            f"expected {n}, got {state_post.count}"
        )
    solver = solver or SolverSettings()
    streams = as_streams(rng)
    y = ad.wrap(traj.y)
    seg_starts = np.concatenate([[t_start], traj.times[:-1]])
    seg_ends = traj.times
    tol = noise.shooting_tolerance

    lik = None
    cross = None
    for _ in range(n_samples):
        path = gpfield.draw_path(inducing, hyper, fourier_count, streams.path)
        eps = streams.states.standard_normal((n, d))
        s_draws = _draw_states(state_post, eps)
        reqs = []
        for i in range(n):
            span = float(seg_ends[i]) - float(seg_starts[i])
            reqs.append(
                odeint.IvpRequest(
                    x0=_row_vector(s_draws, i, d),
                    t_start=float(seg_starts[i]),
                    output_times=[float(seg_ends[i])],
                    rhs=path,
                    kind=solver.kind,
                    dt=span / solver.substeps if span > 0 else 1.0,
                    rtol=solver.rtol,
                    atol=solver.atol,
                    max_steps=solver.max_steps,
                )
            )
        sols = odeint.solve_batch(reqs, workers=solver.workers)
        endpoints = ad.concat_rows([s.states for s in sols])
        ll = _gaussian_loglik(endpoints - y, noise.obs_variance, n * d)
        lik = ll if lik is None else lik + ll
        if n > 1:
            resid_s = ad.slice_rows(s_draws, 1, n) - ad.slice_rows(endpoints, 0, n - 1)
            ce = _gaussian_loglik(resid_s, ad.wrap(tol), (n - 1) * d)
            cross = ce if cross is None else cross + ce
    lik = lik / float(n_samples)

    total = lik
    diagnostics = {"likelihood": lik.item()}
    if n > 1:
        cross = cross / float(n_samples)
        log_diag = ad.log(ad.diag_part(state_post.chols))
        entropy = (n - 1) * 0.5 * d * (1.0 + LOG_2PI) + ad.reduce_sum(
            ad.slice_rows(log_diag, 1, n)
        )
        total = total + cross + entropy
        diagnostics["shooting_cross_entropy"] = cross.item()
        diagnostics["shooting_entropy"] = entropy.item()
    neg_kl_s0 = -1.0 * _kl_state_row(state_post, 0)
    neg_kl_u = -1.0 * gpfield.kl_inducing(inducing)
    total = total + neg_kl_s0 + neg_kl_u
    diagnostics["initial_state_kl"] = neg_kl_s0.item()
    diagnostics["inducing_kl"] = neg_kl_u.item()
    return total, diagnostics


def _kmeans(y, m, rng, iterations=25):
    """k-means++ seeding followed by Lloyd iterations."""
    n = len(y)
    centers = np.empty((m, y.shape[1]))
    centers[0] = y[rng.integers(n)]
    d2 = ((y - centers[0]) ** 2).sum(axis=1)
    for j in range(1, m):
        total = d2.sum()
        if total <= 0:
            centers[j] = y[rng.integers(n)]
        else:
            centers[j] = y[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((y - centers[j]) ** 2).sum(axis=1))
    for _ in range(iterations):
        dist = ((y[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = dist.argmin(axis=1)
        for j in range(m):
            sel = assign == j
            if sel.any():
                centers[j] = y[sel].mean(axis=0)
    return centers


def init_inducing(traj, hyper, m, rng):
    """Inducing set from k-means locations and empirical-gradient values.

    Difference quotients of consecutive observations are interpolated to
    the cluster centers by a GP mean, then whitened. The variational
    covariance factors start at 0.1 I.
    """
    if m > traj.count - 1:
        raise ContractError(f"need m <= n_obs - 1, got m={m}, n_obs={traj.count}")
    y = traj.y.copy()
    dup = np.zeros(len(y), dtype=bool)
    seen = {}
    for i, row in enumerate(map(tuple, y)):
        if row in seen:
            dup[i] = True
        seen[row] = i
    if dup.any():
        warnings.warn(
            f"perturbing {int(dup.sum())} duplicate observations for k-means",
            stacklevel=2,
        )
        y[dup] += 1e-6 * rng.standard_normal((int(dup.sum()), y.shape[1]))

    z = _kmeans(y, m, rng)
    anchors = y[:-1]
    quotients = np.diff(traj.y, axis=0) / np.diff(traj.times)[:, None]

    k_aa = kern.gram(ad.wrap(anchors), ad.wrap(anchors), hyper)
    l_aa = gpfield.jittered_cholesky(k_aa).value
    k_za = kern.gram(ad.wrap(z), ad.wrap(anchors), hyper).value
    tmp = scipy.linalg.solve_triangular(l_aa, quotients, lower=True)
    weights = scipy.linalg.solve_triangular(l_aa, tmp, lower=True, trans="T")
    u0 = k_za @ weights

    k_zz = kern.gram(ad.wrap(z), ad.wrap(z), hyper)
    l_zz = gpfield.jittered_cholesky(k_zz).value
    m_tilde = scipy.linalg.solve_triangular(l_zz, u0, lower=True)

    d = traj.dim
    raw_l = np.zeros((d, m, m))
    raw_l[:, np.arange(m), np.arange(m)] = kern.softplus_inverse(0.1)
    return gpfield.InducingSet(z, m_tilde, raw_l)


def init_parameters(traj, m, rng, objective="vanilla"):
    """Raw (unconstrained) parameter arrays for a fresh training run.

    Lengthscales start at 1.25x the per-dimension data spread, the signal
    variance at 1, the observation variance at a tenth of the data
    variance; state means sit on the observations with covariance 0.01 I.
    """
    y = traj.y
    d = traj.dim
    std = np.maximum(y.std(axis=0), 1e-3)
    hyper = kern.KernelHyper.from_values(1.25 * std, 1.0)
    inducing = init_inducing(traj, hyper, m, rng)

    if objective == "vanilla":
        k = 1
        means = y[:1].copy()
    elif objective == "shooting":
        k = traj.count
        means = np.concatenate([y[:1], y[:-1]], axis=0)
    else:
        raise ContractError(f"unknown objective {objective!r}")
    raw_chols = np.zeros((k, d, d))
    raw_chols[:, np.arange(d), np.arange(d)] = kern.softplus_inverse(0.1)

    params = {
        "raw_lengthscales": kern.softplus_inverse(1.25 * std),
        "raw_signal_variance": np.asarray(kern.softplus_inverse(1.0)),
        "raw_obs_variance": np.asarray(
            kern.softplus_inverse(max(0.1 * float(y.var()), 1e-4))
        ),
        "state_means": means,
        "state_raw_chols": raw_chols,
    }
    params.update(inducing.raw_values())
    return params


PARAM_KEYS = (
    "raw_lengthscales",
    "raw_signal_variance",
    "raw_obs_variance",
    "z",
    "m_tilde",
    "raw_l_tilde",
    "state_means",
    "state_raw_chols",
)


@dataclass
class ModelHandles:
    hyper: object
    inducing: object
    state_post: object
    noise: object
    leaves: dict


def materialize(params, tape=None, shooting_tolerance=DEFAULT_SHOOTING_TOLERANCE):
    """Build model objects from raw arrays, as tape leaves when training."""
    get = tape.leaf if tape is not None else ad.wrap
    leaves = {name: get(params[name]) for name in PARAM_KEYS}
    return ModelHandles(
        hyper=kern.KernelHyper(leaves["raw_lengthscales"], leaves["raw_signal_variance"]),
        inducing=gpfield.InducingSet(leaves["z"], leaves["m_tilde"], leaves["raw_l_tilde"]),
        state_post=StatePosterior(leaves["state_means"], leaves["state_raw_chols"]),
        noise=NoiseModel(leaves["raw_obs_variance"], shooting_tolerance),
        leaves=leaves,
    )


@dataclass
class Prediction:
    times: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    samples: np.ndarray
    n_diverged: int


def predict(
    times,
    inducing,
    hyper,
    state_post,
    noise,
    n_samples=50,
    rng=None,
    fourier_count=256,
    solver=None,
    t_start=0.0,
):
    """Sample-based predictive distribution at the requested times.

    Each sample pairs one path draw with one initial-state draw and is
    integrated with the evaluation solver. The predictive variance is the
    across-sample variance plus the observation variance, so scores are in
    observation space. Diverged samples are dropped; more than 10% of them
    triggers a warning.
    """
    if rng is None:
        raise ContractError("predict requires an rng")
    solver = solver or SolverSettings(kind="dopri5")
    streams = as_streams(rng)
    times = np.asarray(times, dtype=np.float64)
    d = state_post.dim
    kept = []
    n_diverged = 0
    for _ in range(n_samples):
        path = gpfield.draw_path(inducing, hyper, fourier_count, streams.path)
        eps = streams.states.standard_normal((1, d))
        x0 = _row_vector(_draw_states(state_post, eps), 0, d)
        req = odeint.IvpRequest(
            x0=x0,
            t_start=t_start,
            output_times=times,
            rhs=path,
            kind=solver.kind,
            dt=_vanilla_dt(times, t_start, solver.substeps),
            rtol=solver.rtol,
            atol=solver.atol,
            max_steps=solver.max_steps,
        )
        try:
            kept.append(odeint.solve(req).states.value)
        except odeint.NumericalError:
            n_diverged += 1
    if not kept:
        raise odeint.DivergenceError("all predictive samples diverged")
    if n_diverged > 0.1 * n_samples:
        warnings.warn(
            f"{n_diverged}/{n_samples} predictive samples diverged; "
            "returning partial results",
            stacklevel=2,
        )
    samples = np.stack(kept)
    mean = samples.mean(axis=0)
    variance = samples.var(axis=0) + float(noise.obs_variance.value)
    return Prediction(times, mean, variance, samples, n_diverged)
