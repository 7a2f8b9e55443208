"""Sparse variational GP vector field with decoupled pathwise sampling.

The inducing posterior is kept in whitened coordinates: per output
dimension d, q(u_d) = N(L_theta m_d, L_theta L_d L_d^T L_theta^T) with
L_theta the (jittered) Cholesky factor of K_ZZ. In these coordinates the
prior is standard normal, which both conditions the optimization and makes
the KL term a one-liner.

`draw_path` realizes one function from the posterior: a random Fourier
expansion of the stationary prior plus a kernel-basis correction through
the inducing values. The returned object is deterministic and can be
evaluated at arbitrary states in O(F + M) per state, which is what lets an
ODE solver treat a posterior sample as an ordinary vector field.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import kernel as kern
from .errors import DimensionError

JITTER_REL = 1e-6


class InducingSet:
    """Trainable inducing locations plus the whitened Gaussian posterior.

    `z` is (M, D); `m_tilde` is (M, D) with one whitened mean column per
    output dimension; `raw_l_tilde` is a (D, M, M) stack of unconstrained
    matrices mapped to valid Cholesky factors (softplus on the diagonal).
    """

    def __init__(self, z, m_tilde, raw_l_tilde):
        self.z = ad.wrap(z)
        self.m_tilde = ad.wrap(m_tilde)
        self.raw_l_tilde = ad.wrap(raw_l_tilde)
        m, d = self.z.shape
        if self.m_tilde.shape != (m, d):
            raise DimensionError(
                f"m_tilde must be {(m, d)}, got {self.m_tilde.shape}"
            )
        if self.raw_l_tilde.shape != (d, m, m):
            raise DimensionError(
                f"raw_l_tilde must be {(d, m, m)}, got {self.raw_l_tilde.shape}"
            )
        self.l_tilde = ad.tril_with_softplus_diag(self.raw_l_tilde)
        self.count = m
        self.dim = d

    def raw_values(self):
        return {
            "z": self.z.value.copy(),
            "m_tilde": self.m_tilde.value.copy(),
            "raw_l_tilde": self.raw_l_tilde.value.copy(),
        }


class PathSample:
    """One realized vector field: Fourier prior plus Matheron correction.

    Immutable after creation; safe to evaluate from any number of
    concurrently integrated trajectory segments. Values the solver loop
    reads on every evaluation are cached once at construction.
    """

    def __init__(self, omega, weights, u, nu, z, lengthscales, signal_variance, scale):
        self.omega = omega
        self.weights = weights
        self.u = u
        self.nu = nu
        self.z = z
        self.lengthscales = lengthscales
        self.signal_variance = signal_variance
        self.scale = scale
        self.dim = z.shape[1]
        lsv = lengthscales.value
        self.inv_ls2 = 1.0 / (lsv * lsv)
        self.neg_half_inv_ls2 = -0.5 * self.inv_ls2
        self.weights_scaled = scale.value * weights.value  # (2F, D)

    def __call__(self, x):
        return eval_path(self, x)


def jittered_cholesky(gram_matrix, rel=JITTER_REL):
    """Cholesky of a kernel Gram matrix after adding relative diagonal jitter."""
    m = gram_matrix.shape[0]
    mean_diag = ad.reduce_sum(ad.diag_part(gram_matrix)) / float(m)
    jittered = gram_matrix + (rel * mean_diag) * ad.wrap(np.eye(m))
    return ad.cholesky(jittered)


def kl_inducing(inducing):
    """KL of the whitened inducing posterior from its standard-normal prior.

    Sum over output dimensions of KL[N(m_d, L_d L_d^T) || N(0, I)].
    """
    m = inducing.m_tilde
    L = inducing.l_tilde
    diag = ad.diag_part(L)
    total = 0.5 * (
        ad.reduce_sum(m * m)
        + ad.reduce_sum(L * L)
        - float(inducing.dim * inducing.count)
    )
    return total - ad.reduce_sum(ad.log(diag))


def marginal_posterior(x_query, inducing, hyper):
    """Analytic per-dimension posterior of the field at query states.

    Returns (means, covariances) with shapes (Q, D) and (D, Q, Q). The
    covariance per dimension is K_qq - B^T B + (B^T L_d)(B^T L_d)^T where
    B = L_theta^{-1} K_zq.
    """
    x_query = ad.wrap(x_query)
    k_zz = kern.gram(inducing.z, inducing.z, hyper)
    l_theta = jittered_cholesky(k_zz)
    k_qz = kern.gram(x_query, inducing.z, hyper)
    k_qq = kern.gram(x_query, x_query, hyper)
    b = ad.solve_triangular(l_theta, ad.transpose(k_qz))  # (M, Q)
    means = ad.contract("mq,md->qd", b, inducing.m_tilde)
    bl = ad.contract("mq,dmn->dqn", b, inducing.l_tilde)  # (D, Q, M)
    prior_part = k_qq - ad.contract("mq,mp->qp", b, b)
    cov = ad.reshape(prior_part, (1,) + prior_part.shape) + ad.contract(
        "dqm,dpm->dqp", bl, bl
    )
    return means, cov


def draw_path(inducing, hyper, count, rng):
    """Sample one vector field from the posterior.

    Consumes the generator in a fixed order (frequencies, Fourier weights,
    whitened inducing noise), so callers can rely on draw-for-draw
    reproducibility under a fixed seed.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    m, d = inducing.count, inducing.dim
    omega = kern.sample_frequencies(hyper, count, rng)
    weights = ad.wrap(rng.standard_normal((2 * count, d)))
    eps_u = rng.standard_normal((m, d))

    u_white = inducing.m_tilde + ad.contract(
        "dmn,nd->md", inducing.l_tilde, ad.wrap(eps_u)
    )
    k_zz = kern.gram(inducing.z, inducing.z, hyper)
    l_theta = jittered_cholesky(k_zz)
    u = ad.matmul(l_theta, u_white)

    scale = kern.feature_scale(hyper, count)
    phi_z = kern.rff_features(inducing.z, omega, scale)
    resid = u - ad.matmul(phi_z, weights)

    # Solve K_zz nu = resid with the jittered factor as preconditioner and
    # one step of iterative refinement against the unjittered matrix, so
    # the interpolation identity path(z_j) = u_j holds to ~1e-12.
    def solve(r):
        return ad.solve_triangular(l_theta, ad.solve_triangular(l_theta, r), trans=True)

    nu0 = solve(resid)
    nu = nu0 + solve(resid - ad.matmul(k_zz, nu0))

    return PathSample(
        omega=omega,
        weights=weights,
        u=u,
        nu=nu,
        z=inducing.z,
        lengthscales=hyper.lengthscales,
        signal_variance=hyper.signal_variance,
        scale=scale,
    )


def eval_path(path, x):
    """Evaluate a path at one state (D,) or a batch of states (B, D).

    Row i of a batched evaluation is bitwise-identical to evaluating that
    state alone; solver code exploits this to integrate segments jointly.

    The whole evaluation (Fourier prior plus kernel update) is one fused
    tape node with a hand-derived adjoint: it sits inside every solver
    stage, and the fusion keeps both the node count and the accumulation
    order fixed. Only elementwise broadcasts and per-row reductions are
    used, which is what makes rows independent of the batch extent.
    """
    x = ad.wrap(x)
    single = x.ndim == 1
    if (single and x.shape != (path.dim,)) or (
        not single and (x.ndim != 2 or x.shape[1] != path.dim)
    ):
        raise DimensionError(f"state shape {x.shape} does not match field dim {path.dim}")

    omega, weights, scale = path.omega, path.weights, path.scale
    z, ls, sf2, nu = path.z, path.lengthscales, path.signal_variance, path.nu
    xv = x.value[None, :] if single else x.value
    ov, wv, sv = omega.value, weights.value, scale.value
    zv, lsv, sf2v, nuv = z.value, ls.value, sf2.value, nu.value
    inv_ls2 = path.inv_ls2
    b = xv.shape[0]
    f_count = ov.shape[0]

    # Forward: unoptimized einsum accumulates per output element in a fixed
    # index order, so each row's bits do not depend on the batch extent.
    proj = np.einsum("bd,fd->bf", xv, ov, optimize=False)  # (B, F)
    feats = np.empty((b, 2 * f_count))
    cosp = np.cos(proj, out=feats[:, :f_count])
    sinp = np.sin(proj, out=feats[:, f_count:])
    pre_scaled = np.einsum("bf,fd->bd", feats, path.weights_scaled, optimize=False)
    diff = xv[:, None, :] - zv[None, :, :]  # (B, M, D)
    quad = np.einsum("bmd,bmd,d->bm", diff, diff, path.neg_half_inv_ls2, optimize=False)
    kxz = sf2v * np.exp(quad)  # (B, M)
    upd = np.einsum("bm,md->bd", kxz, nuv, optimize=False)
    out = pre_scaled + upd

    # Backward: gradients carry no row-stability contract, so BLAS and
    # einsum are fine. Intermediates are shared lazily across the parent
    # adjoints (backward calls every fn once with the same adjoint).
    f_count = ov.shape[0]
    cache = {}

    def expand(g):
        return g[None, :] if single else g

    def dproj_of(g):
        if "dproj" not in cache:
            g2 = expand(g)
            dfeats = g2 @ wv.T  # (B, 2F)
            cache["dproj"] = sv * (cosp * dfeats[:, f_count:] - sinp * dfeats[:, :f_count])
        return cache["dproj"]

    def dk_of(g):
        if "dk" not in cache:
            cache["dk"] = (expand(g) @ nuv.T) * kxz  # (B, M)
        return cache["dk"]

    def vjp_x(g):
        dproj = dproj_of(g)
        dk = dk_of(g)
        dx = dproj @ ov - np.einsum("bm,bmd->bd", dk, diff, optimize=False) * inv_ls2
        return dx[0] if single else dx

    def vjp_omega(g):
        return dproj_of(g).T @ xv

    def vjp_weights(g):
        return sv * (feats.T @ expand(g))

    def vjp_scale(g):
        return np.asarray((expand(g) * pre).sum())

    def vjp_z(g):
        return np.einsum("bm,bmd->md", dk_of(g), diff, optimize=False) * inv_ls2

    def vjp_ls(g):
        dk = dk_of(g)
        return np.einsum("bm,bmd->d", dk, diff * diff, optimize=False) / lsv**3

    def vjp_sf2(g):
        return np.asarray(dk_of(g).sum() / sf2v)

    def vjp_nu(g):
        return kxz.T @ expand(g)

    value = out[0] if single else out
    return ad.custom(
        value,
        [
            (x, vjp_x),
            (omega, vjp_omega),
            (weights, vjp_weights),
            (scale, vjp_scale),
            (z, vjp_z),
            (ls, vjp_ls),
            (sf2, vjp_sf2),
            (nu, vjp_nu),
        ],
    )
