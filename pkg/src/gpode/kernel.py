"""Squared-exponential ARD kernel and its random Fourier feature map.

One scalar kernel is shared across all output dimensions of the vector
field. Hyperparameters live as unconstrained reals and are mapped through
softplus, so optimizer steps can never leave the positive cone.

The cross-covariance and feature evaluations are fused tape primitives:
they sit inside every ODE right-hand-side call, and a single node with a
hand-derived adjoint keeps both the node count and the arithmetic order
fixed (forward results are bitwise-independent of how query states are
batched).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import DimensionError


def softplus_inverse(y):
    """Return x with softplus(x) = y, for positive y (used at init time)."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus_inverse needs positive inputs")
    return y + np.log1p(-np.exp(-y))


class KernelHyper:
    """SE-ARD hyperparameters stored unconstrained, read constrained.

    `raw_lengthscales` (D,) and `raw_signal_variance` () may be tape leaves;
    the softplus-constrained tensors are materialized once per instance so
    repeated kernel calls share the same tape nodes.
    """

    def __init__(self, raw_lengthscales, raw_signal_variance):
        self.raw_lengthscales = ad.wrap(raw_lengthscales)
        self.raw_signal_variance = ad.wrap(raw_signal_variance)
        if self.raw_lengthscales.ndim != 1:
            raise DimensionError("raw_lengthscales must be a vector")
        if self.raw_signal_variance.ndim != 0:
            raise DimensionError("raw_signal_variance must be a scalar")
        self.lengthscales = ad.softplus(self.raw_lengthscales)
        self.signal_variance = ad.softplus(self.raw_signal_variance)
        self.dim = self.raw_lengthscales.shape[0]

    @classmethod
    def from_values(cls, lengthscales, signal_variance):
        """Build from constrained values (constants, not tape leaves)."""
        return cls(
            softplus_inverse(np.asarray(lengthscales, dtype=np.float64)),
            softplus_inverse(float(signal_variance)),
        )

    def raw_values(self):
        return {
            "raw_lengthscales": self.raw_lengthscales.value.copy(),
            "raw_signal_variance": self.raw_signal_variance.value.copy(),
        }


def _check_states(arr, dim, what):
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise DimensionError(f"{what} must have shape (n, {dim}), got {arr.shape}")


def se_cross(X, Z, lengthscales, signal_variance):
    """Fused SE-ARD cross-covariance: out[i, j] = k(X[i], Z[j]).

    All operands may be tape tensors; the adjoint propagates to every one.
    """
    X, Z = ad.wrap(X), ad.wrap(Z)
    ls, sf2 = ad.wrap(lengthscales), ad.wrap(signal_variance)
    Xv, Zv, lsv, sf2v = X.value, Z.value, ls.value, sf2.value
    D = lsv.shape[0]
    _check_states(Xv, D, "X")
    _check_states(Zv, D, "Z")

    inv_ls2 = 1.0 / (lsv * lsv)
    diff = Xv[:, None, :] - Zv[None, :, :]
    sq = diff * diff
    quad = (sq * inv_ls2).sum(axis=2)
    K = sf2v * np.exp(-0.5 * quad)

    def vjp_X(g):
        c = (g * K)[:, :, None] * (diff * inv_ls2)
        return -c.sum(axis=1)

    def vjp_Z(g):
        c = (g * K)[:, :, None] * (diff * inv_ls2)
        return c.sum(axis=0)

    def vjp_ls(g):
        return ((g * K)[:, :, None] * sq).sum(axis=(0, 1)) / (lsv**3)

    def vjp_sf2(g):
        return np.asarray((g * K).sum() / sf2v)

    return ad.custom(K, [(X, vjp_X), (Z, vjp_Z), (ls, vjp_ls), (sf2, vjp_sf2)])


def gram(X, Z, hyper):
    """Cross-Gram matrix of two state sets under the shared SE-ARD kernel."""
    return se_cross(X, Z, hyper.lengthscales, hyper.signal_variance)


def k(x, xp, hyper):
    """Pointwise kernel value for two states (scalar tensor)."""
    x, xp = ad.wrap(x), ad.wrap(xp)
    if x.shape != (hyper.dim,) or xp.shape != (hyper.dim,):
        raise DimensionError(
            f"states must have shape ({hyper.dim},), got {x.shape} and {xp.shape}"
        )
    out = se_cross(
        ad.reshape(x, (1, hyper.dim)),
        ad.reshape(xp, (1, hyper.dim)),
        hyper.lengthscales,
        hyper.signal_variance,
    )
    return ad.reshape(out, ())


def sample_frequencies(hyper, count, rng):
    """Draw `count` spectral frequencies, rows i.i.d. N(0, diag(1/l^2)).

    Reparameterized as eps / lengthscales so the draw stays differentiable
    with respect to the lengthscales.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    eps = rng.standard_normal((count, hyper.dim))
    return ad.div(ad.wrap(eps), hyper.lengthscales)


def feature_scale(hyper, count):
    """sqrt(sf2 / F), the common magnitude of all 2F features."""
    return ad.sqrt(hyper.signal_variance / float(count))


def rff_features(X, omega, scale):
    """Fused Fourier feature block: rows [scale*cos(X w^T), scale*sin(X w^T)].

    X is (N, D) or a single state (D,); output is (N, 2F) or (2F,).
    """
    X, omega, scale = ad.wrap(X), ad.wrap(omega), ad.wrap(scale)
    single = X.ndim == 1
    Xv = X.value[None, :] if single else X.value
    Ov, sv = omega.value, scale.value
    if Xv.ndim != 2 or Ov.ndim != 2 or Xv.shape[1] != Ov.shape[1]:
        raise DimensionError(
            f"states {X.shape} and frequencies {omega.shape} do not align"
        )
    proj = np.einsum("nd,fd->nf", Xv, Ov, optimize=False)
    c, s = np.cos(proj), np.sin(proj)
    out = sv * np.concatenate([c, s], axis=1)
    F = Ov.shape[0]

    def split(g):
        g2 = g[None, :] if single else g
        return g2[:, :F], g2[:, F:]

    def vjp_X(g):
        gc, gs = split(g)
        dproj = sv * (-gc * s + gs * c)
        dX = np.einsum("nf,fd->nd", dproj, Ov, optimize=False)
        return dX[0] if single else dX

    def vjp_omega(g):
        gc, gs = split(g)
        dproj = sv * (-gc * s + gs * c)
        return np.einsum("nf,nd->fd", dproj, Xv, optimize=False)

    def vjp_scale(g):
        gc, gs = split(g)
        return np.asarray((gc * c).sum() + (gs * s).sum())

    value = out[0] if single else out
    return ad.custom(value, [(X, vjp_X), (omega, vjp_omega), (scale, vjp_scale)])


def feature_map(x, omega, hyper):
    """Feature vector phi(x) of length 2F for a single state."""
    x = ad.wrap(x)
    if x.shape != (hyper.dim,):
        raise DimensionError(f"state must have shape ({hyper.dim},), got {x.shape}")
    return rff_features(x, omega, feature_scale(hyper, ad.wrap(omega).shape[0]))


def rff_apply(X, omega, weights, scale):
    """Fused prior-term evaluation: phi(X) @ W without materializing phi.

    `weights` is (2F, D_out). X is (N, D) or (D,); result (N, D_out) or
    (D_out,). The contraction order per output element is fixed, so results
    are bitwise-independent of batching.
    """
    X, omega, weights, scale = (
        ad.wrap(X),
        ad.wrap(omega),
        ad.wrap(weights),
        ad.wrap(scale),
    )
    single = X.ndim == 1
    Xv = X.value[None, :] if single else X.value
    Ov, Wv, sv = omega.value, weights.value, scale.value
    F = Ov.shape[0]
    if Xv.shape[1] != Ov.shape[1] or Wv.shape[0] != 2 * F:
        raise DimensionError(
            f"rff_apply shapes do not align: X {X.shape}, omega {omega.shape}, "
            f"weights {weights.shape}"
        )
    Wc, Ws = Wv[:F], Wv[F:]
    proj = np.einsum("nd,fd->nf", Xv, Ov, optimize=False)
    c, s = np.cos(proj), np.sin(proj)
    pre = np.einsum("nf,fd->nd", c, Wc, optimize=False) + np.einsum(
        "nf,fd->nd", s, Ws, optimize=False
    )
    out = sv * pre

    def expand(g):
        return g[None, :] if single else g

    def vjp_X(g):
        g2 = expand(g)
        tc = np.einsum("nd,fd->nf", g2, Wc, optimize=False)
        ts = np.einsum("nd,fd->nf", g2, Ws, optimize=False)
        dproj = sv * (-s * tc + c * ts)
        dX = np.einsum("nf,fd->nd", dproj, Ov, optimize=False)
        return dX[0] if single else dX

    def vjp_omega(g):
        g2 = expand(g)
        tc = np.einsum("nd,fd->nf", g2, Wc, optimize=False)
        ts = np.einsum("nd,fd->nf", g2, Ws, optimize=False)
        dproj = sv * (-s * tc + c * ts)
        return np.einsum("nf,nd->fd", dproj, Xv, optimize=False)

    def vjp_weights(g):
        g2 = expand(g)
        dWc = sv * np.einsum("nf,nd->fd", c, g2, optimize=False)
        dWs = sv * np.einsum("nf,nd->fd", s, g2, optimize=False)
        return np.concatenate([dWc, dWs], axis=0)

    def vjp_scale(g):
        return np.asarray((expand(g) * pre).sum())

    value = out[0] if single else out
    return ad.custom(
        value,
        [(X, vjp_X), (omega, vjp_omega), (weights, vjp_weights), (scale, vjp_scale)],
    )
