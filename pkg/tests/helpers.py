"""Shared test utilities: central finite differences as the gradient oracle."""

import numpy as np


def finite_difference(f, params, h=1e-5):
    """Central-difference gradients of a scalar function of named arrays.

    `f` maps a dict {name: ndarray} to a float and is re-evaluated from
    scratch for every probe, so it stays independent of any tape mechanics.
    """
    grads = {}
    for name, base in params.items():
        base = np.asarray(base, dtype=np.float64)
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            up = dict(params)
            dn = dict(params)
            pu = base.copy().reshape(-1)
            pd = base.copy().reshape(-1)
            pu[i] += h
            pd[i] -= h
            up[name] = pu.reshape(base.shape)
            dn[name] = pd.reshape(base.shape)
            gflat[i] = (f(up) - f(dn)) / (2.0 * h)
        grads[name] = g
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    """Elementwise relative comparison with an absolute floor."""
    for name in numeric:
        a = np.asarray(analytic[name])
        n = np.asarray(numeric[name])
        denom = np.maximum(np.abs(n), atol / rtol)
        err = np.abs(a - n) / denom
        assert err.max() < rtol, (
            f"gradient mismatch for {name!r}: max rel err {err.max():.3e}\n"
            f"analytic={a}\nnumeric={n}"
        )
