"""Differentiable initial-value-problem solvers.

Two integrators over autonomous vector fields f(x):

* `rk4`: classic fixed-step Runge-Kutta. The step grid is the uniform grid
  implied by the requested step size, subdivided so every requested output
  time is a step endpoint. All state arithmetic is recorded on the tape,
  so gradients of the discretized trajectory are exact.
* `dopri5`: adaptive Dormand-Prince 5(4) with the standard fourth-order
  dense interpolant. Step-size control reads raw values only; requested
  interior output times are interpolated and never influence the step
  sequence.

`solve_batch` integrates many requests at once. Compatible fixed-step
requests are advanced jointly as rows of one batched state tensor; because
every state-dependent operation is elementwise or an order-stable einsum,
each row is bitwise-identical to solving its request alone. The `workers`
argument caps how many segments advance together.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, NumericalError

__all__ = [
    "IvpRequest",
    "IvpSolution",
    "DivergenceError",
    "BatchSolveError",
    "solve",
    "solve_batch",
]


class DivergenceError(NumericalError):
    """Integration ran away; carries the last finite state and time."""

    def __init__(self, message, last_state=None, last_time=None):
        super().__init__(message)
        self.last_state = last_state
        self.last_time = last_time


class BatchSolveError(NumericalError):
    """One or more segments of a batched solve failed."""

    def __init__(self, message, indices):
        super().__init__(message)
        self.indices = tuple(indices)


@dataclass
class IvpRequest:
    """One initial-value problem with states requested at fixed times."""

    x0: object
    t_start: float
    output_times: object
    rhs: object
    kind: str = "dopri5"
    rtol: float = 1e-5
    atol: float = 1e-5
    dt: float = 0.1
    max_steps: int = 100_000

    def __post_init__(self):
        self.x0 = ad.wrap(self.x0)
        if self.x0.ndim != 1:
            raise DimensionError(f"x0 must be a state vector, got shape {self.x0.shape}")
        self.t_start = float(self.t_start)
        self.output_times = np.asarray(self.output_times, dtype=np.float64)
        if self.output_times.ndim != 1 or self.output_times.size == 0:
            raise ContractError("output_times must be a non-empty 1-d sequence")
        if np.any(np.diff(self.output_times) <= 0):
            raise ContractError("output_times must be strictly increasing")
        if self.output_times[0] < self.t_start:
            raise ContractError("output_times must start at or after t_start")
        if self.kind not in ("rk4", "dopri5"):
            raise ContractError(f"unknown solver kind {self.kind!r}")
        if self.rtol <= 0 or self.atol <= 0:
            raise ContractError("rtol and atol must be positive")
        if self.dt <= 0:
            raise ContractError("dt must be positive")
        if self.max_steps < 1:
            raise ContractError("max_steps must be positive")


@dataclass
class IvpSolution:
    """States at the requested output times plus step accounting."""

    states: object
    n_steps: int
    n_accepted: int
    n_rejected: int


def _as_batch(x0):
    return ad.reshape(x0, (1, x0.shape[0]))


def _check_finite(val, t, what):
    if not np.isfinite(val).all():
        raise NumericalError(f"{what} produced non-finite values near t={t:.6g}")


def _axpy(x, k, a):
    """Fused x + a*k for a constant step factor `a` (scalar or (B, 1))."""
    value = x.value + a * k.value
    return ad.custom(value, [(x, lambda g: g), (k, lambda g: a * g)])


def _rk4_combine(x, k1, k2, k3, k4, h):
    """Fused x + (h/6)(k1 + 2 k2 + 2 k3 + k4); `h` constant."""
    w = h / 6.0
    value = x.value + w * (k1.value + 2.0 * k2.value + 2.0 * k3.value + k4.value)
    return ad.custom(
        value,
        [
            (x, lambda g: g),
            (k1, lambda g: w * g),
            (k2, lambda g: (2.0 * w) * g),
            (k3, lambda g: (2.0 * w) * g),
            (k4, lambda g: w * g),
        ],
    )


def _rk4_step(rhs, x, h):
    """One classic RK4 step; `h` is a float or an (B, 1) column (constant)."""
    half = h * 0.5
    k1 = rhs(x)
    k2 = rhs(_axpy(x, k1, half))
    k3 = rhs(_axpy(x, k2, half))
    k4 = rhs(_axpy(x, k3, h))
    return _rk4_combine(x, k1, k2, k3, k4, h)


def _rk4_grid(req):
    t_end = float(req.output_times[-1])
    span = t_end - req.t_start
    if span == 0.0:
        return np.asarray([req.t_start])
    n = max(1, int(np.ceil(span / req.dt - 1e-12)))
    uniform = np.linspace(req.t_start, t_end, n + 1)
    return np.union1d(uniform, req.output_times)


def _solve_rk4(req):
    grid = _rk4_grid(req)
    if len(grid) - 1 > req.max_steps:
        raise DivergenceError(
            f"rk4 grid of {len(grid) - 1} steps exceeds max_steps={req.max_steps}",
            last_state=req.x0.value.copy(),
            last_time=req.t_start,
        )
    x = _as_batch(req.x0)
    outputs = []
    ptr = 0
    out_times = req.output_times
    if out_times[ptr] == req.t_start:
        outputs.append(x)
        ptr += 1
    n_steps = 0
    for j in range(len(grid) - 1):
        h = float(grid[j + 1] - grid[j])
        if h > 0.0:
            x = _rk4_step(req.rhs, x, h)
            n_steps += 1
            _check_finite(x.value, grid[j + 1], "rk4 state")
        while ptr < len(out_times) and out_times[ptr] == grid[j + 1]:
            outputs.append(x)
            ptr += 1
    if ptr != len(out_times):
        raise ContractError("internal: not all output times were visited")
    return IvpSolution(ad.concat_rows(outputs), n_steps, n_steps, 0)


# Dormand-Prince 5(4) tableau.
_DP_A = (
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
# Error weights: 5th-order propagating minus embedded 4th-order solution.
_DP_E = (
    71 / 57600,
    0.0,
    -71 / 16695,
    71 / 1920,
    -17253 / 339200,
    22 / 525,
    -1 / 40,
)
# Coefficients of the quartic dense-output correction term.
_DP_D = (
    -12715105075 / 11282082432,
    0.0,
    87487479700 / 32700410799,
    -10690763975 / 1880347072,
    701980252875 / 199316789632,
    -1453857185 / 822651844,
    69997945 / 29380423,
)


def _error_norm(err, y0, y1, rtol, atol):
    sc = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    return float(np.sqrt(np.mean((err / sc) ** 2)))


def _initial_step(rhs_val, x0, t_end, rtol, atol):
    span = t_end
    sc = atol + rtol * np.abs(x0)
    f0 = rhs_val(x0)
    d0 = np.sqrt(np.mean((x0 / sc) ** 2))
    d1 = np.sqrt(np.mean((f0 / sc) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = x0 + h0 * f0
    f1 = rhs_val(y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / sc) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100.0 * h0, h1, span)


def _solve_dopri5(req):
    t_end = float(req.output_times[-1])
    rhs = req.rhs
    x = _as_batch(req.x0)
    outputs = []
    ptr = 0
    out_times = req.output_times
    while ptr < len(out_times) and out_times[ptr] == req.t_start:
        outputs.append(x)
        ptr += 1
    if ptr == len(out_times):
        return IvpSolution(ad.concat_rows(outputs), 0, 0, 0)

    def rhs_val(arr):
        out = rhs(ad.wrap(arr[None, :]))
        return out.value[0]

    t = req.t_start
    h = _initial_step(rhs_val, req.x0.value, t_end - t, req.rtol, req.atol)
    k_first = rhs(x)
    n_attempts = n_accepted = n_rejected = 0
    while t < t_end:
        if n_attempts >= req.max_steps:
            raise DivergenceError(
                f"dopri5 exceeded max_steps={req.max_steps} at t={t:.6g}",
                last_state=x.value[0].copy(),
                last_time=t,
            )
        h = min(h, t_end - t)
        n_attempts += 1
        k = [k_first]
        for stage in range(6):
            acc = x
            for coef, ki in zip(_DP_A[stage], k):
                if coef != 0.0:
                    acc = _axpy(acc, ki, h * coef)
            k.append(rhs(acc))
        y1 = acc  # stage 7 state: the 5th-order solution (FSAL).
        _check_finite(y1.value, t + h, "dopri5 rhs")
        err = np.zeros_like(y1.value)
        for coef, ki in zip(_DP_E, k):
            if coef != 0.0:
                err = err + (h * coef) * ki.value
        norm = _error_norm(err[0], x.value[0], y1.value[0], req.rtol, req.atol)
        if not np.isfinite(norm):
            raise NumericalError(f"dopri5 error estimate non-finite near t={t:.6g}")
        if norm <= 1.0:
            t_new = t + h
            while ptr < len(out_times) and out_times[ptr] <= t_new + 1e-14 * abs(t_new):
                t_out = out_times[ptr]
                if t_out >= t_new:
                    outputs.append(y1)
                else:
                    outputs.append(_dense_eval(x, y1, k, h, (t_out - t) / h))
                ptr += 1
            x = y1
            k_first = k[6]
            t = t_new
            n_accepted += 1
            factor = 5.0 if norm == 0.0 else min(5.0, max(0.2, 0.9 * norm**-0.2))
            h *= factor
        else:
            n_rejected += 1
            h *= max(0.2, 0.9 * norm**-0.2)
    return IvpSolution(ad.concat_rows(outputs), n_attempts, n_accepted, n_rejected)


def _dense_eval(y0, y1, k, h, theta):
    """Fourth-order dense output of the accepted step at fraction theta."""
    ydiff = y1 - y0
    bspl = (h * 1.0) * k[0] - ydiff
    r4 = ydiff - h * k[6] - bspl
    r5 = None
    for coef, ki in zip(_DP_D, k):
        if coef != 0.0:
            term = (h * coef) * ki
            r5 = term if r5 is None else r5 + term
    inner = r4 + (1.0 - theta) * r5
    return y0 + theta * (ydiff + (1.0 - theta) * (bspl + theta * inner))


def solve(req):
    """Integrate one request and return states at its output times."""
    if req.kind == "rk4":
        return _solve_rk4(req)
    return _solve_dopri5(req)


def _step_counts(reqs):
    """Step counts when all requests are fixed-step with a terminal output."""
    if any(r.kind != "rk4" or len(r.output_times) != 1 for r in reqs):
        return None
    counts = []
    for r in reqs:
        span = float(r.output_times[0]) - r.t_start
        counts.append(0 if span == 0.0 else max(1, int(np.ceil(span / r.dt - 1e-12))))
    return counts


def _solve_joint(reqs, n_steps):
    rhs = reqs[0].rhs
    x = ad.concat_rows([_as_batch(r.x0) for r in reqs])
    if n_steps == 0:
        return x
    # Per-row linspace grids reproduce the single-solve step sizes exactly,
    # ulp for ulp, so joint results are bitwise-equal to sequential ones.
    starts = np.array([r.t_start for r in reqs])
    ends = np.array([float(r.output_times[0]) for r in reqs])
    grids = np.linspace(starts, ends, n_steps + 1, axis=1)
    for j in range(n_steps):
        h = (grids[:, j + 1] - grids[:, j])[:, None]
        x = _rk4_step(rhs, x, h)
        bad = ~np.isfinite(x.value).all(axis=1)
        if bad.any():
            raise BatchSolveError(
                f"joint step {j + 1} diverged", indices=np.flatnonzero(bad).tolist()
            )
    return x


def solve_batch(reqs, workers=None):
    """Solve a list of requests sharing one vector field.

    Compatible fixed-step segments advance jointly in chunks of at most
    `workers` rows (all at once when `workers` is None); results are
    bitwise-identical to solving each request on its own. Incompatible
    requests fall back to per-request integration.
    """
    reqs = list(reqs)
    if not reqs:
        return []
    counts = _step_counts(reqs)
    if counts is None:
        solutions = []
        failures = []
        for i, r in enumerate(reqs):
            try:
                solutions.append(solve(r))
            except NumericalError as e:
                failures.append((i, e))
        if failures:
            idx = [i for i, _ in failures]
            raise BatchSolveError(
                f"segments {idx} failed: {failures[0][1]}", indices=idx
            )
        return solutions

    chunk = len(reqs) if workers is None else max(1, int(workers))
    groups = {}
    for i, n in enumerate(counts):
        groups.setdefault(n, []).append(i)
    solutions = [None] * len(reqs)
    for n_steps, members in sorted(groups.items()):
        for lo in range(0, len(members), chunk):
            idx = members[lo : lo + chunk]
            part = [reqs[i] for i in idx]
            try:
                joint = _solve_joint(part, n_steps)
            except BatchSolveError as e:
                bad = [idx[i] for i in e.indices]
                raise BatchSolveError(f"segments {bad} diverged", indices=bad) from None
            for row, i in enumerate(idx):
                states = ad.slice_rows(joint, row, row + 1)
                solutions[i] = IvpSolution(states, n_steps, n_steps, 0)
    return solutions
