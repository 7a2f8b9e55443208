"""Ground-truth oscillators, synthetic datasets, and evaluation metrics.

Two benchmark systems:

* `vdp`:  dx1 = x2,                     dx2 = -x1 + 0.5 x2 (1 - x1^2)
* `fhn`:  dx1 = 3 (x1 - x1^3/3 + x2),   dx2 = (0.2 - 3 x1 - 0.2 x2) / 3

Datasets are generated by integrating the true field tightly (dopri5 at
1e-8), adding i.i.d. Gaussian noise per coordinate, and optionally dropping
observations whose (noisy) values satisfy a state-space mask predicate.
Generation is bitwise-deterministic under a fixed generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import odeint
from .errors import ConfigError, ContractError, DimensionError
from .models import Trajectory

SYSTEM_DIMS = {"vdp": 2, "fhn": 2}

# Column selectors / assemblers used to write the fields as batched tape ops.
_PICK1 = np.array([[1.0], [0.0]])
_PICK2 = np.array([[0.0], [1.0]])
_PAD1 = np.array([[1.0, 0.0]])
_PAD2 = np.array([[0.0, 1.0]])


def true_field(kind, x):
    """Exact right-hand side of the named system; accepts (B, 2) or (2,)."""
    x = ad.wrap(x)
    single = x.ndim == 1
    x2d = ad.reshape(x, (1, x.shape[0])) if single else x
    if x2d.shape[1] != 2:
        raise DimensionError(f"{kind} expects 2-d states, got {x2d.shape}")
    x1 = ad.contract("bd,de->be", x2d, ad.wrap(_PICK1))
    x2 = ad.contract("bd,de->be", x2d, ad.wrap(_PICK2))
    if kind == "vdp":
        d1 = x2
        d2 = -1.0 * x1 + 0.5 * x2 * (1.0 - x1 * x1)
    elif kind == "fhn":
        d1 = 3.0 * (x1 - x1 * x1 * x1 / 3.0 + x2)
        d2 = (0.2 - 3.0 * x1 - 0.2 * x2) / 3.0
    else:
        raise ConfigError(f"unknown system kind {kind!r}")
    out = ad.contract("be,ed->bd", d1, ad.wrap(_PAD1)) + ad.contract(
        "be,ed->bd", d2, ad.wrap(_PAD2)
    )
    return ad.reshape(out, (x.shape[0],)) if single else out


def parse_mask(expr):
    """Predicate from a conjunction like "x1>0 & x2<0" over state coordinates."""
    terms = []
    for raw in expr.split("&"):
        part = raw.strip().replace(" ", "")
        op = ">" if ">" in part else "<" if "<" in part else None
        if op is None or not part.startswith("x"):
            raise ConfigError(f"cannot parse mask term {raw!r}")
        name, threshold = part.split(op)
        try:
            dim = int(name[1:]) - 1
            value = float(threshold)
        except ValueError as e:
            raise ConfigError(f"cannot parse mask term {raw!r}") from e
        terms.append((dim, op, value))

    def predicate(states):
        states = np.asarray(states)
        keep = np.ones(len(states), dtype=bool)
        for dim, op, value in terms:
            col = states[:, dim]
            keep &= (col > value) if op == ">" else (col < value)
        return keep

    return predicate


@dataclass
class SystemSpec:
    """Recipe for one synthetic trajectory dataset."""

    kind: str
    x0: np.ndarray
    t_span: tuple
    n: int
    grid: str = "regular"
    noise_var: float = 0.0
    mask: str | None = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        if self.kind not in SYSTEM_DIMS:
            raise ConfigError(f"unknown system kind {self.kind!r}")
        if self.n < 2:
            raise ConfigError("need at least two observations")
        if self.t_span[1] <= self.t_span[0]:
            raise ConfigError("t_span must be increasing")
        if self.noise_var < 0:
            raise ConfigError("noise variance must be non-negative")
        if self.grid not in ("regular", "random"):
            raise ConfigError(f"unknown grid kind {self.grid!r}")


@dataclass
class Dataset:
    """All grid points of one simulated trajectory plus the training mask."""

    times: np.ndarray
    clean: np.ndarray
    noisy: np.ndarray
    kept: np.ndarray
    noise_var: float

    @property
    def trajectory(self):
        return Trajectory(self.times[self.kept], self.noisy[self.kept])

    @property
    def held_out(self):
        sel = ~self.kept
        return self.times[sel], self.noisy[sel], self.clean[sel]


def make_grid(spec, rng):
    t0, t1 = spec.t_span
    if spec.grid == "regular":
        return np.linspace(t0, t1, spec.n)
    span = t1 - t0
    ts = np.sort(rng.uniform(t0, t1, size=spec.n))
    # The earliest time is kept away from t0 so the first segment has
    # positive length; restore strict monotonicity if the clamp created ties.
    ts[0] = max(ts[0], t0 + 0.01 * span)
    for i in range(1, spec.n):
        if ts[i] <= ts[i - 1]:
            ts[i] = ts[i - 1] + 1e-9 * span
    return ts


def generate(spec, rng):
    """Simulate the system on the requested grid and add observation noise."""
    times = make_grid(spec, rng)
    req = odeint.IvpRequest(
        x0=spec.x0,
        t_start=float(spec.t_span[0]),
        output_times=times,
        rhs=lambda x: true_field(spec.kind, x),
        kind="dopri5",
        rtol=1e-8,
        atol=1e-8,
    )
    clean = odeint.solve(req).states.value
    noisy = clean + np.sqrt(spec.noise_var) * rng.standard_normal(clean.shape)
    kept = np.ones(spec.n, dtype=bool)
    if spec.mask is not None:
        kept = ~parse_mask(spec.mask)(noisy)
    return Dataset(times, clean, noisy, kept, spec.noise_var)


def mse(pred_means, truth):
    """Mean squared error over every time/coordinate entry."""
    pred_means = np.asarray(pred_means, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred_means.shape != truth.shape:
        raise DimensionError(
            f"shape mismatch: {pred_means.shape} vs {truth.shape}"
        )
    return float(np.mean((pred_means - truth) ** 2))


def mnll(pred_means, pred_vars, truth):
    """Mean negative Gaussian log-likelihood over every entry."""
    pred_means = np.asarray(pred_means, dtype=np.float64)
    pred_vars = np.asarray(pred_vars, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred_means.shape != truth.shape or pred_vars.shape != truth.shape:
        raise DimensionError(
            f"shape mismatch: {pred_means.shape}, {pred_vars.shape}, {truth.shape}"
        )
    if np.any(pred_vars <= 0):
        raise ContractError("predictive variances must be positive")
    nll = 0.5 * np.log(2.0 * np.pi * pred_vars) + (truth - pred_means) ** 2 / (
        2.0 * pred_vars
    )
    return float(np.mean(nll))


def _fmt(x):
    return repr(float(x))


def write_series_csv(path, times, values, dim_names=None):
    """Dataset CSV: header t,x1..xD; full-precision decimal rendering."""
    values = np.asarray(values, dtype=np.float64)
    if dim_names is None:
        dim_names = [f"x{i + 1}" for i in range(values.shape[1])]
    lines = ["t," + ",".join(dim_names)]
    for t, row in zip(times, values):
        lines.append(",".join([_fmt(t)] + [_fmt(v) for v in row]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_series_csv(path):
    """Inverse of `write_series_csv`; returns (times, values)."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    header = lines[0].split(",")
    if header[0] != "t":
        raise ConfigError(f"{path}: expected a 't' column first, got {header[0]!r}")
    rows = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
    arr = np.asarray(rows, dtype=np.float64)
    return arr[:, 0], arr[:, 1:]
