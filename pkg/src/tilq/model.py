"""Problem and market specifications, time grid, coefficient paths.

All types are immutable after construction and hold plain float64 numpy
arrays, so they can be shared freely across threads.  Coefficient paths are
either constant or piecewise linear in time; piecewise breakpoints must
cover the full horizon (no extrapolation) and, for the solvers, must sit on
grid nodes so the fixed-step integrators never straddle a kink.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import AssumptionError

# PSD test tolerance: eigenvalue floor allowing representation round-off.
PSD_EIG_FLOOR = -1e-10
# Symmetry tolerance for R at every node.
SYM_TOL = 1e-12
# Below this, a coefficient counts as identically zero (case (iii) routing).
ZERO_TOL = 1e-14
# Above this, the smallest eigenvalue counts as uniformly positive definite.
PD_TOL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Discretisation 0 = t_0 < t_1 < ... < t_steps = T of the horizon."""

    horizon: float
    steps: int
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size != self.steps + 1:
            raise ValueError("grid needs steps+1 nodes")
        if nodes[0] != 0.0 or nodes[-1] != self.horizon:
            raise ValueError("grid must start at 0 and end exactly at the horizon")
        if np.any(np.diff(nodes) <= 0.0):
            raise ValueError("grid nodes must be strictly increasing")
        nodes.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, horizon: float, steps: int) -> "TimeGrid":
        if horizon <= 0.0 or steps < 1:
            raise ValueError("horizon must be positive and steps >= 1")
        nodes = np.linspace(0.0, horizon, steps + 1)
        nodes[-1] = horizon
        return cls(horizon=float(horizon), steps=int(steps), nodes=nodes)

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def is_uniform(self) -> bool:
        dt = self.dt
        return bool(np.all(np.abs(dt - dt[0]) <= 1e-12 * max(dt[0], 1.0)))

    def refined(self, factor: int = 2) -> "TimeGrid":
        """Grid with each interval split into `factor` equal parts."""
        parts = [
            np.linspace(self.nodes[i], self.nodes[i + 1], factor + 1)[:-1]
            for i in range(self.steps)
        ]
        nodes = np.concatenate(parts + [self.nodes[-1:]])
        nodes[0] = 0.0
        nodes[-1] = self.horizon
        return TimeGrid(horizon=self.horizon, steps=self.steps * factor, nodes=nodes)

    def index_of(self, t: float) -> int:
        """Node index of t; raises if t is not a grid node."""
        i = int(np.argmin(np.abs(self.nodes - t)))
        if abs(self.nodes[i] - t) > 1e-9 * max(1.0, self.horizon):
            raise ValueError(f"t={t} is not a grid node")
        return i


@dataclass(frozen=True)
class CoefficientPath:
    """Deterministic coefficient, constant or piecewise linear in time.

    `values` is stacked along axis 0 for piecewise paths; entries may be
    scalars, vectors or matrices but all breakpoints must share one shape.
    """

    kind: str  # "constant" | "piecewise"
    values: np.ndarray
    times: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if self.kind == "constant":
            times = None
        elif self.kind == "piecewise":
            times = np.asarray(self.times, dtype=float)
            if times.ndim != 1 or times.size < 2:
                raise ValueError("piecewise path needs >= 2 breakpoints")
            if np.any(np.diff(times) <= 0.0):
                raise ValueError("breakpoint times must be strictly increasing")
            if values.shape[0] != times.size:
                raise ValueError("one value per breakpoint required")
            times.flags.writeable = False
        else:
            raise ValueError(f"unknown path kind {self.kind!r}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "times", times)

    @classmethod
    def constant(cls, value) -> "CoefficientPath":
        return cls(kind="constant", values=np.asarray(value, dtype=float))

    @classmethod
    def piecewise(cls, times, values) -> "CoefficientPath":
        return cls(kind="piecewise", values=np.asarray(values, dtype=float),
                   times=np.asarray(times, dtype=float))

    @property
    def shape(self) -> tuple:
        return self.values.shape if self.kind == "constant" else self.values.shape[1:]

    def covers(self, t0: float, t1: float) -> bool:
        if self.kind == "constant":
            return True
        return self.times[0] <= t0 + 1e-12 and self.times[-1] >= t1 - 1e-12

    def __call__(self, t):
        """Value at time t (scalar or 1-d array of times)."""
        t = np.asarray(t, dtype=float)
        scalar_in = t.ndim == 0
        tt = np.atleast_1d(t)
        if self.kind == "constant":
            out = np.broadcast_to(self.values, tt.shape + self.shape).copy()
        else:
            lo, hi = self.times[0], self.times[-1]
            if np.any(tt < lo - 1e-12) or np.any(tt > hi + 1e-12):
                raise ValueError("evaluation time outside breakpoint span")
            tc = np.clip(tt, lo, hi)
            idx = np.clip(np.searchsorted(self.times, tc, side="right") - 1, 0,
                          self.times.size - 2)
            t0 = self.times[idx]
            t1 = self.times[idx + 1]
            w = ((tc - t0) / (t1 - t0)).reshape(tt.shape + (1,) * len(self.shape))
            out = (1.0 - w) * self.values[idx] + w * self.values[idx + 1]
        return out[0] if scalar_in else out

    def breakpoints_on(self, grid: TimeGrid) -> bool:
        """True if every interior breakpoint coincides with a grid node."""
        if self.kind == "constant":
            return True
        tol = 1e-9 * max(1.0, grid.horizon)
        return all(np.min(np.abs(grid.nodes - bt)) <= tol for bt in self.times)


def eval_coefficient(path: CoefficientPath, t: float):
    """Coefficient value at time t; exact at breakpoints, linear between."""
    return path(t)


def _as_path(value, shape=None) -> CoefficientPath:
    if isinstance(value, CoefficientPath):
        return value
    p = CoefficientPath.constant(value)
    if shape is not None and p.shape != shape:
        raise ValueError(f"coefficient has shape {p.shape}, expected {shape}")
    return p


@dataclass(frozen=True)
class ProblemSpec:
    """Data of the linear-quadratic problem on [0, T] (state dimension n).

    Only n = 1 is supported by the equilibrium solvers; n > 1 specs are
    accepted for the second-order adjoint evaluation alone.
    """

    grid: TimeGrid
    n: int = 1
    l: int = 1
    d: int = 1
    A: CoefficientPath = None
    B: CoefficientPath = None
    C: CoefficientPath = None
    D: CoefficientPath = None
    b: CoefficientPath = None
    sigma: CoefficientPath = None
    Q: CoefficientPath = None
    R: CoefficientPath = None
    G: float = 1.0
    h: float = 1.0
    mu1: float = 0.0
    mu2: float = 0.0
    x0: float = 1.0

    def __post_init__(self):
        if self.n < 1 or self.l < 1 or self.d < 1:
            raise ValueError("dimensions must be positive")
        defaults = {
            "A": 0.0, "B": np.zeros(self.l), "C": np.zeros(self.d),
            "D": np.zeros((self.d, self.l)), "b": 0.0,
            "sigma": np.zeros(self.d), "Q": 0.0, "R": np.eye(self.l),
        }
        shapes = {
            "A": (), "B": (self.l,), "C": (self.d,), "D": (self.d, self.l),
            "b": (), "sigma": (self.d,), "Q": (), "R": (self.l, self.l),
        }
        for name, default in defaults.items():
            raw = getattr(self, name)
            path = _as_path(default if raw is None else raw, shapes[name])
            if path.shape != shapes[name]:
                raise ValueError(f"{name} has shape {path.shape}, expected {shapes[name]}")
            object.__setattr__(self, name, path)

    @property
    def T(self) -> float:
        return self.grid.horizon

    def coefficient_items(self):
        return [("A", self.A), ("B", self.B), ("C", self.C), ("D", self.D),
                ("b", self.b), ("sigma", self.sigma), ("Q", self.Q), ("R", self.R)]


@dataclass(frozen=True)
class DeterministicPremium:
    """Risk premium as a deterministic d-vector path."""

    theta: CoefficientPath

    @property
    def stochastic(self) -> bool:
        return False


@dataclass(frozen=True)
class OUPremium:
    """Risk premium theta(y) = theta_bar + loading * y driven by a scalar
    Ornstein-Uhlenbeck factor dY = kappa (mean - Y) dt + vol dW^j."""

    kappa: float
    mean: float
    vol: float
    y0: float
    theta_bar: np.ndarray
    loading: np.ndarray
    component: int = 0  # which Brownian component drives the factor

    def __post_init__(self):
        for name in ("theta_bar", "loading"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.theta_bar.shape != self.loading.shape:
            raise ValueError("theta_bar and loading must have equal length")
        if self.kappa < 0.0 or self.vol < 0.0:
            raise ValueError("kappa and vol must be nonnegative")

    @property
    def stochastic(self) -> bool:
        return True

    def theta(self, y):
        """theta(y) for scalar y or arrays of factor values (appends axis d)."""
        y = np.asarray(y, dtype=float)
        return self.theta_bar + self.loading * y[..., None]


@dataclass(frozen=True)
class MarketSpec:
    """Mean-variance market: deterministic rate, deterministic or OU-factor
    risk premium, objective weights mu1 >= 0 and mu2."""

    grid: TimeGrid
    d: int
    r: CoefficientPath
    premium: Union[DeterministicPremium, OUPremium]
    mu1: float = 0.0
    mu2: float = 0.0
    x0: float = 1.0
    sigma_matrix: Optional[np.ndarray] = None  # optional, for u -> pi conversion

    def __post_init__(self):
        object.__setattr__(self, "r", _as_path(self.r, ()))
        if self.mu1 < 0.0:
            raise ValueError("mu1 must be nonnegative")
        if isinstance(self.premium, DeterministicPremium):
            if self.premium.theta.shape != (self.d,):
                raise ValueError("theta path must be a d-vector")
        else:
            if self.premium.theta_bar.size != self.d:
                raise ValueError("theta_bar must have length d")
            if not (0 <= self.premium.component < self.d):
                raise ValueError("factor component out of range")
        if self.sigma_matrix is not None:
            sm = np.asarray(self.sigma_matrix, dtype=float)
            if sm.shape != (self.d, self.d):
                raise ValueError("sigma_matrix must be d x d")
            sm.flags.writeable = False
            object.__setattr__(self, "sigma_matrix", sm)

    @property
    def T(self) -> float:
        return self.grid.horizon

    @property
    def stochastic(self) -> bool:
        return self.premium.stochastic


@dataclass(frozen=True)
class Violation:
    name: str
    time: Optional[float]
    detail: str

    def __str__(self):
        at = "" if self.time is None else f" at t={self.time:.6g}"
        return f"{self.name}{at}: {self.detail}"


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple
    case: str  # "i" | "ii" | "iii" | "none"
    flags: tuple = ()

    @property
    def ok(self) -> bool:
        return len(self.violations) == 0

    def summary(self) -> str:
        head = f"case={self.case}, {len(self.violations)} violation(s)"
        lines = [head] + [f"  - {v}" for v in self.violations]
        return "\n".join(lines)


def _min_eig_sym(mat: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (mat + mat.T)).min())


def gamma1_terminal_weighted(spec: ProblemSpec) -> np.ndarray:
    """Gamma^(1) on grid nodes: mu1 * exp(int_t^T A ds), exact for the
    piecewise-linear A (local Simpson is exact on linear segments)."""
    from .integrate import CumInt

    return spec.mu1 * np.exp(CumInt(lambda t: spec.A(t), spec.grid).node_values)


def validate_spec(spec: ProblemSpec) -> ValidationResult:
    """Check every standing assumption and classify the solvable case.

    Violations are data, not errors: the result lists each failed assumption
    with the first node time where it fails.  The case label tells which
    hypothesis set of the deterministic equilibrium theorem applies
    ("none" if no set holds).
    """
    v: list[Violation] = []
    flags: list[str] = []
    nodes = spec.grid.nodes

    for name, path in spec.coefficient_items():
        if not path.covers(0.0, spec.T):
            v.append(Violation(f"{name} covers [0,T]", None,
                               "breakpoints do not span the horizon"))

    if spec.n != 1:
        flags.append("closed-form-P only")

    # Q >= 0, R symmetric PSD on every node, G >= 0.
    Qv = spec.Q(nodes)
    bad = np.nonzero(Qv < PSD_EIG_FLOOR)[0]
    if bad.size:
        i = bad[0]
        v.append(Violation("Q >= 0", float(nodes[i]), f"Q = {Qv[i]:.3g}"))
    Rv = spec.R(nodes)
    for i, t in enumerate(nodes):
        Rt = Rv[i]
        asym = float(np.abs(Rt - Rt.T).max())
        if asym > SYM_TOL:
            v.append(Violation("R symmetric", float(t), f"max asymmetry {asym:.3g}"))
            break
    rmins = np.array([_min_eig_sym(Rv[i]) for i in range(nodes.size)])
    bad = np.nonzero(rmins < PSD_EIG_FLOOR)[0]
    if bad.size:
        i = bad[0]
        v.append(Violation("R PSD", float(nodes[i]), f"min eig {rmins[i]:.3g}"))
    if spec.G < PSD_EIG_FLOOR:
        v.append(Violation("G >= 0", None, f"G = {spec.G:.3g}"))

    # Hypothesis of the deterministic equilibrium construction.
    if not (spec.G >= spec.h and spec.h > 0.0):
        v.append(Violation("G >= h > 0", None, f"G = {spec.G:.3g}, h = {spec.h:.3g}"))

    case = "none"
    if spec.n == 1 and spec.G >= spec.h > 0.0:
        case = _classify_case(spec, rmins)

    return ValidationResult(violations=tuple(v), case=case, flags=tuple(flags))


def _classify_case(spec: ProblemSpec, rmins: np.ndarray) -> str:
    nodes = spec.grid.nodes
    Bv = spec.B(nodes)               # (m, l)
    Cv = spec.C(nodes)               # (m, d)
    Dv = spec.D(nodes)               # (m, d, l)
    Qv = spec.Q(nodes)
    Rv = spec.R(nodes)
    DtC = np.einsum("mdl,md->ml", Dv, Cv)
    DtD = np.einsum("mdj,mdl->mjl", Dv, Dv)
    gamma1 = gamma1_terminal_weighted(spec)

    r_pd = bool(rmins.min() > PD_TOL)
    r_zero = bool(np.abs(Rv).max() <= ZERO_TOL)
    dtd_pd = bool(min(_min_eig_sym(DtD[i]) for i in range(nodes.size)) > PD_TOL)

    # B = lambda * D'C for one constant lambda >= 0 (least squares over nodes).
    denom = float(np.sum(DtC * DtC))
    if denom <= ZERO_TOL:
        lam = 0.0
        b_match = bool(np.abs(Bv).max() <= 1e-10)
    else:
        lam = float(np.sum(Bv * DtC) / denom)
        scale = 1.0 + float(np.abs(Bv).max())
        b_match = lam >= 0.0 and bool(np.abs(Bv - lam * DtC).max() <= 1e-10 * scale)

    # (Q D'D + |C|^2 R)/l + Gamma1 * sym(D'C B') >= 0 at every node.
    c2 = np.sum(Cv * Cv, axis=1)
    hyp_ok = True
    for i in range(nodes.size):
        sym = 0.5 * (np.outer(DtC[i], Bv[i]) + np.outer(Bv[i], DtC[i]))
        Hh = (Qv[i] * DtD[i] + c2[i] * Rv[i]) / spec.l + gamma1[i] * sym
        if _min_eig_sym(Hh) < PSD_EIG_FLOOR:
            hyp_ok = False
            break

    if r_pd and hyp_ok and b_match:
        return "i"
    if r_pd and hyp_ok and dtd_pd:
        return "ii"

    if r_zero and dtd_pd:
        ok = True
        for i in range(nodes.size):
            s_bc = np.linalg.solve(DtD[i], Bv[i] + DtC[i])
            s_dc = np.linalg.solve(DtD[i], DtC[i])
            c1 = Qv[i] + gamma1[i] * float(Bv[i] @ s_bc)
            c2i = Qv[i] + gamma1[i] * float(Bv[i] @ s_dc)
            if c1 < PSD_EIG_FLOOR or c2i < PSD_EIG_FLOOR:
                ok = False
                break
        if ok:
            return "iii"
    return "none"


def require_n1(spec: ProblemSpec, what: str) -> None:
    if spec.n != 1:
        raise AssumptionError(f"{what} requires state dimension 1 (got n={spec.n})")


def require_breakpoints_on_grid(spec_or_market) -> None:
    """Solvers step node-to-node; a kink inside a step would degrade order."""
    if isinstance(spec_or_market, ProblemSpec):
        items = spec_or_market.coefficient_items()
    else:
        items = [("r", spec_or_market.r)]
        if isinstance(spec_or_market.premium, DeterministicPremium):
            items.append(("theta", spec_or_market.premium.theta))
    grid = spec_or_market.grid
    for name, path in items:
        if not path.breakpoints_on(grid):
            raise AssumptionError(
                f"breakpoints of {name} must coincide with grid nodes")
