"""Problem instances: coefficients, generator, validation and cross-term elimination."""
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DimensionError, IndefiniteReducedQ, SingularR
from .expr import MatrixFunction, as_matrix_function
from .grid import TimeGrid

DETERMINISTIC = "deterministic"
BROWNIAN = "brownian_markovian"
MODES = (DETERMINISTIC, BROWNIAN)

COEFFICIENT_NAMES = ("A", "B", "C", "D", "b", "sigma", "Q", "R", "q", "r", "S")
REQUIRED_COEFFICIENTS = ("A", "B", "Q", "R")
SYMMETRIC_COEFFICIENTS = ("Q", "R")


def coefficient_shape(name, n, m):
    return {
        "A": (n, n), "C": (n, n), "Q": (n, n),
        "B": (n, m), "D": (n, m),
        "R": (m, m), "S": (m, n),
        "b": (n,), "sigma": (n,), "q": (n,), "r": (m,),
        "G": (n, n), "g": (n,),
    }[name]


class Generator:
    """Rate matrix of the regime chain."""

    def __init__(self, rates):
        self.rates = np.array(rates, dtype=float)
        if self.rates.ndim == 0:
            self.rates = self.rates.reshape(1, 1)
        self.rates.setflags(write=False)

    @property
    def ell(self):
        return self.rates.shape[0]

    @property
    def exit_rates(self):
        return -np.diag(self.rates)

    def violations(self, tol_gen=1e-12):
        """List of ``(row, message, value)`` tuples for every broken generator constraint."""
        out = []
        q = self.rates
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            return [(None, f"generator must be square, got shape {q.shape}", None)]
        for i in range(q.shape[0]):
            for j in range(q.shape[1]):
                if i != j and q[i, j] < -tol_gen:
                    out.append((i, f"generator entry ({i + 1},{j + 1}) is negative: {q[i, j]:g}", q[i, j]))
            s = q[i].sum()
            if abs(s) > tol_gen:
                out.append((i, f"generator row {i + 1} sums to {s:g}", s))
        return out

    def __repr__(self):
        return f"Generator({self.rates.tolist()})"


@dataclass(frozen=True)
class CoefficientSet:
    """Per-regime coefficient functions of ``(t, w)``; ``S`` is ``None`` when absent."""

    A: MatrixFunction
    B: MatrixFunction
    C: MatrixFunction
    D: MatrixFunction
    b: MatrixFunction
    sigma: MatrixFunction
    Q: MatrixFunction
    R: MatrixFunction
    q: MatrixFunction
    r: MatrixFunction
    S: Optional[MatrixFunction] = None

    def items(self):
        for name in COEFFICIENT_NAMES:
            value = getattr(self, name)
            if value is not None:
                yield name, value

    def uses_w(self):
        return any(f.uses_w for _, f in self.items())

    def running_cost(self, t, X, u, w=0.0):
        """Integrand ``<Q(X-q),X-q> + 2<S(X-q),u-r> + <R(u-r),u-r>`` for batched ``X``, ``u``."""
        dx = X - self.q(t, w)
        du = u - self.r(t, w)
        val = np.einsum("...i,...ij,...j->...", dx, self.Q(t, w), dx)
        val = val + np.einsum("...i,...ij,...j->...", du, self.R(t, w), du)
        if self.S is not None:
            val = val + 2.0 * np.einsum("...i,...ij,...j->...", du, self.S(t, w), dx)
        return val


@dataclass(frozen=True)
class Terminal:
    G: MatrixFunction
    g: MatrixFunction


@dataclass(frozen=True)
class ProblemSpec:
    """One regime-switching LQ instance.

    ``i0`` is zero-based here; config files and reports use one-based regime labels.
    ``control_shift`` is set by :func:`reduce_cross_term` and holds ``R^{-1} S``
    per regime so that ``u = u_reduced - control_shift X``.
    """

    n: int
    m: int
    ell: int
    T: float
    generator: Generator
    coefficients: tuple
    terminal: tuple
    x: np.ndarray
    i0: int = 0
    lambda_min: float = 1e-6
    randomness_mode: str = DETERMINISTIC
    tol_psd: float = 1e-8
    tol_sym: float = 1e-10
    tol_gen: float = 1e-12
    control_shift: Optional[tuple] = field(default=None, compare=False)

    @classmethod
    def build(cls, *, n, m, T, regimes, terminal=None, generator=None, x=None, i0=0,
              lambda_min=None, randomness_mode=DETERMINISTIC, **tols):
        """Convenience constructor from arrays, scalars, literals or callables.

        ``regimes`` is a list of dicts keyed by coefficient name; missing
        optional coefficients default to zero and ``S`` to absent.
        """
        ell = len(regimes)
        coefs = []
        for k, reg in enumerate(regimes):
            unknown = set(reg) - set(COEFFICIENT_NAMES)
            if unknown:
                raise DimensionError(f"regime {k + 1}: unknown coefficients {sorted(unknown)}")
            kw = {}
            for name in COEFFICIENT_NAMES:
                if name == "S" and reg.get("S") is None:
                    kw["S"] = None
                    continue
                kw[name] = _coerce(reg.get(name), coefficient_shape(name, n, m),
                                   name in SYMMETRIC_COEFFICIENTS, f"regime {k + 1}.{name}")
            coefs.append(CoefficientSet(**kw))
        if terminal is None:
            terminal = [{}] * ell
        terms = []
        for k, term in enumerate(terminal):
            terms.append(Terminal(
                G=_coerce(term.get("G"), (n, n), True, f"terminal {k + 1}.G"),
                g=_coerce(term.get("g"), (n,), False, f"terminal {k + 1}.g"),
            ))
        gen = generator if isinstance(generator, Generator) else Generator(
            np.zeros((ell, ell)) if generator is None else generator)
        if lambda_min is None:
            lambda_min = 1e-6
        x = np.zeros(n) if x is None else np.atleast_1d(np.asarray(x, dtype=float))
        return cls(n=n, m=m, ell=ell, T=float(T), generator=gen, coefficients=tuple(coefs),
                   terminal=tuple(terms), x=x, i0=int(i0), lambda_min=float(lambda_min),
                   randomness_mode=randomness_mode, **tols)

    @property
    def deterministic(self):
        return self.randomness_mode == DETERMINISTIC

    @property
    def has_cross_term(self):
        return any(c.S is not None for c in self.coefficients)

    def coefficient(self, name, i):
        if name in ("G", "g"):
            return getattr(self.terminal[i], name)
        return getattr(self.coefficients[i], name)

    def tabulate(self, name, t, w=0.0):
        """Evaluate one coefficient for every regime: shape ``batch + (ell,) + coef_shape``."""
        if name in ("G", "g"):
            t = self.T
        vals = [self.coefficient(name, i)(t, w) for i in range(self.ell)]
        shape = coefficient_shape(name, self.n, self.m)
        return np.stack(vals, axis=-1 - len(shape))

    def tabulate_all(self, t, w=0.0, names=("A", "B", "C", "D", "b", "sigma", "Q", "R", "q", "r")):
        return {name: self.tabulate(name, t, w) for name in names}

    def to_reduced_control(self, t, X, u, regime, w=0.0):
        """Map an original control to the reduced problem's control."""
        if self.control_shift is None:
            return u
        return u + np.einsum("...ij,...j->...i", self.control_shift[regime](t, w), X)

    def from_reduced_control(self, t, X, u_reduced, regime, w=0.0):
        if self.control_shift is None:
            return u_reduced
        return u_reduced - np.einsum("...ij,...j->...i", self.control_shift[regime](t, w), X)


def _coerce(value, shape, symmetric, label):
    if value is None:
        return MatrixFunction.zeros(shape)
    if isinstance(value, MatrixFunction) or callable(value):
        return as_matrix_function(value, shape, symmetric=symmetric, field=label)
    if isinstance(value, (list, tuple)) and _contains_str(value):
        return MatrixFunction.from_literal(value, shape, field=label, symmetric=symmetric)
    if isinstance(value, str):
        return MatrixFunction.from_literal(value, shape, field=label, symmetric=symmetric)
    try:
        arr = np.array(value, dtype=float)
    except ValueError:
        raise DimensionError(f"{label}: ragged matrix literal") from None
    if arr.size == int(np.prod(shape)) and arr.shape != tuple(shape) and arr.ndim <= 1 and len(shape) == 2:
        arr = arr.reshape(shape)
    elif arr.ndim == 0 and int(np.prod(shape)) == 1:
        arr = arr.reshape(shape)
    # shape mismatches survive here so that validate_spec can report them
    return MatrixFunction.constant(arr, symmetric=symmetric and arr.ndim == 2 and arr.shape[0] == arr.shape[1])


def _contains_str(value):
    if isinstance(value, str):
        return True
    if isinstance(value, (list, tuple)):
        return any(_contains_str(v) for v in value)
    return False


# ---------------------------------------------------------------------------
# validation

@dataclass(frozen=True)
class ValidationEntry:
    code: str
    message: str
    regime: Optional[int] = None
    t: Optional[float] = None
    value: Optional[float] = None

    def __str__(self):
        return self.message


@dataclass
class ValidationReport:
    entries: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.entries

    def add(self, code, message, regime=None, t=None, value=None):
        self.entries.append(ValidationEntry(code, message, regime, t, value))

    def messages(self):
        return [e.message for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def _probe_w(spec, t):
    """Brownian values at which w-dependent coefficients are checked: 0, +-2 sd, +-4 sd."""
    if spec.deterministic:
        return np.zeros((1,) + np.shape(t))
    sd = np.sqrt(np.asarray(t, dtype=float))
    return np.stack([0 * sd, 2 * sd, -2 * sd, 4 * sd, -4 * sd])


def validate_spec(spec, grid=None):
    """Check every structural and sign constraint; never raises.

    Every violated invariant becomes one entry; an empty report means valid.
    """
    report = ValidationReport()
    if grid is None:
        grid = TimeGrid(spec.T, 100) if spec.T > 0 else None
    n, m, ell = spec.n, spec.m, spec.ell

    if not (isinstance(n, (int, np.integer)) and n >= 1):
        report.add("dimension", f"state dimension n must be a positive integer, got {n!r}")
    if not (isinstance(m, (int, np.integer)) and m >= 1):
        report.add("dimension", f"control dimension m must be a positive integer, got {m!r}")
    if ell < 1:
        report.add("dimension", f"number of regimes must be >= 1, got {ell}")
    if not spec.T > 0:
        report.add("horizon", f"horizon T must be positive, got {spec.T}")
    if not 0 <= spec.i0 < max(ell, 1):
        report.add("initial_regime", f"initial regime {spec.i0 + 1} outside 1..{ell}")
    if not spec.lambda_min > 0:
        report.add("lambda_min", f"lambda_min must be positive, got {spec.lambda_min}")
    if spec.randomness_mode not in MODES:
        report.add("mode", f"unknown randomness_mode {spec.randomness_mode!r}")
    if np.shape(spec.x) != (n,):
        report.add("dimension", f"initial state has shape {np.shape(spec.x)}, expected ({n},)")
    elif not np.all(np.isfinite(spec.x)):
        report.add("finite", "initial state is not finite")
    if len(spec.coefficients) != ell or len(spec.terminal) != ell:
        report.add("dimension", f"expected {ell} regimes, got {len(spec.coefficients)} coefficient sets "
                                f"and {len(spec.terminal)} terminal entries")
        return report
    if spec.generator.rates.shape != (ell, ell):
        report.add("dimension", f"generator has shape {spec.generator.rates.shape}, expected ({ell}, {ell})")
    else:
        for row, msg, val in spec.generator.violations(spec.tol_gen):
            report.add("generator", msg, regime=row, value=val)

    shape_ok = True
    for i in range(ell):
        items = list(spec.coefficients[i].items()) + [("G", spec.terminal[i].G), ("g", spec.terminal[i].g)]
        for name, f in items:
            want = coefficient_shape(name, n, m)
            if f.shape != want:
                shape_ok = False
                report.add("dimension", f"{name} in regime {i + 1} has shape {f.shape}, expected {want}",
                           regime=i)
            if spec.deterministic and f.uses_w:
                report.add("mode", f"{name} in regime {i + 1} depends on w in deterministic mode", regime=i)
    if not shape_ok or grid is None or not report.ok and any(e.code == "mode" for e in report):
        return report

    t = grid.nodes
    wp = _probe_w(spec, t)  # (P, N+1)
    tt = np.broadcast_to(t, wp.shape)
    for i in range(ell):
        coef = spec.coefficients[i]
        for name, f in coef.items():
            vals = f(tt, wp)
            if not np.all(np.isfinite(vals)):
                k = int(np.argwhere(~np.isfinite(vals.reshape(wp.shape + (-1,))).any(-1))[0][1])
                report.add("finite", f"{name} not finite at t={t[k]:g}, regime {i + 1}", regime=i, t=t[k])
                continue
            if name in SYMMETRIC_COEFFICIENTS:
                asym = np.abs(vals - np.swapaxes(vals, -1, -2)).max()
                if asym > spec.tol_sym:
                    report.add("symmetry", f"{name} not symmetric in regime {i + 1} (max asymmetry {asym:g})",
                               regime=i, value=asym)
                eig = np.linalg.eigvalsh(0.5 * (vals + np.swapaxes(vals, -1, -2))).min(axis=-1).min(axis=0)
                floor = spec.lambda_min if name == "R" else 0.0
                bad = np.flatnonzero(eig < floor - spec.tol_psd)
                if bad.size:
                    k = bad[0]
                    what = "below lambda_min" if name == "R" else "not positive semidefinite"
                    report.add("r_floor" if name == "R" else "psd",
                               f"{name} {what} at t={t[k]:g}, regime {i + 1} "
                                      f"(min eigenvalue {eig[k]:g}, {bad.size} nodes)",
                               regime=i, t=float(t[k]), value=float(eig[k]))
        term = spec.terminal[i]
        wT = _probe_w(spec, np.array(spec.T))
        G = term.G(spec.T, wT)
        g = term.g(spec.T, wT)
        if not (np.all(np.isfinite(G)) and np.all(np.isfinite(g))):
            report.add("finite", f"terminal data not finite, regime {i + 1}", regime=i)
            continue
        asym = np.abs(G - np.swapaxes(G, -1, -2)).max()
        if asym > spec.tol_sym:
            report.add("symmetry", f"G not symmetric in regime {i + 1} (max asymmetry {asym:g})", regime=i)
        eig = np.linalg.eigvalsh(0.5 * (G + np.swapaxes(G, -1, -2))).min()
        if eig < -spec.tol_psd:
            report.add("psd", f"G not positive semidefinite in regime {i + 1} (min eigenvalue {eig:g})",
                       regime=i, value=float(eig))
    return report


# ---------------------------------------------------------------------------
# cross term elimination

def reduce_cross_term(spec, grid=None):
    """Eliminate the cross weight ``S`` by the substitution ``u~ = u + R^{-1} S X``.

    Returns a spec without ``S`` whose ``control_shift`` records ``R^{-1} S`` so
    controls can be mapped in both directions.  A spec without ``S`` is
    returned unchanged.
    """
    if not spec.has_cross_term:
        return spec
    if grid is None:
        grid = TimeGrid(spec.T, 100)
    t = grid.nodes
    wp = _probe_w(spec, t)
    tt = np.broadcast_to(t, wp.shape)

    new_coefs, shifts = [], []
    for i, c in enumerate(spec.coefficients):
        if c.S is None:
            new_coefs.append(c)
            shifts.append(MatrixFunction.zeros((spec.m, spec.n)))
            continue
        R = c.R(tt, wp)
        try:
            np.linalg.cholesky(R)
        except np.linalg.LinAlgError:
            eig = np.linalg.eigvalsh(R).min(axis=-1)
            k = np.unravel_index(np.argmin(eig), eig.shape)
            raise SingularR(f"R not positive definite at t={tt[k]:g}, regime {i + 1}",
                            regime=i, t=float(tt[k]), min_eig=float(eig[k])) from None
        Qt = c.Q(tt, wp) - np.swapaxes(c.S(tt, wp), -1, -2) @ np.linalg.solve(R, c.S(tt, wp))
        eig = np.linalg.eigvalsh(0.5 * (Qt + np.swapaxes(Qt, -1, -2))).min(axis=-1)
        if eig.min() < -spec.tol_psd:
            k = np.unravel_index(np.argmin(eig), eig.shape)
            raise IndefiniteReducedQ(f"Q - S^T R^-1 S indefinite at t={tt[k]:g}, regime {i + 1} "
                                     f"(min eigenvalue {eig[k]:g})",
                                     regime=i, t=float(tt[k]), min_eig=float(eig[k]))
        new_c, shift = _reduce_one(c, spec.n, spec.m)
        new_coefs.append(new_c)
        shifts.append(shift)
    return replace(spec, coefficients=tuple(new_coefs), control_shift=tuple(shifts))


def _reduce_one(c, n, m):
    if all(getattr(c, k).is_constant for k in ("A", "B", "C", "D", "Q", "R", "S", "q", "r")):
        R, S = c.R(0.0), c.S(0.0)
        RS = np.linalg.solve(R, S)
        Q = c.Q(0.0) - S.T @ RS
        new = replace(
            c,
            A=MatrixFunction.constant(c.A(0.0) - c.B(0.0) @ RS),
            C=MatrixFunction.constant(c.C(0.0) - c.D(0.0) @ RS),
            Q=MatrixFunction.constant(0.5 * (Q + Q.T), symmetric=True),
            r=MatrixFunction.constant(c.r(0.0) + RS @ c.q(0.0)),
            S=None,
        )
        return new, MatrixFunction.constant(RS)

    def rs(t, w):
        return np.linalg.solve(c.R(t, w), c.S(t, w))

    def a_red(t, w):
        return c.A(t, w) - c.B(t, w) @ rs(t, w)

    def c_red(t, w):
        return c.C(t, w) - c.D(t, w) @ rs(t, w)

    def q_red(t, w):
        return c.Q(t, w) - np.swapaxes(c.S(t, w), -1, -2) @ rs(t, w)

    def r_red(t, w):
        return c.r(t, w) + np.einsum("...ij,...j->...i", rs(t, w), c.q(t, w))

    uses_w = c.uses_w()
    new = replace(
        c,
        A=MatrixFunction.from_callable(a_red, (n, n), uses_w=uses_w),
        C=MatrixFunction.from_callable(c_red, (n, n), uses_w=uses_w),
        Q=MatrixFunction.from_callable(q_red, (n, n), uses_w=uses_w, symmetric=True),
        r=MatrixFunction.from_callable(r_red, (m,), uses_w=uses_w),
        S=None,
    )
    return new, MatrixFunction.from_callable(rs, (m, n), uses_w=uses_w)
