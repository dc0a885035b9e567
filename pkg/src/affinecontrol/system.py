"""Affine control systems with box-bounded controls and exact simulation.

The model class is

    dx/dt = A(u) x + C u + d,      A(u) = A + sum_i u_i B_i,

with piecewise-constant controls taking values in an axis-aligned box
containing 0.  Because controls are constant on segments, trajectories are
propagated exactly: each segment map is read off the exponential of the
augmented (n+1) x (n+1) matrix [[A(u), Cu+d], [0, 0]].
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import expm

__all__ = [
    "AffineSystem",
    "PiecewiseControl",
    "AffineVectorField",
    "Trajectory",
    "BlowUpError",
    "system_matrix",
    "vector_field",
    "lie_bracket",
    "larc_rank",
    "simulate",
    "propagate",
    "segment_map",
    "equilibrium",
]

# Relative slack when testing containment of control values in the box.
_OMEGA_SLACK = 1e-12


class BlowUpError(RuntimeError):
    """State left the representable range during simulation.

    Carries the last finite state and the time at which it was recorded.
    """

    def __init__(self, message: str, last_state: np.ndarray, time: float):
        super().__init__(message)
        self.last_state = np.asarray(last_state, dtype=float)
        self.time = float(time)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class AffineSystem:
    """System data: matrices A, B_1..B_m, columns c_1..c_m, drift d, control box.

    Attributes
    ----------
    A : (n, n) array
    B : (m, n, n) array, one matrix per control channel
    C : (n, m) array whose columns multiply the control linearly
    d : (n,) array, constant drift
    omega_lo, omega_hi : (m,) arrays, per-channel control bounds with
        omega_lo <= 0 <= omega_hi
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    d: np.ndarray
    omega_lo: np.ndarray
    omega_hi: np.ndarray

    def __post_init__(self):
        A = _readonly(self.A)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got shape {A.shape}")
        n = A.shape[0]
        B = np.array(self.B, dtype=float)
        if B.ndim == 2:
            B = B[None, :, :]
        if B.ndim != 3 or B.shape[1:] != (n, n):
            raise ValueError(f"B must have shape (m, {n}, {n}), got {B.shape}")
        m = B.shape[0]
        C = np.array(self.C, dtype=float).reshape(n, m)
        d = np.array(self.d, dtype=float).reshape(n)
        lo = np.array(self.omega_lo, dtype=float).reshape(m)
        hi = np.array(self.omega_hi, dtype=float).reshape(m)
        for name, arr in (("A", A), ("B", B), ("C", C), ("d", d),
                          ("omega_lo", lo), ("omega_hi", hi)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        if np.any(lo > 0.0) or np.any(hi < 0.0):
            raise ValueError("control box must contain 0 (omega_lo <= 0 <= omega_hi)")
        if np.any(lo >= hi) and not np.allclose(lo, hi):
            raise ValueError("control box must satisfy omega_lo < omega_hi")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", _readonly(B))
        object.__setattr__(self, "C", _readonly(C))
        object.__setattr__(self, "d", _readonly(d))
        object.__setattr__(self, "omega_lo", _readonly(lo))
        object.__setattr__(self, "omega_hi", _readonly(hi))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[0]

    def system_matrix(self, u) -> np.ndarray:
        """A(u) = A + sum_i u_i B_i."""
        u = self._check_u(u)
        return self.A + np.tensordot(u, self.B, axes=(0, 0))

    def forcing(self, u) -> np.ndarray:
        """Inhomogeneous term C u + d."""
        u = self._check_u(u)
        return self.C @ u + self.d

    def rhs(self, x, u) -> np.ndarray:
        """Right-hand side A(u) x + C u + d."""
        x = np.asarray(x, dtype=float).reshape(self.n)
        return self.system_matrix(u) @ x + self.forcing(u)

    def contains_control(self, u, slack: float = _OMEGA_SLACK) -> bool:
        u = np.asarray(u, dtype=float).reshape(self.m)
        width = np.maximum(1.0, self.omega_hi - self.omega_lo)
        return bool(np.all(u >= self.omega_lo - slack * width)
                    and np.all(u <= self.omega_hi + slack * width))

    def generators(self) -> list["AffineVectorField"]:
        """Vector fields f_0(x) = Ax + d and f_i(x) = B_i x + c_i."""
        fields = [AffineVectorField(self.A, self.d)]
        for i in range(self.m):
            fields.append(AffineVectorField(self.B[i], self.C[:, i]))
        return fields

    def homogeneous(self) -> "AffineSystem":
        """The bilinear part: same A, B, omega, with C and d zeroed."""
        return AffineSystem(self.A, self.B, np.zeros((self.n, self.m)),
                            np.zeros(self.n), self.omega_lo, self.omega_hi)

    def _check_u(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float).reshape(-1)
        if u.shape != (self.m,):
            raise ValueError(f"control has length {u.shape[0]}, expected {self.m}")
        return u


@dataclass(frozen=True)
class PiecewiseControl:
    """Piecewise-constant control, extended periodically.

    `values` is (k, m), `durations` is (k,) with positive entries; the
    period is the total duration and evaluation at time t uses t modulo
    the period.
    """

    values: np.ndarray
    durations: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        durations = np.array(self.durations, dtype=float).reshape(-1)
        if values.shape[0] != durations.shape[0] or values.shape[0] == 0:
            raise ValueError("need one value per duration, and at least one segment")
        if not np.all(np.isfinite(values)) or not np.all(np.isfinite(durations)):
            raise ValueError("control segments must be finite")
        if np.any(durations <= 0.0):
            raise ValueError("segment durations must be positive")
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "durations", _readonly(durations))

    @classmethod
    def constant(cls, u, period: float = 1.0) -> "PiecewiseControl":
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return cls(u[None, :], np.array([float(period)]))

    @classmethod
    def from_segments(cls, segments) -> "PiecewiseControl":
        vals = [np.atleast_1d(np.asarray(v, dtype=float)) for v, _ in segments]
        durs = [float(t) for _, t in segments]
        return cls(np.stack(vals), np.array(durs))

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def num_segments(self) -> int:
        return self.values.shape[0]

    @cached_property
    def period(self) -> float:
        return float(np.sum(self.durations))

    @cached_property
    def _cumulative(self) -> np.ndarray:
        return np.cumsum(self.durations)

    def value_at(self, t: float) -> np.ndarray:
        phase = float(t) % self.period
        idx = int(np.searchsorted(self._cumulative, phase, side="right"))
        idx = min(idx, self.num_segments - 1)
        return self.values[idx]

    def pieces(self, s: float, t: float):
        """Maximal constant pieces of the periodic extension covering [s, t].

        Yields (value, duration) in time order; requires s <= t.  Slivers
        shorter than 1e-14 * period (rounding at boundaries) are dropped.
        """
        if t < s:
            raise ValueError("pieces requires s <= t")
        tau = self.period
        tiny = 1e-14 * tau
        remaining = float(t - s)
        if remaining <= tiny:
            return
        phase = float(s) % tau
        cum = self._cumulative
        idx = int(np.searchsorted(cum, phase, side="right"))
        idx = min(idx, self.num_segments - 1)
        left_in_seg = cum[idx] - phase
        while remaining > tiny:
            take = min(left_in_seg, remaining)
            if take > tiny:
                yield self.values[idx], float(take)
            remaining -= take
            idx = (idx + 1) % self.num_segments
            left_in_seg = self.durations[idx]

    def shifted(self, s: float) -> "PiecewiseControl":
        """The control t -> u(t + s), again as a periodic segment list."""
        segs = list(self.pieces(s, s + self.period))
        return PiecewiseControl.from_segments(segs)

    def truncated(self, length: float) -> list:
        """Prefix of total duration `length` as a segment list (may be empty)."""
        return list(self.pieces(0.0, length))

    def same_as(self, other: "PiecewiseControl") -> bool:
        return (self.values.shape == other.values.shape
                and np.array_equal(self.values, other.values)
                and np.array_equal(self.durations, other.durations))


@dataclass(frozen=True)
class AffineVectorField:
    """The vector field x -> M x + a."""

    M: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        M = _readonly(self.M)
        a = _readonly(np.asarray(self.a, dtype=float).reshape(-1))
        if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] != a.shape[0]:
            raise ValueError("matrix and offset dimensions are inconsistent")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "a", a)

    @property
    def n(self) -> int:
        return self.a.shape[0]

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(self.n)
        return self.M @ x + self.a

    def coefficients(self) -> np.ndarray:
        """Flattened (matrix, offset) coordinates; brackets are linear in these."""
        return np.concatenate([self.M.ravel(), self.a])

    def flow(self, x, t: float) -> np.ndarray:
        """Exact time-t flow map, via the augmented exponential."""
        E = expm(float(t) * _augment(self.M, self.a))
        x = np.asarray(x, dtype=float).reshape(self.n)
        return E[:-1, :-1] @ x + E[:-1, -1]


@dataclass(frozen=True)
class Trajectory:
    """Sampled solution: strictly increasing times and the states at them."""

    times: np.ndarray
    states: np.ndarray
    control: PiecewiseControl = field(repr=False, default=None)

    def __post_init__(self):
        times = _readonly(np.asarray(self.times, dtype=float).reshape(-1))
        states = _readonly(np.atleast_2d(np.asarray(self.states, dtype=float)))
        if times.shape[0] != states.shape[0]:
            raise ValueError("one state per sample time required")
        if times.shape[0] > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("sample times must be strictly increasing")
        if not np.all(np.isfinite(states)):
            raise ValueError("states must be finite")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)


def system_matrix(sys: AffineSystem, u) -> np.ndarray:
    """State matrix A(u) = A + sum_i u_i B_i for the control value u."""
    return sys.system_matrix(u)


def vector_field(sys: AffineSystem, u, x) -> np.ndarray:
    """Right-hand side A(u) x + C u + d (control containment is the caller's contract)."""
    return sys.rhs(x, u)


def lie_bracket(X: AffineVectorField, Y: AffineVectorField) -> AffineVectorField:
    """Bracket of affine fields: [X, Y](x) = -(MN - NM) x - (M b - N a).

    Here X(x) = M x + a and Y(x) = N x + b.
    """
    if X.n != Y.n:
        raise ValueError("fields live in different dimensions")
    M, a = X.M, X.a
    N, b = Y.M, Y.a
    return AffineVectorField(-(M @ N - N @ M), -(M @ b - N @ a))


def equilibrium(sys: AffineSystem, u) -> np.ndarray:
    """Solve A(u) x = -(C u + d); requires A(u) invertible."""
    return np.linalg.solve(sys.system_matrix(u), -sys.forcing(u))


def larc_rank(sys: AffineSystem, x, max_depth: int | None = None,
              rank_tol: float = 1e-9) -> int:
    """Rank at x of the bracket closure of the system's vector fields.

    Fields are generated by repeatedly bracketing the generators with the
    current span (left-normed brackets), stopping at `max_depth` nesting
    or once the span of field coefficients saturates.  The returned value
    is the numerical rank of the stacked evaluations at x.
    """
    if max_depth is None:
        max_depth = 2 * sys.n
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    generators = sys.generators()
    # Orthonormal basis of field-coefficient space tracks saturation.
    basis: list[np.ndarray] = []

    def try_add(f: AffineVectorField) -> bool:
        w = f.coefficients()
        scale = np.linalg.norm(w)
        if scale == 0.0:
            return False
        for b in basis:
            w = w - np.dot(b, w) * b
        if np.linalg.norm(w) <= 1e-10 * scale:
            return False
        basis.append(w / np.linalg.norm(w))
        return True

    fields: list[AffineVectorField] = []
    current = []
    for g in generators:
        if try_add(g):
            fields.append(g)
            current.append(g)
    depth = 1
    while depth < max_depth and current:
        new_level = []
        for g in generators:
            for h in current:
                fz = lie_bracket(g, h)
                if try_add(fz):
                    fields.append(fz)
                    new_level.append(fz)
        current = new_level
        depth += 1

    if not fields:
        return 0
    x = np.asarray(x, dtype=float).reshape(sys.n)
    evals = np.stack([f(x) for f in fields])
    sv = np.linalg.svd(evals, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv > rank_tol * sv[0]))


def _augment(M: np.ndarray, z: np.ndarray) -> np.ndarray:
    n = M.shape[0]
    out = np.zeros((n + 1, n + 1))
    out[:n, :n] = M
    out[:n, n] = z
    return out


def segment_map(sys: AffineSystem, u, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact affine flow map over a constant-control segment.

    Returns (G, h) with x(dt) = G x(0) + h, read off the exponential of
    the augmented matrix [[A(u), Cu+d], [0, 0]].  dt may be negative.
    """
    E = expm(float(dt) * _augment(sys.system_matrix(u), sys.forcing(u)))
    n = sys.n
    return E[:n, :n], E[:n, n]


def _check_control(sys: AffineSystem, ctrl: PiecewiseControl):
    if ctrl.m != sys.m:
        raise ValueError(f"control dimension {ctrl.m} does not match system ({sys.m})")
    for k in range(ctrl.num_segments):
        if not sys.contains_control(ctrl.values[k]):
            raise ValueError(
                f"control value {ctrl.values[k]} lies outside the control box")


def propagate(sys: AffineSystem, ctrl: PiecewiseControl, x0, t: float) -> np.ndarray:
    """Endpoint state phi(t, x0, u) without intermediate samples."""
    _check_control(sys, ctrl)
    x = np.asarray(x0, dtype=float).reshape(sys.n)
    t = float(t)
    if t == 0.0:
        return x.copy()
    if t < 0.0:
        piece_list = [(u, -dt) for u, dt in ctrl.pieces(t, 0.0)][::-1]
    else:
        piece_list = list(ctrl.pieces(0.0, t))
    clock = 0.0
    for u, dt in piece_list:
        G, h = segment_map(sys, u, dt)
        x_next = G @ x + h
        if not np.all(np.isfinite(x_next)):
            raise BlowUpError(
                f"state overflowed while propagating to {t:+.6g}", x, clock)
        x = x_next
        clock += dt
    return x


def simulate(sys: AffineSystem, ctrl: PiecewiseControl, x0, t: float,
             sample_step: float | None = None) -> Trajectory:
    """Exact trajectory of the affine system from x0 over [0, t] (or [t, 0]).

    Per-segment propagation through the augmented exponential; samples are
    placed at segment boundaries plus, when `sample_step` is given, at
    interior points at most that far apart.  Negative t runs time in
    reverse through the inverses of the segment maps; the returned sample
    times are always increasing, so the state at time t sits at index -1
    for t > 0 and at index 0 for t < 0.

    Raises BlowUpError when the state stops being finite; the error
    carries the last finite state.
    """
    _check_control(sys, ctrl)
    x = np.asarray(x0, dtype=float).reshape(sys.n)
    t = float(t)
    if t == 0.0:
        return Trajectory(np.array([0.0]), x[None, :], ctrl)

    backward = t < 0.0
    horizon = abs(t)
    if backward:
        # Walk the pieces of [t, 0] in reverse order with negated durations.
        piece_list = [(u, -dt) for u, dt in ctrl.pieces(t, 0.0)][::-1]
    else:
        piece_list = list(ctrl.pieces(0.0, t))

    times = [0.0]
    states = [x.copy()]
    clock = 0.0
    for u, dt in piece_list:
        n_sub = 1
        if sample_step is not None and sample_step > 0:
            n_sub = max(1, int(np.ceil(abs(dt) / sample_step)))
        G, h = segment_map(sys, u, dt / n_sub)
        for _ in range(n_sub):
            with np.errstate(over="ignore", invalid="ignore"):
                x = G @ x + h
            clock += dt / n_sub
            if not np.all(np.isfinite(x)):
                raise BlowUpError(
                    f"state overflowed at time {clock:+.6g}",
                    states[-1], times[-1])
            times.append(clock)
            states.append(x.copy())
    times = np.array(times)
    states = np.stack(states)
    # Accumulated clock may differ from t in the last ulp; pin the endpoint.
    times[-1] = -horizon if backward else horizon
    if backward:
        times = times[::-1]
        states = states[::-1]
    return Trajectory(times, states, ctrl)
