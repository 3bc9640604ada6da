"""Closed-loop simulation of the microgrid DAE.

Source voltages are propagated in log coordinates ``x = ln Vs``. For the
consensus controller ``C dx/dt = -Lc C⁻¹ Ps`` and ``1ᵀ Lc = 0``, so the
weighted log-sum ``1ᵀ C x`` is a linear invariant that every Runge-Kutta
scheme (and its dense output) reproduces up to roundoff. Positivity of the
source voltages is automatic in these coordinates.

In ``dae`` mode the load voltages are algebraic and re-solved at every stage
evaluation, warm-started from the previous solve. In ``capacitive`` mode they
are additional ODE states.
"""
from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import controllers as ctl
from .errors import AlgebraicSolveError, NumericalError, StiffnessError, VoltageCollapseError
from .loadmodel import MAX_NEWTON_ITER, NEWTON_TOL, LoadFlowSolver, ZipLoadBank
from .netmodel import ConductanceBlocks, MicrogridNetwork, build_laplacian, comm_laplacian

log = logging.getLogger(__name__)

METHODS = ("rk4_fixed", "rk45_adaptive")
MODES = ("dae", "capacitive")


@dataclass(frozen=True)
class LoadEvent:
    """Linear ramp of one load's ZIP parameters from their current values to ``target``.

    ``target`` entries that are ``None`` are left unchanged.
    """

    load_index: int
    t_start: float
    t_end: float
    Istar: Optional[float] = None
    Ystar: Optional[float] = None
    Pstar: Optional[float] = None

    def __post_init__(self):
        if not self.t_start <= self.t_end:
            raise ValueError("event must satisfy t_start <= t_end")
        if self.t_start < 0:
            raise ValueError("event start must be non-negative")
        # ramps interpolate linearly, so valid endpoints keep every intermediate bank valid
        if self.Istar is not None and self.Istar > 0:
            raise ValueError("event target Istar must be <= 0")
        if self.Ystar is not None and self.Ystar < 0:
            raise ValueError("event target Ystar must be >= 0")
        if self.Pstar is not None and self.Pstar > 0:
            raise ValueError("event target Pstar must be <= 0")


@dataclass(frozen=True)
class IntegratorSettings:
    method: str = "rk45_adaptive"
    dt: float = 1e-6
    rtol: float = 1e-8
    atol: float = 1e-10
    voltage_floor: float = 1e-3
    newton_tol: float = NEWTON_TOL
    max_newton_iter: int = MAX_NEWTON_ITER
    first_step: Optional[float] = None
    max_step: float = math.inf

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown integrator method {self.method!r}")
        for name in ("dt", "rtol", "atol", "newton_tol", "max_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.voltage_floor < 0:
            raise ValueError("voltage_floor must be non-negative")


@dataclass(frozen=True)
class Scenario:
    network: MicrogridNetwork
    loads: ZipLoadBank
    params: ctl.ControllerParams
    initial_Vs: np.ndarray
    initial_Vl: np.ndarray
    t_end: float
    controller: str = "consensus"
    events: tuple = ()
    integrator: IntegratorSettings = field(default_factory=IntegratorSettings)
    mode: str = "dae"
    Cl: Optional[np.ndarray] = None
    initial_p: Optional[np.ndarray] = None
    sample_interval: Optional[float] = None
    name: str = "scenario"

    def __post_init__(self):
        net = self.network
        Vs = np.array(self.initial_Vs, dtype=float).reshape(-1)
        Vl = np.array(self.initial_Vl, dtype=float).reshape(-1)
        object.__setattr__(self, "initial_Vs", Vs)
        object.__setattr__(self, "initial_Vl", Vl)
        object.__setattr__(self, "events", tuple(sorted(self.events, key=lambda e: e.t_start)))
        if self.controller not in ctl.CONTROLLERS:
            raise ValueError(f"unknown controller {self.controller!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if len(Vs) != net.n_sources or len(Vl) != net.n_loads:
            raise ValueError("initial voltage vectors do not match the network")
        if self.loads.n_loads != net.n_loads:
            raise ValueError("load bank size does not match the network")
        if len(self.params.C) != net.n_sources:
            raise ValueError("controller weights do not match the network")
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        floor = self.integrator.voltage_floor
        if np.any(Vs <= floor) or np.any(Vl <= floor):
            raise ValueError("initial voltages must exceed the voltage floor")
        if self.controller == "dapi" and self.params.D is None:
            raise ValueError("dapi controller requires D weights")
        if self.mode == "capacitive":
            if self.Cl is None:
                raise ValueError("capacitive mode requires load capacitances Cl")
            Cl = np.array(self.Cl, dtype=float).reshape(-1)
            if len(Cl) != net.n_loads or np.any(Cl <= 0):
                raise ValueError("Cl must be positive, one per load")
            object.__setattr__(self, "Cl", Cl)
        if self.initial_p is not None:
            object.__setattr__(self, "initial_p", np.array(self.initial_p, dtype=float).reshape(-1))
        for ev in self.events:
            if not 0 <= ev.load_index < net.n_loads:
                raise ValueError(f"event references unknown load {ev.load_index}")
        by_load: dict[int, list] = {}
        for ev in self.events:
            prev = by_load.setdefault(ev.load_index, [])
            if prev and ev.t_start < prev[-1].t_end:
                raise ValueError(f"overlapping events on load {ev.load_index}")
            prev.append(ev)

    def with_(self, **changes) -> "Scenario":
        return replace(self, **changes)


class LoadSchedule:
    """Load bank as a piecewise-linear function of time."""

    def __init__(self, initial: ZipLoadBank, events: Sequence[LoadEvent]):
        self.initial = initial
        self.events = tuple(sorted(events, key=lambda e: e.t_start))
        self._cache: dict[float, ZipLoadBank] = {}

    def breakpoints(self) -> list[float]:
        return sorted({t for ev in self.events for t in (ev.t_start, ev.t_end)})

    def ramping(self, t0: float, t1: float) -> bool:
        """True when some ramp is active strictly inside ``[t0, t1]``."""
        return any(ev.t_start < t1 and ev.t_end > t0 for ev in self.events if ev.t_end > ev.t_start)

    def arrays_at(self, t: float):
        vals = [np.array(self.initial.Istar), np.array(self.initial.Ystar), np.array(self.initial.Pstar)]
        for ev in self.events:
            if t < ev.t_start:
                continue
            i = ev.load_index
            if t >= ev.t_end:
                frac = 1.0
            else:
                frac = (t - ev.t_start) / (ev.t_end - ev.t_start)
            for arr, target in zip(vals, (ev.Istar, ev.Ystar, ev.Pstar)):
                if target is not None:
                    arr[i] += frac * (target - arr[i])
        return vals

    def bank_at(self, t: float) -> ZipLoadBank:
        if not self.events:
            return self.initial
        return ZipLoadBank._unchecked(*self.arrays_at(t))

    def final(self) -> ZipLoadBank:
        if not self.events:
            return self.initial
        return self.bank_at(max(ev.t_end for ev in self.events))


@dataclass
class Trajectory:
    """Sampled simulation output.

    ``M`` is the Bregman energy relative to the equilibrium reached with the
    final load bank (NaN when unavailable). ``geomean_log`` is ``1ᵀ C ln Vs``.
    """

    t: np.ndarray
    Vs: np.ndarray
    Vl: np.ndarray
    Ps: np.ndarray
    geomean_log: np.ndarray
    C: np.ndarray
    p: Optional[np.ndarray] = None
    M: Optional[np.ndarray] = None
    controller: str = "consensus"
    mode: str = "dae"
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    @property
    def n_sources(self) -> int:
        return self.Vs.shape[1]

    @property
    def n_loads(self) -> int:
        return self.Vl.shape[1]

    def window(self, t0: float, t1: float = math.inf) -> "Trajectory":
        mask = (self.t >= t0) & (self.t <= t1)
        return Trajectory(
            t=self.t[mask], Vs=self.Vs[mask], Vl=self.Vl[mask], Ps=self.Ps[mask],
            geomean_log=self.geomean_log[mask], C=self.C,
            p=None if self.p is None else self.p[mask],
            M=None if self.M is None else self.M[mask],
            controller=self.controller, mode=self.mode, stats=dict(self.stats),
        )


# Dormand-Prince 5(4) tableau, with the continuous extension used for dense output.
_DP_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1, 1])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_A_ROWS = [np.asarray(row, dtype=float) for row in _DP_A]
_DP_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0])
_DP_E = np.array([-71 / 57600, 0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
_DP_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])


class _ClosedLoop:
    """State layout and right-hand side for one scenario.

    State vector ``y = [ln Vs, p (dapi), Vl (capacitive)]``.
    """

    def __init__(self, sc: Scenario):
        self.sc = sc
        self.blocks = build_laplacian(sc.network)
        self.params = sc.params
        self.schedule = LoadSchedule(sc.loads, sc.events)
        self.settings = sc.integrator
        self.ns = sc.network.n_sources
        self.nl = sc.network.n_loads
        self.has_p = sc.controller == "dapi"
        self.cap = sc.mode == "capacitive" and sc.controller != "constant_voltage"
        self.i_p = slice(self.ns, 2 * self.ns) if self.has_p else slice(0, 0)
        off = 2 * self.ns if self.has_p else self.ns
        self.i_l = slice(off, off + self.nl) if self.cap else slice(0, 0)
        self.size = off + (self.nl if self.cap else 0)
        self.Vl_seed = np.array(sc.initial_Vl, dtype=float)
        self.n_rhs = 0
        self._last = (None, None)
        self._constant_bank = not sc.events
        self._breaks = self.schedule.breakpoints()
        edges = [-math.inf] + self._breaks + [math.inf]
        self._ramp_flags = [self.schedule.ramping(a, b) for a, b in zip(edges[:-1], edges[1:])]
        self._pieces: dict = {}
        self._ramp_solver = None
        # -C⁻¹ Lc C⁻¹ as one matrix for the consensus rate
        Cinv = 1.0 / self.params.C
        self._neg_log_gain = -(Cinv[:, None] * self.params.Lc * Cinv[None, :])

    def _piece(self, t: float):
        """Return ``(bank, solver)`` in effect at time ``t``.

        Banks are cached per breakpoint interval when no ramp is active.
        """
        if self._constant_bank:
            key = 0
        else:
            key = bisect.bisect_right(self._breaks, t)
            if self._ramp_flags[key]:
                bank = self.schedule.bank_at(t)
                if self._ramp_solver is None:
                    self._ramp_solver = self._make_piece(bank)[1]
                return bank, self._ramp_solver.for_bank(bank)
        piece = self._pieces.get(key)
        if piece is None:
            piece = self._pieces[key] = self._make_piece(self.schedule.bank_at(t))
        return piece

    def _make_piece(self, bank: ZipLoadBank):
        s = self.settings
        solver = LoadFlowSolver(self.blocks, bank, tol=s.newton_tol, max_iter=s.max_newton_iter,
                                voltage_floor=s.voltage_floor)
        return bank, solver

    def bank(self, t: float) -> ZipLoadBank:
        return self._piece(t)[0]

    def solve_Vl(self, t: float, Vs: np.ndarray) -> np.ndarray:
        try:
            Vl = self._piece(t)[1].solve(Vs, self.Vl_seed)
        except (AlgebraicSolveError, VoltageCollapseError) as exc:
            raise self._tag(exc, t)
        self.Vl_seed = Vl
        return Vl

    def _tag(self, exc, t):
        # load-layer errors count buses from zero within the loads; report network node indices
        exc.t = t
        if isinstance(exc, VoltageCollapseError) and exc.bus is not None:
            exc.bus += self.ns
        return exc

    def initial_state(self) -> np.ndarray:
        sc = self.sc
        y = np.empty(self.size)
        y[: self.ns] = np.log(sc.initial_Vs)
        if self.has_p:
            if sc.initial_p is not None:
                y[self.i_p] = sc.initial_p
            else:
                Vl = self._load_voltages(0.0, sc.initial_Vs, None)
                y[self.i_p] = ctl.source_currents(self.blocks, sc.initial_Vs, Vl)
        if self.cap:
            y[self.i_l] = sc.initial_Vl
        return y

    def _load_voltages(self, t, Vs, y):
        if self.sc.controller == "constant_voltage":
            return self.sc.initial_Vl
        if self.cap and y is not None:
            return y[self.i_l]
        return self.solve_Vl(t, Vs)

    def unpack(self, t: float, y: np.ndarray):
        """Return ``(Vs, Vl, p)`` for state ``y``; solves the constraint in dae mode."""
        Vs = np.exp(y[: self.ns])
        Vl = self._load_voltages(t, Vs, y)
        p = y[self.i_p] if self.has_p else None
        return Vs, Vl, p

    def state_at(self, t: float, y: np.ndarray):
        """Like :meth:`unpack` but reuses the most recent right-hand-side evaluation at ``y``."""
        y_last, state = self._last
        if y_last is y:
            return state
        return self.unpack(t, y)

    def check_floor(self, t: float, Vs, Vl):
        floor = self.settings.voltage_floor
        if Vs.min() > floor and (len(Vl) == 0 or Vl.min() > floor):
            return
        for name, V, off in (("source", Vs, 0), ("load", Vl, self.ns)):
            bad = np.flatnonzero(~(V > floor))
            if bad.size:
                i = int(bad[0])
                raise VoltageCollapseError(
                    f"voltage collapse at t={t:.9g} s: {name} bus {off + i} at {V[i]:.6g} V",
                    t=t, bus=off + i,
                )

    def rhs(self, t: float, y: np.ndarray) -> np.ndarray:
        self.n_rhs += 1
        Vs, Vl, p = state = self.unpack(t, y)
        self._last = (y, state)
        dy = np.empty_like(y)
        if self.has_p:
            dVs, dp = ctl.dapi_rhs(self.blocks, self.params, Vs, Vl, p)
            dy[: self.ns] = dVs / Vs
            dy[self.i_p] = dp
        else:
            b = self.blocks
            Ps = Vs * (b.Yss @ Vs + b.Ysl @ Vl)
            dy[: self.ns] = self._neg_log_gain @ Ps
        if self.cap:
            try:
                dy[self.i_l] = ctl.capacitive_load_rhs(
                    self.blocks, self.bank(t), self.sc.Cl, Vs, Vl, self.settings.voltage_floor
                )
            except VoltageCollapseError as exc:
                raise self._tag(exc, t)
        return dy

    def error_scale(self, y0: np.ndarray, y1: np.ndarray) -> np.ndarray:
        """Per-component tolerance; log components are converted to volts."""
        s = self.settings
        sc = s.atol + s.rtol * np.maximum(np.abs(y0), np.abs(y1))
        V = np.exp(np.maximum(y0[: self.ns], y1[: self.ns]))
        sc[: self.ns] = (s.atol + s.rtol * V) / V
        return sc


def _hermite(t0, y0, f0, t1, y1, f1, t):
    h = t1 - t0
    s = (t - t0) / h
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


class _Recorder:
    def __init__(self, sys: _ClosedLoop, sample_times: np.ndarray):
        self.sys = sys
        self.times = sample_times
        self.k = 0
        self.rows = []

    def record(self, t: float, y: np.ndarray):
        sys = self.sys
        Vs, Vl, p = sys.unpack(t, y)
        Ps = Vs * (sys.blocks.Yss @ Vs + sys.blocks.Ysl @ Vl)
        gm = float(sys.params.C @ y[: sys.ns])
        self.rows.append((t, Vs, np.array(Vl, dtype=float), None if p is None else p.copy(), Ps, gm))

    def pending(self, t1: float):
        """Sample times in ``(last, t1]`` not yet recorded."""
        out = []
        while self.k < len(self.times) and self.times[self.k] <= t1:
            out.append(self.times[self.k])
            self.k += 1
        return out


def _sample_times(t_end: float, interval: Optional[float]) -> np.ndarray:
    if interval is None:
        interval = t_end / 2000
    n = int(math.floor(t_end / interval + 1e-9))
    ts = interval * np.arange(n + 1)
    ts = ts[ts < t_end * (1 - 1e-12)]
    return np.append(ts, t_end)


def _segments(t_end: float, schedule: LoadSchedule) -> list[float]:
    pts = [0.0] + [b for b in schedule.breakpoints() if 0.0 < b < t_end] + [t_end]
    return sorted(set(pts))


def _rk4_segment(sys: _ClosedLoop, rec: _Recorder, t0, t1, y, f, dt):
    n = max(1, int(math.ceil((t1 - t0) / dt - 1e-9)))
    h = (t1 - t0) / n
    for i in range(n):
        t = t0 + i * h
        tn = t1 if i == n - 1 else t0 + (i + 1) * h
        k1 = f
        k2 = sys.rhs(t + h / 2, y + h / 2 * k1)
        k3 = sys.rhs(t + h / 2, y + h / 2 * k2)
        k4 = sys.rhs(tn, y + h * k3)
        yn = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        fn = sys.rhs(tn, yn)
        Vs, Vl, _ = sys.state_at(tn, yn)
        sys.check_floor(tn, Vs, Vl)
        for ts in rec.pending(tn):
            rec.record(ts, yn if ts == tn else _hermite(t, y, f, tn, yn, fn, ts))
        y, f = yn, fn
    return y, f, n, 0


def _initial_step(sys: _ClosedLoop, t0, y0, f0, span):
    scale = sys.error_scale(y0, y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = y0 + h0 * f0
    f1 = sys.rhs(t0 + h0, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, span)


_RECOVERABLE = (AlgebraicSolveError, VoltageCollapseError, FloatingPointError)


def _dopri_segment(sys: _ClosedLoop, rec: _Recorder, t0, t1, y, f, h):
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        return _dopri_loop(sys, rec, t0, t1, y, f, h)


def _dopri_loop(sys, rec, t0, t1, y, f, h):
    s = sys.settings
    t = t0
    K = np.empty((7, len(y)))
    n_acc = n_rej = 0
    tiny = 16 * np.finfo(float).eps
    while t < t1:
        h = min(h, s.max_step, t1 - t)
        if t + h >= t1 * (1 - 1e-13) or t1 - (t + h) < 1e-3 * h:
            h = t1 - t
        if h <= tiny * max(abs(t), 1e-300):
            raise StiffnessError(f"step size underflow at t={t:.9g} s (h={h:.3g})")
        K[0] = f
        try:
            for i in range(1, 7):
                yi = y + h * (_DP_A_ROWS[i] @ K[:i])
                K[i] = sys.rhs(t + _DP_C[i] * h, yi)
            err = h * (_DP_E @ K)
            r = err / sys.error_scale(y, yi)
            en = math.sqrt((r @ r) / len(r))
        except _RECOVERABLE as exc:
            n_rej += 1
            h *= 0.25
            if h <= tiny * max(abs(t), 1e-300):
                raise exc
            continue
        yn = yi  # FSAL: the seventh stage is evaluated at the 5th-order solution
        if en <= 1.0:
            tn = t + h if t + h < t1 else t1
            Vs, Vl, _ = sys.state_at(tn, yn)
            sys.check_floor(tn, Vs, Vl)
            pend = rec.pending(tn)
            if pend:
                Q = K.T @ _DP_P
                for ts in pend:
                    if ts == tn:
                        rec.record(ts, yn)
                    else:
                        x = (ts - t) / h
                        rec.record(ts, y + h * (Q @ np.array([x, x**2, x**3, x**4])))
            t, y, f = tn, yn, K[6].copy()
            n_acc += 1
            fac = 10.0 if en == 0 else min(10.0, 0.9 * en ** -0.2)
            h *= fac
        else:
            n_rej += 1
            h *= max(0.2, 0.9 * en ** -0.2)
    return y, f, n_acc, n_rej, h


def simulate(scenario: Scenario, *, compute_lyapunov: bool = True) -> Trajectory:
    """Integrate ``scenario`` over ``[0, t_end]``.

    Raises
    ------
    VoltageCollapseError
        A voltage fell to or below the floor.
    AlgebraicSolveError
        The load-flow constraint could not be solved.
    StiffnessError
        Adaptive step size underflow.
    """
    sys = _ClosedLoop(scenario)
    s = scenario.integrator
    times = _sample_times(scenario.t_end, scenario.sample_interval)
    rec = _Recorder(sys, times)

    y = sys.initial_state()
    Vs0, Vl0, _ = sys.unpack(0.0, y)
    sys.check_floor(0.0, Vs0, Vl0)
    f = sys.rhs(0.0, y)
    for ts in rec.pending(0.0):
        rec.record(ts, y)

    n_acc = n_rej = 0
    h = s.first_step
    bounds = _segments(scenario.t_end, sys.schedule)
    for a, b in zip(bounds[:-1], bounds[1:]):
        if s.method == "rk4_fixed":
            y, f, na, nr = _rk4_segment(sys, rec, a, b, y, f, s.dt)
        else:
            if h is None:
                h = _initial_step(sys, a, y, f, b - a)
            y, f, na, nr, h = _dopri_segment(sys, rec, a, b, y, f, h)
        n_acc += na
        n_rej += nr
        # parameters may jump at a breakpoint (step events); refresh the derivative
        f = sys.rhs(b, y)

    t_arr = np.array([r[0] for r in rec.rows])
    traj = Trajectory(
        t=t_arr,
        Vs=np.array([r[1] for r in rec.rows]),
        Vl=np.array([r[2] for r in rec.rows]).reshape(len(t_arr), sys.nl),
        p=np.array([r[3] for r in rec.rows]) if sys.has_p else None,
        Ps=np.array([r[4] for r in rec.rows]),
        geomean_log=np.array([r[5] for r in rec.rows]),
        C=np.array(scenario.params.C),
        controller=scenario.controller,
        mode=scenario.mode,
        stats={"steps": n_acc, "rejected": n_rej, "rhs_evals": sys.n_rhs},
    )
    traj.M = np.full(len(t_arr), np.nan)
    if compute_lyapunov and scenario.controller != "constant_voltage":
        traj.M = lyapunov_column(scenario, traj)
    log.debug("simulated %s: %s", scenario.name, traj.stats)
    return traj


def lyapunov_column(scenario: Scenario, traj: Trajectory) -> np.ndarray:
    """Bregman energy along ``traj`` relative to the equilibrium for the final load bank.

    The reference equilibrium is pinned by the terminal weighted log-sum of the
    source voltages. Samples taken before the last event ends use the same
    reference, so the column is only monotone once the loads stop changing.
    """
    from .analysis import find_equilibrium
    from .lyapunov import LyapunovContext, bregman

    blocks = build_laplacian(scenario.network)
    bank = LoadSchedule(scenario.loads, scenario.events).final()
    C = scenario.params.C
    try:
        eq = find_equilibrium(
            blocks, bank, C, float(traj.geomean_log[-1]), (traj.Vs[-1], traj.Vl[-1]),
            voltage_floor=scenario.integrator.voltage_floor,
        )
        ctx = LyapunovContext.from_equilibrium(blocks, bank, C, scenario.params.Lc, eq.Vbar_s, eq.Vbar_l)
        return np.array([bregman(ctx, Vs, Vl) for Vs, Vl in zip(traj.Vs, traj.Vl)])
    except (NumericalError, ValueError) as exc:
        log.warning("no reference equilibrium for the Lyapunov column: %s", exc)
        return np.full(len(traj), np.nan)


@dataclass
class SteadyStateReport:
    max_dVs_dt: float
    sharing_residual: float
    sharing_relative: float
    mean_power_ratio: float
    geomean_drift: float
    steady: bool

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def sharing_residual(Ps: np.ndarray, C: np.ndarray) -> float:
    r = np.asarray(Ps) / C
    return float(np.max(r) - np.min(r))


def steady_state_check(traj: Trajectory, window: float, tol: float = 1e-6) -> SteadyStateReport:
    """Summarise the final ``window`` seconds of a trajectory.

    ``steady`` requires the relative sharing residual and the relative voltage
    change over the window both below ``tol``.
    """
    t_end = traj.t[-1]
    if window >= t_end - traj.t[0]:
        raise ValueError("trajectory is shorter than the requested window")
    w = traj.window(t_end - window)
    dVdt = np.abs(np.diff(w.Vs, axis=0)) / np.diff(w.t)[:, None]
    max_dv = float(dVdt.max()) if dVdt.size else 0.0
    ratios = w.Ps / traj.C
    spread = float(np.max(ratios.max(axis=1) - ratios.min(axis=1)))
    mean = float(np.mean(ratios[-1]))
    rel = spread / abs(mean) if mean != 0 else (0.0 if spread == 0 else math.inf)
    drift = float(abs(traj.geomean_log[-1] - traj.geomean_log[0]))
    vscale = float(np.max(np.abs(w.Vs)))
    steady = rel < tol and max_dv * window <= tol * vscale
    return SteadyStateReport(max_dv, spread, rel, mean, drift, bool(steady))


def trajectory_header(traj: Trajectory) -> list[str]:
    cols = ["t"]
    cols += [f"Vs_{i + 1}" for i in range(traj.n_sources)]
    cols += [f"Vl_{i + 1}" for i in range(traj.n_loads)]
    cols += [f"P_{i + 1}" for i in range(traj.n_sources)]
    if traj.p is not None:
        cols += [f"p_{i + 1}" for i in range(traj.n_sources)]
    return cols + ["M", "geomean_log"]


def write_csv(traj: Trajectory, path) -> None:
    parts = [traj.t[:, None], traj.Vs, traj.Vl, traj.Ps]
    if traj.p is not None:
        parts.append(traj.p)
    M = traj.M if traj.M is not None else np.full(len(traj), np.nan)
    parts += [M[:, None], traj.geomean_log[:, None]]
    data = np.hstack(parts)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(trajectory_header(traj)) + "\n")
        for row in data:
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")


def read_csv(path, C) -> Trajectory:
    """Parse a trajectory CSV written by :func:`write_csv`."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    col = {name: k for k, name in enumerate(header)}

    def take(prefix):
        idx = [k for name, k in col.items() if name.startswith(prefix + "_")]
        return data[:, sorted(idx)]

    ns = len([c for c in header if c.startswith("Vs_")])
    nl = len([c for c in header if c.startswith("Vl_")])
    p = take("p") if any(c.startswith("p_") for c in header) else None
    return Trajectory(
        t=data[:, col["t"]],
        Vs=take("Vs").reshape(-1, ns),
        Vl=take("Vl").reshape(-1, nl),
        Ps=take("P").reshape(-1, ns),
        geomean_log=data[:, col["geomean_log"]],
        C=np.asarray(C, dtype=float),
        p=p,
        M=data[:, col["M"]],
        controller="dapi" if p is not None else "consensus",
    )
