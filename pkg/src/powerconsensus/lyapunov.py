"""Energy function, its Bregman shift, and audits along trajectories.

The energy mixes watts and log-volts; only differences and signs are used.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controllers import consensus_rhs, source_powers
from .errors import VoltageCollapseError
from .loadmodel import ZipLoadBank, load_current
from .netmodel import ConductanceBlocks


@dataclass(frozen=True)
class LyapunovContext:
    blocks: ConductanceBlocks
    bank: ZipLoadBank
    C: np.ndarray
    Lc: np.ndarray
    Vbar_s: np.ndarray
    Vbar_l: np.ndarray
    Pbar_s: np.ndarray

    @classmethod
    def from_equilibrium(cls, blocks, bank, C, Lc, Vbar_s, Vbar_l) -> "LyapunovContext":
        """Build a context whose reference powers are ``C p*`` at ``(Vbar_s, Vbar_l)``."""
        from .analysis import p_star

        C = np.asarray(C, dtype=float)
        Vbar_s = np.asarray(Vbar_s, dtype=float)
        Vbar_l = np.asarray(Vbar_l, dtype=float)
        if np.any(Vbar_s <= 0) or np.any(Vbar_l <= 0):
            raise VoltageCollapseError("reference voltages must be positive")
        Pbar = C * p_star(bank, C, Vbar_s, Vbar_l)
        return cls(blocks, bank, C, np.asarray(Lc, dtype=float), Vbar_s, Vbar_l, Pbar)

    @property
    def ns(self) -> int:
        return len(self.C)


def _split(ctx, Vs, Vl):
    Vs = np.asarray(Vs, dtype=float)
    Vl = np.asarray(Vl, dtype=float)
    if np.any(Vs <= 0) or np.any(Vl <= 0):
        raise VoltageCollapseError("energy function needs strictly positive voltages")
    return Vs, Vl


def energy_M(ctx: LyapunovContext, Vs, Vl) -> float:
    """Network and shunt dissipation plus logarithmic terms for the constant powers."""
    Vs, Vl = _split(ctx, Vs, Vl)
    b = ctx.blocks
    quad = Vs @ (b.Yss @ Vs) + 2 * Vs @ (b.Ysl @ Vl) + Vl @ (b.Yll @ Vl) + ctx.bank.Ystar @ Vl**2
    return float(0.5 * quad - ctx.Pbar_s @ np.log(Vs) - ctx.bank.Pstar @ np.log(Vl))


def energy_gradient(ctx: LyapunovContext, Vs, Vl):
    """Gradient of :func:`energy_M` as ``(d/dVs, d/dVl)``."""
    Vs, Vl = _split(ctx, Vs, Vl)
    b = ctx.blocks
    gs = b.Yss @ Vs + b.Ysl @ Vl - ctx.Pbar_s / Vs
    gl = b.Yls @ Vs + b.Yll @ Vl + ctx.bank.Ystar * Vl - ctx.bank.Pstar / Vl
    return gs, gl


def bregman(ctx: LyapunovContext, Vs, Vl) -> float:
    """``M(V) - M(V̄) - ∇M(V̄)ᵀ (V - V̄)``."""
    Vs, Vl = _split(ctx, Vs, Vl)
    gs, gl = energy_gradient(ctx, ctx.Vbar_s, ctx.Vbar_l)
    lin = gs @ (Vs - ctx.Vbar_s) + gl @ (Vl - ctx.Vbar_l)
    return energy_M(ctx, Vs, Vl) - energy_M(ctx, ctx.Vbar_s, ctx.Vbar_l) - float(lin)


def bregman_gradient(ctx: LyapunovContext, Vs, Vl):
    """Closed-form gradient blocks ``([Vs]⁻¹(Ps - P̄s), Yls Vs + Yll Vl - I_l(Vl))``.

    The load block equals the Bregman gradient exactly when the reference
    point satisfies the load current balance.
    """
    Vs, Vl = _split(ctx, Vs, Vl)
    b = ctx.blocks
    gs = (source_powers(b, Vs, Vl) - ctx.Pbar_s) / Vs
    gl = b.Yls @ Vs + b.Yll @ Vl - load_current(ctx.bank, Vl)
    return gs, gl


def bregman_hessian(ctx: LyapunovContext, Vs, Vl) -> np.ndarray:
    """``BΓBᵀ + diag(0, Y*) + diag(P̄s/Vs², P*/Vl²)``."""
    Vs, Vl = _split(ctx, Vs, Vl)
    H = ctx.blocks.full().copy()
    diag = np.concatenate([ctx.Pbar_s / Vs**2, ctx.bank.Ystar + ctx.bank.Pstar / Vl**2])
    H[np.diag_indices_from(H)] += diag
    return H


def verify_gradient_flow(ctx: LyapunovContext, Vs, Vl, relative: bool = False) -> float:
    """Residual of ``C dVs/dt = -[Vs] Lc [Vs] C⁻¹ ∂M/∂Vs`` at an arbitrary positive state.

    With ``relative=True`` the residual is divided by the larger of the two
    sides' infinity norms (or 1 if both vanish).
    """
    from .controllers import ControllerParams

    Vs, Vl = _split(ctx, Vs, Vl)
    params = ControllerParams(ctx.C, ctx.Lc)
    lhs = ctx.C * consensus_rhs(ctx.blocks, params, Vs, Vl)
    gs, _ = bregman_gradient(ctx, Vs, Vl)
    rhs = -Vs * (ctx.Lc @ (Vs * gs / ctx.C))
    res = float(np.max(np.abs(lhs - rhs)))
    if relative:
        scale = max(np.max(np.abs(lhs)), np.max(np.abs(rhs)))
        return res / scale if scale > 0 else res
    return res


def dissipation_rate(ctx_or_C, Lc, Ps) -> np.ndarray:
    """``-Psᵀ C⁻¹ Lc C⁻¹ Ps`` for each row of ``Ps``."""
    C = ctx_or_C.C if isinstance(ctx_or_C, LyapunovContext) else np.asarray(ctx_or_C, dtype=float)
    W = np.atleast_2d(Ps) / C
    return -np.einsum("ki,ij,kj->k", W, np.asarray(Lc, dtype=float), W)


@dataclass
class DecreaseAudit:
    n_samples: int
    max_increase: float
    drift_tol: float
    monotone: bool
    max_rate: float
    rate_tol: float
    rate_nonpositive: bool
    rate_mismatch: float
    M: np.ndarray
    rates: np.ndarray

    def as_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k not in ("M", "rates")}
        for k, v in d.items():
            if isinstance(v, (np.floating, np.bool_)):
                d[k] = v.item()
        return d


def decrease_audit(ctx: LyapunovContext, traj, t_min: float = -np.inf, t_max: float = np.inf,
                   atol: float = 1e-10) -> DecreaseAudit:
    """Check the energy decrease along the samples of ``traj`` in ``[t_min, t_max]``.

    Reports the largest sample-to-sample increase of the Bregman energy
    (allowed: ``100 * atol * n``), the largest analytic dissipation rate
    (allowed: ``1e-12`` times the rate scale), and the worst relative mismatch
    between sampled energy decrements and the trapezoid integral of the rate.

    The mismatch is informational. It is only meaningful when the sampling
    resolves the dynamics and the loads are constant over the window.
    """
    mask = (traj.t >= t_min) & (traj.t <= t_max)
    t = traj.t[mask]
    Vs = traj.Vs[mask]
    Vl = traj.Vl[mask]
    Ps = np.array([source_powers(ctx.blocks, a, b) for a, b in zip(Vs, Vl)]).reshape(len(t), ctx.ns)
    M = np.array([bregman(ctx, a, b) for a, b in zip(Vs, Vl)])
    rates = dissipation_rate(ctx.C, ctx.Lc, Ps)

    n = len(ctx.C) + ctx.bank.n_loads
    drift_tol = 100 * atol * n
    dM = np.diff(M)
    max_inc = float(dM.max()) if dM.size else 0.0
    scale = np.einsum("ki,ki->k", Ps / ctx.C, Ps / ctx.C) * np.linalg.norm(ctx.Lc, 2)
    rate_tol = 1e-12 * float(scale.max()) if scale.size else 0.0
    max_rate = float(rates.max()) if rates.size else 0.0

    if len(t) > 1:
        integral = 0.5 * (rates[1:] + rates[:-1]) * np.diff(t)
        total = float(np.abs(integral).sum()) or 1.0
        mismatch = float(np.abs(dM - integral).sum() / total)
    else:
        mismatch = 0.0
    return DecreaseAudit(
        n_samples=len(t), max_increase=max_inc, drift_tol=drift_tol,
        monotone=bool(max_inc <= drift_tol), max_rate=max_rate, rate_tol=rate_tol,
        rate_nonpositive=bool(max_rate <= rate_tol), rate_mismatch=mismatch, M=M, rates=rates,
    )


def in_sublevel_set(ctx: LyapunovContext, Vs, Vl, n_samples: int = 200) -> bool:
    """Heuristic membership test for a sublevel set of the Bregman energy inside the orthant.

    The level ``c = bregman(V)`` is accepted when, on the ray from ``V̄``
    through ``V``, the energy stays at or below ``c`` between ``V̄`` and ``V``
    and at or above ``c`` from ``V`` out to the orthant boundary. This is a
    sampled necessary check along one direction, not a proof.
    """
    V = np.concatenate([np.asarray(Vs, float), np.asarray(Vl, float)])
    Vbar = np.concatenate([ctx.Vbar_s, ctx.Vbar_l])
    d = V - Vbar
    if not np.any(d):
        return True
    c = bregman(ctx, Vs, Vl)
    slack = 1e-12 * max(1.0, abs(c))
    neg = d < 0
    s_max = float(np.min(-Vbar[neg] / d[neg])) if np.any(neg) else 10.0
    ns = ctx.ns

    def energy(s):
        W = Vbar + s * d
        return bregman(ctx, W[:ns], W[ns:])

    inside = all(energy(s) <= c + slack for s in np.linspace(0.0, 1.0, n_samples // 2))
    beyond = all(
        energy(s) >= c - slack for s in np.linspace(1.0, s_max, n_samples // 2, endpoint=False)[1:]
    )
    return inside and beyond
