"""Equilibria, the shared power level and the stability certificate."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize

from .errors import AlgebraicSolveError, EquilibriumError, NumericalError, VoltageCollapseError
from .loadmodel import (
    ZipLoadBank,
    load_current,
    load_current_slope,
    solve_load_voltages,
    zi_load_voltages,
)
from .netmodel import ConductanceBlocks, kron_reduce, kron_reduce_with_shunts

EIG_REL_THRESHOLD = 1e-10


def p_star(bank: ZipLoadBank, C, Vs, Vl) -> float:
    """Shared power level: total load current over ``Σ C_i / V_i``.

    At an equilibrium the source powers are ``C * p_star``.
    """
    C = np.asarray(C, dtype=float)
    Vs = np.asarray(Vs, dtype=float)
    return float(-np.sum(load_current(bank, Vl)) / np.sum(C / Vs))


def equilibrium_residuals(blocks: ConductanceBlocks, bank: ZipLoadBank, C, Vs, Vl):
    """Power balance at the sources and current balance at the loads.

    Returns ``(P_zip, I_zip)``; a positive ``(Vs, Vl)`` is an equilibrium iff
    both vanish.
    """
    Vs = np.asarray(Vs, dtype=float)
    Vl = np.asarray(Vl, dtype=float)
    C = np.asarray(C, dtype=float)
    Il = load_current(bank, Vl)
    I_zip = Il - blocks.Yll @ Vl - blocks.Yls @ Vs
    if bank.n_loads:
        mapped = blocks.Ysl @ np.linalg.solve(blocks.Yll, Il)
    else:
        mapped = np.zeros_like(Vs)
    P_zip = Vs * (kron_reduce(blocks) @ Vs) + Vs * mapped - C * p_star(bank, C, Vs, Vl)
    return P_zip, I_zip


@dataclass
class ConditionReport:
    """Stability certificate at a candidate equilibrium.

    ``min_eig_schur`` belongs to the load-side Schur complement, ``min_eig_yeq``
    to the equivalent conductance matrix; ``agree`` compares the two verdicts.
    """

    ok: bool
    min_eig_schur: float
    ok_yeq: bool
    min_eig_yeq: float
    p_star: float

    @property
    def agree(self) -> bool:
        return self.ok == self.ok_yeq

    def as_dict(self) -> dict:
        return {
            "ok": self.ok, "min_eig_schur": self.min_eig_schur,
            "ok_yeq": self.ok_yeq, "min_eig_yeq": self.min_eig_yeq,
            "agree": self.agree, "p_star": self.p_star,
        }


def _min_eig(A: np.ndarray):
    A = 0.5 * (A + A.T)
    if A.size == 0:
        return np.inf, 0.0
    return float(np.linalg.eigvalsh(A)[0]), float(np.linalg.norm(A, 2))


def condition_matrices(blocks: ConductanceBlocks, bank: ZipLoadBank, C, Vbar_s, Vbar_l):
    """Return ``(schur, yeq, p_star)`` evaluated at ``(Vbar_s, Vbar_l)``."""
    Vs = np.asarray(Vbar_s, dtype=float)
    Vl = np.asarray(Vbar_l, dtype=float)
    ps = p_star(bank, C, Vs, Vl)
    Pbar = np.asarray(C, dtype=float) * ps
    top = blocks.Yss + np.diag(Pbar / Vs**2)
    bottom = blocks.Yll + np.diag(bank.Ystar + bank.Pstar / Vl**2)
    try:
        schur = bottom - blocks.Yls @ np.linalg.solve(top, blocks.Ysl)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("source block of the equivalent conductance is singular") from exc
    yeq = np.block([[top, blocks.Ysl], [blocks.Yls, bottom]])
    return schur, yeq, ps


def check_condition(blocks: ConductanceBlocks, bank: ZipLoadBank, C, Vbar_s, Vbar_l) -> ConditionReport:
    """Positive definiteness of the load-side Schur complement and of ``Y_eq``.

    A matrix counts as positive definite when its smallest eigenvalue exceeds
    ``1e-10`` times its spectral norm.
    """
    schur, yeq, ps = condition_matrices(blocks, bank, C, Vbar_s, Vbar_l)
    lam, nrm = _min_eig(schur)
    lam_eq, nrm_eq = _min_eig(yeq)
    return ConditionReport(
        ok=bool(lam > EIG_REL_THRESHOLD * nrm),
        min_eig_schur=lam,
        ok_yeq=bool(lam_eq > EIG_REL_THRESHOLD * nrm_eq),
        min_eig_yeq=lam_eq,
        p_star=ps,
    )


@dataclass
class EquilibriumReport:
    Vbar_s: np.ndarray
    Vbar_l: np.ndarray
    p_star: float
    Pbar_s: np.ndarray
    residuals: tuple
    condition_ok: bool
    min_eig_schur: float
    converged: bool = True
    iterations: int = 0
    history: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "Vbar_s": self.Vbar_s.tolist(),
            "Vbar_l": self.Vbar_l.tolist(),
            "p_star": self.p_star,
            "Pbar_s": self.Pbar_s.tolist(),
            "residuals": {"P_zip_inf": self.residuals[0], "I_zip_inf": self.residuals[1]},
            "condition_ok": self.condition_ok,
            "min_eig_schur": self.min_eig_schur,
            "converged": self.converged,
            "iterations": self.iterations,
        }


def _report(blocks, bank, C, Vs, Vl, iterations=0, history=()) -> EquilibriumReport:
    P_zip, I_zip = equilibrium_residuals(blocks, bank, C, Vs, Vl)
    cond = check_condition(blocks, bank, C, Vs, Vl)
    ps = p_star(bank, C, Vs, Vl)
    return EquilibriumReport(
        Vbar_s=np.array(Vs), Vbar_l=np.array(Vl), p_star=ps, Pbar_s=np.asarray(C) * ps,
        residuals=(float(np.max(np.abs(P_zip), initial=0.0)), float(np.max(np.abs(I_zip), initial=0.0))),
        condition_ok=cond.ok, min_eig_schur=cond.min_eig_schur,
        iterations=iterations, history=list(history),
    )


def _pinned_system(blocks, bank, C, target, Vs, Vl):
    """Residual and analytic Jacobian of the pinned equilibrium equations.

    Rows: ``Is - C p*/Vs`` for all sources but the last, then the pin
    ``C·ln Vs - target``, then the load current balance.
    """
    ns = len(Vs)
    Il = load_current(bank, Vl)
    slope = load_current_slope(bank, Vl)
    S = Il.sum()
    w = np.sum(C / Vs)
    ps = -S / w
    Is = blocks.Yss @ Vs + blocks.Ysl @ Vl

    r_s = Is - C * ps / Vs
    r_s[-1] = C @ np.log(Vs) - target
    r_l = Il - blocks.Yll @ Vl - blocks.Yls @ Vs

    dps_dVs = -S * C / (w**2 * Vs**2)
    dps_dVl = -slope / w
    J_ss = blocks.Yss - np.outer(C / Vs, dps_dVs) + np.diag(C * ps / Vs**2)
    J_sl = blocks.Ysl - np.outer(C / Vs, dps_dVl)
    J_ss[-1] = C / Vs
    J_sl[-1] = 0.0
    J_ls = -blocks.Yls
    J_ll = np.diag(slope) - blocks.Yll
    r = np.concatenate([r_s, r_l])
    J = np.block([[J_ss, J_sl], [J_ls, J_ll]])
    return r, J


def pinned_residual(blocks, bank, C, target, Vs, Vl) -> np.ndarray:
    return _pinned_system(blocks, bank, np.asarray(C, float), target, np.asarray(Vs, float), np.asarray(Vl, float))[0]


def pinned_jacobian(blocks, bank, C, target, Vs, Vl) -> np.ndarray:
    return _pinned_system(blocks, bank, np.asarray(C, float), target, np.asarray(Vs, float), np.asarray(Vl, float))[1]


def _default_guess(blocks, bank, C, target):
    V0 = np.exp(target / np.sum(C))
    Vs = np.full(len(C), V0)
    try:
        Vl = solve_load_voltages(blocks, bank, Vs)
    except (AlgebraicSolveError, VoltageCollapseError):
        Vl = np.full(bank.n_loads, V0)
    return Vs, Vl


def find_equilibrium(
    blocks: ConductanceBlocks,
    bank: ZipLoadBank,
    C,
    geomean_target: float,
    guess=None,
    *,
    tol: float = 1e-10,
    max_iter: int = 100,
    voltage_floor: float = 0.0,
) -> EquilibriumReport:
    """Equilibrium on the level set ``Σ C_i ln Vs_i = geomean_target``.

    Damped Newton on the source power balance (one row replaced by the pin)
    together with the load current balance. ``guess`` is ``(Vs, Vl)``.

    Raises
    ------
    EquilibriumError
        No convergence; ``history`` carries the residual norms.
    """
    C = np.asarray(C, dtype=float)
    if guess is None:
        Vs, Vl = _default_guess(blocks, bank, C, geomean_target)
    else:
        Vs = np.array(guess[0], dtype=float)
        Vl = np.array(guess[1], dtype=float)
    if np.any(Vs <= voltage_floor) or np.any(Vl <= voltage_floor):
        raise ValueError("equilibrium guess must be positive")
    ns = len(Vs)
    z = np.concatenate([Vs, Vl])
    r, J = _pinned_system(blocks, bank, C, geomean_target, Vs, Vl)
    rn = np.linalg.norm(r)
    history = [rn]
    for it in range(max_iter):
        if np.max(np.abs(r)) < tol:
            return _report(blocks, bank, C, z[:ns], z[ns:], it, history)
        try:
            dz = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError as exc:
            raise EquilibriumError("singular equilibrium Jacobian", history) from exc
        lam = 1.0
        while True:
            zn = z + lam * dz
            if np.all(zn > voltage_floor):
                rn_vec, Jn = _pinned_system(blocks, bank, C, geomean_target, zn[:ns], zn[ns:])
                rnn = np.linalg.norm(rn_vec)
                if rnn < rn:
                    break
            lam *= 0.5
            if lam < 1e-12:
                raise EquilibriumError(
                    f"line search stalled with residual {rn:.3e} (possibly infeasible)", history
                )
        z, r, J, rn = zn, rn_vec, Jn, rnn
        history.append(rn)
    if np.max(np.abs(r)) < tol:
        return _report(blocks, bank, C, z[:ns], z[ns:], max_iter, history)
    raise EquilibriumError(f"no convergence in {max_iter} iterations (residual {rn:.3e})", history)


def zi_equilibrium(blocks: ConductanceBlocks, bank: ZipLoadBank, C, geomean_target: float,
                   guess: Optional[np.ndarray] = None, tol: float = 1e-12) -> EquilibriumReport:
    """Equilibrium for ZI loads via the reduced source-only power balance.

    Solves the source power balance with the shunt-absorbing reduction
    ``Yss - Ysl (Yll + Y*)⁻¹ Yls`` for ``Vs`` alone (scipy's hybrid root
    finder), then recovers the load voltages in closed form.
    """
    if not bank.is_zi:
        raise ValueError("closed-form path requires Pstar == 0")
    C = np.asarray(C, dtype=float)
    Yhat = kron_reduce_with_shunts(blocks, bank.Ystar)
    if bank.n_loads:
        A = blocks.Yll + np.diag(bank.Ystar)
        G = np.linalg.solve(A, blocks.Yls)
        h = np.linalg.solve(A, bank.Istar)
        load_map = blocks.Ysl @ h
    else:
        load_map = np.zeros(len(C))
        G = np.zeros((0, len(C)))
        h = np.zeros(0)

    def pstar_zi(Vs):
        # total load current with the closed-form load voltages substituted
        Il = bank.Istar - bank.Ystar * (h - G @ Vs)
        return -np.sum(Il) / np.sum(C / Vs)

    def equations(x):
        Vs = np.exp(x)
        P = Vs * (Yhat @ Vs) + Vs * load_map - C * pstar_zi(Vs)
        out = P / Vs
        out[-1] = C @ x - geomean_target
        return out

    if guess is None:
        x0 = np.full(len(C), geomean_target / np.sum(C))
    else:
        x0 = np.log(np.asarray(guess, dtype=float))
    sol = optimize.root(equations, x0, method="hybr", tol=tol)
    if not sol.success:
        raise EquilibriumError(f"closed-form path did not converge: {sol.message}")
    Vs = np.exp(sol.x)
    Vl = zi_load_voltages(blocks, bank, Vs)
    return _report(blocks, bank, C, Vs, Vl, int(sol.nfev))


def voltage_inequality_check(bank: ZipLoadBank, C, Vs, Vl):
    """Weighted reciprocal-voltage averages at loads and sources.

    Returns ``(lhs, rhs, ok)`` with ``lhs = Σ a_i / V_i`` over loads
    (``a = P*/ΣP*``) and ``rhs = Σ b_i / V_i`` over sources (``b = C/ΣC``).
    """
    P = np.asarray(bank.Pstar, dtype=float)
    if not np.any(P):
        raise ValueError("inequality weights undefined: no constant-power loads")
    a = P / P.sum()
    b = np.asarray(C, dtype=float) / np.sum(C)
    lhs = float(np.sum(a / np.asarray(Vl, dtype=float)))
    rhs = float(np.sum(b / np.asarray(Vs, dtype=float)))
    return lhs, rhs, bool(lhs >= rhs * (1 - 1e-12))


def _polish(coeffs, root, iters=5):
    d = np.polyder(coeffs)
    for _ in range(iters):
        fp = np.polyval(d, root)
        if fp == 0:
            break
        root = root - np.polyval(coeffs, root) / fp
    return root


def _positive_real_roots(coeffs, scale):
    roots = np.roots(coeffs)
    real = roots[np.abs(roots.imag) <= 1e-7 * max(1.0, np.abs(roots).max())].real
    out = sorted(_polish(coeffs, r) for r in real if r > 0)
    return np.array([r for i, r in enumerate(out) if i == 0 or abs(r - out[i - 1]) > 1e-9 * scale])


def t_network_quartic_roots(r1: float, r2: float, c: float, Il_value: float):
    """Positive real roots of the source-voltage quartics of the two-source T network.

    ``c`` is the conserved product ``V1 V2`` and ``Il_value`` the load current.
    Returns ``(roots_V1, roots_V2)``; every root is polished by Newton and
    checked to a residual below ``1e-8 c²``.
    """
    if not (r1 > 0 and r2 > 0 and c > 0):
        raise ValueError("r1, r2 and c must be positive")
    I = float(Il_value)
    q1 = np.array([1.0, -r2 * I, 0.0, c * r1 * I, -c * c])
    q2 = np.array([1.0, -r1 * I, 0.0, c * r2 * I, -c * c])
    scale = np.sqrt(c)
    roots1 = _positive_real_roots(q1, scale)
    roots2 = _positive_real_roots(q2, scale)
    for q, roots in ((q1, roots1), (q2, roots2)):
        for v in roots:
            if abs(np.polyval(q, v)) >= 1e-8 * c * c:
                raise NumericalError(f"quartic root {v} has residual {np.polyval(q, v):.3e}")
    if r1 == r2 and I <= 0:
        # (V² - c)(V² - r I V + c): the second factor has no positive roots for I <= 0
        fact = np.polymul([1.0, 0.0, -c], [1.0, -r1 * I, c])
        if not np.allclose(fact, q1, rtol=1e-12, atol=1e-12 * c * c):
            raise NumericalError("symmetric quartic does not factor as expected")
        if len(roots1) != 1 or abs(roots1[0] - scale) > 1e-9 * scale:
            raise NumericalError(f"expected the unique positive root sqrt(c), got {roots1}")
    return roots1, roots2
