"""Implicit power-flow map and Newton solution of the AC power flow.

The grid state is xi = (v, theta, p, q); the nodal balance in complex
form is s = diag(u) conj(Y u) with u = v exp(j theta).  The residual
stacks its real and imaginary parts minus (p, q), so a state is feasible
iff the residual vanishes.  The Newton solve closes the system with one
slack bus (fixed v, theta) and PQ injections everywhere else.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import AdmittanceMatrix, Network, build_admittance


class PowerFlowError(RuntimeError):
    """Newton iteration failed (non-convergence or singular Jacobian)."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=float))
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class GridState:
    """Full per-unit state (v, theta, p, q), each an n-vector."""

    v: np.ndarray
    theta: np.ndarray
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        for name in ("v", "theta", "p", "q"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        n = self.v.shape[0]
        if not all(getattr(self, f).shape == (n,) for f in ("theta", "p", "q")):
            raise ValueError("state vectors must share one length n")
        if np.any(self.v <= 0):
            raise ValueError("voltage magnitudes must be positive")

    @property
    def n(self) -> int:
        return self.v.shape[0]

    def u(self) -> np.ndarray:
        """Complex bus voltages v * exp(j theta)."""
        return self.v * np.exp(1j * self.theta)


@dataclass(frozen=True)
class OperatingPoint:
    """A solved state together with its power-flow residual norm."""

    state: GridState
    residual_norm: float


def pf_residual(net: Network, state: GridState, Y: AdmittanceMatrix | None = None) -> np.ndarray:
    """Residual of the nodal balance, stacked as 2n reals (P rows, then Q rows)."""
    Ym = (Y or build_admittance(net)).Y
    u = state.u()
    s = u * np.conj(Ym @ u)
    return np.concatenate([s.real - state.p, s.imag - state.q])


def injection_jacobian(Y: np.ndarray, v: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Jacobian of the injected (P, Q) with respect to (v, theta), 2n x 2n.

    Columns follow the chain rule on s = diag(u) conj(Y u): a magnitude
    perturbation moves u along exp(j theta), an angle perturbation along
    j u.
    """
    u = v * np.exp(1j * theta)
    yu_bar = np.conj(Y @ u)
    ph = np.exp(1j * theta)
    # complex sensitivities of s to each (v_k, theta_k)
    dS_dv = np.diag(yu_bar * ph) + (u[:, None] * np.conj(Y * ph[None, :]))
    dS_dth = np.diag(yu_bar * 1j * u) + (u[:, None] * np.conj(Y * (1j * u)[None, :]))
    top = np.hstack([dS_dv.real, dS_dth.real])
    bot = np.hstack([dS_dv.imag, dS_dth.imag])
    return np.vstack([top, bot])


def solve_power_flow(
    net: Network,
    injections: tuple[np.ndarray, np.ndarray] | None = None,
    initial: GridState | None = None,
    tol: float = 1e-8,
    max_iter: int = 50,
) -> OperatingPoint:
    """Newton iteration for the operating point at the given injections.

    Parameters
    ----------
    injections : (p, q) at the non-slack buses (ascending bus id), or None
        to use the nominal injections from the network file.
    initial : warm-start state; the default is the flat profile.

    Raises
    ------
    PowerFlowError
        On non-convergence after ``max_iter`` steps or a singular Jacobian.
    """
    n = net.n
    slack = net.slack_index
    loads = list(net.load_indices)
    Y = build_admittance(net)

    if injections is None:
        p_l = net.p_nom_vector()[loads]
        q_l = net.q_nom_vector()[loads]
    else:
        p_l = np.asarray(injections[0], dtype=float)
        q_l = np.asarray(injections[1], dtype=float)
        if p_l.shape != (len(loads),) or q_l.shape != (len(loads),):
            raise ValueError(f"injections must be two vectors of length {len(loads)}")

    slack_bus = net.buses[slack]
    v = np.ones(n)
    theta = np.zeros(n)
    if initial is not None:
        v = initial.v.copy()
        theta = initial.theta.copy()
    v[slack] = slack_bus.v_set
    theta[slack] = slack_bus.theta_set

    p = np.zeros(n)
    q = np.zeros(n)
    p[loads] = p_l
    q[loads] = q_l

    rows = np.concatenate([loads, n + np.asarray(loads)])  # P and Q balance at loads
    cols = rows  # same index pattern selects (v, theta) at loads

    res_norm = np.inf
    for it in range(max_iter):
        u = v * np.exp(1j * theta)
        s = u * np.conj(Y.Y @ u)
        F = np.concatenate([s.real - p, s.imag - q])[rows]
        if not np.all(np.isfinite(F)):
            raise PowerFlowError(
                f"power flow diverged at iteration {it} (non-finite residual)", residual=float("inf")
            )
        res_norm = float(np.max(np.abs(F)))
        if res_norm <= tol:
            break
        J = injection_jacobian(Y.Y, v, theta)[np.ix_(rows, cols)]
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError(f"singular power-flow Jacobian at iteration {it}") from exc
        nl = len(loads)
        v[loads] += step[:nl]
        theta[loads] += step[nl:]
        if np.any(v[loads] <= 0) or not np.all(np.isfinite(v)):
            raise PowerFlowError(
                f"power flow diverged at iteration {it} (voltage left the feasible region)",
                residual=res_norm,
            )
    else:
        raise PowerFlowError(
            f"power flow did not converge after {max_iter} iterations "
            f"(last residual {res_norm:.3e})",
            residual=res_norm,
        )

    # close the slack balance so the full residual vanishes there exactly
    u = v * np.exp(1j * theta)
    s = u * np.conj(Y.Y @ u)
    p[slack] = s.real[slack]
    q[slack] = s.imag[slack]
    state = GridState(v, theta, p, q)
    full = pf_residual(net, state, Y)
    return OperatingPoint(state=state, residual_norm=float(np.max(np.abs(full))))
