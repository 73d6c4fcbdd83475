"""Tangent-plane model of the power-flow equations at an operating point.

Around a feasible point the balance equations admit a first-order model
A_u (dv, dtheta) = (dp, dq).  A_u is assembled from the complex-to-real
block representation of the admittance matrix and a polar-to-rectangular
rotation, both defined below.  Because a network without bus shunts has
an angle-reference null space, the inverse sensitivity is computed on the
slack-reduced system (slack rows and columns deleted), pinning dv and
dtheta to zero at the slack bus.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Network, build_admittance
from .powerflow import OperatingPoint

#: residual tolerance accepted for a linearization point
POINT_TOL = 1e-6
#: refuse to invert reduced systems worse conditioned than this
COND_LIMIT = 1e12


class LinearizeError(RuntimeError):
    """The tangent model could not be built at the requested point."""


def bracket(A: np.ndarray) -> np.ndarray:
    """Real 2x2-block representation [[Re, -Im], [Im, Re]] of a complex matrix."""
    A = np.atleast_2d(np.asarray(A, dtype=complex))
    return np.block([[A.real, -A.imag], [A.imag, A.real]])


def conjugation_sign(n: int) -> np.ndarray:
    """diag(I, -I): the real representation of complex conjugation."""
    return np.diag(np.concatenate([np.ones(n), -np.ones(n)]))


def rotation_matrix(v: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Map polar deviations (dv, dtheta) to rectangular voltage deviations."""
    v = np.atleast_1d(np.asarray(v, dtype=float))
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if np.any(v <= 0):
        raise ValueError("voltage magnitudes must be positive")
    c, s = np.cos(theta), np.sin(theta)
    return np.block(
        [[np.diag(c), -np.diag(v * s)], [np.diag(s), np.diag(v * c)]]
    )


@dataclass(frozen=True)
class LinearModel:
    """Tangent model at one operating point.

    ``A_u`` maps full (dv, dtheta) to (dp, dq), each stacked over all n
    buses.  ``S_u`` is the inverse of the slack-reduced A_u and maps
    reduced (dp, dq) at the load buses (ascending id, p block then q
    block) to reduced (dv, dtheta) with the same layout.
    """

    A_u: np.ndarray
    S_u: np.ndarray
    slack_id: int
    point: OperatingPoint
    load_indices: tuple[int, ...]

    def __post_init__(self):
        for name in ("A_u", "S_u"):
            a = np.ascontiguousarray(getattr(self, name))
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    @property
    def n_loads(self) -> int:
        return len(self.load_indices)


def tangent_matrix(net: Network, pt: OperatingPoint, cond_limit: float = COND_LIMIT) -> LinearModel:
    """Assemble A_u at ``pt`` and the slack-reduced sensitivity S_u."""
    if pt.residual_norm > POINT_TOL:
        raise LinearizeError(
            f"operating point is off the manifold (residual {pt.residual_norm:.3e} > {POINT_TOL:.0e})"
        )
    n = net.n
    Y = build_admittance(net).Y
    u = pt.state.u()
    A_u = (
        bracket(np.diag(np.conj(Y @ u)))
        + bracket(np.diag(u)) @ conjugation_sign(n) @ bracket(Y)
    ) @ rotation_matrix(pt.state.v, pt.state.theta)

    loads = list(net.load_indices)
    keep = np.concatenate([loads, n + np.asarray(loads)])
    A_red = A_u[np.ix_(keep, keep)]
    cond = np.linalg.cond(A_red)
    if not np.isfinite(cond) or cond > cond_limit:
        raise LinearizeError(
            f"slack-reduced tangent matrix is numerically singular (cond {cond:.3e}); "
            "the full matrix is only invertible with bus shunts present"
        )
    S_u = np.linalg.inv(A_red)
    return LinearModel(
        A_u=A_u,
        S_u=S_u,
        slack_id=net.slack_index + 1,
        point=pt,
        load_indices=tuple(loads),
    )


def apply_sensitivity(model: LinearModel, dp: np.ndarray, dq: np.ndarray):
    """Voltage deviations for demand deviations at the load buses.

    ``dp``/``dq`` have length n-1 (loads ascending); the result is a pair
    of full n-vectors with zeros at the slack.
    """
    L = model.n_loads
    dp = np.asarray(dp, dtype=float)
    dq = np.asarray(dq, dtype=float)
    if dp.shape != (L,) or dq.shape != (L,):
        raise ValueError(f"dp and dq must have length {L}")
    red = model.S_u @ np.concatenate([dp, dq])
    n = L + 1
    dv = np.zeros(n)
    dtheta = np.zeros(n)
    idx = np.asarray(model.load_indices)
    dv[idx] = red[:L]
    dtheta[idx] = red[L:]
    return dv, dtheta


def tangent_direction(model: LinearModel, dp: np.ndarray, dq: np.ndarray) -> np.ndarray:
    """Full tangent state direction (dv, dtheta, dp, dq) for a demand move."""
    dv, dtheta = apply_sensitivity(model, dp, dq)
    n = model.n_loads + 1
    dp_full = np.zeros(n)
    dq_full = np.zeros(n)
    idx = np.asarray(model.load_indices)
    dp_full[idx] = dp
    dq_full[idx] = dq
    # the slack picks up the first-order balance of the move
    slack = model.slack_id - 1
    row_p = model.A_u[slack]
    row_q = model.A_u[n + slack]
    dvth = np.concatenate([dv, dtheta])
    dp_full[slack] = row_p @ dvth
    dq_full[slack] = row_q @ dvth
    return np.concatenate([dv, dtheta, dp_full, dq_full])
