"""Kalman estimation of grid state and PMU clock errors.

Three algorithms share one machinery:

* ``sase`` -- the synchronization-aware estimator.  Its state stacks the
  demand deviations at the load buses with the per-PMU clock skew and
  offset, x = (dp, dq, alpha, beta), so the angle-channel clock error is
  part of the linear output map and is estimated jointly.
* ``gt`` -- an oracle baseline: the true clock phase is subtracted from
  the angle readings before filtering, and the clock states are removed.
* ``blse`` -- a desync-blind baseline: clock states removed, but the raw
  (de-synchronized) readings are processed as if they were clean.

Demands are constant within one sync interval (no process noise by
default), so the filter is a sequence of measurement updates whose gains
and covariances depend only on the model; they are computed once,
offline, and reused across Monte-Carlo runs.  The output matrix is
time-varying: the skew column of the angle rows grows linearly with the
sample index, matching the clock-phase ramp t * T/(M-1) for t = 0..M-1.
The gain stored at slot t is applied to the frame with sample index t.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .linearize import LinearModel
from .measure import ClockError, MeasurementConfig, Placement, PmuFrame, desync_phase

RESYNC_RESET = "resync_reset"
RESYNC_INTEGRATE = "resync_integrate"

#: jitter added to exactly-zero prior variances (keeps Sigma0 invertible)
PRIOR_JITTER = 1e-12
#: innovation covariances worse conditioned than this are treated as singular
INNOVATION_COND_LIMIT = 1e14


class ScheduleError(RuntimeError):
    """The offline covariance/gain recursion could not be completed."""


def _frozen_array(a, dtype=float) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=dtype))
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class StateSpaceModel:
    """Prior, noise and time-varying output model for one sync interval.

    ``H_stack[t]`` is the output matrix paired with sample t.  For grid
    models the state layout is (dp, dq, alpha, beta) and the output
    layout is (dv, dtheta) at the PMU buses, both ascending by bus id;
    models without clock states drop the (alpha, beta) tail.
    """

    n_loads: int
    m: int
    Sigma0: np.ndarray
    W: np.ndarray
    R: np.ndarray
    H_stack: np.ndarray
    T: float
    M: int
    mode: str = RESYNC_RESET
    desync_states: bool = True
    pmu_buses: tuple[int, ...] = ()
    v_star_pmu: np.ndarray | None = None
    theta_star_pmu: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "Sigma0", _frozen_array(self.Sigma0))
        object.__setattr__(self, "W", _frozen_array(self.W))
        object.__setattr__(self, "R", _frozen_array(self.R))
        object.__setattr__(self, "H_stack", _frozen_array(self.H_stack))
        if self.v_star_pmu is not None:
            object.__setattr__(self, "v_star_pmu", _frozen_array(self.v_star_pmu))
            object.__setattr__(self, "theta_star_pmu", _frozen_array(self.theta_star_pmu))
        if self.mode not in (RESYNC_RESET, RESYNC_INTEGRATE):
            raise ValueError(f"unknown resync mode {self.mode!r}")
        if self.H_stack.shape[0] != self.M:
            raise ValueError("H_stack must provide one output matrix per sample")

    @property
    def nx(self) -> int:
        return self.Sigma0.shape[0]

    def output_matrix(self, t: int) -> np.ndarray:
        if not 0 <= t <= self.M - 1:
            raise ValueError(f"sample index t={t} outside 0..{self.M - 1}")
        return self.H_stack[t]


@dataclass(frozen=True)
class GainSchedule:
    """Measurement-independent gains L and covariances Sigma.

    ``gains[t]`` pairs with sample t; ``covariances[s]`` is the posterior
    after s updates (so index 0 is the prior and index M the end of the
    interval).
    """

    gains: tuple[np.ndarray, ...]
    covariances: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class FilterState:
    """Running estimate; ``t`` counts processed frames within interval ``k``."""

    x_hat: np.ndarray
    t: int = 0
    k: int = 0

    def __post_init__(self):
        object.__setattr__(self, "x_hat", _frozen_array(self.x_hat))


@dataclass(frozen=True)
class VoltageEstimate:
    """Recovered bus voltages with the covariance of the reduced (v, theta)."""

    v_hat: np.ndarray
    theta_hat: np.ndarray
    Sigma_u: np.ndarray


def build_state_space(
    model: LinearModel,
    placement: Placement,
    cfg: MeasurementConfig,
    mode: str = RESYNC_RESET,
    eta: float | None = None,
    include_desync: bool = True,
    W: np.ndarray | None = None,
) -> StateSpaceModel:
    """Assemble prior, noise covariances and the per-sample output matrices.

    The demand prior scales with the nominal injections of the operating
    point; its p-q cross block carries the correlation ``eta`` (from the
    config unless overridden).  Exactly-zero prior variances are jittered
    with a warning so downstream inversions stay defined.
    """
    eta = cfg.eta if eta is None else eta
    L = model.n_loads
    loads = np.asarray(model.load_indices)
    state = model.point.state
    slack_id = model.slack_id
    pmus = tuple(sorted(placement.pmu_buses))
    for b in pmus:
        if b == slack_id:
            raise ValueError(f"PMU on the slack bus {b}: its voltage is the reference")
        if b - 1 not in set(model.load_indices):
            raise ValueError(f"PMU bus {b} is not a bus of this network")
    m = len(pmus)

    p_star = state.p[loads]
    q_star = state.q[loads]
    dp = cfg.sigma_p * np.abs(p_star)
    dq = cfg.sigma_q * np.abs(q_star)
    pq_cov = eta * dp * dq
    top = np.hstack([np.diag(dp**2), np.diag(pq_cov)])
    bot = np.hstack([np.diag(pq_cov), np.diag(dq**2)])
    Sigma_pq = np.vstack([top, bot])
    if include_desync:
        nx = 2 * L + 2 * m
        Sigma0 = np.zeros((nx, nx))
        Sigma0[: 2 * L, : 2 * L] = Sigma_pq
        Sigma0[2 * L : 2 * L + m, 2 * L : 2 * L + m] = cfg.sigma_alpha**2 * np.eye(m)
        Sigma0[2 * L + m :, 2 * L + m :] = cfg.sigma_beta**2 * np.eye(m)
    else:
        nx = 2 * L
        Sigma0 = Sigma_pq.copy()

    zero_diag = np.flatnonzero(np.diag(Sigma0) == 0.0)
    if zero_diag.size:
        warnings.warn(
            f"prior covariance has zero variances at state indices {zero_diag.tolist()}; "
            f"adding jitter {PRIOR_JITTER:g}",
            RuntimeWarning,
            stacklevel=2,
        )
        Sigma0[zero_diag, zero_diag] += PRIOR_JITTER

    # output rows: v then theta at the PMU buses (positions in the load order)
    load_pos = {bus_idx: i for i, bus_idx in enumerate(model.load_indices)}
    pos = np.asarray([load_pos[b - 1] for b in pmus], dtype=int)
    S_sel = np.vstack([model.S_u[pos, :], model.S_u[L + pos, :]]) if m else np.zeros((0, 2 * L))

    H_stack = np.zeros((cfg.M, 2 * m, nx))
    H_stack[:, :, : 2 * L] = S_sel
    if include_desync and m:
        coeff = cfg.T / (cfg.M - 1)
        for t in range(cfg.M):
            H_stack[t, m:, 2 * L : 2 * L + m] = t * coeff * np.eye(m)
            H_stack[t, m:, 2 * L + m :] = np.eye(m)

    v_star_pmu = state.v[np.asarray([b - 1 for b in pmus], dtype=int)] if m else np.zeros(0)
    theta_star_pmu = state.theta[np.asarray([b - 1 for b in pmus], dtype=int)] if m else np.zeros(0)
    R = np.diag(
        np.concatenate(
            [cfg.sigma_pmu_v**2 * v_star_pmu**2, cfg.sigma_pmu_theta**2 * np.ones(m)]
        )
    ) if m else np.zeros((0, 0))

    return StateSpaceModel(
        n_loads=L,
        m=m,
        Sigma0=Sigma0,
        W=np.zeros((nx, nx)) if W is None else np.asarray(W, dtype=float),
        R=R,
        H_stack=H_stack,
        T=cfg.T,
        M=cfg.M,
        mode=mode,
        desync_states=include_desync,
        pmu_buses=pmus,
        v_star_pmu=v_star_pmu,
        theta_star_pmu=theta_star_pmu,
    )


def offline_schedule(ssm: StateSpaceModel, Sigma_start: np.ndarray | None = None) -> GainSchedule:
    """Propagate the covariance recursion and store the gains.

    Sigma(t+1) = (I - L H(t)) (Sigma(t) + W) with
    L = (Sigma(t) + W) H(t)^T (H(t) (Sigma(t) + W) H(t)^T + R)^{-1};
    covariances are symmetrized every step.
    """
    nx = ssm.nx
    Sigma = np.array(ssm.Sigma0 if Sigma_start is None else Sigma_start, dtype=float)
    gains = []
    covs = [Sigma.copy()]
    eye = np.eye(nx)
    for t in range(ssm.M):
        H = ssm.H_stack[t]
        P = Sigma + ssm.W
        if H.shape[0] == 0:
            L = np.zeros((nx, 0))
            Sigma = P
        else:
            S = H @ P @ H.T + ssm.R
            S = 0.5 * (S + S.T)
            cond = np.linalg.cond(S)
            if not np.isfinite(cond) or cond > INNOVATION_COND_LIMIT:
                raise ScheduleError(
                    f"innovation covariance numerically singular at t={t} (cond {cond:.3e})"
                )
            L = np.linalg.solve(S, H @ P).T
            Sigma = (eye - L @ H) @ P
        Sigma = 0.5 * (Sigma + Sigma.T)
        gains.append(L)
        covs.append(Sigma.copy())
    return GainSchedule(gains=tuple(gains), covariances=tuple(covs))


def initial_state(ssm: StateSpaceModel, k: int = 0) -> FilterState:
    return FilterState(x_hat=np.zeros(ssm.nx), t=0, k=k)


def measurement_vector(ssm: StateSpaceModel, frame: PmuFrame) -> np.ndarray:
    """Offset-referenced measurement (v, theta readings minus the nominal point)."""
    return np.concatenate(
        [frame.v_meas - ssm.v_star_pmu, frame.theta_meas - ssm.theta_star_pmu]
    )


def sase_step(fs: FilterState, frame: PmuFrame, schedule: GainSchedule,
              ssm: StateSpaceModel) -> FilterState:
    """One measurement update; frames must arrive in sample order."""
    if frame.t != fs.t or frame.k != fs.k:
        raise ValueError(
            f"out-of-order frame: got (k={frame.k}, t={frame.t}), expected (k={fs.k}, t={fs.t})"
        )
    H = ssm.H_stack[frame.t]
    L = schedule.gains[frame.t]
    y = measurement_vector(ssm, frame)
    x = fs.x_hat + L @ (y - H @ fs.x_hat)
    return FilterState(x_hat=x, t=fs.t + 1, k=fs.k)


def stack_measurements(ssm: StateSpaceModel, frames: list[PmuFrame]) -> np.ndarray:
    """Measurement matrix (M, 2m) for one interval, validating frame order."""
    if len(frames) != ssm.M:
        raise ValueError(f"expected {ssm.M} frames, got {len(frames)}")
    Y = np.empty((ssm.M, 2 * ssm.m))
    for t, fr in enumerate(frames):
        if fr.t != t:
            raise ValueError(f"out-of-order frame: got t={fr.t}, expected t={t}")
        Y[t, : ssm.m] = fr.v_meas - ssm.v_star_pmu
        Y[t, ssm.m :] = fr.theta_meas - ssm.theta_star_pmu
    return Y


def run_interval(frames: list[PmuFrame], schedule: GainSchedule, ssm: StateSpaceModel,
                 x0: np.ndarray | None = None) -> np.ndarray:
    """Filter one interval through the compiled kernel.

    Returns the (M + 1, nx) trajectory; row s is the estimate after s
    frames, so row M pairs with ``schedule.covariances[M]``.
    """
    Y = stack_measurements(ssm, frames)
    L_stack = np.stack(schedule.gains) if ssm.m else np.zeros((ssm.M, ssm.nx, 0))
    x0 = np.zeros(ssm.nx) if x0 is None else np.asarray(x0, dtype=float)
    return kernels.filter_interval(Y, ssm.H_stack, L_stack, x0)


def resync(fs: FilterState, Sigma: np.ndarray, ssm: StateSpaceModel):
    """State and covariance carried across a re-synchronization instant.

    Reset mode re-initializes to the prior; integrate mode applies the
    transition that accumulates the skew into the offset,
    beta <- beta + alpha * T, and propagates the covariance through it.
    """
    if ssm.mode == RESYNC_RESET:
        return FilterState(x_hat=np.zeros(ssm.nx), t=0, k=fs.k + 1), np.array(ssm.Sigma0)
    F = resync_transition(ssm)
    x = F @ fs.x_hat
    Sigma_next = F @ Sigma @ F.T + ssm.W
    return FilterState(x_hat=x, t=0, k=fs.k + 1), 0.5 * (Sigma_next + Sigma_next.T)


def resync_transition(ssm: StateSpaceModel) -> np.ndarray:
    """Identity except the offset rows, which integrate the skew over T."""
    F = np.eye(ssm.nx)
    if ssm.desync_states and ssm.m:
        L2, m = 2 * ssm.n_loads, ssm.m
        F[L2 + m : L2 + 2 * m, L2 : L2 + m] = ssm.T * np.eye(m)
    return F


def recover_voltages(x_hat: np.ndarray, Sigma: np.ndarray, model: LinearModel) -> VoltageEstimate:
    """Map the demand-deviation estimate back to bus voltages.

    v_hat = v* + dv(dp_hat, dq_hat); the covariance of the reduced
    (v, theta) is the congruence of the demand block through the
    sensitivity.
    """
    L = model.n_loads
    x_hat = np.asarray(x_hat, dtype=float)
    red = model.S_u @ x_hat[: 2 * L]
    state = model.point.state
    v_hat = state.v.copy()
    th_hat = state.theta.copy()
    idx = np.asarray(model.load_indices)
    v_hat[idx] += red[:L]
    th_hat[idx] += red[L:]
    Sigma_u = model.S_u @ np.asarray(Sigma)[: 2 * L, : 2 * L] @ model.S_u.T
    return VoltageEstimate(v_hat=v_hat, theta_hat=th_hat, Sigma_u=0.5 * (Sigma_u + Sigma_u.T))


def sase_run(frames: list[PmuFrame], schedule: GainSchedule, ssm: StateSpaceModel) -> np.ndarray:
    """Synchronization-aware filtering of one interval."""
    if not ssm.desync_states:
        raise ValueError("sase_run requires a model with clock states")
    return run_interval(frames, schedule, ssm)


def gt_run(frames: list[PmuFrame], true_clocks: list[ClockError], schedule: GainSchedule,
           ssm: StateSpaceModel, cfg: MeasurementConfig) -> np.ndarray:
    """Oracle baseline: perfect clock compensation, clock states removed."""
    if ssm.desync_states:
        raise ValueError("gt_run expects a model without clock states")
    compensated = []
    for fr in frames:
        d = np.array([desync_phase(c, fr.t, cfg) for c in true_clocks])
        compensated.append(
            PmuFrame(k=fr.k, t=fr.t, v_meas=fr.v_meas, theta_meas=fr.theta_meas - d)
        )
    return run_interval(compensated, schedule, ssm)


def blse_run(frames: list[PmuFrame], schedule: GainSchedule, ssm: StateSpaceModel) -> np.ndarray:
    """Desync-blind baseline: raw frames through the clock-free model."""
    if ssm.desync_states:
        raise ValueError("blse_run expects a model without clock states")
    return run_interval(frames, schedule, ssm)


def mismatched_riccati(ssm: StateSpaceModel, schedule: GainSchedule,
                       cfg: MeasurementConfig) -> list[np.ndarray]:
    """True error covariance of the desync-blind filter.

    The blind filter assumes clean angle readings while the real ones
    carry the clock phase D(t) (alpha, beta), a zero-mean pair drawn once
    per interval.  Stacking the filter error with (alpha, beta) gives an
    exact linear recursion for the joint covariance,

        e(t+1) = (I - L H) e(t) - L D(t) c - L w(t),   c = (alpha, beta),

    whose top-left block is returned for every t (index 0 is the prior).
    """
    if ssm.desync_states:
        raise ValueError("mismatched_riccati analyses the model without clock states")
    nx, m = ssm.nx, ssm.m
    nc = 2 * m
    P = np.zeros((nx + nc, nx + nc))
    P[:nx, :nx] = ssm.Sigma0
    P[nx : nx + m, nx : nx + m] = cfg.sigma_alpha**2 * np.eye(m)
    P[nx + m :, nx + m :] = cfg.sigma_beta**2 * np.eye(m)
    out = [P[:nx, :nx].copy()]
    coeff = cfg.T / (cfg.M - 1)
    eye = np.eye(nx)
    for t in range(ssm.M):
        H = ssm.H_stack[t]
        L = schedule.gains[t]
        D = np.zeros((2 * m, nc))
        D[m:, :m] = t * coeff * np.eye(m)
        D[m:, m:] = np.eye(m)
        Phi = np.zeros((nx + nc, nx + nc))
        Phi[:nx, :nx] = eye - L @ H
        Phi[:nx, nx:] = -L @ D
        Phi[nx:, nx:] = np.eye(nc)
        P = Phi @ P @ Phi.T
        P[:nx, :nx] += L @ ssm.R @ L.T
        P = 0.5 * (P + P.T)
        out.append(P[:nx, :nx].copy())
    return out


def with_M(cfg: MeasurementConfig, M: int) -> MeasurementConfig:
    return replace(cfg, M=M)
