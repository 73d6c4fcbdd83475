"""Closed-form two-node analysis, error metrics, placement and experiments.

The two-node model (one load behind a purely inductive line, active
power only) reduces the filter state to x = (theta, beta, alpha) with
scalar angle measurements y_t = theta + beta + t*T/(M-1)*alpha + noise.
Its exact posterior is available in information form and doubles as an
oracle for the recursive filter.  Because theta and beta enter every row
identically they are never separable: as M*T grows the posterior
collapses onto the line theta + beta = const, with residual variance
sigma_theta^2 sigma_beta^2 / (sigma_theta^2 + sigma_beta^2) on each and
correlation -> -1, while the skew variance vanishes like 1/(M*T^2).

The Monte-Carlo harness draws a demand truth, solves the nonlinear power
flow for the true voltages, streams noisy de-synchronized PMU frames and
scores each algorithm against the truth, aggregating the average RMSE
per sample index.  Runs are seeded per (purpose, run, bus) so sweeps
share their random draws point-by-point and results do not depend on the
worker count.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .estimator import (
    RESYNC_RESET,
    GainSchedule,
    StateSpaceModel,
    blse_run,
    build_state_space,
    gt_run,
    mismatched_riccati,
    offline_schedule,
    sase_run,
)
from .linearize import LinearModel, tangent_matrix
from .measure import (
    RNG_CLOCK,
    RNG_DEMAND,
    RNG_PMU,
    MeasurementConfig,
    Placement,
    PmuFrame,
    derive_rng,
    draw_clock,
    draw_demand_truth,
    simulate_pmu_stream,
)
from .network import Network
from .powerflow import PowerFlowError, solve_power_flow

ALGORITHMS = ("sase", "blse", "gt")
QUANTITIES = ("v", "theta", "alpha", "beta")

CSV_COLUMNS = (
    "scenario_id",
    "algorithm",
    "pmu_count",
    "M",
    "t",
    "quantity",
    "armse_empirical",
    "armse_theoretical",
    "n_runs",
    "seed",
)


class ExperimentError(RuntimeError):
    """A Monte-Carlo experiment could not be completed."""


# --- two-node closed-form oracle -------------------------------------------


@dataclass(frozen=True)
class TwoNodeParams:
    """Priors and noise of the two-node reduction, state order (theta, beta, alpha)."""

    sigma_theta: float = 0.5
    sigma_beta: float = 2e-4
    sigma_alpha: float = 1e-2
    sigma_r: float = 1e-3
    T: float = 1.0
    M: int = 30

    def __post_init__(self):
        for name in ("sigma_theta", "sigma_beta", "sigma_alpha", "sigma_r", "T"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.M < 2:
            raise ValueError("M must be at least 2")


def two_node_coefficients(p: TwoNodeParams) -> np.ndarray:
    """Skew coefficients t*T/(M-1) of the M measurement rows."""
    return np.arange(p.M) * (p.T / (p.M - 1))


def two_node_posterior(p: TwoNodeParams) -> np.ndarray:
    """Information-form posterior covariance after all M angle measurements.

    The measurement rows are [1, 1, c_t]; their Gram matrix is assembled
    from the sums of c_t and c_t^2, so large M costs O(M) at most.
    """
    c = two_node_coefficients(p)
    s0 = float(p.M)
    s1 = float(c.sum())
    s2 = float((c * c).sum())
    gram = np.array([[s0, s0, s1], [s0, s0, s1], [s1, s1, s2]])
    info = np.diag([p.sigma_theta**-2, p.sigma_beta**-2, p.sigma_alpha**-2])
    info = info + gram / p.sigma_r**2
    Sigma = np.linalg.inv(info)
    return 0.5 * (Sigma + Sigma.T)


def two_node_state_space(p: TwoNodeParams) -> StateSpaceModel:
    """The same model shaped for the recursive filter (scalar output rows)."""
    c = two_node_coefficients(p)
    H = np.zeros((p.M, 1, 3))
    H[:, 0, 0] = 1.0
    H[:, 0, 1] = 1.0
    H[:, 0, 2] = c
    return StateSpaceModel(
        n_loads=1,
        m=1,
        Sigma0=np.diag([p.sigma_theta**2, p.sigma_beta**2, p.sigma_alpha**2]),
        W=np.zeros((3, 3)),
        R=np.array([[p.sigma_r**2]]),
        H_stack=H,
        T=p.T,
        M=p.M,
    )


@dataclass(frozen=True)
class TwoNodeLimits:
    """Large-M*T limit matrix plus numeric scaling-law evaluators."""

    limit: np.ndarray
    params: TwoNodeParams

    def sigma22(self, M: int | None = None, T: float | None = None) -> float:
        """Posterior offset variance at the given (M, T)."""
        p = replace(self.params, M=M or self.params.M, T=T or self.params.T)
        return float(two_node_posterior(p)[1, 1])

    def sigma33(self, M: int | None = None, T: float | None = None) -> float:
        """Posterior skew variance; decays like 1/(M*T^2) for large M*T."""
        p = replace(self.params, M=M or self.params.M, T=T or self.params.T)
        return float(two_node_posterior(p)[2, 2])


def two_node_limits(p: TwoNodeParams) -> TwoNodeLimits:
    """The covariance limit as M*T grows: rank-1 coupling of theta and beta."""
    s = p.sigma_theta**2 * p.sigma_beta**2 / (p.sigma_theta**2 + p.sigma_beta**2)
    limit = np.array([[s, -s, 0.0], [-s, s, 0.0], [0.0, 0.0, 0.0]])
    return TwoNodeLimits(limit=limit, params=p)


# --- error metrics ----------------------------------------------------------


def empirical_armse(truth: np.ndarray, estimates: np.ndarray) -> np.ndarray:
    """Average RMSE per time index over runs and vector entries.

    Inputs broadcast to shape (runs, time, n); the result has one value
    per time index: sqrt(mean over runs and entries of |a - b|^2).
    """
    a = np.asarray(truth)
    b = np.asarray(estimates)
    a, b = np.broadcast_arrays(a, b)
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if a.ndim != 3:
        raise ValueError("expected arrays shaped (runs, time, n)")
    return np.sqrt(np.mean(np.abs(a - b) ** 2, axis=(0, 2)))


def theoretical_armse(Sigma: np.ndarray, n: int) -> float:
    """sqrt(trace(Sigma) / n) for the covariance block of interest."""
    return float(np.sqrt(np.trace(np.asarray(Sigma)) / n))


def tve(v_hat, theta_hat, v_ref, theta_ref) -> np.ndarray:
    """Total vector error per bus, time-averaged over leading axes."""
    u_hat = np.asarray(v_hat) * np.exp(1j * np.asarray(theta_hat))
    u_ref = np.asarray(v_ref) * np.exp(1j * np.asarray(theta_ref))
    err = np.abs(u_hat - u_ref) / np.abs(u_ref)
    if err.ndim > 1:
        err = err.mean(axis=tuple(range(err.ndim - 1)))
    return err


# --- greedy PMU placement ---------------------------------------------------


def _end_of_interval_voltage_armse(model: LinearModel, placement: Placement,
                                   cfg: MeasurementConfig) -> float:
    ssm = build_state_space(model, placement, cfg)
    schedule = offline_schedule(ssm)
    L = model.n_loads
    Sigma_pq = schedule.covariances[-1][: 2 * L, : 2 * L]
    Sigma_u = model.S_u @ Sigma_pq @ model.S_u.T
    return theoretical_armse(Sigma_u, 2 * L)


def greedy_placement(model: LinearModel, cfg: MeasurementConfig, k_max: int) -> Placement:
    """Greedy PMU deployment minimizing predicted end-of-interval voltage ARMSE.

    Buses are added one at a time, each minimizing the objective given
    the buses already placed; ties break toward the lowest bus id.  The
    returned placement is ordered by addition, so its prefixes are the
    greedy deployments of every smaller size.
    """
    candidates = [i + 1 for i in model.load_indices]
    if not 1 <= k_max <= len(candidates):
        raise ValueError(f"k_max must lie in 1..{len(candidates)}")
    chosen: list[int] = []
    for _ in range(k_max):
        scores = [
            (_end_of_interval_voltage_armse(model, Placement(tuple(chosen + [c])), cfg), c)
            for c in candidates
            if c not in chosen
        ]
        chosen.append(min(scores)[1])
    return Placement(tuple(chosen))


# --- Monte-Carlo experiment harness ----------------------------------------


@dataclass(frozen=True)
class ExperimentScenario:
    """One experiment: a network, a noise scenario and a sweep grid.

    The sweep is the cross product of ``placements`` and ``M_values``
    (the latter defaulting to the config's M).  ``n_runs`` truths are
    drawn per sweep point, shared across points through per-(run, bus)
    seeding.
    """

    network: Network
    cfg: MeasurementConfig
    placements: tuple[Placement, ...]
    M_values: tuple[int, ...] = ()
    algorithms: tuple[str, ...] = ALGORITHMS
    n_runs: int = 500
    seed: int = 0
    scenario_id: str = "scenario"

    def __post_init__(self):
        if not self.placements:
            raise ValueError("at least one placement required")
        unknown = set(self.algorithms) - set(ALGORITHMS)
        if unknown:
            raise ValueError(f"unknown algorithms: {sorted(unknown)}")
        if not self.M_values:
            object.__setattr__(self, "M_values", (self.cfg.M,))
        if self.n_runs < 1:
            raise ValueError("n_runs must be at least 1")


@dataclass
class QuantityCurves:
    """Per-sample empirical and model-predicted ARMSE plus raw run MSEs."""

    empirical: np.ndarray
    theoretical: np.ndarray
    run_mse: np.ndarray  # (n_runs, M): per-run mean squared error per sample


@dataclass
class PointResult:
    placement: Placement
    M: int
    algorithm: str
    curves: dict[str, QuantityCurves]


@dataclass
class ExperimentResult:
    scenario_id: str
    seed: int
    n_runs: int
    points: list[PointResult]
    resample_count: int
    prior_armse: dict[str, float] = field(default_factory=dict)

    def point(self, algorithm: str, pmu_count: int | None = None,
              M: int | None = None) -> PointResult:
        for pt in self.points:
            if pt.algorithm != algorithm:
                continue
            if pmu_count is not None and pt.placement.m != pmu_count:
                continue
            if M is not None and pt.M != M:
                continue
            return pt
        raise KeyError(f"no point for ({algorithm}, pmu_count={pmu_count}, M={M})")

    def csv_rows(self):
        for pt in self.points:
            for quantity in QUANTITIES:
                if quantity not in pt.curves:
                    continue
                cur = pt.curves[quantity]
                for t in range(len(cur.empirical)):
                    yield (
                        self.scenario_id,
                        pt.algorithm,
                        pt.placement.m,
                        pt.M,
                        t,
                        quantity,
                        repr(float(cur.empirical[t])),
                        repr(float(cur.theoretical[t])),
                        self.n_runs,
                        self.seed,
                    )

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            w.writerows(self.csv_rows())

    def summary_dict(self) -> dict:
        """End-of-interval values plus improvement over the zero-PMU prior."""
        points = []
        for pt in self.points:
            entry = {
                "algorithm": pt.algorithm,
                "pmu_count": pt.placement.m,
                "pmu_buses": list(pt.placement.pmu_buses),
                "M": pt.M,
                "final": {},
            }
            for quantity, cur in pt.curves.items():
                final = {
                    "armse_empirical": float(cur.empirical[-1]),
                    "armse_theoretical": float(cur.theoretical[-1]),
                }
                prior = self.prior_armse.get(quantity)
                if prior:
                    # improvement is relative to the zero-PMU prior ARMSE
                    final["improvement_vs_prior"] = 1.0 - final["armse_empirical"] / prior
                entry["final"][quantity] = final
            points.append(entry)
        return {
            "scenario_id": self.scenario_id,
            "seed": self.seed,
            "n_runs": self.n_runs,
            "resampled_runs": self.resample_count,
            "prior_armse": self.prior_armse,
            "improvement_baseline": "zero-PMU prior ARMSE",
            "points": points,
        }

    def write_summary(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass
class _PointSpec:
    placement: Placement
    M: int
    cfg: MeasurementConfig
    ssm_sase: StateSpaceModel | None
    sched_sase: GainSchedule | None
    ssm_plain: StateSpaceModel
    sched_plain: GainSchedule
    theoretical: dict[str, dict[str, np.ndarray]]  # algo -> quantity -> (M,)


@dataclass
class _Bundle:
    scenario: ExperimentScenario
    model: LinearModel
    points: list[_PointSpec]
    load_ids: tuple[int, ...]


def _voltage_armse_curves(model: LinearModel, covs) -> tuple[np.ndarray, np.ndarray]:
    L = model.n_loads
    v_curve = np.empty(len(covs))
    th_curve = np.empty(len(covs))
    for i, Sigma in enumerate(covs):
        Sigma_u = model.S_u @ Sigma[: 2 * L, : 2 * L] @ model.S_u.T
        v_curve[i] = theoretical_armse(Sigma_u[:L, :L], L)
        th_curve[i] = theoretical_armse(Sigma_u[L:, L:], L)
    return v_curve, th_curve


def _prepare(scenario: ExperimentScenario) -> _Bundle:
    net = scenario.network
    pt = solve_power_flow(net)
    model = tangent_matrix(net, pt)
    L = model.n_loads
    points = []
    for placement in scenario.placements:
        for M in scenario.M_values:
            cfg = replace(scenario.cfg, M=M)
            theoretical: dict[str, dict[str, np.ndarray]] = {}
            ssm_sase = sched_sase = None
            if "sase" in scenario.algorithms:
                ssm_sase = build_state_space(model, placement, cfg, include_desync=True)
                sched_sase = offline_schedule(ssm_sase)
                covs = sched_sase.covariances[1:]
                v_c, th_c = _voltage_armse_curves(model, covs)
                m = ssm_sase.m
                a_c = np.array(
                    [theoretical_armse(S[2 * L : 2 * L + m, 2 * L : 2 * L + m], max(m, 1)) for S in covs]
                )
                b_c = np.array(
                    [theoretical_armse(S[2 * L + m :, 2 * L + m :], max(m, 1)) for S in covs]
                )
                theoretical["sase"] = {"v": v_c, "theta": th_c, "alpha": a_c, "beta": b_c}
            ssm_plain = build_state_space(model, placement, cfg, include_desync=False)
            sched_plain = offline_schedule(ssm_plain)
            if "gt" in scenario.algorithms:
                v_c, th_c = _voltage_armse_curves(model, sched_plain.covariances[1:])
                theoretical["gt"] = {"v": v_c, "theta": th_c}
            if "blse" in scenario.algorithms:
                true_covs = mismatched_riccati(ssm_plain, sched_plain, cfg)[1:]
                v_c, th_c = _voltage_armse_curves(model, true_covs)
                theoretical["blse"] = {"v": v_c, "theta": th_c}
            points.append(
                _PointSpec(
                    placement=placement,
                    M=M,
                    cfg=cfg,
                    ssm_sase=ssm_sase,
                    sched_sase=sched_sase,
                    ssm_plain=ssm_plain,
                    sched_plain=sched_plain,
                    theoretical=theoretical,
                )
            )
    load_ids = tuple(i + 1 for i in model.load_indices)
    return _Bundle(scenario=scenario, model=model, points=points, load_ids=load_ids)


def _run_one(bundle: _Bundle, run: int):
    """Simulate one truth and score every sweep point and algorithm on it."""
    sc = bundle.scenario
    net = sc.network
    model = bundle.model
    L = model.n_loads
    state = model.point.state
    loads = np.asarray(model.load_indices)
    p_nom = state.p[loads]
    q_nom = state.q[loads]

    resamples = 0
    for attempt in range(50):
        rng = derive_rng(sc.seed, RNG_DEMAND, run, attempt)
        p_true, q_true = draw_demand_truth(p_nom, q_nom, sc.cfg, rng)
        try:
            truth = solve_power_flow(net, injections=(p_true, q_true), initial=state)
            break
        except PowerFlowError:
            resamples += 1
    else:
        raise ExperimentError(f"run {run}: power flow failed for 50 consecutive truth draws")

    v_true = truth.state.v[loads]
    th_true = truth.state.theta[loads]

    clocks = {
        bus: draw_clock(sc.cfg, 1, derive_rng(sc.seed, RNG_CLOCK, run, bus))[0]
        for bus in bundle.load_ids
    }
    # one stream per (bus, M): sweep points share their draws
    streams: dict[tuple[int, int], list[PmuFrame]] = {}
    for M in sorted({pt.M for pt in bundle.points}):
        cfg_M = replace(sc.cfg, M=M)
        for bus in bundle.load_ids:
            streams[(bus, M)] = simulate_pmu_stream(
                truth.state,
                Placement((bus,)),
                [clocks[bus]],
                cfg_M,
                k=0,
                rng=derive_rng(sc.seed, RNG_PMU, run, bus, M),
                v_ref=state.v,
            )

    out = {}
    for pi, spec in enumerate(bundle.points):
        pmus = spec.ssm_plain.pmu_buses
        frames = [
            PmuFrame(
                k=0,
                t=t,
                v_meas=np.array([streams[(b, spec.M)][t].v_meas[0] for b in pmus]),
                theta_meas=np.array([streams[(b, spec.M)][t].theta_meas[0] for b in pmus]),
            )
            for t in range(spec.M)
        ]
        true_clocks = [clocks[b] for b in pmus]
        alpha_true = np.array([c.alpha for c in true_clocks])
        beta_true = np.array([c.beta for c in true_clocks])
        for algo in sc.algorithms:
            if algo == "sase":
                X = sase_run(frames, spec.sched_sase, spec.ssm_sase)
            elif algo == "gt":
                X = gt_run(frames, true_clocks, spec.sched_plain, spec.ssm_plain, spec.cfg)
            else:
                X = blse_run(frames, spec.sched_plain, spec.ssm_plain)
            dev = X[1:, : 2 * L] @ model.S_u.T
            err_v = state.v[loads] + dev[:, :L] - v_true
            err_th = state.theta[loads] + dev[:, L:] - th_true
            mse = {
                "v": np.mean(err_v**2, axis=1),
                "theta": np.mean(err_th**2, axis=1),
            }
            if algo == "sase":
                m = spec.ssm_sase.m
                err_a = X[1:, 2 * L : 2 * L + m] - alpha_true
                err_b = X[1:, 2 * L + m :] - beta_true
                mse["alpha"] = np.mean(err_a**2, axis=1)
                mse["beta"] = np.mean(err_b**2, axis=1)
            out[(pi, algo)] = mse
    return out, resamples


def _run_chunk(bundle: _Bundle, runs: list[int]):
    return [_run_one(bundle, i) for i in runs]


def _worker_count(workers: int | None, n_runs: int) -> int:
    if workers is None:
        workers = int(os.environ.get("SASE_THREADS", "1"))
    return max(1, min(workers, n_runs))


def run_experiment(scenario: ExperimentScenario, workers: int | None = None) -> ExperimentResult:
    """Monte-Carlo evaluation of the configured algorithms over the sweep.

    Deterministic for a fixed seed: every run draws from streams keyed by
    (purpose, run index, bus), and aggregation is indexed by run, so the
    result is independent of scheduling and of ``workers`` (capped by the
    SASE_THREADS environment variable when not given).
    """
    bundle = _prepare(scenario)
    N = scenario.n_runs
    workers = _worker_count(workers, N)

    per_run: list[dict] = [None] * N  # type: ignore[list-item]
    resample_count = 0
    if workers <= 1:
        for i in range(N):
            per_run[i], r = _run_one(bundle, i)
            resample_count += r
    else:
        chunks = [list(c) for c in np.array_split(np.arange(N), workers) if len(c)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for chunk, results in zip(chunks, ex.map(_run_chunk, [bundle] * len(chunks), chunks)):
                for i, (mse, r) in zip(chunk, results):
                    per_run[i] = mse
                    resample_count += r

    if resample_count > 0.01 * N:
        raise ExperimentError(
            f"{resample_count} resampled runs out of {N} exceed the 1% budget"
        )

    points = []
    for pi, spec in enumerate(bundle.points):
        for algo in scenario.algorithms:
            curves = {}
            for quantity, theo in bundle.points[pi].theoretical[algo].items():
                run_mse = np.stack([per_run[i][(pi, algo)][quantity] for i in range(N)])
                curves[quantity] = QuantityCurves(
                    empirical=np.sqrt(run_mse.mean(axis=0)),
                    theoretical=theo,
                    run_mse=run_mse,
                )
            points.append(
                PointResult(placement=spec.placement, M=spec.M, algorithm=algo, curves=curves)
            )

    L = bundle.model.n_loads
    Sigma_u0 = bundle.model.S_u @ bundle.points[0].ssm_plain.Sigma0 @ bundle.model.S_u.T
    prior = {
        "v": theoretical_armse(Sigma_u0[:L, :L], L),
        "theta": theoretical_armse(Sigma_u0[L:, L:], L),
        "alpha": scenario.cfg.sigma_alpha,
        "beta": scenario.cfg.sigma_beta,
    }
    return ExperimentResult(
        scenario_id=scenario.scenario_id,
        seed=scenario.seed,
        n_runs=N,
        points=points,
        resample_count=resample_count,
        prior_armse=prior,
    )
