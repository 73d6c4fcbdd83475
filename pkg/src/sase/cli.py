"""Command-line front end.

One subcommand per capability: ``powerflow``, ``linearize``,
``simulate``, ``estimate``, ``experiment``, ``placement`` and
``twonode``.  Every subcommand is deterministic under a fixed ``--seed``
(mandatory for ``experiment``).  Exit codes: 0 success, 1 numerical
failure, 2 input error.  ``--network`` accepts the native JSON format or
a MATPOWER ``.m`` case file.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .analysis import (
    ExperimentError,
    ExperimentScenario,
    TwoNodeParams,
    greedy_placement,
    run_experiment,
    two_node_limits,
    two_node_posterior,
)
from .estimator import (
    RESYNC_INTEGRATE,
    RESYNC_RESET,
    FilterState,
    ScheduleError,
    build_state_space,
    gt_run,
    mismatched_riccati,
    offline_schedule,
    resync,
    run_interval,
)
from .linearize import LinearizeError, tangent_matrix
from .measure import (
    RNG_CLOCK,
    RNG_DEMAND,
    RNG_PMU,
    ClockError,
    MeasurementConfig,
    Placement,
    StreamFormatError,
    derive_rng,
    draw_clock,
    draw_demand_truth,
    evolve_clock,
    load_scenario,
    read_stream_csv,
    simulate_pmu_stream,
    write_stream_csv,
)
from .network import Network, NetworkFormatError, import_matpower_case, parse_network
from .powerflow import PowerFlowError, solve_power_flow

MODES = {"reset": RESYNC_RESET, "integrate": RESYNC_INTEGRATE}


def _load_network(path: str) -> Network:
    text = Path(path).read_text(encoding="utf-8")
    if path.endswith(".m"):
        return import_matpower_case(text)
    return parse_network(text)


def _load_cfg(path: str | None) -> MeasurementConfig:
    return MeasurementConfig() if path is None else load_scenario(path)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _placement(args, net: Network, model, cfg) -> Placement:
    if getattr(args, "pmus", None):
        return Placement(tuple(int(b) for b in args.pmus.split(",")))
    count = getattr(args, "pmu_count", None)
    if count is None:
        raise ValueError("one of --pmus or --pmu-count is required")
    return Placement(greedy_placement(model, cfg, int(count)).pmu_buses)


def _float_list(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok]


def _int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok]


# --- subcommands ------------------------------------------------------------


def cmd_powerflow(args) -> int:
    net = _load_network(args.network)
    injections = None
    if args.injections:
        data = json.loads(Path(args.injections).read_text(encoding="utf-8"))
        injections = (np.asarray(data["p"], dtype=float), np.asarray(data["q"], dtype=float))
    pt = solve_power_flow(net, injections=injections)
    doc = {
        "v": [float(x) for x in pt.state.v],
        "theta": [float(x) for x in pt.state.theta],
        "p": [float(x) for x in pt.state.p],
        "q": [float(x) for x in pt.state.q],
        "residual_norm": pt.residual_norm,
    }
    text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        path = _out_dir(args) / "operating_point.json"
        path.write_text(text, encoding="utf-8")
        print(path)
    else:
        sys.stdout.write(text)
    return 0


def cmd_linearize(args) -> int:
    net = _load_network(args.network)
    pt = solve_power_flow(net)
    model = tangent_matrix(net, pt)
    out = _out_dir(args)
    np.savetxt(out / "A_u.csv", model.A_u, delimiter=",", fmt="%.17g")
    np.savetxt(out / "S_u.csv", model.S_u, delimiter=",", fmt="%.17g")
    meta = {
        "slack_id": model.slack_id,
        "load_bus_ids": [i + 1 for i in model.load_indices],
        "row_order": "p-block then q-block (A_u) / v-block then theta-block (S_u)",
        "residual_norm": pt.residual_norm,
    }
    (out / "linearize_meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    print(out / "A_u.csv")
    print(out / "S_u.csv")
    return 0


def _simulate_intervals(net, model, cfg, placement, seed, intervals, mode):
    """Truth states, clocks and frames, one entry per sync interval."""
    state = model.point.state
    loads = np.asarray(model.load_indices)
    truths, clock_sets, frame_sets = [], [], []
    truth = model.point
    clocks: list[ClockError] = []
    for k in range(intervals):
        if k == 0 or mode == RESYNC_RESET:
            for attempt in range(50):
                rng = derive_rng(seed, RNG_DEMAND, k, attempt)
                p_t, q_t = draw_demand_truth(state.p[loads], state.q[loads], cfg, rng)
                try:
                    truth = solve_power_flow(net, injections=(p_t, q_t), initial=state)
                    break
                except PowerFlowError:
                    continue
            else:
                raise PowerFlowError(f"interval {k}: no feasible truth after 50 draws")
        if k == 0:
            clocks = [
                draw_clock(cfg, 1, derive_rng(seed, RNG_CLOCK, k, b))[0]
                for b in placement.pmu_buses
            ]
        else:
            clocks = [
                evolve_clock(c, cfg, mode, derive_rng(seed, RNG_CLOCK, k, b))
                for c, b in zip(clocks, placement.pmu_buses)
            ]
        frames = simulate_pmu_stream(
            truth.state, placement, clocks, cfg, k,
            derive_rng(seed, RNG_PMU, k), v_ref=state.v,
        )
        truths.append(truth)
        clock_sets.append(list(clocks))
        frame_sets.append(frames)
    return truths, clock_sets, frame_sets


def cmd_simulate(args) -> int:
    net = _load_network(args.network)
    cfg = _load_cfg(args.scenario)
    pt = solve_power_flow(net)
    model = tangent_matrix(net, pt)
    placement = _placement(args, net, model, cfg)
    mode = MODES[args.mode]
    truths, clock_sets, frame_sets = _simulate_intervals(
        net, model, cfg, placement, args.seed, args.intervals, mode
    )
    out = _out_dir(args)
    frames = [fr for frames in frame_sets for fr in frames]
    write_stream_csv(frames, placement, out / "stream.csv")
    truth_doc = {
        "pmu_buses": list(placement.pmu_buses),
        "intervals": [
            {
                "k": k,
                "v_true": [float(x) for x in truths[k].state.v],
                "theta_true": [float(x) for x in truths[k].state.theta],
                "p_true": [float(x) for x in truths[k].state.p],
                "q_true": [float(x) for x in truths[k].state.q],
                "clocks": [
                    {"bus": b, "alpha": c.alpha, "beta": c.beta}
                    for b, c in zip(placement.pmu_buses, clock_sets[k])
                ],
            }
            for k in range(len(truths))
        ],
    }
    (out / "truth.json").write_text(json.dumps(truth_doc, indent=2) + "\n", encoding="utf-8")
    print(out / "stream.csv")
    print(out / "truth.json")
    return 0


def _split_intervals(frames, M):
    """Group a flat frame list into intervals, validating sample order."""
    if len(frames) % M:
        raise StreamFormatError(f"stream length {len(frames)} is not a multiple of M={M}")
    out = []
    for k in range(len(frames) // M):
        chunk = frames[k * M : (k + 1) * M]
        for t, fr in enumerate(chunk):
            if fr.t != t:
                raise StreamFormatError(f"out-of-order frame: got t={fr.t}, expected t={t}")
        out.append(chunk)
    return out


def cmd_estimate(args) -> int:
    net = _load_network(args.network)
    cfg = _load_cfg(args.scenario)
    pt = solve_power_flow(net)
    model = tangent_matrix(net, pt)
    mode = MODES[args.mode]
    algos = [a.strip() for a in args.algo.split(",") if a.strip()]

    clock_sets = None
    if args.stream:
        frames, placement = read_stream_csv(args.stream)
        frame_sets = _split_intervals(frames, cfg.M)
        if args.truth:
            doc = json.loads(Path(args.truth).read_text(encoding="utf-8"))
            clock_sets = [
                [ClockError(alpha=c["alpha"], beta=c["beta"]) for c in entry["clocks"]]
                for entry in doc["intervals"]
            ]
    else:
        placement = _placement(args, net, model, cfg)
        _, clock_sets, frame_sets = _simulate_intervals(
            net, model, cfg, placement, args.seed, args.intervals, mode
        )
    if "gt" in algos and clock_sets is None:
        raise ValueError("gt needs oracle clocks: provide --truth with the external stream")

    out = _out_dir(args)
    L = model.n_loads
    state = model.point.state
    pmus = tuple(sorted(placement.pmu_buses))
    rows = []
    traces: dict[str, list[float]] = {}
    for algo in algos:
        include = algo == "sase"
        ssm = build_state_space(model, placement, cfg, mode=mode, include_desync=include)
        Sigma = np.array(ssm.Sigma0)
        fs = FilterState(x_hat=np.zeros(ssm.nx))
        trace_u = []
        for k, frames in enumerate(frame_sets):
            schedule = offline_schedule(ssm, Sigma_start=Sigma)
            if algo == "gt":
                X = gt_run(frames, clock_sets[k], schedule, ssm, cfg)
            elif algo == "blse":
                X = run_interval(frames, schedule, ssm)
            else:
                X = run_interval(frames, schedule, ssm, x0=fs.x_hat)
            dev = X[1:, : 2 * L] @ model.S_u.T
            for t in range(cfg.M):
                v_hat = state.v.copy()
                th_hat = state.theta.copy()
                v_hat[np.asarray(model.load_indices)] += dev[t, :L]
                th_hat[np.asarray(model.load_indices)] += dev[t, L:]
                for bus in range(1, net.n + 1):
                    alpha_hat = beta_hat = ""
                    if include and bus in pmus:
                        j = pmus.index(bus)
                        alpha_hat = repr(float(X[t + 1, 2 * L + j]))
                        beta_hat = repr(float(X[t + 1, 2 * L + ssm.m + j]))
                    rows.append(
                        [algo, k, t, bus, repr(float(v_hat[bus - 1])),
                         repr(float(th_hat[bus - 1])), alpha_hat, beta_hat]
                    )
            for S in schedule.covariances[1:]:
                Su = model.S_u @ S[: 2 * L, : 2 * L] @ model.S_u.T
                trace_u.append(float(np.trace(Su)))
            fs = FilterState(x_hat=X[-1], t=cfg.M, k=k)
            fs, Sigma = resync(fs, schedule.covariances[-1], ssm)
        traces[algo] = trace_u

    with open(out / "estimates.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", "k", "t", "bus", "v_hat", "theta_hat", "alpha_hat", "beta_hat"])
        w.writerows(rows)
    summary = {"pmu_buses": list(pmus), "M": cfg.M, "trace_sigma_u": traces}
    if "blse" in algos:
        ssm_plain = build_state_space(model, placement, cfg, include_desync=False)
        sched_plain = offline_schedule(ssm_plain)
        true_covs = mismatched_riccati(ssm_plain, sched_plain, cfg)[1:]
        summary["trace_sigma_u_blse_true"] = [
            float(np.trace(model.S_u @ S @ model.S_u.T)) for S in true_covs
        ]
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(out / "estimates.csv")
    print(out / "summary.json")
    return 0


def cmd_experiment(args) -> int:
    net = _load_network(args.network)
    cfg = _load_cfg(args.scenario)
    pt = solve_power_flow(net)
    model = tangent_matrix(net, pt)
    if args.pmus:
        placements = (Placement(tuple(int(b) for b in args.pmus.split(","))),)
    else:
        counts = _int_list(args.pmu_count or str(model.n_loads))
        order = greedy_placement(model, cfg, max(counts))
        placements = tuple(Placement(order.pmu_buses[:k]) for k in counts)
    M_values = tuple(_int_list(args.M)) if args.M else (cfg.M,)
    scenario = ExperimentScenario(
        network=net,
        cfg=cfg,
        placements=placements,
        M_values=M_values,
        algorithms=tuple(a.strip() for a in args.algo.split(",") if a.strip()),
        n_runs=args.N,
        seed=args.seed,
        scenario_id=args.id,
    )
    result = run_experiment(scenario)
    out = _out_dir(args)
    result.write_csv(out / "experiment.csv")
    result.write_summary(out / "experiment_summary.json")
    print(out / "experiment.csv")
    print(out / "experiment_summary.json")
    return 0


def cmd_placement(args) -> int:
    net = _load_network(args.network)
    cfg = _load_cfg(args.scenario)
    pt = solve_power_flow(net)
    model = tangent_matrix(net, pt)
    order = greedy_placement(model, cfg, args.k)
    doc = {"order": list(order.pmu_buses), "k": args.k}
    text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        path = _out_dir(args) / "placement.json"
        path.write_text(text, encoding="utf-8")
        print(path)
    else:
        sys.stdout.write(text)
    return 0


def cmd_twonode(args) -> int:
    base = TwoNodeParams(
        sigma_theta=args.sigma_theta,
        sigma_beta=args.sigma_beta,
        sigma_alpha=args.sigma_alpha,
        sigma_r=args.sigma_r,
    )
    M_values = _int_list(args.M) if args.M else [base.M]
    T_values = _float_list(args.T) if args.T else [base.T]
    rows = []
    for T in T_values:
        for M in M_values:
            Sigma = two_node_posterior(replace(base, M=M, T=T))
            rows.append(
                [M, repr(float(T)), repr(float(Sigma[0, 0])), repr(float(Sigma[1, 1])),
                 repr(float(Sigma[2, 2]))]
            )
    limits = two_node_limits(base)
    lines = ["M,T,sigma11,sigma22,sigma33"]
    lines += [",".join(str(x) for x in row) for row in rows]
    lines.append(f"# limit sigma11 = {limits.limit[0, 0]!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        path = _out_dir(args) / "twonode.csv"
        path.write_text(text, encoding="utf-8")
        print(path)
    else:
        sys.stdout.write(text)
    return 0


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sase", description="synchronization-aware PMU state estimation toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        return p

    p = add("powerflow", cmd_powerflow, "solve the AC power flow at given injections")
    p.add_argument("--network", required=True)
    p.add_argument("--injections", help="JSON file with p, q vectors at the load buses")
    p.add_argument("--out", help="output directory (default: print to stdout)")

    p = add("linearize", cmd_linearize, "dump the tangent model matrices as CSV")
    p.add_argument("--network", required=True)
    p.add_argument("--out", required=True)

    p = add("simulate", cmd_simulate, "simulate a de-synchronized PMU stream")
    p.add_argument("--network", required=True)
    p.add_argument("--scenario")
    p.add_argument("--pmus", help="comma-separated PMU bus ids")
    p.add_argument("--pmu-count", help="greedy placement of this size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--intervals", type=int, default=1)
    p.add_argument("--mode", choices=sorted(MODES), default="reset")
    p.add_argument("--out", required=True)

    p = add("estimate", cmd_estimate, "run estimators on a simulated or external stream")
    p.add_argument("--network", required=True)
    p.add_argument("--scenario")
    p.add_argument("--stream", help="external measurement CSV (k,t,bus,v_meas,theta_meas)")
    p.add_argument("--truth", help="truth JSON from `simulate` (oracle clocks for gt)")
    p.add_argument("--pmus")
    p.add_argument("--pmu-count")
    p.add_argument("--algo", default="sase")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--intervals", type=int, default=1)
    p.add_argument("--mode", choices=sorted(MODES), default="reset")
    p.add_argument("--out", required=True)

    p = add("experiment", cmd_experiment, "Monte-Carlo ARMSE evaluation over a sweep")
    p.add_argument("--network", required=True)
    p.add_argument("--scenario")
    p.add_argument("--pmus", help="fixed placement (disables the pmu-count sweep)")
    p.add_argument("--pmu-count", help="comma-separated placement sizes (greedy prefixes)")
    p.add_argument("--M", help="comma-separated sample counts")
    p.add_argument("--algo", default="sase,blse,gt")
    p.add_argument("--N", type=int, default=500)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--id", default="scenario")
    p.add_argument("--out", required=True)

    p = add("placement", cmd_placement, "greedy PMU placement order")
    p.add_argument("--network", required=True)
    p.add_argument("--scenario")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out")

    p = add("twonode", cmd_twonode, "two-node posterior table over M and T")
    p.add_argument("--M", help="comma-separated sample counts")
    p.add_argument("--T", help="comma-separated sync periods")
    p.add_argument("--sigma-theta", type=float, default=0.5)
    p.add_argument("--sigma-beta", type=float, default=2e-4)
    p.add_argument("--sigma-alpha", type=float, default=1e-2)
    p.add_argument("--sigma-r", type=float, default=1e-3)
    p.add_argument("--out")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NetworkFormatError, StreamFormatError, FileNotFoundError,
            json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PowerFlowError, LinearizeError, ScheduleError, ExperimentError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
