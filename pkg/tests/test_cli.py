import json
import time

import numpy as np
import pytest

from sase.cli import main
from sase.network import bundled_feeder6, serialize_network


@pytest.fixture()
def net_path(tmp_path):
    path = tmp_path / "feeder6.json"
    path.write_text(serialize_network(bundled_feeder6()))
    return str(path)


@pytest.fixture()
def scenario_path(tmp_path):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps({"M": 10}))
    return str(path)


def run_cli(*argv):
    return main(list(argv))


class TestPowerflow:
    def test_flat_profile_output(self, tmp_path, capsys):
        doc = {
            "base_mva": 1.0,
            "buses": [
                {"id": 1, "role": "slack", "v_set": 1.0, "theta_set": 0.0},
                {"id": 2, "role": "load", "p_nom": 0.0, "q_nom": 0.0},
            ],
            "branches": [{"from": 1, "to": 2, "r": 0.0, "x": 1.0}],
        }
        path = tmp_path / "two.json"
        path.write_text(json.dumps(doc))
        assert run_cli("powerflow", "--network", str(path)) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["v"] == [1.0, 1.0]
        assert out["theta"] == [0.0, 0.0]

    def test_injection_file_and_angle_value(self, tmp_path, capsys):
        doc = {
            "base_mva": 1.0,
            "buses": [
                {"id": 1, "role": "slack", "v_set": 1.0, "theta_set": 0.0},
                {"id": 2, "role": "load", "p_nom": 0.0, "q_nom": 0.0},
            ],
            "branches": [{"from": 1, "to": 2, "r": 0.0, "x": 1.0}],
        }
        net = tmp_path / "two.json"
        net.write_text(json.dumps(doc))
        inj = tmp_path / "inj.json"
        inj.write_text(json.dumps({"p": [-0.1], "q": [0.0]}))
        assert run_cli("powerflow", "--network", str(net), "--injections", str(inj)) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["theta"][1] == pytest.approx(-0.1003, abs=1e-3)
        assert out["residual_norm"] <= 1e-8

    def test_missing_file_exits_2(self, capsys):
        assert run_cli("powerflow", "--network", "/nonexistent/net.json") == 2
        assert "/nonexistent/net.json" in capsys.readouterr().err

    def test_infeasible_exits_1(self, tmp_path, capsys):
        doc = {
            "base_mva": 1.0,
            "buses": [
                {"id": 1, "role": "slack", "v_set": 1.0, "theta_set": 0.0},
                {"id": 2, "role": "load", "p_nom": -10.0, "q_nom": 0.0},
            ],
            "branches": [{"from": 1, "to": 2, "r": 0.0, "x": 1.0}],
        }
        path = tmp_path / "two.json"
        path.write_text(json.dumps(doc))
        assert run_cli("powerflow", "--network", str(path)) == 1


class TestLinearize:
    def test_dumps_matrices(self, net_path, tmp_path, capsys):
        out = tmp_path / "lin"
        assert run_cli("linearize", "--network", net_path, "--out", str(out)) == 0
        A = np.loadtxt(out / "A_u.csv", delimiter=",")
        S = np.loadtxt(out / "S_u.csv", delimiter=",")
        assert A.shape == (12, 12)
        assert S.shape == (10, 10)
        meta = json.loads((out / "linearize_meta.json").read_text())
        assert meta["slack_id"] == 1


class TestSimulateEstimate:
    def test_simulate_writes_stream_and_truth(self, net_path, scenario_path, tmp_path):
        out = tmp_path / "sim"
        assert run_cli("simulate", "--network", net_path, "--scenario", scenario_path,
                       "--pmus", "3,5", "--seed", "4", "--out", str(out)) == 0
        lines = (out / "stream.csv").read_text().splitlines()
        assert lines[0] == "k,t,bus,v_meas,theta_meas"
        assert len(lines) == 1 + 10 * 2
        truth = json.loads((out / "truth.json").read_text())
        assert truth["pmu_buses"] == [3, 5]
        assert len(truth["intervals"][0]["clocks"]) == 2

    def test_estimate_deterministic(self, net_path, scenario_path, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run_cli("estimate", "--network", net_path, "--scenario", scenario_path,
                           "--pmus", "3,5", "--seed", "9", "--algo", "sase",
                           "--out", str(out)) == 0
            outs.append((out / "estimates.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_estimate_three_algorithms(self, net_path, scenario_path, tmp_path):
        out = tmp_path / "est"
        assert run_cli("estimate", "--network", net_path, "--scenario", scenario_path,
                       "--pmus", "3,5", "--seed", "9", "--algo", "sase,blse,gt",
                       "--out", str(out)) == 0
        text = (out / "estimates.csv").read_text().splitlines()
        algos = {line.split(",")[0] for line in text[1:]}
        assert algos == {"sase", "blse", "gt"}
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary["trace_sigma_u"]) == {"sase", "blse", "gt"}
        assert "trace_sigma_u_blse_true" in summary

    def test_external_stream_round_trip(self, net_path, scenario_path, tmp_path):
        sim = tmp_path / "sim"
        run_cli("simulate", "--network", net_path, "--scenario", scenario_path,
                "--pmus", "3,5", "--seed", "4", "--out", str(sim))
        out = tmp_path / "est"
        assert run_cli("estimate", "--network", net_path, "--scenario", scenario_path,
                       "--stream", str(sim / "stream.csv"), "--truth", str(sim / "truth.json"),
                       "--algo", "sase,gt", "--out", str(out)) == 0

    def test_external_stream_gap_rejected(self, net_path, scenario_path, tmp_path):
        sim = tmp_path / "sim"
        run_cli("simulate", "--network", net_path, "--scenario", scenario_path,
                "--pmus", "3", "--seed", "4", "--out", str(sim))
        lines = (sim / "stream.csv").read_text().splitlines()
        del lines[3]  # drop the frame at t=2
        gappy = tmp_path / "gappy.csv"
        gappy.write_text("\n".join(lines) + "\n")
        code = run_cli("estimate", "--network", net_path, "--scenario", scenario_path,
                       "--stream", str(gappy), "--algo", "sase", "--out", str(tmp_path / "x"))
        assert code == 2

    def test_gt_without_truth_rejected(self, net_path, scenario_path, tmp_path, capsys):
        sim = tmp_path / "sim"
        run_cli("simulate", "--network", net_path, "--scenario", scenario_path,
                "--pmus", "3", "--seed", "4", "--out", str(sim))
        code = run_cli("estimate", "--network", net_path, "--scenario", scenario_path,
                       "--stream", str(sim / "stream.csv"), "--algo", "gt",
                       "--out", str(tmp_path / "x"))
        assert code == 2
        assert "oracle clocks" in capsys.readouterr().err

    def test_integrate_mode_runs(self, net_path, scenario_path, tmp_path):
        out = tmp_path / "est"
        assert run_cli("estimate", "--network", net_path, "--scenario", scenario_path,
                       "--pmus", "4", "--seed", "2", "--intervals", "3",
                       "--mode", "integrate", "--out", str(out)) == 0
        lines = (out / "estimates.csv").read_text().splitlines()
        ks = {line.split(",")[1] for line in lines[1:]}
        assert ks == {"0", "1", "2"}


class TestExperiment:
    def test_m_sweep_emits_blocks(self, net_path, scenario_path, tmp_path):
        out = tmp_path / "exp"
        assert run_cli("experiment", "--network", net_path, "--scenario", scenario_path,
                       "--pmus", "3,5", "--M", "20,25,30,50,60", "--algo", "sase",
                       "--N", "2", "--seed", "1", "--out", str(out)) == 0
        lines = (out / "experiment.csv").read_text().splitlines()
        ms = {line.split(",")[3] for line in lines[1:]}
        assert ms == {"20", "25", "30", "50", "60"}

    def test_smoke_run_is_fast(self, net_path, tmp_path):
        start = time.time()
        out = tmp_path / "exp"
        assert run_cli("experiment", "--network", net_path, "--pmu-count", "2",
                       "--N", "1", "--seed", "0", "--out", str(out)) == 0
        assert time.time() - start < 5.0

    def test_seed_required(self, net_path, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            run_cli("experiment", "--network", net_path, "--out", str(tmp_path / "x"))
        assert exc.value.code == 2

    def test_repeat_runs_byte_identical(self, net_path, scenario_path, tmp_path):
        blobs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run_cli("experiment", "--network", net_path, "--scenario", scenario_path,
                           "--pmu-count", "1,3", "--N", "5", "--seed", "11",
                           "--out", str(out)) == 0
            blobs.append(((out / "experiment.csv").read_bytes(),
                          (out / "experiment_summary.json").read_bytes()))
        assert blobs[0] == blobs[1]


class TestPlacementAndTwoNode:
    def test_placement_order(self, net_path, capsys):
        assert run_cli("placement", "--network", net_path, "--k", "3") == 0
        doc = json.loads(capsys.readouterr().out)
        assert len(doc["order"]) == 3
        assert all(2 <= b <= 6 for b in doc["order"])

    def test_twonode_table(self, capsys):
        assert run_cli("twonode", "--M", "1000,10000", "--T", "1,2") == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "M,T,sigma11,sigma22,sigma33"
        assert len([l for l in out if not l.startswith("#")]) == 1 + 4
        # skew variance falls when either M or T rises
        rows = [l.split(",") for l in out[1:5]]
        s33 = {(r[0], r[1]): float(r[4]) for r in rows}
        assert s33[("10000", "1.0")] < s33[("1000", "1.0")]
