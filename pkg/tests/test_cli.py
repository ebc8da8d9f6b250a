import csv
import io
import json
import re

import pytest

from edgeoffload.cli import main, parse_capacity
from edgeoffload.domain import ResourceVector
from livecluster import live_cluster, run_cli


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_cost_prints_every_bundled_row(capsys):
    code, out, _ = run(capsys, "cost")
    assert code == 0
    for amount in ("2277", "4464", "1071", "4018", "74"):
        assert re.search(rf"\b{amount}\b", out), amount


def test_cost_month_hours_override(capsys):
    code, out, _ = run(capsys, "cost", "--month-hours", "720")
    assert code == 0 and "2203.20" in out


def test_cost_rejects_unknown_pricing_fields(tmp_path, capsys):
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"rows": [], "currency": "EUR"}))
    code, _, err = run(capsys, "cost", "--pricing", str(path))
    assert code == 2 and "currency" in err


def test_simulate_ab_demo_under_both_policies(capsys, tmp_path):
    code, out, _ = run(capsys, "simulate", "--scenario", "ab_demo", "--policy", "st-las",
                       "--csv", str(tmp_path / "r.csv"))
    assert code == 0 and "average JCT: 67.500000" in out
    rows = list(csv.DictReader(io.StringIO((tmp_path / "r.csv").read_text())))
    jct = {r["name"]: float(r["value"]) for r in rows if r["section"] == "job" and r["metric"] == "jct_s"}
    assert jct == {"A": 25.0, "B": 110.0}
    code, out, _ = run(capsys, "simulate", "--scenario", "ab_demo", "--policy", "fifo")
    assert code == 0 and "average JCT: 102.500000" in out


def test_simulate_malformed_scenario_exits_2_with_location(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "jobs": [\n    oops\n  ]\n}')
    code, _, err = run(capsys, "simulate", "--scenario", str(path))
    assert code == 2
    assert f"{path}:3:5" in err


def test_simulate_unknown_policy_and_missing_scenario_exit_2(capsys):
    assert run(capsys, "simulate", "--scenario", "ab_demo", "--policy", "lottery")[0] == 2
    assert run(capsys, "simulate", "--scenario", "no_such_thing")[0] == 2


def test_argparse_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as ei:
        main(["offload", "--model", "x"])
    assert ei.value.code == 2
    with pytest.raises(SystemExit) as ei:
        main([])
    assert ei.value.code == 2


def test_offload_repeat_zero_is_a_validation_error(tmp_path, capsys):
    payload = tmp_path / "f.bin"
    payload.write_bytes(b"x")
    code, _, err = run(capsys, "offload", "--server", "127.0.0.1:1", "--model", "m",
                       "--payload", str(payload), "--repeat", "0")
    assert code == 2 and "--repeat" in err


def test_offload_unreachable_server_is_a_runtime_error(tmp_path, capsys):
    payload = tmp_path / "f.bin"
    payload.write_bytes(b"x")
    code, _, err = run(capsys, "offload", "--server", "127.0.0.1:1", "--model", "m",
                       "--payload", str(payload), "--repeat", "1", "--timeout", "1")
    assert code == 1 and "error" in err


def test_parse_capacity():
    assert parse_capacity("gpus=1,cpu=4,mem=8192") == ResourceVector(gpus=1, cpu_cores=4, memory_mb=8192)
    assert parse_capacity('{"gpus": 2}') == ResourceVector(gpus=2)


def test_worker_with_bad_capacity_exits_2(capsys):
    code, _, err = run(capsys, "worker", "--server", "127.0.0.1:1", "--capacity", "gpus",
                       "--profiles", "onprem_gpu")
    assert code == 2 and "capacity" in err


def test_module_entry_point_runs_cost():
    proc = run_cli("cost")
    assert proc.returncode == 0 and "4464" in proc.stdout


@pytest.mark.live
def test_offload_and_submit_against_live_processes(tmp_path):
    payload = tmp_path / "frame.bin"
    payload.write_bytes(bytes(192 * 1024))
    job = tmp_path / "job.json"
    job.write_text(json.dumps({"job_id": "train-1", "required": {"gpus": 1, "cpu_cores": 1, "memory_mb": 512},
                               "model": {"model_name": "resnet"}}))
    with live_cluster(tmp_path, n_workers=1) as (address, _):
        proc = run_cli("offload", "--server", address, "--model", "ssd_mobilenet_v1",
                       "--payload", str(payload), "--repeat", "3")
        assert proc.returncode == 0, proc.stderr
        assert re.search(r"count=3 mean_ms=\S+ variance_ms2=\S+ p95_ms=\S+", proc.stdout)
        missing = run_cli("offload", "--server", address, "--model", "no_such_model",
                          "--payload", str(payload), "--repeat", "1")
        assert missing.returncode == 1
        submitted = run_cli("submit", "--server", address, "--job-file", str(job))
        assert submitted.returncode == 0, submitted.stderr
        assert json.loads(submitted.stdout)["jobs"][0]["job_id"] == "train-1"
