import json
import subprocess
import sys

import numpy as np
import pytest

import gradflow.examples as examples
from gradflow import cli, load_program, serialize_program
from genprog import pingpong_nonaffine


@pytest.fixture
def foo_path(tmp_path):
    path = tmp_path / "foo.json"
    path.write_text(serialize_program(examples.build("scaled_product_chain")))
    return path


@pytest.fixture
def chain_path(tmp_path):
    path = tmp_path / "chain.json"
    path.write_text(serialize_program(examples.build("exp_sin_chain")))
    return path


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


# ---------------------------------------------------------------------------
# diff


def test_diff_writes_both_artifacts(foo_path, tmp_path, capsys):
    assert run_cli("diff", foo_path) == 0
    bwd = tmp_path / "foo.bwd.json"
    req = tmp_path / "foo.fwdreq.json"
    assert bwd.exists() and req.exists()
    load_program(str(bwd))  # parses and validates
    manifest = json.loads(req.read_text())
    assert [tuple(x) for x in manifest["required"]] == \
        [("A0", 1), ("A1", 1), ("A2", 1)]


def test_diff_wrt_overrides_independents(foo_path, tmp_path):
    assert run_cli("diff", foo_path, "--wrt", "C") == 0
    bwd = load_program(str(tmp_path / "foo.bwd.json"))
    assert "C__grad" in bwd.descriptors


def test_diff_unknown_wrt_is_validation_error(foo_path, capsys):
    assert run_cli("diff", foo_path, "--wrt", "nope") == 2


# ---------------------------------------------------------------------------
# plan


def test_plan_prints_decision_line(foo_path, capsys):
    assert run_cli("plan", foo_path, "--memory-limit-mib", "500",
                   "--params", "N=3620") == 0
    out = capsys.readouterr().out
    assert "A0: recompute, A1: store, A2: store" in out
    assert "objective" in out


def test_plan_json_report(foo_path, capsys):
    assert run_cli("plan", foo_path, "--memory-limit-mib", "500",
                   "--params", "N=3620", "--json") == 0
    report = json.loads(capsys.readouterr().out)
    assert report["objective_flops"] == 13_104_400
    assert report["peak_bytes"] == 10 * 3620 ** 2 * 4
    assert [v["decision"] for v in report["values"]] == ["recompute", "store", "store"]


def test_plan_emits_rewritten_programs(foo_path, tmp_path, capsys):
    assert run_cli("plan", foo_path, "--memory-limit-mib", "500",
                   "--params", "N=3620", "--emit", tmp_path / "out") == 0
    fwd = load_program(str(tmp_path / "out.fwd.json"))
    load_program(str(tmp_path / "out.bwd.json"))
    assert "A1__v1" in fwd.descriptors  # the stored copy travels with the program


def test_plan_zero_limit_is_infeasible(foo_path, capsys):
    assert run_cli("plan", foo_path, "--memory-limit-mib", "0",
                   "--params", "N=16") == 4
    err = capsys.readouterr().err
    assert "minimum achievable peak: 8192 bytes" in err


def test_plan_nothing_to_plan(tmp_path, capsys):
    path = tmp_path / "tri.json"
    path.write_text(serialize_program(examples.build("triangular")))
    assert run_cli("plan", path, "--params", "n=6") == 0
    assert "nothing to plan" in capsys.readouterr().out


def test_plan_marks_pinned_values(tmp_path, capsys):
    path = tmp_path / "ism.json"
    path.write_text(serialize_program(examples.build("iterated_sin_map")))
    assert run_cli("plan", path, "--params", "n=6,steps=4") == 0
    assert "(pinned)" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# run


def test_run_prints_value_and_saves_grads(chain_path, tmp_path, capsys):
    assert run_cli("run", chain_path, "--params", "n=9", "--seed", "3",
                   "--out", tmp_path / "g_") == 0
    out = capsys.readouterr().out
    assert "value" in out
    g = np.load(tmp_path / "g_X__grad.npy")
    assert g.shape == (9,)


def test_run_json(chain_path, capsys):
    assert run_cli("run", chain_path, "--params", "n=9", "--json") == 0
    doc = json.loads(capsys.readouterr().out)
    assert set(doc) >= {"value", "grads"}
    assert len(doc["grads"]["X"]) == 9


def test_run_is_deterministic_for_a_seed(chain_path, capsys):
    run_cli("run", chain_path, "--params", "n=9", "--seed", "5", "--json")
    first = capsys.readouterr().out
    run_cli("run", chain_path, "--params", "n=9", "--seed", "5", "--json")
    assert capsys.readouterr().out == first


def test_run_rejects_mismatched_input(chain_path, capsys):
    assert run_cli("run", chain_path, "--params", "n=9",
                   "--input", "X=[1.0,2.0]") == 2


def test_run_accepts_npy_input(chain_path, tmp_path, capsys):
    xpath = tmp_path / "x.npy"
    np.save(xpath, np.full(9, 0.5))
    assert run_cli("run", chain_path, "--params", "n=9",
                   "--input", f"X={xpath}", "--json") == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["value"] == pytest.approx(9 * np.sin(np.exp(0.5)))


# ---------------------------------------------------------------------------
# verify


def test_verify_passes(chain_path, capsys):
    assert run_cli("verify", chain_path, "--params", "n=9") == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["ok"] and doc["tolerance"] == 1e-5
    assert doc["max_rel_error"] < 1e-5


def test_verify_real32_default_tolerance(foo_path, capsys):
    assert run_cli("verify", foo_path, "--params", "N=8") == 0
    assert json.loads(capsys.readouterr().out)["tolerance"] == 0.01


def test_verify_impossible_tolerance(chain_path, capsys):
    assert run_cli("verify", chain_path, "--params", "n=9",
                   "--tolerance", "1e-14") == 5


# ---------------------------------------------------------------------------
# mem-report


def test_mem_report_within_limit(foo_path, capsys):
    assert run_cli("mem-report", foo_path, "--memory-limit-mib", "500",
                   "--params", "N=3620") == 0
    out = capsys.readouterr().out
    assert "peak 499.89 MiB <= limit 500.00 MiB" in out


def test_mem_report_json(foo_path, capsys):
    assert run_cli("mem-report", foo_path, "--memory-limit-mib", "500",
                   "--params", "N=3620", "--json") == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["peak_bytes"] == 10 * 3620 ** 2 * 4


def test_mem_report_infeasible(foo_path, capsys):
    assert run_cli("mem-report", foo_path, "--memory-limit-mib", "1",
                   "--params", "N=3620") == 4


# ---------------------------------------------------------------------------
# fmt


def test_fmt_idempotent(foo_path, capsys):
    assert run_cli("fmt", foo_path) == 0
    once = capsys.readouterr().out
    path2 = foo_path.parent / "foo2.json"
    path2.write_text(once)
    assert run_cli("fmt", path2) == 0
    assert capsys.readouterr().out == once


def test_fmt_in_place(tmp_path):
    path = tmp_path / "messy.json"
    doc = json.loads(serialize_program(examples.build("exp_sin_chain")))
    path.write_text(json.dumps(doc, indent=None, separators=(",", ":")))
    assert cli.main(["fmt", str(path), "--in-place"]) == 0
    text = path.read_text()
    assert text == serialize_program(examples.build("exp_sin_chain"))


# ---------------------------------------------------------------------------
# exit codes


def test_missing_file_is_io_error(capsys):
    assert run_cli("plan", "/nonexistent/x.json") == 1


def test_bad_params_is_validation_error(foo_path, capsys):
    assert run_cli("plan", foo_path, "--params", "N=abc") == 2


def test_unparseable_program_is_validation_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("not json")
    assert run_cli("plan", bad) == 2


def test_unsupported_reversal_exit_code(tmp_path, capsys):
    path = tmp_path / "peel.json"
    path.write_text(serialize_program(pingpong_nonaffine()))
    assert run_cli("diff", path) == 3
    assert "unsupported" in capsys.readouterr().err


def test_module_entry_point(foo_path):
    proc = subprocess.run(
        [sys.executable, "-m", "gradflow.cli", "plan", str(foo_path),
         "--memory-limit-mib", "500", "--params", "N=3620"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "A0: recompute" in proc.stdout
