from pathlib import Path

import pytest

from semsat.cli import write_report
from semsat.manifests import (ManifestReport, builtin_manifests, evaluate_expectation, load_manifest, run_all,
                              run_manifest, validate_manifest)


def test_builtin_manifests_cover_all_criteria():
    found = {n: load_manifest(p) for n, p in builtin_manifests().items()}
    assert sorted(m["criterion"] for m in found.values()) == list(range(1, 11))
    assert {"transient-ablation", "label-fusion", "semantic-accuracy", "determinism"} <= set(found)
    for m in found.values():
        assert m["expect"] and set(m["stages"]) == {"dataset", "train", "eval"}


def test_shared_training_commands_are_identical():
    ms = {n: load_manifest(p) for n, p in builtin_manifests().items()}
    town = ms["semantic-accuracy"]["stages"]["train"][0]
    assert ms["schedule-conformance"]["stages"]["train"][0] == town
    assert ms["determinism"]["stages"]["train"][0] == town


def test_empty_list_passes():
    assert run_all([], "unused") == []


def test_validation():
    with pytest.raises(ValueError):
        validate_manifest({"name": "x", "stages": {}})
    with pytest.raises(ValueError):
        validate_manifest({"name": "x", "stages": {"deploy": []}, "expect": []})
    with pytest.raises(ValueError):
        validate_manifest({"name": "x", "stages": {"eval": [["a", 1]]}, "expect": []})
    with pytest.raises(ValueError):
        validate_manifest({"name": "x", "stages": {}, "expect": [{"op": "~="}]})


class Recorder:
    def __init__(self, fail_on=None):
        self.calls = []
        self.fail_on = fail_on

    def __call__(self, argv):
        self.calls.append(list(argv))
        if argv[0] == "write":
            write_report(Path(argv[1]), {"acc": float(argv[2])})
        print("log line from", argv[0])
        return 1 if argv[0] == self.fail_on else 0


def manifest(expect, extra_eval=()):
    return {"name": "demo", "stages": {"dataset": [["make", "{work}/d"]], "train": [["fit"]],
                                       "eval": [["write", "{work}/a.txt", "0.9"], ["write", "{work}/b.txt", "0.8"],
                                                *extra_eval]},
            "expect": expect}


def test_run_and_expectations(tmp_path):
    rec = Recorder()
    exp = [{"report": "{work}/a.txt", "key": "acc", "op": ">=", "value": 0.85},
           {"report": "{work}/a.txt", "key": "acc", "op": ">=", "other": {"report": "{work}/b.txt", "key": "acc"},
            "offset": 0.05},
           {"abs_diff": [{"report": "{work}/a.txt", "key": "acc"}, {"report": "{work}/b.txt", "key": "acc"}],
            "max": 0.05}]
    rep = run_manifest(manifest(exp), tmp_path, runner=rec)
    assert [c[0] for c in rec.calls] == ["make", "fit", "write", "write"]
    assert rec.calls[0][1] == f"{tmp_path}/d"
    assert rep.checks[0].startswith("ok") and rep.checks[1].startswith("ok") and rep.checks[2].startswith("BAD")
    assert not rep.passed and rep.line().startswith("FAIL demo")
    # completed commands are skipped on a second run in the same work dir
    rec2 = Recorder()
    run_manifest(manifest(exp[:1]), tmp_path, runner=rec2)
    assert rec2.calls == []


def test_stage_failure_reports_log(tmp_path):
    rep = run_manifest(manifest([]), tmp_path, runner=Recorder(fail_on="fit"))
    assert not rep.passed and rep.failed_stage == "train"
    assert "log line from fit" in rep.stage_log and "exit 1" in rep.stage_log
    assert "stage train failed" in rep.line()


def test_failing_check_with_report_continues(tmp_path):
    rep = run_manifest(manifest([{"report": "{work}/a.txt", "key": "acc", "op": ">", "value": 0.5}],
                                extra_eval=[["check", "--report", "{work}/c.txt"]]),
                       tmp_path, runner=Recorder(fail_on="check"))
    assert rep.passed and rep.failed_stage is None


def test_missing_key_is_failure(tmp_path):
    (tmp_path / "r.txt").write_text("x=1\n")
    rep = run_manifest({"name": "m", "stages": {}, "expect": [{"report": str(tmp_path / "r.txt"), "key": "y",
                                                              "op": "==", "value": 1}]}, tmp_path, runner=Recorder())
    assert not rep.passed and "KeyError" in rep.checks[0]
    assert evaluate_expectation({"report": str(tmp_path / "r.txt"), "key": "x", "op": "==", "value": 1})[0]


def test_report_line_format():
    r = ManifestReport("n", True, ["ok a"], seconds=3.2)
    assert r.line() == "PASS n (3s) ok a"


def test_sum_expectation(tmp_path):
    write_report(tmp_path / "a.txt", {"t": 700.0})
    write_report(tmp_path / "b.txt", {"t": 900.0})
    refs = [{"report": str(tmp_path / "a.txt"), "key": "t"}, {"report": str(tmp_path / "b.txt"), "key": "t"}]
    assert evaluate_expectation({"sum": refs, "op": "<=", "value": 1800})[0]
    assert not evaluate_expectation({"sum": refs, "op": "<=", "value": 1500})[0]
