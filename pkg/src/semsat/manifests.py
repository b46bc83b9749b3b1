"""Experiment manifests: three command stages plus expectations on the reports they write.

A manifest is JSON::

    {"name": ..., "criterion": 5, "description": ...,
     "reference": {...},                       # full-scale reference numbers, informational
     "stages": {"dataset": [argv, ...], "train": [...], "eval": [...]},
     "expect": [{"report": path, "key": k, "op": ">=", "value": 0.85},
                {"report": path, "key": k, "op": ">=", "other": {"report": p2, "key": k2}, "offset": 0.05},
                {"abs_diff": [{"report": p, "key": k}, {"report": q, "key": k}], "max": 0.05},
                {"sum": [{"report": p, "key": k}, ...], "op": "<=", "value": 1800}]}

``argv`` lists are ``semsat`` sub-command arguments; ``{work}`` expands to the
work directory.  Commands already completed in the same work directory are
skipped, so manifests that share a training run reuse it.
"""

from __future__ import annotations

import contextlib
import hashlib
import io
import json
import operator
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

STAGES = ("dataset", "train", "eval")
OPS = {">=": operator.ge, ">": operator.gt, "<=": operator.le, "<": operator.lt, "==": operator.eq}
MANIFEST_DIR = Path(__file__).with_name("manifest_data")


@dataclass
class ManifestReport:
    name: str
    passed: bool
    checks: List[str] = field(default_factory=list)
    failed_stage: Optional[str] = None
    stage_log: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        detail = "; ".join(self.checks)
        if self.failed_stage:
            detail = f"stage {self.failed_stage} failed: {self.stage_log.strip().splitlines()[-1:] or ''}"
        return f"{status} {self.name} ({self.seconds:.0f}s) {detail}"


def builtin_manifests() -> Dict[str, Path]:
    out = {}
    for p in sorted(MANIFEST_DIR.glob("*.json")):
        out[json.loads(p.read_text())["name"]] = p
    return out


def load_manifest(path: Union[str, Path]) -> dict:
    m = json.loads(Path(path).read_text())
    validate_manifest(m)
    return m


def validate_manifest(m: dict) -> None:
    for key in ("name", "stages", "expect"):
        if key not in m:
            raise ValueError(f"manifest missing '{key}'")
    unknown = set(m["stages"]) - set(STAGES)
    if unknown:
        raise ValueError(f"unknown manifest stages {sorted(unknown)}")
    for stage in m["stages"].values():
        if not all(isinstance(cmd, list) and all(isinstance(a, str) for a in cmd) for cmd in stage):
            raise ValueError("stage commands must be lists of strings")
    for e in m["expect"]:
        if "op" in e and e["op"] not in OPS:
            raise ValueError(f"unknown operator {e['op']}")


def _expand(obj, work: str):
    if isinstance(obj, str):
        return obj.replace("{work}", work)
    if isinstance(obj, list):
        return [_expand(x, work) for x in obj]
    if isinstance(obj, dict):
        return {k: _expand(v, work) for k, v in obj.items()}
    return obj


def _value(ref: dict) -> float:
    from .cli import read_report
    rep = read_report(ref["report"])
    if ref["key"] not in rep:
        raise KeyError(f"{ref['report']} has no key {ref['key']}")
    return float(rep[ref["key"]])


def evaluate_expectation(e: dict) -> (bool, str):
    if "abs_diff" in e:
        a, b = (_value(r) for r in e["abs_diff"])
        ok = abs(a - b) <= e["max"]
        return ok, f"|{e['abs_diff'][0]['key']} - {e['abs_diff'][1]['key']}|={abs(a - b):.6g} <= {e['max']}"
    if "sum" in e:
        total = sum(_value(r) for r in e["sum"])
        ok = OPS[e["op"]](total, float(e["value"]))
        return ok, f"sum({', '.join(r['key'] for r in e['sum'])})={total:.6g} {e['op']} {e['value']}"
    lhs = _value(e)
    if "other" in e:
        rhs = _value(e["other"]) + e.get("offset", 0.0)
        label = f"{e['other']['key']}{e.get('offset', 0.0):+g}"
    else:
        rhs, label = float(e["value"]), f"{e['value']}"
    ok = OPS[e["op"]](lhs, rhs)
    return ok, f"{e['key']}={lhs:.6g} {e['op']} {label} ({rhs:.6g})"


def run_manifest(manifest: dict, work: Union[str, Path],
                 runner: Optional[Callable[[Sequence[str]], int]] = None) -> ManifestReport:
    """Execute the stages in order and compare the written reports with the expectations."""
    if runner is None:
        from .cli import main as runner
    validate_manifest(manifest)
    work = Path(work)
    work.mkdir(parents=True, exist_ok=True)
    done_dir = work / ".done"
    done_dir.mkdir(exist_ok=True)
    m = _expand(manifest, str(work))
    t0 = time.perf_counter()
    for stage in STAGES:
        for argv in m["stages"].get(stage, []):
            key = hashlib.sha256(json.dumps(argv).encode()).hexdigest()[:16]
            marker = done_dir / key
            if marker.exists():
                continue
            buf = io.StringIO()
            with contextlib.redirect_stdout(buf), contextlib.redirect_stderr(buf):
                code = runner(argv)
            # property checks report failures through their report file, not the stage status
            if code != 0 and not (argv and argv[0] == "check" and "--report" in argv):
                return ManifestReport(manifest["name"], False, failed_stage=stage,
                                      stage_log=f"$ semsat {' '.join(argv)}\n{buf.getvalue()}exit {code}\n",
                                      seconds=time.perf_counter() - t0)
            marker.write_text(" ".join(argv) + "\n")
    results = []
    ok = True
    for e in m["expect"]:
        try:
            passed, text = evaluate_expectation(e)
        except (OSError, KeyError, ValueError) as exc:
            passed, text = False, f"{type(exc).__name__}: {exc}"
        ok &= passed
        results.append(("ok " if passed else "BAD ") + text)
    return ManifestReport(manifest["name"], ok, results, seconds=time.perf_counter() - t0)


def run_all(manifests: Sequence[dict], work: Union[str, Path]) -> List[ManifestReport]:
    return [run_manifest(m, work) for m in manifests]
