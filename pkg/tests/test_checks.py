import numpy as np

from semsat.checks import max_relative_error, run_property_suite, schedule_conformance, schedule_ok


def records(n_epochs=8, per_epoch=4, total=32, depth_cut=8, shift_transient=0):
    out = []
    for it in range(total):
        ep = it // per_epoch + 1
        out.append({"iteration": it, "epoch": ep,
                    "w_color_l2": 1.0 if ep <= 2 else 0.0, "w_color_uncertainty": 0.0 if ep <= 2 else 1.0,
                    "color_uncertainty": 0.0 if ep <= 2 else 0.3,
                    "transient": 0.1 if ep >= 4 + shift_transient else 0.0,
                    "w_transient": 0.1 if ep >= 4 + shift_transient else 0.0,
                    "depth": 2.0 if it < depth_cut else 0.0})
    return out


def test_schedule_conformance_accepts_correct_log():
    m = schedule_conformance(records(), 32)
    assert schedule_ok(m) and m["first_transient_epoch"] == 4


def test_schedule_conformance_rejects_early_transient_and_late_depth():
    assert not schedule_ok(schedule_conformance(records(shift_transient=-1), 32))
    assert not schedule_ok(schedule_conformance(records(depth_cut=12), 32))


def test_max_relative_error_is_normwise():
    a = np.array([1.0, 1e-9])
    b = np.array([1.0, 2e-9])
    assert max_relative_error(a, b) < 1e-8
    assert max_relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_fast_suites_pass():
    for name in ("compositing", "losses", "rpc"):
        r = run_property_suite(name)
        assert r.passed, r.line()
