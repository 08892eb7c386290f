"""Smoke test for the hapi_py extension: primitives, then a small pipeline."""

import sys
import tempfile

import hapi_py


def check_primitives():
    step = hapi_py.ema_smooth([0.0] * 4 + [1.0] * 3, 5, 1 / 3)
    assert abs(step[4] - 81 / 121) < 1e-12, step
    impulse = hapi_py.ema_smooth([1.0, 0, 0, 0, 0], 5, 1 / 3)
    assert abs(impulse[4] - 1 / 121) < 1e-12, impulse
    assert hapi_py.binarize([0.2, 0.5, 0.9], 0.5) == [False, True, True]
    assert hapi_py.auc([0.9, 0.8, 0.1], [True, False, False]) == 1.0
    low, high = hapi_py.wilson_interval(3, 10)
    assert 0 < low < 0.3 < high < 1
    stat, p = hapi_py.mcnemar(10, 2)
    assert abs(stat - 16 / 3) < 1e-12 and 0 < p < 0.05


def check_pipeline():
    with tempfile.TemporaryDirectory() as root:
        ws = hapi_py.Workspace(root)
        reports = ws.run_all(patients=300, seed=4)
        assert [r["status"] for r in reports] == ["ran"] * 8, reports
        again = ws.run_all(patients=300, seed=4)
        assert all(r["status"] == "up_to_date" for r in again)
        assert ws.manifest("train_id")["stage"] == "train_id"

        models = ws.models()
        assert 0 < models.tau < 1
        pid = models.patient_ids()[0]
        t = models.timeline(pid)
        assert t["patient_id"] == pid and t["weeks"]
        last = t["weeks"][-1]["as_of"]
        risk = models.predict_risk(pid, t["weeks"][0]["as_of"], last)
        assert abs(sum(risk["prediction"]["probabilities"]) - 1) < 1e-9

        try:
            hapi_py.Workspace(root + "/empty").train_id()
        except hapi_py.HapiError as e:
            assert "missing artifact" in str(e)
        else:
            raise AssertionError("train_id on an empty workspace succeeded")


if __name__ == "__main__":
    check_primitives()
    check_pipeline()
    print("hapi_py smoke test passed")
    sys.exit(0)
