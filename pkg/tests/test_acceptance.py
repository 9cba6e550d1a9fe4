"""Acceptance criteria 1-10 on the shipped verify configuration.

One suite run is shared by the per-criterion tests; a second run with the
same seed checks byte-identical report bodies.  Each criterion prints one
``[PASS]``/``[FAIL]`` line, repeated in the terminal summary.
"""

import json

import numpy as np
import pytest

from aqx.acceptance import (
    CRITERIA,
    CriterionResult,
    SuiteReport,
    VerifyConfig,
    determinism_check,
    load_verify_config,
    run_criterion,
    verify_suite,
)
from conftest import ACCEPTANCE_LINES


def _record(line: str) -> None:
    print(line)
    ACCEPTANCE_LINES.append(line)


@pytest.fixture(scope="module")
def config():
    return load_verify_config()


@pytest.fixture(scope="module")
def suite(config):
    return verify_suite(config)


@pytest.fixture(scope="module")
def by_id(suite):
    return {r.id: r for r in suite.results}


@pytest.mark.parametrize("cid", sorted(CRITERIA))
def test_criterion(cid, by_id):
    res = by_id[cid]
    _record(res.line())
    assert res.passed, json.dumps(res.body()["measured"], sort_keys=True, default=str)[:2000]


@pytest.mark.parametrize("cid", sorted(CRITERIA))
def test_runtime_within_limit(cid, by_id):
    res = by_id[cid]
    assert res.runtime <= res.limit


def test_criterion_10_determinism(config, suite):
    second = verify_suite(config)
    det = determinism_check(suite, second)
    _record(f"[{'PASS' if det.passed else 'FAIL'}] criterion 10: determinism, "
            f"{det.measured['bytes_first']} bytes per report body")
    assert det.passed


def test_report_is_machine_readable(suite):
    doc = json.loads(suite.to_json())
    assert set(doc) == {"header", "body"}
    assert [c["id"] for c in doc["body"]["criteria"]] == sorted(CRITERIA)
    assert all({"measured", "tolerances", "passed"} <= set(c) for c in doc["body"]["criteria"])
    assert "timestamp" in doc["header"] and "timestamp" not in suite.body_bytes().decode()


def test_projection_bound_survives_tightened_tolerance():
    res = run_criterion(1, load_verify_config(tolerance_scale=0.01))
    _record(res.line().replace("criterion 1:", "criterion 1 (tolerances x0.01):"))
    assert res.passed


def test_numpy_scalars_serialize():
    res = CriterionResult(1, "probe", np.bool_(True), {"x": np.float64(np.inf), "n": np.int64(3)}, {"t": 1e-3})
    report = SuiteReport([res], VerifyConfig(criteria=(1,)), "t0")
    body = json.loads(report.body_bytes())
    assert body["criteria"][0]["passed"] is True
    assert body["criteria"][0]["measured"] == {"n": 3, "x": "inf"}
    assert json.loads(report.to_json())["body"] == body
