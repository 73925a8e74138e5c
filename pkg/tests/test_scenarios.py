from __future__ import annotations

import copy

import pytest

from agentdel.harness import ScenarioError, list_scenarios, load_scenario, run_scenario

ALL = ["agent-to-agent", "api-readonly", "federation", "ssh-env", "threat-suite", "web-browsing"]


def test_registry():
    assert list_scenarios() == ALL


@pytest.mark.parametrize("name", ALL)
def test_scenario_passes(name):
    report = run_scenario(name)
    assert report.passed, report.transcript()
    assert len(report.steps) == len(load_scenario(name)["steps"])
    assert report.transcript().endswith(f"({report.elapsed:.2f}s)")


def _requests(name):
    return [s for s in load_scenario(name)["steps"] if s["op"] == "request"]


def test_web_browsing_covers_documented_outcomes():
    outcomes = {(s["request"]["resource"].split("/")[2], s["expect"], tuple(s["reasons"]))
                for s in _requests("web-browsing")}
    assert any(o[1] == "permit" for o in outcomes)
    assert any("BudgetExceeded" in o[2] for o in outcomes)
    assert any(o[0] == "evil.example" and o[1] == "deny" for o in outcomes)


def test_api_readonly_write_denied():
    reqs = _requests("api-readonly")
    assert any(s["request"]["action"] == "read" and s["expect"] == "permit" for s in reqs)
    assert any(s["request"]["action"] == "write" and s["expect"] == "deny" for s in reqs)


def test_agent_to_agent_out_of_scope_denied():
    steps = load_scenario("agent-to-agent")["steps"]
    assert any(s["op"] == "redelegate" for s in steps)
    assert any(s["op"] == "request" and s["expect"] == "deny" and "d2" in s["bundle"] for s in steps)


def test_transcript_lists_reasons():
    text = run_scenario("api-readonly").transcript()
    assert "-> deny ['RateExceeded']" in text and "-> deny ['NoMatchingRule']" in text


def test_wrong_expectation_fails():
    script = copy.deepcopy(load_scenario("api-readonly"))
    for step in script["steps"]:
        if step["op"] == "request" and step["expect"] == "deny":
            step["expect"], step["reasons"] = "permit", []
            break
    report = run_scenario(script)
    assert not report.passed
    assert not report.steps[-1].ok


def test_wrong_audit_count_fails():
    script = copy.deepcopy(load_scenario("api-readonly"))
    script["audit"]["verifier:api"]["authorize"] += 1
    report = run_scenario(script)
    assert not report.passed and all(s.ok for s in report.steps)


def test_unknown_scenario():
    with pytest.raises(ScenarioError):
        run_scenario("no-such-scenario")
