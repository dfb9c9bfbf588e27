from xml.etree import ElementTree

import pytest

from snips.harness import (
    available_tests,
    format_table,
    run_suite,
    to_junit_xml,
)

CHEAP = ["carved_noise_variance_law", "step_size_hessian"]


def test_registry_lists_all_criteria():
    names = available_tests()
    assert len(names) == 8
    assert "gaussian_posterior_equivalence" in names
    assert "faithfulness_battery" in names


def test_unknown_name_lists_available():
    with pytest.raises(ValueError, match="carved_noise_variance_law"):
        run_suite(["not_a_test"])


def test_selection_runs_only_requested():
    results = run_suite(CHEAP, seed=1)
    assert [r.name for r in results] == CHEAP


def test_deterministic_given_seed():
    a = run_suite(["carved_noise_variance_law"], seed=77)[0]
    b = run_suite(["carved_noise_variance_law"], seed=77)[0]
    assert a.statistic == b.statistic
    c = run_suite(["carved_noise_variance_law"], seed=78)[0]
    assert c.statistic != a.statistic


def test_failures_are_contained(monkeypatch):
    import snips.harness as hz

    def boom(seed):
        raise RuntimeError("synthetic failure")

    monkeypatch.setitem(hz._REGISTRY, "step_size_hessian", boom)
    results = run_suite(CHEAP, seed=1)
    by_name = {r.name: r for r in results}
    assert by_name["carved_noise_variance_law"].passed
    assert not by_name["step_size_hessian"].passed
    assert "synthetic failure" in by_name["step_size_hessian"].detail


def test_table_and_xml_outputs():
    results = run_suite(CHEAP, seed=1)
    table = format_table(results)
    assert "PASS" in table and "statistic" in table
    xml = to_junit_xml(results)
    suite = ElementTree.fromstring(xml)
    assert suite.tag == "testsuite"
    assert int(suite.get("tests")) == 2
    assert {c.get("name") for c in suite} == set(CHEAP)


def test_xml_encodes_failures(monkeypatch):
    import snips.harness as hz

    monkeypatch.setitem(
        hz._REGISTRY, "step_size_hessian", lambda seed: (2.0, 1.0, "too big")
    )
    xml = to_junit_xml(run_suite(["step_size_hessian"], seed=1))
    suite = ElementTree.fromstring(xml)
    assert suite.get("failures") == "1"
    assert suite[0].find("failure") is not None
