"""Acceptance summary: one pass/fail line per criterion at the end of the run."""

import pytest

ACCEPTANCE: dict = {}

# Invariants that criterion 11 names explicitly, keyed by test function.
NAMED_INVARIANTS = {
    "test_additivity": "headroom additivity",
    "test_percentile_ordering_and_oracle": "percentile ordering",
    "test_quantization_and_even_reduction": "quantization",
    "test_priority_order": "priority order",
    "test_determinism": "determinism",
    "test_energy_accounting": "energy accounting",
}
MIN_EXAMPLES = 1000

_props: dict = {}


def _max_examples(item):
    fn = getattr(item, "obj", None)
    s = getattr(fn, "_hypothesis_internal_use_settings", None)
    return None if s is None else s.max_examples


def pytest_collection_modifyitems(items):
    for item in items:
        n = _max_examples(item)
        if n is not None and "test_acceptance" not in item.nodeid:
            _props[item.nodeid] = {"name": item.originalname or item.name, "examples": n, "outcome": None}


def pytest_runtest_logreport(report):
    rec = _props.get(report.nodeid)
    if rec is None:
        return
    if report.when == "call" or report.outcome != "passed":
        if rec["outcome"] in (None, "passed"):
            rec["outcome"] = report.outcome


@pytest.fixture
def record():
    def _record(criterion, ok, detail):
        ACCEPTANCE[criterion] = (bool(ok), detail)
        return ok
    return _record


def _criterion_11():
    if not _props:
        return None
    ran = {k: v for k, v in _props.items() if v["outcome"] is not None}
    if not ran:
        return None
    few = [v["name"] for v in ran.values() if v["examples"] < MIN_EXAMPLES]
    bad = [v["name"] for v in ran.values() if v["outcome"] != "passed"]
    names = {v["name"] for v in ran.values()}
    missing = [lbl for fn, lbl in NAMED_INVARIANTS.items() if fn not in names]
    ok = not few and not bad and not missing
    detail = f"{len(ran)} property tests at >= {MIN_EXAMPLES} cases"
    if few:
        detail += f"; under {MIN_EXAMPLES}: {few}"
    if bad:
        detail += f"; failed: {bad}"
    if missing:
        detail += f"; not run: {missing}"
    return ok, detail


def pytest_terminal_summary(terminalreporter):
    c11 = _criterion_11()
    if c11 is not None:
        ACCEPTANCE[11] = c11
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in range(1, 12):
        if k in ACCEPTANCE:
            ok, detail = ACCEPTANCE[k]
            tr.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            tr.write_line(f"criterion {k:>2}: NOT RUN")
