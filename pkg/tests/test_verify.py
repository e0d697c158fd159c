
from persalign.verify import SUITES, SuiteResult, run_all


def test_suite_count():
    assert len(SUITES) >= 10


def test_counterexample_reporting():
    res = SuiteResult("demo", 3)
    res.flag("first")
    res.flag("second")
    assert not res.passed and res.violations == 2
    assert "counterexample: first" in res.line()


def test_fast_suites_pass():
    cheap = [s for s in SUITES if s.__name__ not in ("choice_kl_variance", "gradient_check")]
    assert all(r.passed for r in run_all(seed=1, suites=cheap))
