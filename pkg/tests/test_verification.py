from acerase.diffusion import build_schedule
from acerase.verification import constants_check, format_table, run_all


def test_all_checks_pass_on_default_schedule():
    results = run_all(build_schedule(), n=2000)
    failed = [r.name for r in results if not r.passed]
    assert failed == []
    assert len(results) == 15
    table = format_table(results)
    assert table.count("PASS") == 15 and "FAIL" not in table


def test_constants_check_flags_omega_one():
    assert not constants_check(build_schedule(), omegas=(1.0,)).passed
