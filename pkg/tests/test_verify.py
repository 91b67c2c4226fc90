from __future__ import annotations

import pytest

from streamvit.config import desk_config
from streamvit.verify import SUITES, format_verify_report, oracle_config, run_suites


def test_all_suites_pass_on_desk_config():
    results = run_suites(desk_config(), [0], frames=3)
    assert [r.name for r in results] == list(SUITES)
    assert all(r.passed for r in results), [(r.name, r.notes) for r in results]


def test_skip_push_fault_breaks_causality():
    results = {r.name: r for r in run_suites(desk_config(), [0], frames=3, fault=True)}
    assert not results["causality"].passed
    assert not results["streaming-vs-oracle"].passed
    assert not results["memory-length"].passed


def test_single_frame_trivially_passes():
    results = run_suites(desk_config(), [0, 1], frames=1)
    assert all(r.passed for r in results)


def test_parallel_jobs_give_same_report():
    cfg = desk_config(mode="sequence")
    serial = run_suites(cfg, [0, 1], frames=2, suites=["prefix", "gate-off"])
    parallel = run_suites(cfg, [0, 1], frames=2, suites=["prefix", "gate-off"], jobs=2)
    assert format_verify_report(serial, cfg, [0, 1], 2) == format_verify_report(parallel, cfg, [0, 1], 2)


def test_memory_one_history_check_is_skipped():
    # with M=1 no earlier frame is visible, so causality only checks the future
    results = run_suites(desk_config(memory_capacity=1), [0], frames=3, suites=["causality"])
    assert results[0].passed


def test_oracle_config_widens_narrow_windows():
    assert oracle_config(desk_config()).window is None
    assert oracle_config(desk_config(window=8)).window == 8


def test_bad_arguments():
    with pytest.raises(ValueError):
        run_suites(desk_config(), [0], frames=0)
    with pytest.raises(ValueError):
        run_suites(desk_config(), [0], suites=["nope"])


def test_report_has_key_value_block():
    cfg = desk_config()
    text = format_verify_report(run_suites(cfg, [0], 2, suites=["prefix"]), cfg, [0], 2)
    assert text.startswith("PASS  prefix")
    assert "prefix.status=pass" in text and "all_passed=true" in text
