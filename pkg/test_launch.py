#!/usr/bin/env python3
"""
Tests for the launcher's dependency check and dispatch
"""

import launch


def test_check_dependencies_reports_missing():
    missing = launch.check_dependencies({'numpy': 'numpy', 'no_such_module_xyz': 'no-such-pkg'},
                                        verbose=False)
    assert missing == ['no-such-pkg']


def test_required_packages_are_importable():
    assert launch.check_dependencies(verbose=False) == []


def test_main_without_arguments_prints_usage(capsys):
    assert launch.main([]) == 1
    assert "Usage" in capsys.readouterr().out


def test_main_dispatches_to_cli(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[run]\nschedule = async\nM = 2\ndata = teacher\n", encoding="utf-8")
    assert launch.main(["validate", str(path), "--quiet"]) == 0
    path.write_text("[run]\nbogus = 1\n", encoding="utf-8")
    assert launch.main(["validate", str(path), "--quiet"]) == 1
