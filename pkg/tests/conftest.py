from __future__ import annotations

import pytest

from corrective_unlearning.harness import ExperimentConfig


def tiny_config_dict(out_dir: str = "results") -> dict:
    """A run small enough to finish in about a second."""
    return {
        "gen": {"n_train": 400, "n_val": 100, "n_test": 100},
        "arch": {"hidden": [32]},
        "train": {"total_steps": 150},
        "manipulations": [{"kind": "poison", "sizes": [0.05]}],
        "unlearn_steps": 30,
        "scrub_forget_steps": 10,
        "grids": {
            "SSD": [{"ssd_alpha": 1.0, "ssd_gamma": 1.0}, {"ssd_alpha": 10.0, "ssd_gamma": 10.0}],
            "SCRUB": [{"scrub_alpha": 0.1}, {"scrub_alpha": 1.0}],
        },
        "out_dir": out_dir,
        "save_artifacts": False,
    }


@pytest.fixture
def tiny_config(tmp_path):
    return ExperimentConfig.from_dict(tiny_config_dict(str(tmp_path / "out")))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split()[0])):
            terminalreporter.write_line(line)
