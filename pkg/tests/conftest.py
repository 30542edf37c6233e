import os

from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], print_blob=True)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


import pytest  # noqa: E402

from flashdmd.config import from_dict  # noqa: E402

TINY = {
    "seed": 0,
    "init": {"pretrain_steps": 20, "pretrain_batch": 64},
    "net": {"hidden": [16, 16], "temb_dim": 8},
    "disc": {"trunk": [16, 16, 16], "head_hidden": 8},
    "train": {"max_iters": 4, "batch": 32},
    "rl": {"iters": 0, "groups": 8},
    "eval": {"n": 1000, "n_tracking": 1000, "interval": 2, "checkpoint_interval": 2},
}


def tiny_config(**dotted):
    """A seconds-scale config; dotted keys override, e.g. ``tiny_config(**{"train.ttur": 2})``."""
    cfg = from_dict(TINY, require=True)
    return cfg.replace(**dotted) if dotted else cfg


@pytest.fixture
def make_config():
    return tiny_config


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion; printed at the end of the run."""

    def _report(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[n] = line
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
