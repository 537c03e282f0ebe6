import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from shortcut_probe.model import TrunkConfig  # noqa: E402
from shortcut_probe.synthdata import GenSpec, generate  # noqa: E402

TINY_GEN = dict(n_patches=240, patch_size=8, groups_per_stain=8, seed=5)


def tiny_trunk(**kw):
    base = dict(widths=[3, 4], input_shape=[3, 8, 8], feature_dim=6, head_hidden=5)
    return TrunkConfig(**{**base, **kw})


@pytest.fixture(scope="session")
def tiny_data():
    ds, _ = generate(GenSpec(**TINY_GEN))
    return ds


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        title, ok, detail = results[n]
        terminalreporter.write_line(f"[{n}] {title}: {'PASS' if ok else 'FAIL'} | {detail}")
