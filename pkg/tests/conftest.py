import copy
import json

import pytest

from deqei.config import parse_config

SMALL = {
    "seed": 0,
    "task": {"name": "inpainting", "size": 16, "keep": 0.5},
    "data": {"n": 20},
    "denoiser": {"hidden_channels": 4, "depth": 2, "norm_groups": 0, "residual": False,
                 "zero_init_last": False, "sn_target": 0.9},
    "model": {"kind": "deq", "template": "de-prox", "eta": 0.5},
    "train": {"epochs": 2, "batch_size": 4, "learning_rate": 1e-3},
}


def merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def small_config(**over):
    return parse_config(json.dumps(merge(SMALL, over)))


def write_config(path, **over):
    path.write_text(json.dumps(merge(SMALL, over), indent=2))
    return path


# ---------------------------------------------------------------- acceptance summary

_ACCEPTANCE = {}


@pytest.fixture
def verdict(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
