"""Session-shared pipeline fixtures.

The desk-scale preset runs are the expensive part of the suite (tens of
seconds each), so each one executes once per session into its own temp
directory; tests load whatever stage artifacts they need from there.
The small config below covers pipeline-mechanics tests where desk scale
would be waste.
"""

import time

import pytest

from fockcast.config import load_preset
from fockcast.stages import run_all

SMALL_CONFIG = """\
[system]
name = "stepanoff"

[observable]
gamma = 1.0

[sampling]
n_side = 16

[kernel]
bandwidth = [0.7, 2.0, 0.35]
l = 48

[generator]
tau = 1e-3
sigma = 2e-3
z = 1e-3
lprime = 12

[fock]
d = 3
m = 2
epsilon = 0.4

[evaluate]
times = [0.0, 0.5]
truth_step = 1e-2

[output]
dir = "runs/small"
"""


@pytest.fixture(scope="session")
def small_config_text():
    return SMALL_CONFIG


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("stepanoff_desk")
    t0 = time.perf_counter()
    run_all(load_preset("stepanoff_desk"), base_dir=base)
    return {"base": base, "elapsed": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def desk_base(desk_run):
    return desk_run["base"]


@pytest.fixture(scope="session")
def l63_base(tmp_path_factory):
    base = tmp_path_factory.mktemp("l63_desk")
    run_all(load_preset("l63_desk"), base_dir=base)
    return base
