import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"

SMALL_SHAPE = """
name = "small_shape"
mode = "optimize"
seed = 0

[mesh]
nx = 4
ny = 2
length_m = 0.008
height_m = 0.004

[[phases]]
name = "gel"
G_pa = 1e6
chi = { water = 0.2 }

[[phases]]
name = "elastomer"
G_pa = 5e7
chi = { water = 5.0 }

[[solvents]]
name = "water"

[[load_cases]]
name = "water"
solvent = "water"

[[dirichlet]]
set = "left"
component = "x"

[[dirichlet]]
set = "left"
component = "y"

[layout]
default_phase = "elastomer"

[[layout.regions]]
phase = "gel"
x_min_m = 0.0
x_max_m = 0.008
y_min_m = 0.002
y_max_m = 0.004

[objective]
kind = "shape"
case = "water"

[[constraints]]
kind = "grayness"
name = "grayness"

[optimizer]
max_iterations = 4

[output]
directory = "small_shape"
snapshot_every = 0
"""

TWO_SOLVENTS = """
name = "two_solvents"
mode = "optimize"
seed = 3

[mesh]
nx = 4
ny = 2
length_m = 0.008
height_m = 0.004
node_sets = [
  { name = "support", x_min_m = 0.0, x_max_m = 0.0, y_min_m = 0.002, y_max_m = 0.004 },
  { name = "output", x_min_m = 0.008, x_max_m = 0.008, y_min_m = 0.0, y_max_m = 0.0 },
]

[[phases]]
name = "hydrogel"
G_pa = 1e6
chi = { water = 0.15, organic = 5.0 }

[[phases]]
name = "organogel"
G_pa = 2e6
chi = { water = 5.0, organic = 0.15 }

[[phases]]
name = "void"
G_pa = 1e4
chi = { water = 5.0, organic = 5.0 }

[[solvents]]
name = "water"

[[solvents]]
name = "organic"
molar_volume_m3_per_mol = 1e-4

[[load_cases]]
name = "water"
solvent = "water"

[[load_cases]]
name = "organic"
solvent = "organic"

[[dirichlet]]
set = "support"
component = "x"

[[dirichlet]]
set = "support"
component = "y"

[[dirichlet]]
set = "output"
component = "x"

[objective]
kind = "blocked_force"
case = "organic"
port = { set = "output", component = "x", sign = -1.0 }

[[constraints]]
kind = "volume"
name = "solid"
phases = ["hydrogel", "organogel"]
bound = 0.6

[[constraints]]
kind = "reaction_floor"
name = "pull"
case = "water"
port = { set = "output", component = "x", sign = 1.0 }
floor_n = 0.01

[[constraints]]
kind = "grayness"
name = "grayness"

[optimizer]
max_iterations = 3

[output]
directory = "two_solvents"
snapshot_every = 0
"""


@pytest.fixture
def small_shape_cfg():
    from swelltopo.config import loads
    return loads(SMALL_SHAPE)


@pytest.fixture
def two_solvent_cfg():
    from swelltopo.config import loads
    return loads(TWO_SOLVENTS)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
