import numpy as np
import pytest
import torch

from popgrowth.geodata import CensusUnit, Dataset, OraclePatch, RasterPatch, split_units
from popgrowth.synthcity import SynthConfig, generate_city

torch.set_num_threads(1)


def flat_patch(pid, epoch, value, row=0, col=0, size=10):
    return RasterPatch(pid, row, col, epoch, np.full((4, size, size), value, dtype=np.float32))


def make_dataset(values: dict[str, tuple[float, float]], units: dict[str, list[str]], pops=None) -> Dataset:
    """Hand-built dataset of flat patches laid out on one grid row."""
    patches, oracle = {}, {}
    order = sorted(values)
    for col, pid in enumerate(order):
        v1, v2 = values[pid]
        patches[(pid, "t1")] = flat_patch(pid, "t1", v1, 0, col)
        patches[(pid, "t2")] = flat_patch(pid, "t2", v2, 0, col)
        p1, p2 = (pops or {}).get(pid, (0.0, 0.0))
        oracle[pid] = OraclePatch(0.0, 0.0, p1, p2)
    cu = {}
    for uid, pids in units.items():
        t1 = sum(oracle[p].pop_t1 for p in sorted(pids))
        t2 = sum(oracle[p].pop_t2 for p in sorted(pids))
        cu[uid] = CensusUnit(uid, tuple(pids), t1, t2)
    return Dataset(10, (1, len(order)), patches, cu, oracle)


@pytest.fixture(scope="session")
def small_config():
    return SynthConfig(seed=5, grid_rows=8, grid_cols=8, n_units=12)


@pytest.fixture(scope="session")
def small_city(small_config):
    return generate_city(small_config)


@pytest.fixture(scope="session")
def small_split(small_city):
    return split_units(small_city.units.values(), 5)


@pytest.fixture(scope="session")
def default_city():
    return generate_city(SynthConfig())


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
