import numpy as np
import pytest

from nbmf.geometry import ScanGeometry, uniform_angles
from nbmf.spectra import EnergyGrid, bundled_material, synth_spectrum


@pytest.fixture(scope="session")
def grid():
    return EnergyGrid(10.0, 150.0, 1.0)


@pytest.fixture(scope="session")
def materials(grid):
    return [bundled_material("water", grid), bundled_material("bone", grid)]


@pytest.fixture(scope="session")
def spectra(grid):
    return [synth_spectrum(80, grid, "aluminium", 0.25, "80kVp"),
            synth_spectrum(140, grid, "copper", 0.1, "140kVp")]


@pytest.fixture
def paper_geometry():
    return ScanGeometry(1000.0, 1536.0, 512, 0.8, (uniform_angles(720), uniform_angles(720)))


@pytest.fixture
def small_geometry():
    return ScanGeometry(1000.0, 1536.0, 32, 12.8, (uniform_angles(12), uniform_angles(12)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture(scope="session")
def record_criterion(request):
    """Append one PASS/FAIL line per acceptance criterion to the terminal summary."""
    lines = request.config._acceptance_lines

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
