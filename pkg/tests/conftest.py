import numpy as np
import pytest

from seqloc.dataset import Dataset
from seqloc.neuralnet import NetConfig
from seqloc.synth import default_scene, generate

# small networks and few epochs keep the end-to-end tests in the seconds range
FAST_NET = NetConfig(classifier_hidden=(32,), regressor_hidden=(64, 32), classifier_epochs=30,
                     regressor_epochs=150, patience=20, learning_rate=3e-3)


def make_dataset(rssi, lon=None, lat=None, floor=None, building=None, timestamp=None, role="train"):
    rssi = np.asarray(rssi, dtype=np.float64)
    n = rssi.shape[0]
    z = np.zeros(n)
    return Dataset.from_arrays(
        rssi,
        z if lon is None else np.asarray(lon, dtype=float),
        z if lat is None else np.asarray(lat, dtype=float),
        np.zeros(n, int) if floor is None else np.asarray(floor),
        np.zeros(n, int) if building is None else np.asarray(building),
        timestamp=timestamp,
        role=role,
    )


@pytest.fixture(scope="session")
def small_scene():
    return default_scene(n_buildings=2, n_aps=20, n_floors=3, seed=0)


@pytest.fixture(scope="session")
def small_data(small_scene):
    """400 noiseless fingerprints: 360 train, 40 validation."""
    return generate(small_scene, 400)


@pytest.fixture(scope="session")
def fast_net():
    return FAST_NET


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(criterion: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {criterion} ({title}): {'PASS' if ok else 'FAIL'} - {detail}"
        print(line)
        _ACCEPTANCE_LINES.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
