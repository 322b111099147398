import numpy as np
import pytest

from fluidq.examples import cascading_model, weakly_connected_model
from fluidq.model import FluidQueueModel, format_model, stationary_phase_distribution

MP = float(np.finfo(float).eps)

M2_TEXT = """# two-phase queue with a closed form solution
nplus 1
nminus 1
c 1 -2
-1 1
1 -1
"""


def build_m2(c_minus: float = -2.0, c_plus: float = 1.0) -> FluidQueueModel:
    return FluidQueueModel.from_arrays(1, 1, [[-1.0, 1.0], [1.0, -1.0]], [c_plus, c_minus])


def build_random_model(seed: int, max_phases: int = 5) -> FluidQueueModel:
    """Irreducible positive recurrent model with up to max_phases phases per side."""
    rng = np.random.default_rng(seed)
    n_plus = int(rng.integers(1, max_phases + 1))
    n_minus = int(rng.integers(1, max_phases + 1))
    n = n_plus + n_minus
    t = rng.uniform(0.05, 2.0, (n, n)) * (rng.random((n, n)) < 0.5)
    for i in range(n):
        j = (i + 1) % n
        if t[i, j] == 0:
            t[i, j] = rng.uniform(0.1, 1.0)
    np.fill_diagonal(t, 0.0)
    c = np.concatenate([rng.uniform(0.5, 2.0, n_plus), -rng.uniform(0.5, 2.0, n_minus)])
    provisional = FluidQueueModel.from_arrays(n_plus, n_minus, t, c)
    xi = stationary_phase_distribution(provisional).xi
    up = np.sum(xi[:n_plus] * c[:n_plus])
    down = np.sum(xi[n_plus:] * -c[n_plus:])
    c[n_plus:] *= 1.5 * up / down
    return FluidQueueModel.from_arrays(n_plus, n_minus, t, c)


@pytest.fixture
def m2():
    return build_m2()


@pytest.fixture
def m2_transient():
    return build_m2(c_minus=-1.0, c_plus=2.0)


@pytest.fixture(scope="session")
def e1():
    return weakly_connected_model()


@pytest.fixture
def e2():
    return cascading_model


@pytest.fixture
def random_model():
    return build_random_model


@pytest.fixture
def model_file(tmp_path):
    """Write a model to a file and return its path"""

    def write(model_or_text, name="model.fq"):
        text = model_or_text if isinstance(model_or_text, str) else format_model(model_or_text)
        path = tmp_path / name
        path.write_text(text)
        return str(path)

    return write
