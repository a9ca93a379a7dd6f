import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fehd.data import Dataset, NumericColumn


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


@pytest.fixture
def small_panel():
    """12-row unbalanced two-FE panel with a couple of regressors."""
    g = np.random.default_rng(5)
    n = 12
    f1 = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3], dtype=float)
    f2 = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2], dtype=float)
    x = g.normal(size=n)
    y = 2 * x + f1 * 0.5 - f2 * 0.3 + g.normal(size=n)
    return Dataset(n_rows=n, columns={
        "y": NumericColumn(y), "x": NumericColumn(x),
        "f1": NumericColumn(f1), "f2": NumericColumn(f2),
    })
