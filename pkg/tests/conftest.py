import numpy as np
import pytest

from stageflow.tensor import Tensor

DATA = __import__("pathlib").Path(__file__).resolve().parents[1] / "src/stageflow/data"


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_tensor(rng, max_rank=3, max_dim=4, kind="numeric"):
    rank = int(rng.integers(0, max_rank + 1))
    shape = tuple(int(rng.integers(1, max_dim + 1)) for _ in range(rank))
    if kind == "boolean":
        return Tensor.boolean(rng.integers(0, 2, size=shape))
    return Tensor(rng.standard_normal(shape))
