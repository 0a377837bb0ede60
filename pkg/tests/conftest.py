import numpy as np
import pytest

from msclr.conventions import SkeletonConvention, builtin_registry
from msclr.dataio import generate_synthetic_dataset


@pytest.fixture(scope="session")
def registry():
    return builtin_registry()


@pytest.fixture(scope="session")
def small_dataset(registry):
    return generate_synthetic_dataset(3, 6, registry, seed=3, frame_range=(20, 28))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def chain(n: int, name: str = "chain", center: int = 0) -> SkeletonConvention:
    return SkeletonConvention(name=name, joint_count=n,
                              edges=tuple((i, i + 1) for i in range(n - 1)),
                              center_joint=center, swap_map=tuple(range(n)),
                              joint_names=tuple(f"j{i}" for i in range(n)))
