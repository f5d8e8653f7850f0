import numpy as np
import pytest

from vmckit.ansatz import TableAnsatz
from vmckit.model import FiniteSpace, FiniteWeights, MatrixHamiltonian
from vmckit.pretrain import Target


@pytest.fixture
def two_state():
    """``H = [[2, -1], [-1, 2]]`` with a table ansatz on two states."""
    space = FiniteSpace(2)
    return MatrixHamiltonian(np.array([[2.0, -1.0], [-1.0, 2.0]])), TableAnsatz(space)


@pytest.fixture
def crafted_target():
    """``phi = (1, 0)`` under the uniform measure on two states."""
    return Target(np.array([1.0, 0.0]), FiniteWeights.uniform(2))
