import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from aggregators import VotingConfig  # noqa: E402
from teacher_simulator import SyntheticEnsemble, sample_ground_truth, sample_votes  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_voting():
    return VotingConfig(k=50, sigma1=30.0, sigma2=8.0, threshold=40.0, delta=1e-5, num_classes=10, label_cap=2000)


def consensus_votes(k, num_queries, num_classes=10, accuracy=0.9, seed=0):
    """High-consensus synthetic vote matrix."""
    rng = np.random.default_rng(seed)
    truth = sample_ground_truth(num_queries, num_classes, rng)
    return sample_votes(SyntheticEnsemble.uniform(k, accuracy, num_classes), truth, rng)


@pytest.fixture
def small_votes():
    return consensus_votes(50, 500, seed=7)
