import pytest
import torch

from jointsr.features import FeatureExtractor


@pytest.fixture(scope="session")
def extractor():
    return FeatureExtractor.default()


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)
