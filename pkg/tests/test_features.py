import numpy as np
import pytest
import torch

from helpers import gradient_rel_error
from jointsr.features import DEFAULT_CHANNELS, FeatureExtractor, gram
from jointsr.imaging import DimensionError


def test_pyramid_shapes(extractor):
    maps = extractor(torch.rand(3, 32, 32))
    assert [tuple(m.shape) for m in maps] == [(16, 16, 16), (32, 8, 8), (64, 4, 4)]


def test_batched_and_grayscale(extractor):
    maps = extractor(torch.rand(2, 1, 16, 16))
    assert [m.shape[:2] for m in maps] == [(2, c) for c in DEFAULT_CHANNELS]


def test_deterministic_and_finite(extractor, gen):
    x = torch.rand(3, 16, 16, generator=gen)
    a, b = extractor(x), extractor(x.clone())
    assert all(torch.equal(p, q) for p, q in zip(a, b))
    assert all(torch.isfinite(m).all() for m in extractor(torch.ones(3, 16, 16)))


def test_rejects_bad_dims(extractor):
    with pytest.raises(DimensionError):
        extractor(torch.rand(3, 12, 16))
    with pytest.raises(DimensionError):
        extractor(torch.rand(2, 8, 8))


def test_frozen(extractor):
    assert list(extractor.parameters()) == []
    extractor.train()
    assert not extractor.training


def test_packaged_weights_match_seed(extractor):
    fresh = FeatureExtractor.from_seed()
    for k, v in fresh.weight_dict().items():
        assert torch.equal(v, extractor.weight_dict()[k]), k


def test_weight_file_round_trip(tmp_path, extractor):
    extractor.save(tmp_path / "w.bin")
    back = FeatureExtractor.from_file(tmp_path / "w.bin")
    x = torch.rand(3, 8, 8)
    assert all(torch.equal(p, q) for p, q in zip(back(x), extractor(x)))


def test_feature_gradient_matches_finite_differences(extractor, gen):
    x = torch.rand(3, 8, 8, generator=gen, dtype=torch.float64)
    err = gradient_rel_error(lambda t: sum(m.sum() for m in extractor(t)), x)
    assert err < 1e-3


def test_gram_hand_values():
    assert gram(torch.ones(1, 2, 2)).item() == 1.0
    assert torch.all(gram(torch.zeros(4, 3, 3)) == 0)


def test_gram_symmetric_psd_and_permutation_invariant(gen):
    f = torch.randn(5, 4, 6, generator=gen, dtype=torch.float64)
    g = gram(f)
    assert torch.allclose(g, g.T)
    assert torch.linalg.eigvalsh(g).min() > -1e-12
    perm = torch.randperm(24, generator=gen)
    shuffled = f.reshape(5, -1)[:, perm].reshape(5, 4, 6)
    assert torch.allclose(gram(shuffled), g, atol=1e-14)


def test_gram_gradient(gen):
    f = torch.randn(3, 4, 4, generator=gen, dtype=torch.float64)
    w = torch.randn(3, 3, generator=gen, dtype=torch.float64)
    assert gradient_rel_error(lambda t: (gram(t) * w).sum(), f) < 1e-3


def test_gram_oracle(gen):
    f = torch.randn(3, 2, 5, generator=gen, dtype=torch.float64)
    flat = f.numpy().reshape(3, -1).T  # positions x channels
    assert np.allclose(gram(f).numpy(), flat.T @ flat / 30)
