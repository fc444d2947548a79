import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from jointsr.imaging import DimensionError
from jointsr.occlusion import (
    BlockSpec,
    apply_occlusion,
    block_mask,
    center_block_mask,
    composite,
    grid_block_mask,
    load_mask,
    occluded_fraction,
    random_block_mask,
    random_block_masks,
    save_mask,
)


def zero_box(m):
    """Bounding box of the zero pixels and whether they fill it completely."""
    rows, cols = np.nonzero(m.numpy() == 0)
    if len(rows) == 0:
        return None, True
    box = (rows.min(), cols.min(), rows.max() + 1, cols.max() + 1)
    area = (box[2] - box[0]) * (box[3] - box[1])
    return box, area == len(rows)


@pytest.mark.parametrize("seed", [0, 1, 7, 123])
def test_quarter_area_block_is_16_square(seed):
    m = random_block_mask(32, 32, 0.25, seed)
    box, solid = zero_box(m)
    assert solid
    assert (box[2] - box[0], box[3] - box[1]) == (16, 16)
    assert float(m.mean()) == 0.75


def test_tiny_fraction_gives_single_pixel():
    m = random_block_mask(32, 32, 1e-6, 3)
    assert int((m == 0).sum()) == 1


def test_random_mask_deterministic_per_seed():
    assert torch.equal(random_block_mask(32, 32, 0.25, 5), random_block_mask(32, 32, 0.25, 5))


def test_random_positions_vary_across_seeds():
    boxes = {zero_box(random_block_mask(32, 32, 0.25, s))[0] for s in range(20)}
    assert len(boxes) > 5


@given(
    h=st.integers(4, 40), w=st.integers(4, 40),
    frac=st.floats(0.01, 1.0), seed=st.integers(0, 2 ** 31),
)
@settings(max_examples=60, deadline=None)
def test_random_block_is_single_in_bounds_rectangle(h, w, frac, seed):
    side = int(np.floor(np.sqrt(frac * h * w) + 1e-9))
    if side > min(h, w):
        with pytest.raises(ValueError):
            random_block_mask(h, w, frac, seed)
        return
    m = random_block_mask(h, w, frac, seed)
    box, solid = zero_box(m)
    assert solid
    assert box[2] - box[0] == box[3] - box[1] == max(side, 1)


def test_block_too_large_rejected():
    with pytest.raises(ValueError):
        random_block_mask(8, 32, 0.5, 0)
    with pytest.raises(ValueError):
        random_block_mask(8, 8, 0.0, 0)
    with pytest.raises(ValueError):
        block_mask(8, 8, BlockSpec(4, 4, 5, 2))


def test_batched_masks_shape():
    m = random_block_masks(5, 16, 16, 0.25, np.random.default_rng(0))
    assert m.shape == (5, 1, 16, 16)
    assert torch.all(m.mean(dim=(1, 2, 3)) == 0.75)


def test_grid_cells():
    m = grid_block_mask(32, 32, 2, 1)
    assert torch.all(m[:16, :16] == 0) and float(m.sum()) == 32 * 32 - 256
    assert occluded_fraction(m) == 0.25
    c = grid_block_mask(33, 33, 3, 5)
    assert torch.all(c[11:22, 11:22] == 0) and abs(occluded_fraction(c) - 1 / 9) < 1e-6


@pytest.mark.parametrize("grid", [2, 3])
def test_grid_cells_partition_image(grid):
    counts = sum(1 - grid_block_mask(30, 31, grid, i) for i in range(1, grid * grid + 1))
    assert torch.all(counts == 1)


def test_grid_index_out_of_range():
    for bad in (0, 5):
        with pytest.raises(ValueError):
            grid_block_mask(32, 32, 2, bad)


def test_center_block():
    m = center_block_mask(32, 32, 8)
    assert torch.all(m[12:20, 12:20] == 0) and int((m == 0).sum()) == 64
    assert torch.all(center_block_mask(32, 32, 0) == 1)
    with pytest.raises(ValueError):
        center_block_mask(8, 8, 9)


def test_apply_occlusion(gen):
    img = torch.rand(3, 8, 8, generator=gen)
    assert torch.equal(apply_occlusion(img, torch.ones(8, 8)), img)
    assert torch.all(apply_occlusion(img, torch.zeros(8, 8)) == 0)
    m = (torch.rand(8, 8, generator=gen) > 0.5).float()
    out = apply_occlusion(img, m, fill=0.3)
    for c in range(3):
        for i in range(8):
            for j in range(8):
                expect = img[c, i, j] if m[i, j] == 1 else torch.tensor(0.3)
                assert out[c, i, j] == expect


def test_apply_occlusion_dim_mismatch():
    with pytest.raises(DimensionError):
        apply_occlusion(torch.rand(3, 8, 8), torch.ones(8, 7))


def test_composite_cases(gen):
    raw = torch.rand(3, 8, 8, generator=gen)
    inp = torch.rand(3, 8, 8, generator=gen)
    assert torch.equal(composite(raw, inp, torch.ones(8, 8)), inp)
    assert torch.equal(composite(raw, inp, torch.zeros(8, 8)), raw)
    half = torch.ones(8, 8)
    half[:, :4] = 0
    out = composite(torch.full((3, 8, 8), 0.2), torch.full((3, 8, 8), 0.8), half)
    assert torch.all(out[..., :4] == torch.tensor(0.2)) and torch.all(out[..., 4:] == torch.tensor(0.8))
    assert torch.equal(composite(inp, inp, half), inp)


def test_composite_batch_broadcasts_mask(gen):
    raw = torch.rand(4, 3, 8, 8, generator=gen)
    inp = torch.rand(4, 3, 8, 8, generator=gen)
    m = random_block_masks(4, 8, 8, 0.25, np.random.default_rng(1))
    out = composite(raw, inp, m)
    vis = m.expand_as(inp).bool()
    assert torch.equal(out[vis], inp[vis]) and torch.equal(out[~vis], raw[~vis])


def test_composite_dim_mismatch():
    with pytest.raises(DimensionError):
        composite(torch.rand(3, 8, 8), torch.rand(3, 8, 4), torch.ones(8, 8))
    with pytest.raises(DimensionError):
        composite(torch.rand(3, 8, 8), torch.rand(3, 8, 8), torch.ones(4, 8))


def test_mask_png_round_trip(tmp_path):
    m = random_block_mask(16, 16, 0.25, 2)
    save_mask(m, tmp_path / "m.png")
    assert torch.equal(load_mask(tmp_path / "m.png"), m)
    with pytest.raises(DimensionError):
        load_mask(tmp_path / "m.png", size=(8, 8))
