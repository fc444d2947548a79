import numpy as np
import pytest
import torch
from PIL import Image

from jointsr.imaging import (
    DimensionError,
    ImageIOError,
    downsample,
    load_image,
    save_image,
    to_uint8,
    upsample_bicubic,
    upsample_nearest,
)


def cubic_weights(t, a=-0.75):
    def k(x):
        x = abs(x)
        if x <= 1:
            return (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1
        if x < 2:
            return a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
        return 0.0

    return [k(t + 1), k(t), k(1 - t), k(2 - t)]


def resample_axis(arr, s, axis):
    """Reference half-pixel-centred cubic convolution with edge replication."""
    arr = np.moveaxis(arr, axis, -1)
    n = arr.shape[-1]
    out = np.zeros(arr.shape[:-1] + (n * s,))
    for j in range(n * s):
        src = (j + 0.5) / s - 0.5
        i0 = int(np.floor(src))
        w = cubic_weights(src - i0)
        for k, wk in zip(range(i0 - 1, i0 + 3), w):
            out[..., j] += wk * arr[..., min(max(k, 0), n - 1)]
    return np.moveaxis(out, -1, axis)


def reference_bicubic(img, s):
    return np.clip(resample_axis(resample_axis(img, s, -1), s, -2), 0.0, 1.0)


def test_downsample_constant_and_shape():
    out = downsample(torch.full((3, 128, 128), 0.5), 4)
    assert out.shape == (3, 32, 32)
    assert torch.all(out == 0.5)


def test_downsample_checkerboard_period_two():
    y, x = np.mgrid[:8, :8]
    board = torch.tensor(((x + y) % 2).astype(np.float32))[None]
    assert torch.allclose(downsample(board, 2), torch.full((1, 4, 4), 0.5))


def test_downsample_preserves_mean(gen):
    img = torch.rand(2, 3, 32, 32, generator=gen, dtype=torch.float64)
    for s in (2, 4, 8):
        out = downsample(img, s)
        assert out.min() >= 0
        assert torch.allclose(out.mean(dim=(-1, -2)), img.mean(dim=(-1, -2)), atol=1e-12)


def test_downsample_rejects_non_divisible():
    with pytest.raises(DimensionError):
        downsample(torch.rand(3, 30, 32), 4)


def test_downsample_rejects_bad_scale():
    with pytest.raises(ValueError):
        downsample(torch.rand(3, 32, 32), 3)


def test_upsample_constant_and_shapes():
    assert torch.allclose(upsample_bicubic(torch.full((3, 32, 32), 0.3), 4), torch.full((3, 128, 128), 0.3))
    assert upsample_bicubic(torch.rand(3, 16, 16), 8).shape == (3, 128, 128)
    assert upsample_nearest(torch.rand(1, 1, 4, 4), 2).shape == (1, 1, 8, 8)


@pytest.mark.parametrize("s", [2, 4, 8])
def test_bicubic_matches_reference(gen, s):
    img = torch.rand(3, 9, 7, generator=gen, dtype=torch.float64)
    ours = upsample_bicubic(img, s).numpy()
    ref = reference_bicubic(img.numpy(), s)
    assert np.max(np.abs(ours - ref)) < 1e-6


def test_png_round_trip(tmp_path, gen):
    img = torch.rand(3, 16, 16, generator=gen)
    save_image(img, tmp_path / "a.png")
    back = load_image(tmp_path / "a.png")
    assert back.shape == (3, 16, 16)
    assert (back - img).abs().max() <= 1 / 255 + 1e-7


def test_grayscale_png_loads_one_channel(tmp_path):
    Image.fromarray(np.full((8, 8), 200, np.uint8)).save(tmp_path / "g.png")
    Image.fromarray(np.zeros((8, 8, 2), np.uint8), "LA").save(tmp_path / "la.png")
    assert load_image(tmp_path / "g.png").shape == (1, 8, 8)
    assert load_image(tmp_path / "la.png").shape[0] == 1


def test_to_uint8_rounds_to_nearest():
    arr = to_uint8(torch.tensor([[[0.0, 0.6 / 255, 0.4 / 255, 1.0]]]))
    assert arr.ravel().tolist() == [0, 1, 0, 255]


def test_io_errors_name_the_path(tmp_path):
    missing = tmp_path / "nope.png"
    with pytest.raises(ImageIOError, match="nope.png"):
        load_image(missing)
    (tmp_path / "x.jpg").write_bytes(b"\xff\xd8")
    with pytest.raises(ImageIOError, match="x.jpg"):
        load_image(tmp_path / "x.jpg")
    with pytest.raises(ImageIOError):
        save_image(torch.rand(3, 4, 4), tmp_path / "out.bmp")
