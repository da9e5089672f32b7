import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from camalkit.attention import (
    AttentionMapBatch, attention_maps, extract_cams, gradcam_batch, gradcam_per_sample_oracle,
    load_attention_array, normalize_minmax, save_attention_array, save_attention_png, upsample_to,
)
from camalkit.backend import BackwardCounter, ScalarTargetSelector, build_model
from camalkit.errors import FormatError, ShapeError, UnsupportedError


def test_single_channel_unit_gradient_is_relu():
    f = torch.randn(2, 1, 3, 3)
    assert torch.equal(gradcam_batch(f, torch.ones_like(f)), torch.relu(f[:, 0]))


def test_two_channel_arithmetic():
    f = torch.tensor([[[[2.0]], [[-4.0]]]])
    g = torch.tensor([[[[0.5]], [[1.0]]]])
    # (0.5 * 2 + 1 * -4) / 2 = -1.5 -> 0
    assert gradcam_batch(f, g).item() == 0.0
    assert gradcam_batch(-f, g).item() == pytest.approx(1.5)


def test_zero_gradients_give_zero_cam():
    f = torch.randn(1, 4, 3, 3)
    assert torch.count_nonzero(gradcam_batch(f, torch.zeros_like(f))) == 0


def test_gradcam_matches_explicit_loop():
    rng = np.random.default_rng(3)
    f, g = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(2, 3, 4, 5))
    expected = np.zeros((2, 4, 5))
    for b in range(2):
        for k in range(3):
            expected[b] += g[b, k].mean() * f[b, k]
    expected = np.maximum(expected / 3, 0)
    assert np.allclose(gradcam_batch(f, g).numpy(), expected, atol=1e-6)


def test_gradcam_shape_mismatch():
    with pytest.raises(ShapeError):
        gradcam_batch(torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 3, 4))


@pytest.mark.parametrize("name", ["tiny_cnn", "tiny_vit"])
@pytest.mark.parametrize("batch", [1, 2, 8])
def test_batch_matches_per_sample(name, batch):
    model = build_model(name, image_size=32, seed=0)
    gen = torch.Generator().manual_seed(batch)
    x = torch.randn(batch, 3, 32, 32, generator=gen)
    sel = ScalarTargetSelector.ground_truth(torch.randint(0, 3, (batch,), generator=gen))
    fast = normalize_minmax(extract_cams(model, x, sel)[0].detach()).values
    slow = normalize_minmax(gradcam_per_sample_oracle(model, x, sel)).values
    assert (fast - slow).abs().max() <= 1e-5


def test_backward_counts():
    model = build_model("tiny_cnn", seed=0)
    x = torch.randn(5, 3, 32, 32)
    sel = ScalarTargetSelector.ground_truth([0, 1, 2, 0, 1])
    batch, single = BackwardCounter(), BackwardCounter()
    extract_cams(model, x, sel, counter=batch)
    gradcam_per_sample_oracle(model, x, sel, counter=single)
    assert batch.count == 1 and single.count == 5


def test_normalize_examples():
    out = normalize_minmax(torch.tensor([[[1.0, 3.0], [5.0, 3.0]]]))
    assert out.values.tolist() == [[[0.0, 0.5], [1.0, 0.5]]]
    assert torch.count_nonzero(normalize_minmax(torch.full((1, 2, 2), 7.0)).values) == 0


@settings(max_examples=100, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(0, 1e3, width=32)))
def test_normalize_range_and_extremes(raw):
    out = normalize_minmax(torch.from_numpy(raw)).values.numpy()
    assert out.min() >= 0 and out.max() <= 1
    for b in range(out.shape[0]):
        if raw[b].max() > raw[b].min():
            assert out[b].min() == 0 and out[b].max() == 1
        else:
            assert not out[b].any()


def test_upsample_matches_bilinear_formula():
    src = torch.tensor([[[0.0, 1.0], [1.0, 0.0]]])
    out = upsample_to(AttentionMapBatch(src, (2, 2)), 4, 4).values[0]
    # half-pixel centres: output i maps to (i + 0.5) / 2 - 0.5, clamped to [0, 1]
    def coord(i):
        return min(max((i + 0.5) / 2 - 0.5, 0.0), 1.0)
    for i in range(4):
        for j in range(4):
            y, x = coord(i), coord(j)
            expected = (1 - y) * x + y * (1 - x)
            assert out[i, j].item() == pytest.approx(expected, abs=1e-6)


def test_upsample_identity_and_downscale():
    m = torch.rand(2, 3, 3)
    up = upsample_to(m, 3, 3)
    assert torch.equal(up.values, m) and up.source_resolution == (3, 3)
    with pytest.raises(UnsupportedError):
        upsample_to(m, 2, 2)


def test_attention_maps_full_resolution():
    model = build_model("tiny_cnn", seed=0)
    maps, logits = attention_maps(model, torch.randn(2, 3, 64, 64), ScalarTargetSelector.ground_truth([0, 1]))
    assert maps.values.shape == (2, 64, 64) and maps.source_resolution == (16, 16)
    assert float(maps.values.min()) >= 0 and float(maps.values.max()) <= 1
    assert logits.shape == (2, 3) and not logits.requires_grad


def test_array_container_roundtrip(tmp_path):
    values = np.random.default_rng(0).random((2, 5, 4)).astype(np.float32)
    save_attention_array(tmp_path / "a.cam", values)
    blob = (tmp_path / "a.cam").read_bytes()
    assert blob[:4] == b"CAMA" and len(blob) == 4 + 8 + 12 + values.nbytes
    assert np.array_equal(load_attention_array(tmp_path / "a.cam"), values)
    (tmp_path / "b.cam").write_bytes(blob[:-4])
    with pytest.raises(FormatError):
        load_attention_array(tmp_path / "b.cam")
    (tmp_path / "c.cam").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        load_attention_array(tmp_path / "c.cam")


def test_png_export(tmp_path):
    from PIL import Image

    save_attention_png(tmp_path / "a.png", np.array([[0.0, 0.5], [1.0, 0.25]]))
    arr = np.asarray(Image.open(tmp_path / "a.png"))
    assert arr.tolist() == [[0, 128], [255, 64]]


def test_single_sample_paths_identical():
    model = build_model("tiny_cnn", seed=2)
    x = torch.randn(1, 3, 32, 32)
    sel = ScalarTargetSelector.ground_truth([1])
    assert torch.equal(extract_cams(model, x, sel)[0].detach(), gradcam_per_sample_oracle(model, x, sel))
