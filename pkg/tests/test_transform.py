import pytest
import torch
from hypothesis import given, settings, strategies as st

from repdfd.errors import GeometryError
from repdfd.transform import (VisualPrompt, apply_input_transform, build_border_mask, merge,
                              prompt_param_count, resize_for_prompt)


def test_mask_4x4():
    m = build_border_mask(4, 4, 1)
    assert int(m.sum()) == 12
    assert not m[1:3, 1:3].any()


def test_mask_224_p34():
    assert int(build_border_mask(224, 224, 34).sum()) == 25840


def test_mask_p0_empty():
    assert not build_border_mask(10, 12, 0).any()


@pytest.mark.parametrize("H,W,p", [(4, 4, 2), (10, 6, 3), (8, 8, -1)])
def test_bad_geometry(H, W, p):
    with pytest.raises(GeometryError):
        build_border_mask(H, W, p)
    with pytest.raises(GeometryError):
        prompt_param_count(H, W, p)


@pytest.mark.parametrize("p,expected", [(34, 77520), (12, 30528), (0, 0), (78, 136656)])
def test_param_count_224(p, expected):
    assert prompt_param_count(224, 224, p) == expected


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 96), st.integers(1, 96), st.data())
def test_param_count_matches_mask(H, W, data):
    p = data.draw(st.integers(0, (min(H, W) - 1) // 2))
    mask = build_border_mask(H, W, p)
    assert prompt_param_count(H, W, p) == 3 * int(mask.sum())
    r, c = data.draw(st.integers(0, H - 1)), data.draw(st.integers(0, W - 1))
    assert bool(mask[r, c]) == (r < p or r >= H - p or c < p or c >= W - p)


def test_resize_identity_and_constant():
    x = torch.rand(20, 24, 3, dtype=torch.float64)
    assert torch.equal(resize_for_prompt(x, 0), x)
    const = torch.full((20, 24, 3), 0.37, dtype=torch.float64)
    out = resize_for_prompt(const, 3)
    assert out.shape == (14, 18, 3)
    torch.testing.assert_close(out, torch.full_like(out, 0.37), rtol=0, atol=1e-15)


def test_resize_224_p34_shape():
    assert resize_for_prompt(torch.zeros(224, 224, 3), 34).shape == (156, 156, 3)


def test_zero_prompt_gives_padded_image():
    x = torch.rand(8, 8, 3, dtype=torch.float64)
    vp = VisualPrompt.zeros(8, 8, 2)
    out = apply_input_transform(x, vp).pixels
    assert torch.equal(out[2:6, 2:6], resize_for_prompt(x, 2))
    assert (out[vp.mask] == 0).all()


def test_hand_computed_4x4():
    x = torch.arange(16, dtype=torch.float64).reshape(4, 4, 1).expand(4, 4, 3)
    vp = VisualPrompt.zeros(4, 4, 1)
    vp.delta[:] = 1.0
    out = merge(x, vp)
    # each interior pixel is the mean of one 2x2 block of the source
    expected_inner = torch.tensor([[2.5, 4.5], [10.5, 12.5]], dtype=torch.float64)
    assert torch.equal(out[1:3, 1:3, 0], expected_inner)
    assert (out[vp.mask] == 1.0).all()


def test_source_of_any_size():
    vp = VisualPrompt.zeros(32, 32, 6)
    out = merge(torch.rand(50, 40, 3, dtype=torch.float64), vp)
    assert out.shape == (32, 32, 3)


def test_masked_delta_is_zero_inside():
    vp = VisualPrompt.zeros(12, 12, 3)
    vp.delta = torch.randn(12, 12, 3, dtype=torch.float64)
    assert (vp.masked_delta()[~vp.mask] == 0).all()
    assert vp.n_params == prompt_param_count(12, 12, 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_linearity_in_delta(seed):
    g = torch.Generator().manual_seed(seed)
    vp = VisualPrompt.zeros(16, 16, 4)
    x = torch.randn(16, 16, 3, generator=g, dtype=torch.float64)
    d1, d2 = (torch.randn(16, 16, 3, generator=g, dtype=torch.float64) for _ in range(2))
    a, b = (float(v) for v in torch.randn(2, generator=g, dtype=torch.float64))
    lhs = merge(x, vp, a * d1 + b * d2)
    rhs = a * merge(x, vp, d1) + b * merge(x, vp, d2) - (a + b - 1) * merge(x, vp, torch.zeros_like(d1))
    torch.testing.assert_close(lhs, rhs, rtol=0, atol=1e-10)
