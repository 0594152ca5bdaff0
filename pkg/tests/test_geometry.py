import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from celldet.geometry import (
    CropLimits,
    PyramidLevel,
    apply_deformation,
    bilinear_sample,
    crop_center,
    generate_grid_proposals,
    image_to_feature_coords,
    mfov_crop_limits,
)
from oracles import bilinear_reference, central_difference


class TestGridProposals:
    def test_small_grid(self):
        props = generate_grid_proposals(32, 32, 16)
        assert props.initial.tolist() == [[8, 8], [24, 8], [8, 24], [24, 24]]

    def test_counts(self):
        assert len(generate_grid_proposals(512, 512, 16)) == 1024
        # 4 + 8k < 500 for k = 0..61
        expected_axis = sum(1 for k in range(1000) if 4 + 8 * k < 500)
        assert expected_axis == 62
        assert len(generate_grid_proposals(500, 500, 8)) == expected_axis ** 2 == 3844

    def test_row_major(self):
        pts = generate_grid_proposals(48, 32, 16).initial
        assert pts[:2, 1].tolist() == [8, 8]
        assert pts[2, 0].item() == 8 and pts[2, 1].item() == 24

    @pytest.mark.parametrize("h,w,i", [(0, 10, 4), (10, -1, 4), (10, 10, 0)])
    def test_invalid(self, h, w, i):
        with pytest.raises(ValueError):
            generate_grid_proposals(h, w, i)

    @given(st.integers(1, 200), st.integers(1, 200), st.integers(1, 40))
    @settings(max_examples=60, deadline=None)
    def test_count_is_product_and_unique_and_inside(self, h, w, interval):
        pts = generate_grid_proposals(h, w, interval).initial
        nx = len([x for x in range(10000) if interval / 2 + x * interval < w])
        ny = len([y for y in range(10000) if interval / 2 + y * interval < h])
        assert len(pts) == nx * ny
        assert len({tuple(p) for p in pts.tolist()}) == len(pts)
        if len(pts):
            assert (pts[:, 0] < w).all() and (pts[:, 1] < h).all() and (pts >= 0).all()


def test_image_to_feature_coords():
    assert image_to_feature_coords(torch.tensor([1.5, 1.5]), 4).tolist() == [0.0, 0.0]
    assert image_to_feature_coords(torch.tensor([9.5, 1.5]), 4).tolist() == [2.0, 0.0]
    p = torch.tensor([[3.25, 7.0], [0.0, 0.0]])
    assert torch.equal(image_to_feature_coords(p, 1), p)


class TestBilinear:
    def test_exact_on_integral(self):
        fmap = torch.arange(2 * 3 * 4, dtype=torch.float64).reshape(2, 3, 4)
        # feature cell (2, 1) at stride 4 is centered on image (9.5, 5.5)
        out = bilinear_sample(PyramidLevel(2, fmap), torch.tensor([[9.5, 5.5]], dtype=torch.float64))
        assert torch.equal(out[0], fmap[:, 1, 2])

    def test_midpoint(self):
        fmap = torch.tensor([[[0.0, 1.0]]], dtype=torch.float64)
        out = bilinear_sample(fmap, torch.tensor([[0.5, 0.0]], dtype=torch.float64), stride=1)
        assert out.item() == 0.5

    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        fmap = rng.normal(size=(3, 5, 5))
        for _ in range(50):
            x, y = rng.uniform(-6, 26, size=2)
            got = bilinear_sample(PyramidLevel(2, torch.from_numpy(fmap)), torch.tensor([[x, y]]))[0]
            np.testing.assert_allclose(got.numpy(), bilinear_reference(fmap, x, y, 4), rtol=1e-12, atol=1e-12)

    def test_far_outside_clamps_to_corner(self):
        fmap = torch.randn(2, 3, 3, dtype=torch.float64)
        out = bilinear_sample(fmap, torch.tensor([[-100.0, 1e4]], dtype=torch.float64), stride=2)
        assert torch.equal(out[0], fmap[:, 2, 0])

    def test_batched_matches_unbatched(self):
        fmap = torch.randn(2, 4, 6, 6, dtype=torch.float64)
        pts = torch.rand(2, 7, 2, dtype=torch.float64) * 24
        both = bilinear_sample(fmap, pts, stride=4)
        for b in range(2):
            assert torch.allclose(both[b], bilinear_sample(fmap[b], pts[b], stride=4))

    def test_linear_along_axis(self):
        fmap = torch.randn(1, 4, 4, dtype=torch.float64)
        ts = torch.linspace(0, 1, 5, dtype=torch.float64)
        pts = torch.stack([1.0 + ts, torch.full_like(ts, 2.0)], -1)
        vals = bilinear_sample(fmap, pts, stride=1)[:, 0]
        expected = (1 - ts) * fmap[0, 2, 1] + ts * fmap[0, 2, 2]
        assert torch.allclose(vals, expected)

    def test_point_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(1)
        fmap_np = rng.normal(size=(3, 6, 6))
        fmap = torch.from_numpy(fmap_np)
        weights = rng.normal(size=3)
        for _ in range(20):
            p = rng.uniform(2, 20, size=2)
            pt = torch.tensor(p, requires_grad=True)
            (bilinear_sample(fmap, pt[None], stride=4)[0] @ torch.from_numpy(weights)).backward()
            fd = central_difference(lambda q: bilinear_reference(fmap_np, q[0], q[1], 4) @ weights, p)
            np.testing.assert_allclose(pt.grad.numpy(), fd, rtol=1e-4, atol=1e-7)

    def test_map_gradient(self):
        fmap = torch.randn(2, 4, 4, dtype=torch.float64, requires_grad=True)
        pts = torch.tensor([[3.3, 7.9], [12.0, 1.1]], dtype=torch.float64)
        assert torch.autograd.gradcheck(lambda f: bilinear_sample(f, pts, stride=4), (fmap,))


class TestDeformation:
    def test_identity_and_addition(self):
        props = generate_grid_proposals(32, 32, 16)
        same = apply_deformation(props, torch.zeros(4, 2))
        assert torch.equal(same.deformed, props.initial)
        off = torch.zeros(4, 2)
        off[0] = torch.tensor([3.0, -2.0])
        moved = apply_deformation(props, off)
        assert moved.deformed[0].tolist() == [11.0, 6.0]

    def test_no_clamping(self):
        props = generate_grid_proposals(16, 16, 16)
        moved = apply_deformation(props, torch.tensor([[-50.0, 100.0]]))
        assert moved.deformed[0].tolist() == [-42.0, 108.0]

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            apply_deformation(generate_grid_proposals(32, 32, 16), torch.zeros(3, 2))


class TestCrop:
    @pytest.mark.parametrize("k_total,k,lo,hi,factor", [
        (2, 1, 0.25, 0.75, 2),
        (3, 1, 0.375, 0.625, 4),
        (3, 2, 0.25, 0.75, 2),
        (4, 3, 0.25, 0.75, 2),
        (4, 2, 0.375, 0.625, 4),
    ])
    def test_limits(self, k_total, k, lo, hi, factor):
        limits = mfov_crop_limits(k_total, k)
        assert (limits.lo, limits.hi, limits.upsample_factor) == (lo, hi, factor)

    @pytest.mark.parametrize("k_total,k", [(2, 2), (3, 0), (1, 1)])
    def test_limits_invalid(self, k_total, k):
        with pytest.raises(ValueError):
            mfov_crop_limits(k_total, k)

    @given(st.integers(2, 12), st.data())
    def test_limits_invariants(self, k_total, data):
        k = data.draw(st.integers(1, k_total - 1))
        limits = mfov_crop_limits(k_total, k)
        assert limits.hi - limits.lo == 1 / 2 ** (k_total - k)
        assert limits.lo == 1 - limits.hi

    def test_center_block(self):
        x = torch.arange(64.0).reshape(1, 8, 8)
        out = crop_center(PyramidLevel(3, x), CropLimits(0.25, 0.75, 2))
        assert out.level_index == 3
        assert torch.equal(out.data, x[:, 2:6, 2:6])

    def test_full_crop_identity(self):
        x = torch.randn(3, 6, 6)
        assert torch.equal(crop_center(x, CropLimits(0.0, 1.0, 1)), x)

    def test_indivisible(self):
        with pytest.raises(ValueError, match="divisible by 8"):
            crop_center(torch.zeros(1, 6, 6), CropLimits(0.375, 0.625, 4))

    @pytest.mark.parametrize("k_total,k", [(2, 1), (3, 1), (4, 1), (4, 3)])
    def test_crop_then_upsample_restores_size(self, k_total, k):
        limits = mfov_crop_limits(k_total, k)
        x = torch.randn(1, 2, 32, 32)
        up = torch.nn.functional.interpolate(crop_center(x, limits), scale_factor=limits.upsample_factor)
        assert up.shape == x.shape
