import math

import pytest
import torch

from _scenes import pinhole, random_splats
from sarogs.rasterizer import (LOWPASS, SH_C0, SH_C1, Camera, Splats, look_at, project_splat,
                               rasterize, rasterize_oracle, sh_to_color)

BG = (0.2, 0.4, 0.6)


def one_splat(mean=(32.5, 32.5), var=4.0, color=(0.9, 0.1, 0.3), opacity=0.8, depth=2.0, idx=0):
    d = torch.float64
    return Splats(torch.tensor([mean], dtype=d), torch.eye(2, dtype=d).unsqueeze(0) * var,
                  torch.tensor([depth], dtype=d), torch.tensor([color], dtype=d),
                  torch.tensor([opacity], dtype=d), torch.tensor([idx]))


def cat(*ss):
    return Splats(*(torch.cat([getattr(s, f) for s in ss]) for f in
                    ("means", "cov", "depth", "color", "opacity", "ids")))


class TestShToColor:
    def test_degree0(self):
        sh = torch.zeros((2, 3, 1), dtype=torch.float64)
        sh[..., 0] = torch.tensor([0.3, -0.2, 1.0])
        dirs = torch.randn((2, 3), dtype=torch.float64)
        rgb = sh_to_color(sh, dirs)
        assert torch.allclose(rgb, (sh[..., 0] * SH_C0 + 0.5).clamp_min(0), rtol=1e-15)

    def test_zero_coeffs(self):
        rgb = sh_to_color(torch.zeros((3, 3, 9), dtype=torch.float64), torch.randn((3, 3), dtype=torch.float64))
        assert torch.equal(rgb, torch.full((3, 3), 0.5, dtype=torch.float64))

    def test_opposite_directions(self):
        sh = torch.zeros((1, 3, 4), dtype=torch.float64)
        sh[0, :, 1:] = torch.tensor([[0.1, 0.2, -0.1], [0.05, 0.0, 0.1], [-0.1, 0.1, 0.1]])
        d = torch.tensor([[0.3, -0.5, 0.8]], dtype=torch.float64)
        a, b = sh_to_color(sh, d), sh_to_color(sh, -d)
        dn = d / d.norm()
        x, y, z = dn[0].tolist()
        linear = SH_C1 * (-y * sh[0, :, 1] + z * sh[0, :, 2] - x * sh[0, :, 3])
        assert torch.allclose(a - b, 2 * linear, rtol=1e-12, atol=1e-15)

    def test_clamped_nonnegative(self):
        sh = torch.full((1, 3, 1), -10.0, dtype=torch.float64)
        assert torch.equal(sh_to_color(sh, torch.ones((1, 3), dtype=torch.float64)), torch.zeros((1, 3), dtype=torch.float64))


class TestProjectSplat:
    def _args(self, pos, s=0.1):
        d = torch.float64
        return (torch.tensor([pos], dtype=d), torch.tensor([[1.0, 0, 0, 0]], dtype=d),
                torch.full((1, 3), s, dtype=d), torch.tensor([0.5], dtype=d), torch.zeros((1, 3, 4), dtype=d))

    def test_on_axis(self):
        cam = pinhole(64)
        sp = project_splat(*self._args((0.0, 0.0, 1.0)), cam)
        assert sp.means[0].tolist() == [32.0, 32.0]

    def test_isotropic_covariance(self):
        cam = pinhole(64)
        s, z = 0.05, 2.0
        sp = project_splat(*self._args((0.0, 0.0, z), s), cam)
        expected = torch.diag(torch.tensor([(64 * s / z) ** 2, (64 * s / z) ** 2], dtype=torch.float64))
        assert torch.allclose(sp.cov[0], expected + LOWPASS * torch.eye(2, dtype=torch.float64), rtol=1e-12)

    def test_behind_near_plane_culled(self):
        cam = pinhole(64)
        assert len(project_splat(*self._args((0.0, 0.0, 0.005)), cam)) == 0
        assert len(project_splat(*self._args((0.0, 0.0, -1.0)), cam)) == 0

    def test_offscreen_culled(self):
        assert len(project_splat(*self._args((50.0, 0.0, 1.0), 0.01), pinhole(64))) == 0

    def test_look_at_centers_target(self):
        c2w = look_at((3.0, 1.0, 2.0), (0.2, -0.1, 0.3))
        cam = Camera.from_c2w(c2w, fx=50.0, fy=50.0, cx=20.0, cy=16.0, width=40, height=32)
        sp = project_splat(*self._args((0.2, -0.1, 0.3)), cam)
        assert torch.allclose(sp.means[0], torch.tensor([20.0, 16.0], dtype=torch.float64), atol=1e-12)

    def test_rejects_non_rigid(self):
        with pytest.raises(ValueError, match="orthonormal"):
            Camera(torch.diag(torch.tensor([2.0, 1, 1, 1])), 1.0, 1.0, 0, 0, 4, 4)


class TestRasterize:
    def test_empty(self):
        cam = pinhole(16)
        empty = Splats(torch.zeros((0, 2)), torch.zeros((0, 2, 2)), torch.zeros(0), torch.zeros((0, 3)),
                       torch.zeros(0), torch.zeros(0, dtype=torch.long))
        for fn in (rasterize, rasterize_oracle):
            img = fn(empty, cam, BG).image
            assert torch.equal(img, torch.tensor(BG, dtype=img.dtype).expand(16, 16, 3))

    def test_zero_size(self):
        cam = pinhole(16)
        cam.width = 0
        with pytest.raises(ValueError):
            rasterize(one_splat(), cam, BG)

    def test_single_splat_center(self):
        cam = pinhole(64)
        img = rasterize(one_splat(opacity=0.8), cam, BG).image
        expected = 0.8 * torch.tensor([0.9, 0.1, 0.3], dtype=torch.float64) + 0.2 * torch.tensor(BG, dtype=torch.float64)
        assert torch.allclose(img[32, 32], expected, rtol=1e-14)

    def test_alpha_clamp(self):
        img = rasterize(one_splat(opacity=1.0), pinhole(64), BG).image
        expected = 0.99 * torch.tensor([0.9, 0.1, 0.3], dtype=torch.float64) + 0.01 * torch.tensor(BG, dtype=torch.float64)
        assert torch.allclose(img[32, 32], expected, rtol=1e-14)

    def test_single_splat_matches_oracle(self):
        # same accumulation order; the compiled kernel and torch use different exp()
        # implementations, so agreement is to the last ulp rather than bitwise
        s, cam = one_splat(mean=(20.3, 41.7), var=30.0), pinhole(64)
        a, b = rasterize(s, cam, BG).image, rasterize_oracle(s, cam, BG).image
        assert (a - b).abs().max().item() <= 2.3e-16

    def test_order_independent(self):
        a = one_splat(mean=(30.0, 30.0), var=25.0, color=(1.0, 0.0, 0.0), depth=2.0, idx=0)
        b = one_splat(mean=(34.0, 33.0), var=25.0, color=(0.0, 1.0, 0.0), depth=3.0, idx=1)
        cam = pinhole(64)
        assert torch.equal(rasterize(cat(a, b), cam, BG).image, rasterize(cat(b, a), cam, BG).image)

    def test_depth_tie_broken_by_id(self):
        a = one_splat(mean=(32.0, 32.0), color=(1.0, 0.0, 0.0), depth=2.0, idx=5)
        b = one_splat(mean=(32.0, 32.0), color=(0.0, 0.0, 1.0), depth=2.0, idx=2)
        img = rasterize(cat(a, b), pinhole(64), BG).image
        # id 2 is in front, so blue dominates
        assert img[31, 31, 2] > img[31, 31, 0]
        assert torch.equal(img, rasterize(cat(b, a), pinhole(64), BG).image)

    def test_convex_bound(self):
        gen = torch.Generator().manual_seed(3)
        s = random_splats(gen, 200, dtype=torch.float64)
        img = rasterize(s, pinhole(64), BG).image
        assert img.min() >= 0.0
        assert img.max() <= max(s.color.max().item(), max(BG)) + 1e-12

    def test_depth_map_single_splat(self):
        out = rasterize(one_splat(depth=3.5), pinhole(64), BG)
        assert out.depth[32, 32].item() == pytest.approx(3.5, rel=1e-12)

    def test_oracle_equivalence_float32(self):
        gen = torch.Generator().manual_seed(0)
        cam = pinhole(64)
        worst = 0.0
        for n in (1, 7, 60, 250, 500):
            s = random_splats(gen, n)
            a, b = rasterize(s, cam, BG), rasterize_oracle(s, cam, BG)
            assert a.image.dtype == torch.float32
            worst = max(worst, (a.image - b.image).abs().max().item())
        assert worst <= 1e-5

    def test_early_termination(self):
        # a stack of near-opaque splats saturates the transmittance; later ones are skipped
        layers = [one_splat(mean=(16.5, 16.5), var=400.0, opacity=0.99, depth=1.0 + i, idx=i)
                  for i in range(4)]
        cam = pinhole(32)
        out = rasterize(cat(*layers), cam, BG)
        assert torch.allclose(out.image, rasterize_oracle(cat(*layers), cam, BG).image, atol=1e-12)
        assert out.alpha[16, 16].item() > 1 - 1e-4


def test_tiles_smaller_than_image_agree():
    gen = torch.Generator().manual_seed(8)
    s = random_splats(gen, 120, size=40, dtype=torch.float64)
    cam = pinhole(40)
    a = rasterize(s, cam, BG, tile=8).image
    b = rasterize(s, cam, BG, tile=16).image
    assert torch.allclose(a, b, rtol=0, atol=1e-13)
    assert math.isfinite(a.sum().item())
