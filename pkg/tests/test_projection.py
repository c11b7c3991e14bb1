import math

import pytest
import torch

from _scenes import bake_timing, lifespan_model, ring_camera
from sarogs.gradients import micro_camera, micro_model
from sarogs.model import SaroModel
from sarogs.projection import (StaleBakeError, bake, primitive_features, project_to_3d, render,
                               render_from_baked)
from sarogs.temporal import TemporalState, state_function

BG = (0.1, 0.1, 0.1)


def zero_decoder_model():
    model = micro_model(4, seed=2)
    fresh = SaroModel(model.cloud, model.config).double()
    return fresh


class TestProjectTo3D:
    def test_identity_at_tau(self):
        model = zero_decoder_model()
        c = model.cloud
        f, sigma = primitive_features(model)
        for i in range(len(c)):
            tau = c.raw_position[i, 3].item()
            g3 = project_to_3d(c, f, sigma, tau, model.decoder)
            assert torch.equal(g3.position[i], c.raw_position[i, :3])
            assert torch.allclose(g3.scale[i], torch.exp(c.raw_scale[i]), rtol=1e-15)
            assert torch.allclose(g3.rotation[i], c.raw_rotation[i] / c.raw_rotation[i].norm(), rtol=1e-15)
            assert g3.opacity[i].item() == pytest.approx(torch.sigmoid(c.raw_opacity[i]).item(), rel=1e-15)
            assert torch.equal(g3.sh_coeffs[i], c.sh_coeffs[i])

    def test_one_lifespan_away(self):
        model = zero_decoder_model()
        c = model.cloud
        f, sigma = primitive_features(model)
        t0 = c.raw_position[0, 3].item() + sigma[0].item()
        g3 = project_to_3d(c, f, sigma, t0, model.decoder, k=4.0)
        expected = torch.sigmoid(c.raw_opacity[0]).item() * math.exp(-4)
        assert g3.opacity[0].item() == pytest.approx(expected, rel=1e-12)

    def test_rotation_residual_renormalized(self):
        model = zero_decoder_model()
        with torch.no_grad():
            head = model.decoder.covariance_head.layers[-1]
            head.bias[3:] = torch.tensor([-0.5, 0.2, 0.1, 0.3], dtype=torch.float64)
        f, sigma = primitive_features(model)
        g3 = project_to_3d(model.cloud, f, sigma, 0.4, model.decoder)
        assert torch.allclose(g3.rotation.norm(dim=-1), torch.ones(4, dtype=torch.float64), atol=1e-12)

    def test_static_mode(self):
        model = micro_model(3)
        c = model.cloud
        f, sigma = primitive_features(model)
        g3 = project_to_3d(c, f, sigma, 0.9, model.decoder, static=True)
        assert torch.equal(g3.opacity, torch.sigmoid(c.raw_opacity))
        at_tau = [project_to_3d(c, f, sigma, c.raw_position[i, 3].item(), model.decoder).position[i]
                  for i in range(3)]
        assert torch.allclose(g3.position, torch.stack(at_tau), rtol=0, atol=1e-15)


class TestBaking:
    def test_threshold_zero_bitwise(self):
        model = micro_model(3)
        cam = micro_camera()
        baked = bake(model)
        for t in (0.0, 0.3, 0.55, 1.0):
            a = render(model, cam, t, BG).image
            b = render_from_baked(baked, model, t, cam, BG, threshold=0.0).image
            assert torch.equal(a, b)

    def test_all_alive_identical(self):
        model = micro_model(3)
        with torch.no_grad():
            model.decoder.lifespan.layers[-1].bias.fill_(50.0)  # sigma ~ 50
        cam = micro_camera()
        baked = bake(model)
        assert torch.all(state_function(TemporalState(model.cloud.raw_position[:, 3], baked.lifespan), 0.5) >= 0.5)
        assert torch.equal(render(model, cam, 0.5, BG).image,
                           render_from_baked(baked, model, 0.5, cam, BG).image)

    def test_stale_bake(self):
        model = micro_model(3)
        baked = bake(model)
        model.bump_version()
        with pytest.raises(StaleBakeError, match="stale"):
            render_from_baked(baked, model, 0.5, micro_camera())

    def test_expired_scene(self):
        model = lifespan_model(n=1500, seed=1, sigma=0.05)
        cam = ring_camera(48)
        baked = bake(model)
        t0 = 0.5
        gamma = state_function(TemporalState(model.cloud.raw_position[:, 3].detach(), baked.lifespan), t0)
        assert (gamma < 1e-3).float().mean() >= 0.5
        with torch.no_grad():
            a = render(model, cam, t0, BG)
        b = render_from_baked(baked, model, t0, cam, BG)
        assert (a.image - b.image).abs().max().item() <= 1e-3
        assert b.blended < a.blended


def test_baked_render_is_faster():
    model = lifespan_model(n=4000, seed=2, sigma=0.05)
    unbaked, baked = bake_timing(model, ring_camera(64), 0.5)
    assert baked <= 0.7 * unbaked
