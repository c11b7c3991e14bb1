import math

import numpy as np
import pytest
import torch

from _scenes import lifespan_model, two_primitive_schedule
from sarogs.optimizer import (ADAM_EPS, BETAS, PROFILES, ScheduleConfig, TrainState,
                              adam_step, adaptive_schedule, densify_and_prune, lr_decay,
                              lr_multipliers, opacity_reset, profile, refresh_integrals,
                              scene_extent)
from sarogs.temporal import TemporalState, temporal_integral, total_mass


class TestAdaptiveSchedule:
    def test_identity(self):
        k, lr = adaptive_schedule(torch.tensor([0.3], dtype=torch.float64), 0.3, 1e-3, 2e-4)
        assert k.item() == 1e-3 and lr.item() == 2e-4

    def test_half(self):
        k, lr = adaptive_schedule(torch.tensor([0.15], dtype=torch.float64), 0.3, 1e-3, 2e-4)
        assert k.item() == pytest.approx(5e-4, rel=1e-15)
        assert lr.item() == pytest.approx(4e-4, rel=1e-15)

    def test_clamp(self):
        _, lr = adaptive_schedule(torch.tensor([1e-30, 0.0]), 0.3, 1e-3, 2e-4)
        assert torch.equal(lr, torch.full((2,), 100 * 2e-4, dtype=torch.float64))

    def test_bounds(self):
        integral = torch.rand(100, generator=torch.Generator().manual_seed(0), dtype=torch.float64) + 1e-3
        k, lr = adaptive_schedule(integral, integral.max(), 1e-3, 1.0)
        assert torch.all(k <= 1e-3) and torch.all(lr >= 1.0)

    def test_invalid(self):
        with pytest.raises(ValueError):
            adaptive_schedule(torch.tensor([0.1]), 0.0, 1e-3, 1.0)

    def test_multiplier_decreasing_in_sigma(self):
        sigma = torch.from_numpy(np.geomspace(0.01, 20, 60))
        integral = temporal_integral(TemporalState(torch.full_like(sigma, 0.4), sigma))
        _, mult = adaptive_schedule(integral, integral.max(), 1.0, 1.0, max_multiplier=1e9)
        assert torch.all(mult[1:] < mult[:-1])

    def test_two_primitive_scenario(self):
        r = two_primitive_schedule()
        assert r["lr"][0] > r["lr"][1]
        assert r["kappa"][0] < r["kappa"][1]
        assert torch.allclose(r["kappa"], r["expected_kappa"], rtol=1e-12, atol=0)
        assert torch.allclose(r["lr"], r["expected_lr"], rtol=1e-12, atol=0)
        # equal gradients between the thresholds: only the short-lived primitive densifies
        assert r["event"]["cloned"] == 1 and r["event"]["count"] == 3


class TestRefresh:
    def test_identical_primitives(self):
        model = lifespan_model(n=5, sigma=0.3)
        with torch.no_grad():
            model.cloud.raw_position[:] = model.cloud.raw_position[0]
            model.cloud.raw_scale[:] = model.cloud.raw_scale[0]
        state = TrainState()
        refresh_integrals(model, state)
        k, _ = adaptive_schedule(state.integrals, state.integral_max, 1e-3, 1.0)
        assert torch.allclose(k, torch.full((5,), 1e-3, dtype=torch.float64), rtol=1e-12)

    def test_matches_formula(self):
        model = lifespan_model(n=20, sigma=0.2)
        state = TrainState()
        refresh_integrals(model, state)
        tau = model.cloud.raw_position[:, 3].double()
        expected = temporal_integral(TemporalState(tau, torch.full_like(tau, 0.2)))
        assert torch.allclose(state.integrals, expected, rtol=1e-6)
        assert torch.all(state.integrals <= total_mass(TemporalState(tau, torch.full_like(tau, 0.2))) * (1 + 1e-6))
        assert lr_multipliers(state).argmax() == state.integrals.argmin()


class TestAdam:
    def test_zero_gradient(self):
        p = torch.nn.Parameter(torch.tensor([1.5, -2.0], dtype=torch.float64))
        state = TrainState()
        for _ in range(10):
            p.grad = torch.zeros_like(p)
            adam_step({"w": p}, state, {"w": 0.1})
        assert torch.equal(p.detach(), torch.tensor([1.5, -2.0], dtype=torch.float64))

    def test_first_step_is_lr_sign(self):
        p = torch.nn.Parameter(torch.tensor([1.0, 1.0], dtype=torch.float64))
        p.grad = torch.tensor([3.0, -0.5], dtype=torch.float64)
        adam_step({"w": p}, TrainState(), {"w": 0.01})
        assert torch.allclose(p.detach(), torch.tensor([0.99, 1.01], dtype=torch.float64), rtol=1e-12)

    def test_reference_update(self):
        # two steps against a hand-written Adam
        g = [np.array([0.3, -1.2]), np.array([-0.7, 0.4])]
        x = np.array([0.5, 0.25])
        m = v = np.zeros(2)
        for t, gt in enumerate(g, 1):
            m = BETAS[0] * m + (1 - BETAS[0]) * gt
            v = BETAS[1] * v + (1 - BETAS[1]) * gt * gt
            x = x - 0.05 * (m / (1 - BETAS[0] ** t)) / (np.sqrt(v / (1 - BETAS[1] ** t)) + ADAM_EPS)
        p = torch.nn.Parameter(torch.tensor([0.5, 0.25], dtype=torch.float64))
        state = TrainState()
        for gt in g:
            p.grad = torch.from_numpy(gt)
            adam_step({"w": p}, state, {"w": 0.05})
        assert np.allclose(p.detach().numpy(), x, rtol=1e-14)

    def test_quadratic_convergence(self):
        p = torch.nn.Parameter(torch.tensor([3.0], dtype=torch.float64))
        state = TrainState()
        for _ in range(500):
            p.grad = 2 * (p.detach() - 1.25)
            adam_step({"w": p}, state, {"w": 0.05})
        assert abs(p.item() - 1.25) < 1e-6

    def test_multiplier(self):
        p = torch.nn.Parameter(torch.zeros((2, 3), dtype=torch.float64))
        p.grad = torch.ones_like(p)
        adam_step({"raw_scale": p}, TrainState(), {"raw_scale": 0.01},
                  {"raw_scale": torch.tensor([1.0, 3.0], dtype=torch.float64)})
        assert torch.allclose(p.detach()[:, 0], torch.tensor([-0.01, -0.03], dtype=torch.float64))

    def test_sh_multiplier_dc_only(self):
        p = torch.nn.Parameter(torch.zeros((1, 3, 4), dtype=torch.float64))
        p.grad = torch.ones_like(p)
        adam_step({"sh_coeffs": p}, TrainState(), {"sh_coeffs": 0.01},
                  {"sh_coeffs": torch.tensor([5.0], dtype=torch.float64)})
        assert torch.allclose(p.detach()[0, :, 0], torch.full((3,), -0.05, dtype=torch.float64))
        assert torch.allclose(p.detach()[0, :, 1:], torch.full((3, 3), -0.01, dtype=torch.float64))

    def test_deterministic(self):
        def run():
            p = torch.nn.Parameter(torch.tensor([0.1, 0.2, 0.3], dtype=torch.float64))
            state = TrainState()
            for i in range(20):
                p.grad = torch.sin(p.detach() * (i + 1))
                adam_step({"w": p}, state, {"w": 0.01})
            return p.detach()
        assert torch.equal(run(), run())


class TestLrDecay:
    def test_endpoints(self):
        assert lr_decay(0, 3.2e-3, 3.2e-6, 1000) == pytest.approx(3.2e-3, rel=1e-15)
        assert lr_decay(1000, 3.2e-3, 3.2e-6, 1000) == pytest.approx(3.2e-6, rel=1e-15)

    def test_midpoint_geometric_mean(self):
        assert lr_decay(500, 1.6e-4, 1.6e-7, 1000) == pytest.approx(math.sqrt(1.6e-4 * 1.6e-7), rel=1e-14)


class TestDensify:
    def _setup(self, n=6, scale=1e-3, grads=None):
        model = lifespan_model(n=n, seed=3)
        with torch.no_grad():
            model.cloud.raw_scale.fill_(math.log(scale))
            model.cloud.raw_opacity.fill_(1.0)
        state = TrainState()
        state.reset_accumulators(n)
        if grads is not None:
            state.grad_accum[:] = torch.as_tensor(grads, dtype=torch.float64)
            state.grad_count[:] = 1
        return model, state, ScheduleConfig(iterations=10, warmup=0)

    def test_zero_gradients(self):
        model, state, cfg = self._setup()
        before = model.cloud.raw_position.detach().clone()
        ev = densify_and_prune(model, state, 1e-3, cfg)
        assert ev == {"cloned": 0, "split": 0, "pruned": 0, "count": 6}
        assert torch.equal(model.cloud.raw_position.detach(), before)

    def test_zero_gradients_still_prune(self):
        model, state, cfg = self._setup()
        with torch.no_grad():
            model.cloud.raw_opacity[2] = -8.0
        assert densify_and_prune(model, state, 1e-3, cfg)["pruned"] == 1
        assert len(model.cloud) == 5

    def test_clone_small(self):
        model, state, cfg = self._setup(grads=[0, 0, 5e-3, 0, 0, 0])
        src = model.cloud.primitive(2)
        ev = densify_and_prune(model, state, 1e-3, cfg)
        assert ev["cloned"] == 1 and ev["count"] == 7
        copy = model.cloud.primitive(6)
        for name in ("raw_position", "raw_scale", "raw_rotation", "raw_opacity", "sh_coeffs"):
            assert torch.equal(getattr(copy, name), getattr(src, name))

    def test_split_large(self):
        model, state, cfg = self._setup(scale=0.2, grads=[0, 5e-3, 0, 0, 0, 0])
        parent = model.cloud.primitive(1)
        ev = densify_and_prune(model, state, 1e-3, cfg, torch.Generator().manual_seed(0))
        assert ev["split"] == 1 and ev["count"] == 7
        kids = [model.cloud.primitive(i) for i in (5, 6)]
        for k in kids:
            assert torch.allclose(torch.exp(k.raw_scale), torch.exp(parent.raw_scale) / 1.6, rtol=1e-6)
            assert k.raw_position[3] == parent.raw_position[3]
        assert not torch.equal(kids[0].raw_position, kids[1].raw_position)

    def test_size_threshold_is_one_percent_of_extent(self):
        extent = scene_extent([[-1.0] * 3, [1.0] * 3])
        assert extent == pytest.approx(2 * math.sqrt(3))
        below, _, cfg = self._setup(scale=0.0099 * extent, grads=[1.0] + [0] * 5)
        assert densify_and_prune(below, _, 1e-3, cfg)["cloned"] == 1
        above, st, cfg = self._setup(scale=0.0101 * extent, grads=[1.0] + [0] * 5)
        assert densify_and_prune(above, st, 1e-3, cfg)["split"] == 1

    def test_cap(self):
        model, state, cfg = self._setup(grads=[1.0] * 6)
        cfg.max_primitives = 8
        ev = densify_and_prune(model, state, 1e-3, cfg)
        assert ev["count"] == 8

    def test_never_empty(self):
        model, state, cfg = self._setup()
        with torch.no_grad():
            model.cloud.raw_opacity.fill_(-20.0)
        densify_and_prune(model, state, 1e-3, cfg)
        assert len(model.cloud) == 1

    def test_fresh_moments(self):
        model, state, cfg = self._setup(grads=[0, 0, 5e-3, 0, 0, 0])
        state.moments["raw_scale"] = (torch.ones((6, 3)), torch.ones((6, 3)))
        densify_and_prune(model, state, 1e-3, cfg)
        m, _ = state.moments["raw_scale"]
        assert m.shape == (7, 3) and torch.all(m[:6] == 1) and torch.all(m[6] == 0)


class TestOpacityReset:
    def test_examples(self):
        model = lifespan_model(n=3)
        with torch.no_grad():
            model.cloud.raw_opacity[:] = torch.logit(torch.tensor([0.9, 0.005, 0.01]))
        opacity_reset(model)
        op = torch.sigmoid(model.cloud.raw_opacity.detach())
        assert op[0].item() == pytest.approx(0.01, rel=1e-5)
        assert op[1].item() == pytest.approx(0.005, rel=1e-5)
        once = model.cloud.raw_opacity.detach().clone()
        opacity_reset(model)
        assert torch.equal(model.cloud.raw_opacity.detach(), once)

    def test_clears_moments(self):
        model = lifespan_model(n=3)
        state = TrainState()
        state.moments["raw_opacity"] = (torch.ones(3), torch.ones(3))
        opacity_reset(model, state)
        assert torch.all(state.moments["raw_opacity"][0] == 0)


class TestProfiles:
    def test_dnerf(self):
        cfg = profile("dnerf")
        assert (cfg.iterations, cfg.warmup, cfg.opacity_reset_every, cfg.init, cfg.init_count) == \
            (20000, 1000, 2000, "random", 10000)
        assert cfg.batch_size == 4 and cfg.refresh_every == 50
        assert cfg.lr_field == (3.2e-3, 3.2e-6) and cfg.lr_decoder == (1.6e-4, 1.6e-7)

    def test_multiview(self):
        cfg = profile("multiview")
        assert cfg.warmup == 0 and cfg.opacity_reset_every == 3000 and cfg.init == "points"

    def test_scaled(self):
        cfg = profile("dnerf", iterations=5000)
        assert (cfg.warmup, cfg.opacity_reset_every, cfg.densify_from, cfg.densify_until) == (250, 500, 125, 3750)

    def test_unknown(self):
        with pytest.raises(ValueError, match="unknown profile"):
            profile("nope")
        assert set(PROFILES) == {"dnerf", "multiview"}

    def test_validation(self):
        with pytest.raises(ValueError):
            ScheduleConfig(refresh_every=0)
        with pytest.raises(ValueError):
            ScheduleConfig(kappa_base=0.0)


@pytest.fixture(scope="module")
def tiny_scene():
    from sarogs.scene_io import generate_teacher_scene
    ds, _ = generate_teacher_scene(4, n_primitives=30, n_frames=4, n_cameras=3, resolution=20)
    return ds


def tiny_cfg(iterations, **kw):
    base = dict(iterations=iterations, warmup=10, densify_from=20, densify_until=120, densify_every=40,
                opacity_reset_every=1000, refresh_every=10, init="random", init_count=150,
                batch_size=2, log_every=50)
    return ScheduleConfig(**{**base, **kw})


class TestTrain:
    def test_zero_iterations_is_init(self, tiny_scene):
        from sarogs.optimizer import initial_model, train
        r = train(tiny_scene, tiny_cfg(0), seed=1)
        ref = initial_model(tiny_scene, tiny_cfg(0), seed=1)
        for (ka, a), (kb, b) in zip(r.model.state_dict().items(), ref.state_dict().items()):
            assert ka == kb and torch.equal(a, b)

    def test_loss_decreases_and_deterministic(self, tiny_scene):
        from sarogs.optimizer import train
        from sarogs.scene_io import checkpoint_bytes
        runs = [train(tiny_scene, tiny_cfg(200), seed=2) for _ in range(2)]
        log = runs[0].log
        assert log[-1]["loss"] < 0.6 * log[0]["loss"]
        assert log[-1]["psnr_heldout"] > log[0]["psnr_heldout"]
        assert checkpoint_bytes(runs[0].model) == checkpoint_bytes(runs[1].model)

    def test_nan_aborts(self, tiny_scene):
        from sarogs.optimizer import TrainingAborted, initial_model, train
        model = initial_model(tiny_scene, tiny_cfg(5), seed=0)
        with torch.no_grad():
            model.cloud.sh_coeffs[:] = float("nan")
        with pytest.raises(TrainingAborted, match="non-finite loss at iteration 0"):
            train(tiny_scene, tiny_cfg(5), model=model)

    def test_no_training_frames(self, tiny_scene):
        from sarogs.optimizer import train
        from sarogs.scene_io import Dataset
        test_only = Dataset(tiny_scene.intrinsics, tiny_scene.split("test"), tiny_scene.bbox)
        with pytest.raises(ValueError, match="no training frames"):
            train(test_only, tiny_cfg(1))
