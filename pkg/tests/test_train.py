import logging

import numpy as np
import pytest

from geodiff.data import gen_scene
from geodiff.diffusion import (
    NoiseKind, NoiseSpec, build_schedule, forward_diffuse, reconstruct_z0, run_inference,
    select_timesteps, v_target,
)
from geodiff.errors import DomainError, NonFiniteLoss
from geodiff.model import PARAM_NAMES, forward, init_params
from geodiff.train import (
    Batch, LossKind, TimestepPolicy, TrainConfig, batch_loss, derive_seed, diffusion_config,
    e2e_config, evaluate_predictions, finetune_e2e, predict, predict_ensemble, prepare,
    train_diffusion,
)

SCHED = build_schedule()
ZEROS = NoiseSpec(NoiseKind.ZEROS)


@pytest.fixture(scope="module")
def depth_data():
    return prepare([gen_scene(100 + i, 8, 8) for i in range(6)])


@pytest.fixture(scope="module")
def normal_data():
    return prepare([gen_scene(200 + i, 8, 8) for i in range(4)], task="normals")


def _same_params(a, b):
    for k in PARAM_NAMES:
        np.testing.assert_array_equal(a.tensors[k], b.tensors[k])


class TestConfig:
    def test_mode_coupling(self):
        with pytest.raises(DomainError):
            TrainConfig(timestep_policy=TimestepPolicy.FIXED_T, loss=LossKind.V_MATCHING)
        with pytest.raises(DomainError):
            TrainConfig(timestep_policy=TimestepPolicy.UNIFORM, loss=LossKind.AFFINE_DEPTH)
        assert e2e_config().noise.kind is NoiseKind.ZEROS

    def test_bad_values(self):
        with pytest.raises(DomainError):
            diffusion_config(batch_size=0)
        with pytest.raises(DomainError):
            diffusion_config(learning_rate=0.0)

    def test_warmup_then_decay(self):
        cfg = diffusion_config(learning_rate=1.0, warmup=4, lr_decay=0.5)
        assert [cfg.lr_at(s) for s in range(7)] == [0.25, 0.5, 0.75, 1.0, 1.0, 0.5, 0.25]

    def test_wrong_trainer(self, depth_data):
        with pytest.raises(DomainError):
            train_diffusion(depth_data, e2e_config(iterations=1))
        with pytest.raises(DomainError):
            finetune_e2e(None, depth_data, diffusion_config(iterations=1))
        with pytest.raises(DomainError):
            finetune_e2e(None, depth_data, e2e_config(loss=LossKind.ANGULAR_NORMALS, iterations=1))


class TestDiffusionTraining:
    def test_zero_iterations_is_init(self, depth_data):
        r = train_diffusion(depth_data, diffusion_config(iterations=0, seed=3), width=16, embed_dim=8)
        _same_params(r.params, init_params(8, 8, 1, 16, 8, seed=3))
        assert r.losses == []

    def test_bit_reproducible(self, depth_data):
        cfg = diffusion_config(iterations=30, batch_size=4, seed=1)
        a = train_diffusion(depth_data, cfg, width=16, embed_dim=8)
        b = train_diffusion(depth_data, cfg, width=16, embed_dim=8)
        _same_params(a.params, b.params)
        assert a.losses == b.losses

    def test_seed_matters(self, depth_data):
        a = train_diffusion(depth_data, diffusion_config(iterations=5, batch_size=4, seed=1), width=16, embed_dim=8)
        b = train_diffusion(depth_data, diffusion_config(iterations=5, batch_size=4, seed=2), width=16, embed_dim=8)
        assert a.losses != b.losses

    def test_overfit_single_sample(self):
        # zero noise makes the v target a deterministic function of t, so a
        # single scene can be memorised
        data = prepare([gen_scene(1, 8, 8)])
        cfg = diffusion_config(iterations=2000, batch_size=16, noise=ZEROS, seed=0)
        init = init_params(8, 8, 1, 64, 16, seed=0)
        r = train_diffusion(data, cfg, params=init)
        batch = self._frozen_batch(data, np.zeros((64, 8, 8)))
        assert batch_loss(r.params, batch, "v_matching", SCHED) < 0.01 * batch_loss(init, batch, "v_matching", SCHED)

    def test_gaussian_loss_decreases(self):
        data = prepare([gen_scene(1, 8, 8)])
        init = init_params(8, 8, 1, 64, 16, seed=0)
        r = train_diffusion(data, diffusion_config(iterations=2000, batch_size=16, seed=0), params=init)
        batch = self._frozen_batch(data, np.random.default_rng(5).standard_normal((64, 8, 8)))
        assert batch_loss(r.params, batch, "v_matching", SCHED) < 0.5 * batch_loss(init, batch, "v_matching", SCHED)

    @staticmethod
    def _frozen_batch(data, eps):
        B = len(eps)
        t = np.random.default_rng(6).integers(1, 1001, B)
        z0 = np.repeat(data.target, B, 0)
        return Batch(np.repeat(data.x, B, 0), forward_diffuse(z0, eps, t, SCHED), t,
                     v_target(z0, eps, t, SCHED), np.repeat(data.mask, B, 0))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_guard(self, depth_data):
        with pytest.raises(NonFiniteLoss):
            train_diffusion(depth_data, diffusion_config(iterations=50, batch_size=4, learning_rate=1e200,
                                                         warmup=0), width=16, embed_dim=8)


class TestE2E:
    def test_bit_reproducible(self, depth_data):
        cfg = e2e_config(iterations=20, batch_size=3, seed=4)
        a = finetune_e2e(None, depth_data, cfg, width=16, embed_dim=8)
        b = finetune_e2e(None, depth_data, cfg, width=16, embed_dim=8)
        _same_params(a.params, b.params)

    def test_loss_decreases(self, depth_data, normal_data):
        r = finetune_e2e(None, depth_data, e2e_config(iterations=300, batch_size=6), width=32, embed_dim=8)
        assert np.mean(r.losses[-20:]) < 0.5 * np.mean(r.losses[:5])
        r = finetune_e2e(None, normal_data, e2e_config(loss=LossKind.ANGULAR_NORMALS, iterations=300, batch_size=4),
                         width=32, embed_dim=8)
        assert np.mean(r.losses[-20:]) < 0.5 * np.mean(r.losses[:5])

    def test_input_params_untouched(self, depth_data):
        p = init_params(8, 8, 1, 16, 8, seed=0)
        before = p.copy()
        finetune_e2e(p, depth_data, e2e_config(iterations=5, batch_size=2), width=16, embed_dim=8)
        _same_params(p, before)

    def test_forward_matches_single_step_inference(self, depth_data):
        p = init_params(8, 8, 1, 16, 8, seed=7)
        plan = select_timesteps(1000, 1, "trailing")
        for i in range(len(depth_data)):
            z_T = np.zeros((8, 8))
            v = forward(p, z_T, depth_data.x[i], 1000)
            z0 = reconstruct_z0(z_T, v, 1000, SCHED)
            np.testing.assert_array_equal(z0, run_inference(p, depth_data.x[i], plan, ZEROS, SCHED))

    def test_fixed_t_matches_vmatching_at_T(self, depth_data):
        # at t = T the z0 error and the v error differ only by the factor 1 - alpha_bar_T
        rng = np.random.default_rng(1)
        p = init_params(8, 8, 1, 16, 8, seed=1)
        B = len(depth_data)
        eps = rng.standard_normal((B, 8, 8))
        t = np.full(B, 1000)
        z0 = depth_data.target
        z_T = forward_diffuse(z0, eps, t, SCHED)
        vb = Batch(depth_data.x, z_T, t, v_target(z0, eps, t, SCHED), depth_data.mask)
        v_loss = batch_loss(p, vb, LossKind.V_MATCHING, SCHED)
        z0_hat = reconstruct_z0(z_T, forward(p, z_T, depth_data.x, t), t, SCHED)
        m = depth_data.mask
        per = [np.mean((z0_hat[b] - z0[b])[m[b]] ** 2) for b in range(B)]
        assert v_loss == pytest.approx(np.mean(per) / (1.0 - SCHED.alpha_bar(1000)), rel=1e-10)

    def test_degenerate_samples_counted(self, depth_data, caplog):
        p = init_params(8, 8, 1, 16, 8, seed=0, zero_output=True)
        with caplog.at_level(logging.WARNING):
            r = finetune_e2e(p, depth_data, e2e_config(iterations=1, batch_size=3), width=16, embed_dim=8)
        assert r.skipped == 3
        assert "skipped 3" in caplog.text


class TestPrediction:
    def test_zeros_bit_deterministic(self, depth_data):
        p = init_params(8, 8, 1, 16, 8, seed=2)
        plan = select_timesteps(1000, 4, "trailing")
        np.testing.assert_array_equal(predict(p, depth_data, plan, ZEROS, SCHED),
                                      predict(p, depth_data, plan, ZEROS, SCHED))

    def test_ensemble_of_one_is_identity(self, depth_data):
        p = init_params(8, 8, 1, 16, 8, seed=2)
        plan = select_timesteps(1000, 2, "leading")
        noise = NoiseSpec(NoiseKind.GAUSSIAN, seed=9)
        np.testing.assert_array_equal(predict_ensemble(p, depth_data, plan, noise, SCHED, 1),
                                      predict(p, depth_data, plan, noise, SCHED))

    def test_members_draw_distinct_noise(self):
        assert derive_seed(0, 1, 0) != derive_seed(0, 1, 1) != derive_seed(0, 2, 1)

    def test_normals_ensemble_unit(self, normal_data):
        p = init_params(8, 8, 3, 16, 8, seed=2)
        out = predict_ensemble(p, normal_data, select_timesteps(1000, 1, "trailing"),
                               NoiseSpec(NoiseKind.GAUSSIAN), SCHED, 3)
        np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0)
        reports = evaluate_predictions(out, normal_data)
        assert all(0 <= r.mean_angular_deg <= 180 for r in reports)

    def test_evaluate_perfect_depth(self, depth_data):
        reports = evaluate_predictions(depth_data.depth_raw, depth_data)
        assert all(r.absrel == pytest.approx(0, abs=1e-12) and r.delta1 == 100.0 for r in reports)
