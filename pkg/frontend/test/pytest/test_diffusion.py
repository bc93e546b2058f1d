# Copyright 2024 Xanadu Quantum Technologies Inc.

# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at

#     http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Unit tests for noise schedules, the forward process and the diffusion model."""

import dataclasses

import numpy as np
import pytest

from dam import diffusion
from dam.diffusion import cosine_schedule, forward_marginal, forward_step, linear_schedule
from dam.utils.exceptions import CheckpointError, InvalidInputError, NumericalError


class TestSchedules:
    """Cosine and linear variance schedules."""

    def test_cosine(self):
        """alpha_bar starts at one, decreases and matches the product of 1 - beta."""
        schedule = cosine_schedule(250)
        assert schedule.n_timesteps == 250
        assert schedule.alpha_bar[0] == 1.0
        assert schedule.beta[0] == diffusion.BETA_FLOOR
        assert np.all(np.diff(schedule.alpha_bar) < 0)
        assert np.all((schedule.beta > 0) & (schedule.beta < 1))
        assert np.allclose(np.cumprod(schedule.alpha), schedule.alpha_bar, rtol=1e-6)

    def test_linear(self):
        """Linear betas span the configured range."""
        schedule = linear_schedule(250)
        assert np.isclose(schedule.beta[0], 1e-4) and np.isclose(schedule.beta[-1], 2e-2)
        assert np.allclose(np.cumprod(1.0 - schedule.beta), schedule.alpha_bar)
        assert 0.05 < schedule.alpha_bar[-1] < 0.1

    @pytest.mark.parametrize(
        "beta, alpha_bar",
        [
            ([0.1, 0.2], [0.9, 0.95]),
            ([0.0, 0.2], [1.0, 0.8]),
            ([0.1, 0.2], [0.9, 0.72]),
        ],
    )
    def test_invalid(self, beta, alpha_bar):
        """Rising alpha_bar, zero betas and a low first alpha_bar are refused."""
        with pytest.raises(InvalidInputError):
            diffusion.NoiseSchedule(np.array(beta), np.array(alpha_bar))

    def test_too_short(self):
        """A diffusion needs at least two steps."""
        with pytest.raises(InvalidInputError):
            cosine_schedule(1)


class TestForwardProcess:
    """Closed-form marginal and single forward kernels."""

    def test_level_zero_is_clean(self):
        """With alpha_bar = 1 the marginal returns the input."""
        x0 = np.random.default_rng(0).normal(size=(10, 3))
        noise = np.random.default_rng(1).normal(size=(10, 3))
        assert np.allclose(forward_marginal(x0, 0, cosine_schedule(50), noise), x0)

    def test_marginal_moments(self, tol_stochastic):
        """Mean and spread follow sqrt(alpha_bar) x0 and sqrt(1 - alpha_bar)."""
        schedule = cosine_schedule(50)
        x0 = np.ones((20000, 3))
        noise = np.random.default_rng(2).normal(size=x0.shape)
        a = schedule.alpha_bar[30]
        x = forward_marginal(x0, 30, schedule, noise)
        assert np.isclose(x.mean(), np.sqrt(a), atol=tol_stochastic)
        assert np.isclose(x.std(), np.sqrt(1.0 - a), rtol=tol_stochastic)

    def test_noiseless_composition(self):
        """Chaining kernels without noise scales by the square root of alpha_bar."""
        schedule = linear_schedule(40)
        x = np.random.default_rng(3).normal(size=(5, 3))
        state = x
        for level in range(25):
            state = forward_step(state, level, schedule, np.zeros_like(x))
        assert np.allclose(state, np.sqrt(schedule.alpha_bar[24]) * x)

    def test_bad_level_and_noise(self):
        """Levels outside [0, T) and mismatched noise are refused."""
        schedule = cosine_schedule(10)
        with pytest.raises(InvalidInputError, match="outside"):
            forward_marginal(np.zeros((4, 3)), 10, schedule, np.zeros((4, 3)))
        with pytest.raises(InvalidInputError, match="Noise shape"):
            forward_step(np.zeros((4, 3)), 2, schedule, np.zeros((3, 3)))


class TestReverseStep:
    """The DDPM reverse mean and variance."""

    def test_posterior_mean_without_noise(self):
        """Zero predicted noise only rescales by 1 / sqrt(1 - beta)."""
        x = np.arange(6.0).reshape(2, 3)
        mu = diffusion.posterior_mean(x, np.zeros_like(x), 0.19, 0.5)
        assert np.allclose(mu, x / 0.9)

    def test_posterior_mean_finite_at_clean_level(self):
        """alpha_bar = 1 keeps the coefficient finite."""
        mu = diffusion.posterior_mean(np.ones(3), np.ones(3), 1e-8, 1.0)
        assert np.all(np.isfinite(mu))

    def test_step_params(self, small_diffusion):
        """sigma is sqrt(beta) of the level of x_t."""
        x = np.random.default_rng(0).normal(size=(32, 3))
        z = np.zeros(8)
        eps = np.zeros((32, 3))
        beta = small_diffusion.schedule.beta
        for t in (1, 10, 20):
            step = diffusion.reverse_step_params(small_diffusion, x, t, z, 1, predicted_noise=eps)
            assert np.isclose(step.sigma, np.sqrt(beta[t - 1]))
            assert np.isclose(step.variance, beta[t - 1])
            assert np.allclose(step.mu, x / np.sqrt(1.0 - beta[t - 1]))

    def test_step_uses_denoiser(self, small_diffusion):
        """Without an override the network prediction enters the mean."""
        x = np.random.default_rng(1).normal(size=(32, 3))
        step = diffusion.reverse_step_params(small_diffusion, x, 12, np.zeros(8), 0)
        assert step.mu.shape == (32, 3)
        assert np.all(np.isfinite(step.mu))

    @pytest.mark.parametrize("t", [0, 21])
    def test_step_range(self, small_diffusion, t):
        """Reverse steps run over [1, T]."""
        with pytest.raises(InvalidInputError, match="Reverse steps"):
            diffusion.reverse_step_params(small_diffusion, np.zeros((32, 3)), t, np.zeros(8), 0)


class TestLatent:
    """The latent encoder."""

    def test_reparameterization(self, small_diffusion, toy_dataset):
        """z = mean + exp(logvar / 2) eps."""
        eps = np.linspace(-1.0, 1.0, 8)
        code = diffusion.encode_latent(small_diffusion, toy_dataset.clouds[0], eps=eps)
        assert np.allclose(code.z, code.mean + np.exp(code.logvar / 2) * eps)

    def test_permutation_invariance(self, small_diffusion, toy_dataset):
        """The posterior ignores point order."""
        cloud = toy_dataset.clouds[0].points
        perm = np.random.default_rng(0).permutation(32)
        a = diffusion.encode_latent(small_diffusion, cloud, seed=1)
        b = diffusion.encode_latent(small_diffusion, cloud[perm], seed=1)
        assert np.allclose(a.mean, b.mean) and np.allclose(a.z, b.z)

    def test_eps_shape(self, small_diffusion, toy_dataset):
        """eps must have the latent's shape."""
        with pytest.raises(InvalidInputError, match="eps shape"):
            diffusion.encode_latent(small_diffusion, toy_dataset.clouds[0], eps=np.zeros(3))


class TestTrainingLoss:
    """Noise-prediction loss with the latent KL term."""

    def test_oracle_denoiser(self, small_diffusion, toy_dataset):
        """A denoiser returning the true noise has zero MSE."""
        noise = np.random.default_rng(5).normal(size=(32, 3))
        terms = diffusion.diffusion_training_loss(
            small_diffusion,
            toy_dataset.clouds[0],
            0,
            level=7,
            noise=noise,
            denoiser=lambda x_t, z, label, level: noise,
        )
        assert terms.mse == pytest.approx(0.0, abs=1e-14)
        assert terms.kl >= 0.0
        assert terms.total == pytest.approx(small_diffusion.config.kl_weight * terms.kl)

    def test_network_loss(self, small_diffusion, toy_dataset):
        """The untrained network has a positive finite loss."""
        terms = diffusion.diffusion_training_loss(small_diffusion, toy_dataset.clouds[1], 0, seed=3)
        assert np.isfinite(terms.total) and terms.mse > 0

    def test_non_finite(self, small_diffusion, toy_dataset):
        """A NaN prediction is a numerical error."""
        with pytest.raises(NumericalError):
            diffusion.diffusion_training_loss(
                small_diffusion,
                toy_dataset.clouds[0],
                0,
                level=3,
                denoiser=lambda x_t, z, label, level: x_t * np.nan,
            )

    def test_bad_label(self, small_diffusion, toy_dataset):
        """Labels outside [0, N_C) are refused."""
        with pytest.raises(InvalidInputError, match="Label 3"):
            diffusion.diffusion_training_loss(small_diffusion, toy_dataset.clouds[0], 3)


class TestTraining:
    """Joint training of encoder and denoiser, and archives."""

    def test_curve(self, toy_dataset, small_diffusion_config):
        """One curve record per logging window."""
        model = diffusion.train_diffusion(toy_dataset, small_diffusion_config, 0, log_every=1)
        assert [r["iteration"] for r in model.metrics["curve"]] == [1, 2, 3]
        assert all(np.isfinite(r["loss"]) for r in model.metrics["curve"])

    def test_resume(self, tmp_path, toy_dataset, small_diffusion_config):
        """A resumed run continues the curve from the stored iteration."""
        progress = tmp_path / "progress.npz"
        short = dataclasses.replace(small_diffusion_config, iterations=2)
        diffusion.train_diffusion(toy_dataset, short, 0, checkpoint_path=progress, log_every=1)
        model = diffusion.train_diffusion(
            toy_dataset, small_diffusion_config, 0, resume_from=progress, log_every=1
        )
        assert [r["iteration"] for r in model.metrics["curve"]] == [1, 2, 3]

    def test_dataset_mismatch(self, toy_dataset, small_diffusion_config):
        """A dataset of another cloud size is refused."""
        config = dataclasses.replace(small_diffusion_config, n_points=64)
        with pytest.raises(InvalidInputError, match="N=64"):
            diffusion.train_diffusion(toy_dataset, config, 0)

    def test_save_load(self, tmp_path, small_diffusion, toy_dataset):
        """The archive restores configuration, schedule and predictions."""
        path = tmp_path / "ddpm.npz"
        small_diffusion.save(path)
        loaded = diffusion.DiffusionModel.load(path)
        assert loaded.config == small_diffusion.config
        assert np.array_equal(loaded.schedule.alpha_bar, small_diffusion.schedule.alpha_bar)
        assert loaded.schedule.params == {"offset": 0.008}
        x = toy_dataset.clouds[0].points
        a = diffusion.reverse_step_params(small_diffusion, x, 5, np.ones(8), 2)
        b = diffusion.reverse_step_params(loaded, x, 5, np.ones(8), 2)
        assert np.array_equal(a.mu, b.mu)

    def test_load_classifier_archive(self, tmp_path, small_classifier):
        """A classifier archive is refused."""
        path = tmp_path / "clf.npz"
        small_classifier.save(path)
        with pytest.raises(CheckpointError):
            diffusion.DiffusionModel.load(path)

    def test_invalid_config(self):
        """Unknown schedules are refused."""
        with pytest.raises(InvalidInputError, match="Unknown schedule"):
            diffusion.DiffusionConfig(n_classes=2, schedule="sigmoid")


if __name__ == "__main__":
    pytest.main(["-x", __file__])
