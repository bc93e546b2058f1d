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
"""Unit tests for the point diffusion transformer."""

import jax
import numpy as np
import pytest

from dam import pdt
from dam.utils.exceptions import InvalidInputError
from dam.utils.nn import pointwise_audit

CONFIG = pdt.PDTConfig(n_classes=4, latent_dim=6, time_code_len=5, n_heads=2, widths=(8, 12))


@pytest.fixture(scope="module", name="params")
def params_fixture():
    """Denoiser parameters of ``CONFIG``."""
    return pdt.init_pdt(CONFIG, jax.random.PRNGKey(0))


def _inputs(n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 3)), rng.normal(size=6)


class TestAugmentedInput:
    """Construction of the per-point rows."""

    def test_segments(self):
        """Every row carries the coordinates, latent, one-hot label and time code."""
        x, z = _inputs(5)
        aug = pdt.build_augmented_input(x, z, 2, 6, CONFIG)
        assert aug.x_star.shape == (5, CONFIG.input_width) == (5, 18)
        seg = aug.segments()
        assert np.allclose(seg["coordinates"], x)
        assert np.allclose(seg["latent"], np.broadcast_to(z, (5, 6)))
        assert np.array_equal(np.asarray(seg["label"][0]), [0, 0, 1, 0])
        assert np.array_equal(np.asarray(seg["time"][3]), [0, 0, 1, 1, 0])

    @pytest.mark.parametrize(
        "x, z, label, t, match",
        [
            (np.zeros((4, 2)), np.zeros(6), 0, 0, "N x 3"),
            (np.zeros((4, 3)), np.zeros(5), 0, 0, "latent of width 6"),
            (np.zeros((4, 3)), np.zeros(6), 4, 0, "outside"),
            (np.zeros((4, 3)), np.zeros(6), 0, 32, "does not fit"),
        ],
    )
    def test_rejects(self, x, z, label, t, match):
        """Wrong widths, labels and steps are refused."""
        with pytest.raises(InvalidInputError, match=match):
            pdt.build_augmented_input(x, z, label, t, CONFIG)


class TestDenoiser:
    """Shapes, invariances and attention presets."""

    def test_output_shape(self, params):
        """The prediction has the shape of the cloud."""
        x, z = _inputs(9)
        assert pdt.pdt_forward(params, CONFIG, x, z, 1, 3).shape == (9, 3)

    def test_permutation_equivariance(self, params):
        """Permuting the input points permutes the predicted noise the same way."""
        x, z = _inputs(16, seed=1)
        perm = np.random.default_rng(2).permutation(16)
        eps = np.asarray(pdt.pdt_forward(params, CONFIG, x, z, 0, 7))
        eps_perm = np.asarray(pdt.pdt_forward(params, CONFIG, x[perm], z, 0, 7))
        assert np.allclose(eps_perm, eps[perm], atol=1e-10)

    def test_point_count_independent(self, params):
        """One parameter set serves clouds of any size."""
        for n in (1, 7, 40):
            x, z = _inputs(n)
            assert pdt.pdt_forward(params, CONFIG, x, z, 2, 0).shape == (n, 3)

    def test_parameter_shapes(self, params):
        """Every parameter is a per-point map whose shape involves no point count."""
        allowed = {3, 6, 4, 5, 8, 12, 2, CONFIG.input_width, 2 * 8, 2 * 12}
        for name, shape in pointwise_audit(params):
            assert set(shape) <= allowed, name

    def test_conditioning_matters(self, params):
        """Label and level both change the prediction."""
        x, z = _inputs(10)
        base = np.asarray(pdt.pdt_forward(params, CONFIG, x, z, 0, 3))
        assert not np.allclose(base, pdt.pdt_forward(params, CONFIG, x, z, 1, 3))
        assert not np.allclose(base, pdt.pdt_forward(params, CONFIG, x, z, 0, 4))

    @pytest.mark.parametrize("mode", sorted(pdt.AttentionInputMode.PRESETS))
    def test_presets(self, mode):
        """Every attention preset builds and runs."""
        config = pdt.PDTConfig(
            n_classes=2, latent_dim=3, time_code_len=3, n_heads=1, widths=(4,), attention_mode=mode
        )
        params = pdt.init_pdt(config, jax.random.PRNGKey(1))
        rng = np.random.default_rng(0)
        eps = pdt.pdt_forward(params, config, rng.normal(size=(6, 3)), np.zeros(3), 1, 2)
        assert np.all(np.isfinite(eps))
        assert pdt.AttentionInputMode.from_name(mode).name == mode

    def test_zero_output_init(self):
        """A zero-initialized head predicts no noise."""
        config = pdt.PDTConfig(n_classes=2, latent_dim=3, widths=(4,), zero_init_output=True)
        params = pdt.init_pdt(config, jax.random.PRNGKey(0))
        eps = pdt.pdt_forward(params, config, np.ones((5, 3)), np.zeros(3), 0, 1)
        assert np.all(np.asarray(eps) == 0.0)

    def test_unsupported_combination(self):
        """Source triples without a preset are refused."""
        with pytest.raises(InvalidInputError, match="Unsupported"):
            pdt.AttentionInputMode(pdt.RAW_X, pdt.RAW_X, pdt.RAW_X)
        with pytest.raises(InvalidInputError, match="Unknown attention mode"):
            pdt.PDTConfig(n_classes=2, attention_mode="cross")

    def test_decoder_point_mismatch(self, params):
        """Encoder features must cover the same points as the input."""
        x, z = _inputs(6)
        x_star = pdt.augment(x, z, 0, 1, CONFIG)
        features = pdt.pde_forward(params, CONFIG, x_star)
        with pytest.raises(InvalidInputError, match="number of points"):
            pdt.pdd_forward(params, CONFIG, x_star, features[:4])


if __name__ == "__main__":
    pytest.main(["-x", __file__])
