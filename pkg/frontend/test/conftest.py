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
"""
Pytest configuration file for the dam test suite.
"""
import pytest

from dam import classifier as clf
from dam import diffusion
from dam.pointcloud import generate_synthetic_dataset, toy_specs

# Tolerance of moment checks on seeded random draws
TOL_STOCHASTIC = 0.05

N_CLASSES = 3
N_POINTS = 32
N_TIMESTEPS = 20


@pytest.fixture(scope="session")
def tol_stochastic():
    """Numerical tolerance for equality tests of stochastic values."""
    return TOL_STOCHASTIC


@pytest.fixture(scope="session")
def toy_dataset():
    """Three shape classes, eight clouds each, 32 points per cloud."""
    return generate_synthetic_dataset(toy_specs(N_CLASSES, n_points=N_POINTS), per_class=8, seed=7)


@pytest.fixture(scope="session")
def small_classifier_config():
    """A narrow classifier that trains in seconds."""
    return clf.ClassifierConfig(
        n_classes=N_CLASSES,
        per_point_widths=(16, 32),
        head_widths=(16,),
        epochs=2,
        batch_size=8,
    )


@pytest.fixture(scope="session")
def small_classifier(small_classifier_config):
    """An untrained explained classifier."""
    return clf.untrained(small_classifier_config, seed=0)


@pytest.fixture(scope="session")
def small_noised_classifier(small_classifier_config):
    """An untrained noise-aware twin for a 20-step diffusion."""
    return clf.untrained(clf.noised_config(small_classifier_config, N_TIMESTEPS), seed=1)


@pytest.fixture(scope="session")
def small_diffusion_config():
    """A 20-step diffusion with a narrow denoiser."""
    return diffusion.DiffusionConfig(
        n_classes=N_CLASSES,
        n_points=N_POINTS,
        n_timesteps=N_TIMESTEPS,
        latent_dim=8,
        encoder_widths=(16, 32),
        n_heads=2,
        widths=(16, 32),
        iterations=3,
        batch_size=4,
    )


@pytest.fixture(scope="session")
def small_diffusion(small_diffusion_config):
    """An untrained diffusion model."""
    return diffusion.untrained(small_diffusion_config, seed=0)


def pytest_addoption(parser):
    """Add pytest custom options."""

    parser.addoption(
        "--runslow",
        action="store_true",
        default=False,
        help="Run training-scale checks marked as slow",
    )


def pytest_configure(config):
    """A pytest configure helper method"""

    config.addinivalue_line(
        "markers",
        "slow: training-scale checks, skipped unless --runslow is given",
    )


def pytest_collection_modifyitems(config, items):
    """Skip slow tests unless requested."""
    if config.getoption("--runslow"):
        return
    skipper = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skipper)
