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
This package explains point-cloud classifiers by sampling label-conditioned diffusion models under
classifier guidance and attributing the result along the sampling path.
"""

# pylint: disable=wrong-import-position

import jax

# Parameters, schedules and attributions are kept in double precision.
jax.config.update("jax_enable_x64", True)

from dam._version import __version__
from dam.classifier import (
    Classifier,
    ClassifierConfig,
    NeuronSelector,
    classify,
    train_classifier,
    train_noised_classifier,
)
from dam.diffusion import DiffusionConfig, DiffusionModel, NoiseSchedule, train_diffusion
from dam.igd import SaliencyMap, SaliencySequence, igd_attribution, linear_ig
from dam.metrics import MetricsReport, coherence, faithfulness_area
from dam.pointcloud import LabeledDataset, PointCloud
from dam.sampler import DiffusionTrajectory, GuidanceConfig, dam_sample, multi_neuron_sample

__all__ = (
    "Classifier",
    "ClassifierConfig",
    "DiffusionConfig",
    "DiffusionModel",
    "DiffusionTrajectory",
    "GuidanceConfig",
    "LabeledDataset",
    "MetricsReport",
    "NeuronSelector",
    "NoiseSchedule",
    "PointCloud",
    "SaliencyMap",
    "SaliencySequence",
    "classify",
    "coherence",
    "dam_sample",
    "faithfulness_area",
    "igd_attribution",
    "linear_ig",
    "multi_neuron_sample",
    "train_classifier",
    "train_diffusion",
    "train_noised_classifier",
    "__version__",
)
