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
"""Custom DAM exceptions."""


class DamError(Exception):
    """Base class for all errors raised by the dam package."""


class ParseError(DamError, ValueError):
    """Malformed point-cloud, archive or configuration text."""


class InvalidInputError(DamError, ValueError):
    """An argument violates the precondition of the called operation."""


class UndefinedMetricError(DamError, ArithmeticError):
    """A metric is mathematically undefined for the given input."""


class NumericalError(DamError, ArithmeticError):
    """Non-finite values encountered during training or sampling.

    Args:
        message (str): human readable description
        step (Optional[int]): iteration, epoch or diffusion step at which the failure occurred
    """

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (at step {step})")
        self.step = step


class MissingArtifactError(DamError, FileNotFoundError):
    """A required dataset, checkpoint or trajectory does not exist."""


class CheckpointError(DamError):
    """A checkpoint archive has the wrong version or is incompatible with the request."""
