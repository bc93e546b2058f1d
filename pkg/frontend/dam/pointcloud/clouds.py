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
Core point-cloud value types and the pure transformations on them.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from dam.utils.exceptions import InvalidInputError


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered array of ``N`` points in ``D`` coordinates.

    The coordinate array is copied to ``float64`` and made read-only on construction, so a
    ``PointCloud`` can be shared freely between threads.

    Args:
        points (array_like): ``N x D`` coordinates, ``N >= 1`` and ``D >= 2``, all finite

    Raises:
        InvalidInputError: for a wrong shape or non-finite coordinates
    """

    points: np.ndarray

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        if points.ndim != 2:
            raise InvalidInputError(f"Expected an N x D array of points, got shape {points.shape}")
        if points.shape[0] < 1:
            raise InvalidInputError("A point cloud needs at least one point")
        if points.shape[1] < 2:
            raise InvalidInputError(
                f"A point cloud needs D >= 2 coordinates, got {points.shape[1]}"
            )
        if not np.all(np.isfinite(points)):
            raise InvalidInputError("Point coordinates must be finite")
        points.flags.writeable = False
        object.__setattr__(self, "points", points)

    @property
    def n_points(self) -> int:
        """Number of points ``N``."""
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        """Number of coordinates ``D``."""
        return self.points.shape[1]

    def __len__(self):
        return self.n_points

    def __array__(self, dtype=None, copy=None):
        return self.points if dtype is None else self.points.astype(dtype)


CloudLike = Union[PointCloud, np.ndarray]


def as_points(cloud: CloudLike) -> np.ndarray:
    """Coordinates of a ``PointCloud`` or an array-like, as ``float64``."""
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64)


def like(template: CloudLike, points) -> CloudLike:
    """Wrap ``points`` in the same kind of container as ``template``."""
    if isinstance(template, PointCloud):
        return PointCloud(np.asarray(points))
    return np.asarray(points)


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """A labelled collection of equally sized point clouds.

    Args:
        clouds: the point clouds, all with the same ``N`` and ``D``
        labels: one class index in ``[0, N_C)`` per cloud
        class_names: ``N_C`` class names
        split: ``"train"`` or ``"test"`` (any tag is accepted)
        timesteps: noise level of every cloud, for datasets built by ``make_noised_dataset``
        n_timesteps: the diffusion length ``T`` the timesteps refer to
    """

    clouds: Tuple[PointCloud, ...]
    labels: Tuple[int, ...]
    class_names: Tuple[str, ...]
    split: str = "train"
    timesteps: Optional[Tuple[int, ...]] = None
    n_timesteps: int = 0

    def __post_init__(self):
        object.__setattr__(self, "clouds", tuple(self.clouds))
        object.__setattr__(self, "labels", tuple(int(l) for l in self.labels))
        object.__setattr__(self, "class_names", tuple(str(n) for n in self.class_names))
        if len(self.clouds) != len(self.labels):
            raise InvalidInputError(
                f"{len(self.clouds)} clouds but {len(self.labels)} labels were given"
            )
        if not self.class_names:
            raise InvalidInputError("A dataset needs at least one class name")
        for label in self.labels:
            if not 0 <= label < len(self.class_names):
                raise InvalidInputError(
                    f"Label {label} is outside [0, {len(self.class_names)}) for this dataset"
                )
        shapes = {c.points.shape for c in self.clouds}
        if len(shapes) > 1:
            raise InvalidInputError(f"All clouds must share N and D, found shapes {sorted(shapes)}")
        if self.timesteps is not None:
            object.__setattr__(self, "timesteps", tuple(int(t) for t in self.timesteps))
            if len(self.timesteps) != len(self.clouds):
                raise InvalidInputError("Exactly one timestep per cloud is required")
            if any(not 0 <= t < self.n_timesteps for t in self.timesteps):
                raise InvalidInputError(f"Timesteps must lie in [0, {self.n_timesteps})")

    def __len__(self):
        return len(self.clouds)

    @property
    def n_classes(self) -> int:
        """Number of classes ``N_C``."""
        return len(self.class_names)

    @property
    def n_points(self) -> int:
        """Points per cloud."""
        return self.clouds[0].n_points if self.clouds else 0

    @property
    def dim(self) -> int:
        """Coordinates per point."""
        return self.clouds[0].dim if self.clouds else 0

    def stacked(self) -> Tuple[np.ndarray, np.ndarray]:
        """Return the ``S x N x D`` coordinate array and the ``S`` labels."""
        if not self.clouds:
            return np.zeros((0, 0, 0)), np.zeros((0,), dtype=np.int64)
        return np.stack([c.points for c in self.clouds]), np.asarray(self.labels, dtype=np.int64)

    def class_counts(self) -> np.ndarray:
        """Number of clouds per class."""
        return np.bincount(np.asarray(self.labels, dtype=np.int64), minlength=self.n_classes)

    def subset(self, indices: Sequence[int], split: Optional[str] = None) -> "LabeledDataset":
        """Select clouds by index, keeping class names and noise levels."""
        indices = [int(i) for i in indices]
        return LabeledDataset(
            clouds=tuple(self.clouds[i] for i in indices),
            labels=tuple(self.labels[i] for i in indices),
            class_names=self.class_names,
            split=self.split if split is None else split,
            timesteps=None if self.timesteps is None else tuple(self.timesteps[i] for i in indices),
            n_timesteps=self.n_timesteps,
        )


def normalize_unit_sphere(cloud: CloudLike) -> PointCloud:
    """Center a cloud on its centroid and scale it into the unit ball.

    After normalization the centroid is the origin and the farthest point has norm one. A cloud
    whose points all coincide maps to all zeros.

    **Example**

    >>> normalize_unit_sphere(np.array([[6.0, 5.0, 5.0], [4.0, 5.0, 5.0]])).points
    array([[ 1.,  0.,  0.],
           [-1.,  0.,  0.]])
    """
    points = as_points(cloud)
    if not np.all(np.isfinite(points)):
        raise InvalidInputError("Cannot normalize a cloud with non-finite coordinates")
    centered = points - points.mean(axis=0, keepdims=True)
    radius = np.max(np.linalg.norm(centered, axis=1))
    if radius == 0.0:
        return PointCloud(np.zeros_like(centered))
    return PointCloud(centered / radius)


def check_permutation(perm: Sequence[int], n: int) -> np.ndarray:
    """Validate that ``perm`` is a bijection on ``{0, ..., n-1}``."""
    perm = np.asarray(perm)
    if perm.shape != (n,) or not np.issubdtype(perm.dtype, np.integer):
        raise InvalidInputError(f"A permutation of {n} points needs {n} integer entries")
    if not np.array_equal(np.sort(perm), np.arange(n)):
        raise InvalidInputError("The given index array is not a bijection on the points")
    return perm


def permute(cloud: CloudLike, perm: Sequence[int]) -> CloudLike:
    """Reorder points so that ``output[i] == input[perm[i]]``."""
    points = as_points(cloud)
    perm = check_permutation(perm, points.shape[0])
    return like(cloud, points[perm])


def resample_fixed(cloud: CloudLike, n_target: int, seed: int) -> PointCloud:
    """Draw exactly ``n_target`` points of ``cloud``.

    Points are drawn uniformly without replacement when the cloud has at least ``n_target``
    points, with replacement otherwise.
    """
    if n_target <= 0:
        raise InvalidInputError(f"n_target must be positive, got {n_target}")
    points = as_points(cloud)
    rng = np.random.default_rng(seed)
    replace = points.shape[0] < n_target
    index = rng.choice(points.shape[0], size=n_target, replace=replace)
    return PointCloud(points[index])
