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
Dataset construction: synthetic shape families, OFF-directory ingestion and train/test splits.
"""

import pathlib
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from dam.pointcloud.clouds import LabeledDataset, PointCloud, normalize_unit_sphere, resample_fixed
from dam.pointcloud.formats import read_off_mesh
from dam.utils.exceptions import InvalidInputError

SHAPE_FAMILIES = ("sphere", "plane", "torus", "cone", "cylinder", "box")


@dataclass(frozen=True)
class ShapeSpec:
    """Recipe for one synthetic shape class.

    Args:
        family (str): one of ``SHAPE_FAMILIES``
        scale_min (float): lower bound of the characteristic size ``r``
        scale_max (float): upper bound of the characteristic size ``r``
        jitter_sigma (float): standard deviation of the Gaussian jitter added per coordinate
        n_points (int): points per cloud
    """

    family: str
    scale_min: float = 0.8
    scale_max: float = 1.2
    jitter_sigma: float = 0.01
    n_points: int = 256

    def __post_init__(self):
        if self.family not in SHAPE_FAMILIES:
            raise InvalidInputError(
                f"Unknown shape family '{self.family}', expected one of {SHAPE_FAMILIES}"
            )
        if self.scale_min <= 0 or self.scale_max < self.scale_min:
            raise InvalidInputError(
                f"Invalid scale range [{self.scale_min}, {self.scale_max}] for '{self.family}'"
            )
        if not 0 <= self.jitter_sigma < 0.1:
            raise InvalidInputError(f"jitter_sigma must lie in [0, 0.1), got {self.jitter_sigma}")
        if self.n_points < 1:
            raise InvalidInputError(f"n_points must be positive, got {self.n_points}")


def toy_specs(n_classes: int, n_points: int = 256, jitter_sigma: float = 0.01) -> List[ShapeSpec]:
    """The first ``n_classes`` shape families with default scale ranges."""
    if not 1 <= n_classes <= len(SHAPE_FAMILIES):
        raise InvalidInputError(
            f"The toy dataset has between 1 and {len(SHAPE_FAMILIES)} classes, got {n_classes}"
        )
    return [
        ShapeSpec(family, jitter_sigma=jitter_sigma, n_points=n_points)
        for family in SHAPE_FAMILIES[:n_classes]
    ]


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _box_surface(rng, n, half):
    # faces chosen with probability proportional to their area
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    points = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    sign = rng.choice([-1.0, 1.0], size=n)
    points[np.arange(n), axis] = sign * half[axis]
    return points


def sample_shape(spec: ShapeSpec, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """Draw one raw (unnormalized) cloud of a shape family.

    Returns:
        Tuple[np.ndarray, float]: the ``N x 3`` points and the characteristic size ``r`` drawn
        for them. Spheres have radius ``r``.
    """
    n = spec.n_points
    r = rng.uniform(spec.scale_min, spec.scale_max)
    if spec.family == "sphere":
        points = _unit_vectors(rng, n) * r
    elif spec.family == "plane":
        points = np.column_stack([rng.uniform(-r, r, size=(n, 2)), np.zeros(n)])
    elif spec.family == "torus":
        u, v = rng.uniform(0.0, 2 * np.pi, size=(2, n))
        minor = 0.3 * r
        ring = r + minor * np.cos(v)
        points = np.column_stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)])
    elif spec.family == "cone":
        # sqrt keeps the lateral surface density uniform
        s = np.sqrt(rng.uniform(0.0, 1.0, size=n))
        u = rng.uniform(0.0, 2 * np.pi, size=n)
        points = np.column_stack([s * r * np.cos(u), s * r * np.sin(u), r * (1.0 - 2.0 * s)])
    elif spec.family == "cylinder":
        u = rng.uniform(0.0, 2 * np.pi, size=n)
        z = rng.uniform(-r, r, size=n)
        points = np.column_stack([0.5 * r * np.cos(u), 0.5 * r * np.sin(u), z])
    else:
        points = _box_surface(rng, n, np.array([r, 0.7 * r, 0.5 * r]))
    points = points + rng.normal(scale=spec.jitter_sigma, size=points.shape)
    return points, float(r)


def generate_synthetic_dataset(
    specs: Sequence[ShapeSpec], per_class: int, seed: int, split: str = "train"
) -> LabeledDataset:
    """Generate a balanced labelled dataset, one class per ``ShapeSpec``.

    Clouds are normalized to the unit sphere. The result is a pure function of the arguments.

    **Example**

    >>> data = generate_synthetic_dataset(toy_specs(2, n_points=64), per_class=10, seed=7)
    >>> len(data), data.n_classes, data.n_points
    (20, 2, 64)
    """
    if not specs:
        raise InvalidInputError("At least one ShapeSpec is required")
    if per_class < 1:
        raise InvalidInputError(f"per_class must be at least 1, got {per_class}")
    if len({s.n_points for s in specs}) != 1:
        raise InvalidInputError("All shape specs must use the same n_points")
    rng = np.random.default_rng(seed)
    clouds, labels = [], []
    for label, spec in enumerate(specs):
        for _ in range(per_class):
            points, _ = sample_shape(spec, rng)
            clouds.append(normalize_unit_sphere(points))
            labels.append(label)
    names = []
    for spec in specs:
        name = spec.family
        while name in names:
            name = f"{name}_"
        names.append(name)
    return LabeledDataset(tuple(clouds), tuple(labels), tuple(names), split=split)


def sample_mesh_surface(vertices: np.ndarray, faces: Sequence[Sequence[int]], n: int, seed: int):
    """Sample ``n`` points uniformly on a polygon mesh surface.

    Polygons are fan-triangulated and triangles are picked with probability proportional to their
    area; a point inside a triangle uses the square-root barycentric construction.
    """
    triangles = [
        (face[0], face[i], face[i + 1]) for face in faces for i in range(1, len(face) - 1)
    ]
    if not triangles:
        raise InvalidInputError("Surface sampling needs a mesh with at least one face")
    tri = np.asarray(vertices, dtype=np.float64)[np.asarray(triangles)]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    if areas.sum() <= 0:
        raise InvalidInputError("Mesh has zero surface area")
    rng = np.random.default_rng(seed)
    chosen = tri[rng.choice(len(tri), size=n, p=areas / areas.sum())]
    r1 = np.sqrt(rng.uniform(size=(n, 1)))
    r2 = rng.uniform(size=(n, 1))
    points = (1 - r1) * chosen[:, 0] + r1 * (1 - r2) * chosen[:, 1] + r1 * r2 * chosen[:, 2]
    return PointCloud(points)


def load_off_directory(
    root: Union[str, pathlib.Path],
    n_points: int,
    seed: int,
    surface_sampling: bool = False,
    max_per_class: Optional[int] = None,
) -> LabeledDataset:
    """Build a dataset from ``root/<class name>/*.off`` meshes.

    Each mesh becomes one normalized cloud of ``n_points`` points, drawn either from its vertices
    (``resample_fixed``) or from its surface (``sample_mesh_surface``).
    """
    root = pathlib.Path(root)
    if not root.is_dir():
        raise InvalidInputError(f"{root} is not a readable directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise InvalidInputError(f"{root} contains no class subdirectories")
    rng = np.random.default_rng(seed)
    clouds, labels = [], []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(class_dir.glob("*.off"))[:max_per_class]
        for path in files:
            vertices, faces = read_off_mesh(path)
            sub_seed = int(rng.integers(2**31))
            if surface_sampling:
                cloud = sample_mesh_surface(vertices, faces, n_points, sub_seed)
            else:
                cloud = resample_fixed(vertices, n_points, sub_seed)
            clouds.append(normalize_unit_sphere(cloud))
            labels.append(label)
    return LabeledDataset(tuple(clouds), tuple(labels), tuple(d.name for d in class_dirs))


def split_dataset(
    dataset: LabeledDataset, test_fraction: float, seed: int
) -> Tuple[LabeledDataset, LabeledDataset]:
    """Seeded stratified split into train and test subsets.

    Every class keeps at least one sample on each side when it has two or more.
    """
    if not 0.0 < test_fraction < 1.0:
        raise InvalidInputError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    labels = np.asarray(dataset.labels)
    train, test = [], []
    for label in range(dataset.n_classes):
        members = rng.permutation(np.flatnonzero(labels == label))
        if len(members) == 0:
            continue
        n_test = int(round(test_fraction * len(members)))
        if len(members) >= 2:
            n_test = min(max(n_test, 1), len(members) - 1)
        test.extend(members[:n_test])
        train.extend(members[n_test:])
    return dataset.subset(sorted(train), "train"), dataset.subset(sorted(test), "test")
