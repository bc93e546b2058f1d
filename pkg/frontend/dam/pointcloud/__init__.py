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
Point-cloud data types, synthetic datasets, normalization and file I/O.
"""

from dam.pointcloud.clouds import (
    LabeledDataset,
    PointCloud,
    as_points,
    check_permutation,
    normalize_unit_sphere,
    permute,
    resample_fixed,
)
from dam.pointcloud.datasets import (
    SHAPE_FAMILIES,
    ShapeSpec,
    generate_synthetic_dataset,
    load_off_directory,
    sample_mesh_surface,
    sample_shape,
    split_dataset,
    toy_specs,
)
from dam.pointcloud.formats import (
    load_dataset_archive,
    read_off,
    read_off_mesh,
    read_ply_with_scalars,
    save_dataset_archive,
    write_off,
    write_ply_with_scalars,
)

__all__ = (
    "LabeledDataset",
    "PointCloud",
    "SHAPE_FAMILIES",
    "ShapeSpec",
    "as_points",
    "check_permutation",
    "generate_synthetic_dataset",
    "load_dataset_archive",
    "load_off_directory",
    "normalize_unit_sphere",
    "permute",
    "read_off",
    "read_off_mesh",
    "read_ply_with_scalars",
    "resample_fixed",
    "sample_mesh_surface",
    "sample_shape",
    "save_dataset_archive",
    "split_dataset",
    "toy_specs",
    "write_off",
    "write_ply_with_scalars",
)
