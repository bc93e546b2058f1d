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
"""Unit tests for point-cloud types, synthetic data and file formats."""

import numpy as np
import pytest

from dam.pointcloud import (
    LabeledDataset,
    PointCloud,
    ShapeSpec,
    generate_synthetic_dataset,
    load_dataset_archive,
    load_off_directory,
    normalize_unit_sphere,
    permute,
    read_off,
    read_off_mesh,
    read_ply_with_scalars,
    resample_fixed,
    sample_mesh_surface,
    save_dataset_archive,
    split_dataset,
    toy_specs,
    write_off,
    write_ply_with_scalars,
)
from dam.utils.exceptions import InvalidInputError, ParseError

CUBE_OFF = """OFF
# a unit cube
8 6 0
0 0 0
1 0 0
1 1 0
0 1 0
0 0 1
1 0 1
1 1 1
0 1 1
4 0 1 2 3
4 4 5 6 7
4 0 1 5 4
4 2 3 7 6
4 1 2 6 5
4 0 3 7 4
"""


class TestPointCloud:
    """Construction and validation of the cloud value type."""

    def test_read_only_copy(self):
        """Coordinates are copied and cannot be modified afterwards."""
        raw = np.ones((4, 3))
        cloud = PointCloud(raw)
        raw[0, 0] = 5.0
        assert cloud.points[0, 0] == 1.0
        with pytest.raises(ValueError):
            cloud.points[0, 0] = 2.0

    @pytest.mark.parametrize(
        "points", [np.zeros((0, 3)), np.zeros((4, 1)), np.zeros(3), np.array([[0.0, np.nan]])]
    )
    def test_rejects_bad_points(self, points):
        """Empty clouds, D < 2, flat arrays and non-finite values are refused."""
        with pytest.raises(InvalidInputError):
            PointCloud(points)

    def test_dataset_label_range(self):
        """Labels outside the class range are refused."""
        cloud = PointCloud(np.zeros((2, 3)))
        with pytest.raises(InvalidInputError, match="outside"):
            LabeledDataset((cloud,), (2,), ("a", "b"))

    def test_dataset_shapes_must_agree(self):
        """Clouds of different sizes cannot share a dataset."""
        with pytest.raises(InvalidInputError, match="share N and D"):
            LabeledDataset(
                (PointCloud(np.zeros((2, 3))), PointCloud(np.zeros((3, 3)))), (0, 1), ("a", "b")
            )


class TestTransformations:
    """Normalization, permutation and resampling."""

    def test_normalize_example(self):
        """Two points on a line map to the unit sphere poles."""
        result = normalize_unit_sphere(np.array([[6.0, 5.0, 5.0], [4.0, 5.0, 5.0]]))
        assert np.allclose(result.points, [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])

    def test_normalize_invariants(self):
        """Centroid at the origin and largest norm equal to one."""
        rng = np.random.default_rng(3)
        result = normalize_unit_sphere(rng.normal(loc=4.0, scale=3.0, size=(50, 3)))
        assert np.allclose(result.points.mean(axis=0), 0.0, atol=1e-12)
        assert np.isclose(np.max(np.linalg.norm(result.points, axis=1)), 1.0)

    def test_normalize_coincident_points(self):
        """A degenerate cloud maps to zeros instead of dividing by zero."""
        result = normalize_unit_sphere(np.full((5, 3), 2.5))
        assert np.all(result.points == 0.0)

    def test_permute(self):
        """``output[i] == input[perm[i]]``."""
        points = np.arange(12.0).reshape(4, 3)
        perm = [2, 0, 3, 1]
        result = permute(PointCloud(points), perm)
        assert isinstance(result, PointCloud)
        for i, j in enumerate(perm):
            assert np.array_equal(result.points[i], points[j])

    @pytest.mark.parametrize("perm", [[0, 0, 1, 2], [0, 1, 2], [0, 1, 2, 4]])
    def test_permute_rejects_non_bijection(self, perm):
        """Repeated, missing or out-of-range indices are refused."""
        with pytest.raises(InvalidInputError):
            permute(np.zeros((4, 3)), perm)

    def test_resample_without_replacement(self):
        """Downsampling draws distinct points of the input."""
        points = np.arange(30.0).reshape(10, 3)
        result = resample_fixed(points, 6, seed=1)
        assert result.n_points == 6
        assert len({tuple(p) for p in result.points}) == 6
        assert all(any(np.array_equal(p, q) for q in points) for p in result.points)

    def test_resample_with_replacement(self):
        """Upsampling repeats points."""
        result = resample_fixed(np.arange(9.0).reshape(3, 3), 7, seed=1)
        assert result.n_points == 7

    def test_resample_is_seeded(self):
        """Same seed, same draw."""
        points = np.random.default_rng(0).normal(size=(20, 3))
        first, second = resample_fixed(points, 5, 9), resample_fixed(points, 5, 9)
        assert np.array_equal(first.points, second.points)


class TestSyntheticData:
    """Synthetic shape families and dataset splits."""

    def test_shapes_and_balance(self):
        """A balanced dataset of normalized clouds."""
        data = generate_synthetic_dataset(toy_specs(4, n_points=64), per_class=5, seed=7)
        assert (len(data), data.n_classes, data.n_points, data.dim) == (20, 4, 64, 3)
        assert data.class_counts().tolist() == [5, 5, 5, 5]
        assert data.class_names == ("sphere", "plane", "torus", "cone")
        for cloud in data.clouds:
            assert np.isclose(np.max(np.linalg.norm(cloud.points, axis=1)), 1.0)

    def test_deterministic(self):
        """The dataset is a pure function of its arguments."""
        a = generate_synthetic_dataset(toy_specs(2, n_points=16), per_class=3, seed=11)
        b = generate_synthetic_dataset(toy_specs(2, n_points=16), per_class=3, seed=11)
        assert np.array_equal(a.stacked()[0], b.stacked()[0])

    def test_plane_is_flat(self):
        """Without jitter a plane keeps z at zero after normalization."""
        spec = ShapeSpec("plane", jitter_sigma=0.0, n_points=32)
        data = generate_synthetic_dataset([spec], per_class=2, seed=0)
        assert np.allclose(data.clouds[0].points[:, 2], 0.0)

    def test_invalid_spec(self):
        """Unknown families and excessive jitter are refused."""
        with pytest.raises(InvalidInputError, match="Unknown shape family"):
            ShapeSpec("teapot")
        with pytest.raises(InvalidInputError, match="jitter_sigma"):
            ShapeSpec("sphere", jitter_sigma=0.5)

    def test_split_is_stratified(self, toy_dataset):
        """Every class appears on both sides and no cloud is lost."""
        train, test = split_dataset(toy_dataset, 0.25, seed=3)
        assert len(train) + len(test) == len(toy_dataset)
        assert np.all(train.class_counts() == 6)
        assert np.all(test.class_counts() == 2)
        assert (train.split, test.split) == ("train", "test")


class TestFormats:
    """OFF, PLY and archive readers and writers."""

    def test_off_mesh(self, tmp_path):
        """Comments are skipped and quads are read as faces."""
        path = tmp_path / "cube.off"
        path.write_text(CUBE_OFF)
        vertices, faces = read_off_mesh(path)
        assert vertices.shape == (8, 3)
        assert len(faces) == 6 and faces[0] == [0, 1, 2, 3]

    def test_off_counts_on_header_line(self, tmp_path):
        """``OFF 3 0 0`` on one line is accepted."""
        path = tmp_path / "inline.off"
        path.write_text("OFF 3 0 0\n0 0 0\n1 0 0\n0 1 0\n")
        assert read_off(path).n_points == 3

    def test_off_truncated(self, tmp_path):
        """A file ending early names the line it stopped at."""
        path = tmp_path / "short.off"
        path.write_text("OFF\n3 0 0\n0 0 0\n1 0 0\n")
        with pytest.raises(ParseError, match="line 4: file ends after 2 of 3 vertices"):
            read_off(path)

    def test_off_bad_header(self, tmp_path):
        """A missing keyword is a parse error on line 1."""
        path = tmp_path / "bad.off"
        path.write_text("PLY\n")
        with pytest.raises(ParseError, match="line 1"):
            read_off(path)

    def test_off_write_read(self, tmp_path):
        """Written vertices are read back."""
        points = np.random.default_rng(2).normal(size=(10, 3))
        write_off(points, tmp_path / "c.off")
        assert np.allclose(read_off(tmp_path / "c.off").points, points)

    def test_ply_with_scalars(self, tmp_path):
        """Coordinates and attribution values survive the PLY file."""
        points = np.random.default_rng(4).normal(size=(6, 3))
        psi = np.linspace(-1.0, 1.0, 6)
        write_ply_with_scalars(points, psi, tmp_path / "a.ply")
        cloud, scalars = read_ply_with_scalars(tmp_path / "a.ply")
        assert np.allclose(cloud.points, points)
        assert np.allclose(scalars, psi)

    def test_ply_without_scalars(self, tmp_path):
        """``scalars=None`` writes coordinates only."""
        write_ply_with_scalars(np.zeros((3, 3)), None, tmp_path / "b.ply")
        assert "attribution" not in (tmp_path / "b.ply").read_text()
        _, scalars = read_ply_with_scalars(tmp_path / "b.ply")
        assert scalars is None

    def test_ply_scalar_length(self, tmp_path):
        """One value per point is required."""
        with pytest.raises(InvalidInputError, match="2 attribution values"):
            write_ply_with_scalars(np.zeros((3, 3)), [1.0, 2.0], tmp_path / "c.ply")

    def test_archive(self, tmp_path, toy_dataset):
        """The binary archive keeps coordinates to float32 precision and labels exactly."""
        path = tmp_path / "data.dam1"
        save_dataset_archive(toy_dataset, path)
        loaded = load_dataset_archive(path, toy_dataset.class_names)
        assert loaded.labels == toy_dataset.labels
        assert np.allclose(loaded.stacked()[0], toy_dataset.stacked()[0], atol=1e-6)
        assert path.stat().st_size == 20 + 4 * len(toy_dataset) * (32 * 3 + 1)

    def test_archive_bad_magic(self, tmp_path):
        """Wrong magic bytes are reported at offset 0."""
        path = tmp_path / "bad.dam1"
        path.write_bytes(b"XXXX" + bytes(16))
        with pytest.raises(ParseError, match="byte 0"):
            load_dataset_archive(path)

    def test_archive_truncated(self, tmp_path, toy_dataset):
        """A cut-off archive is a parse error."""
        path = tmp_path / "cut.dam1"
        save_dataset_archive(toy_dataset, path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(ParseError, match="archive size"):
            load_dataset_archive(path)


class TestMeshDirectory:
    """Building datasets from class directories of OFF meshes."""

    def test_surface_sampling_stays_on_cube(self):
        """Surface samples lie on a face of the unit cube."""
        faces = [
            [0, 1, 2, 3],
            [4, 5, 6, 7],
            [0, 1, 5, 4],
            [2, 3, 7, 6],
            [1, 2, 6, 5],
            [0, 3, 7, 4],
        ]
        vertices = np.array(
            [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]]
        ).astype(float)
        cloud = sample_mesh_surface(vertices, faces, 200, seed=0)
        on_face = np.any(np.isclose(cloud.points, 0.0) | np.isclose(cloud.points, 1.0), axis=1)
        assert np.all(on_face)

    @pytest.mark.parametrize("surface", [False, True])
    def test_load_directory(self, tmp_path, surface):
        """Class names come from sorted subdirectories."""
        for name in ("chair", "bowl"):
            (tmp_path / name).mkdir()
            for k in range(2):
                (tmp_path / name / f"{k}.off").write_text(CUBE_OFF)
        data = load_off_directory(tmp_path, n_points=16, seed=0, surface_sampling=surface)
        assert data.class_names == ("bowl", "chair")
        assert len(data) == 4 and data.n_points == 16

    def test_missing_directory(self, tmp_path):
        """A missing root is an input error."""
        with pytest.raises(InvalidInputError):
            load_off_directory(tmp_path / "nope", n_points=16, seed=0)


if __name__ == "__main__":
    pytest.main(["-x", __file__])
