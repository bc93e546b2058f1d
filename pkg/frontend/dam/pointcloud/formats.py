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
Readers and writers for OFF meshes, ASCII PLY clouds with an attribution channel, and the binary
dataset archive.

Dataset archive layout (all little-endian)::

    bytes 0..3     magic b"DAM1"
    4 x int32      N_samples, N, D, N_C
    float32        N_samples * N * D coordinates, row-major
    int32          N_samples labels
"""

import pathlib
import struct
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from dam.pointcloud.clouds import CloudLike, LabeledDataset, PointCloud, as_points
from dam.utils.exceptions import InvalidInputError, ParseError

PathLike = Union[str, pathlib.Path]

ARCHIVE_MAGIC = b"DAM1"
_ARCHIVE_HEADER = struct.Struct("<4s4i")


def _content_lines(path: PathLike):
    """Yield ``(line number, stripped text)`` skipping blank lines and ``#`` comments."""
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if text:
                yield number, text


def _parse_floats(text: str, number: int, count: int) -> List[float]:
    fields = text.split()
    if len(fields) < count:
        raise ParseError(f"line {number}: expected {count} coordinates, found {len(fields)}")
    try:
        return [float(v) for v in fields[:count]]
    except ValueError as e:
        raise ParseError(f"line {number}: {e}") from e


def read_off_mesh(path: PathLike) -> Tuple[np.ndarray, List[List[int]]]:
    """Parse an ASCII OFF mesh.

    The counts may follow the ``OFF`` keyword on the same line (a common quirk of ModelNet files).

    Returns:
        Tuple[np.ndarray, List[List[int]]]: ``V x 3`` vertices and the list of faces

    Raises:
        ParseError: malformed header, bad numbers or a file ending before the announced counts
    """
    lines = _content_lines(path)
    try:
        number, header = next(lines)
    except StopIteration as e:
        raise ParseError("line 1: empty file, expected an OFF header") from e
    if not header.startswith("OFF"):
        raise ParseError(f"line {number}: expected 'OFF' header, found '{header[:20]}'")
    counts_text = header[3:].strip()
    if not counts_text:
        try:
            number, counts_text = next(lines)
        except StopIteration as e:
            raise ParseError(f"line {number}: file ends before the vertex/face counts") from e
    try:
        counts = [int(v) for v in counts_text.split()]
    except ValueError as e:
        raise ParseError(f"line {number}: invalid counts '{counts_text}'") from e
    if len(counts) < 2 or counts[0] < 0 or counts[1] < 0:
        raise ParseError(f"line {number}: expected 'n_vertices n_faces [n_edges]'")
    n_vertices, n_faces = counts[0], counts[1]

    vertices = []
    for _ in range(n_vertices):
        try:
            number, text = next(lines)
        except StopIteration as e:
            raise ParseError(
                f"line {number}: file ends after {len(vertices)} of {n_vertices} vertices"
            ) from e
        vertices.append(_parse_floats(text, number, 3))

    faces = []
    for _ in range(n_faces):
        try:
            number, text = next(lines)
        except StopIteration as e:
            raise ParseError(
                f"line {number}: file ends after {len(faces)} of {n_faces} faces"
            ) from e
        try:
            fields = [int(v) for v in text.split()]
        except ValueError as e:
            raise ParseError(f"line {number}: invalid face '{text}'") from e
        if not fields or len(fields) < fields[0] + 1:
            raise ParseError(f"line {number}: face announces more indices than it lists")
        face = fields[1 : fields[0] + 1]
        if any(not 0 <= i < n_vertices for i in face):
            raise ParseError(f"line {number}: face index out of range [0, {n_vertices})")
        faces.append(face)
    return np.asarray(vertices, dtype=np.float64).reshape(n_vertices, 3), faces


def read_off(path: PathLike) -> PointCloud:
    """Read the vertices of an OFF mesh as a point cloud."""
    vertices, _ = read_off_mesh(path)
    if len(vertices) == 0:
        raise ParseError(f"{path}: the mesh has no vertices")
    return PointCloud(vertices)


def write_off(cloud: CloudLike, path: PathLike) -> None:
    """Write a 3-D cloud as a face-less OFF file."""
    points = as_points(cloud)
    if points.ndim != 2 or points.shape[1] != 3:
        raise InvalidInputError(f"OFF stores 3-D points, got shape {points.shape}")
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"OFF\n{points.shape[0]} 0 0\n")
        for p in points:
            f.write(f"{p[0]:.10g} {p[1]:.10g} {p[2]:.10g}\n")


def write_ply_with_scalars(
    cloud: CloudLike, scalars: Optional[Sequence[float]], path: PathLike
) -> None:
    """Write an ASCII PLY file with ``x, y, z`` and a float ``attribution`` property per vertex.

    With ``scalars=None`` only the coordinates are written.

    Raises:
        InvalidInputError: ``scalars`` has the wrong length or contains non-finite values
    """
    points = as_points(cloud)
    if points.ndim != 2 or points.shape[1] != 3:
        raise InvalidInputError(f"PLY export stores 3-D points, got shape {points.shape}")
    if scalars is None:
        _write_ply(path, points, None)
        return
    scalars = np.asarray(scalars, dtype=np.float64).reshape(-1)
    if len(scalars) != points.shape[0]:
        raise InvalidInputError(
            f"Got {len(scalars)} attribution values for a cloud of {points.shape[0]} points"
        )
    if not np.all(np.isfinite(scalars)):
        raise InvalidInputError("Attribution values must be finite")
    _write_ply(path, points, scalars)


def _write_ply(path, points, scalars):
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {points.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if scalars is not None:
        header.append("property float attribution")
    header.append("end_header")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(header) + "\n")
        for k, p in enumerate(points):
            tail = "" if scalars is None else f" {scalars[k]:.10g}"
            f.write(f"{p[0]:.10g} {p[1]:.10g} {p[2]:.10g}{tail}\n")


def read_ply_with_scalars(path: PathLike) -> Tuple[PointCloud, Optional[np.ndarray]]:
    """Read an ASCII PLY vertex list, returning the cloud and its ``attribution`` values if any."""
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("line 1: expected 'ply' magic")
    n_vertices, properties, body = None, [], None
    for number, line in enumerate(lines[1:], start=2):
        fields = line.split()
        if not fields:
            continue
        if fields[0] == "format" and fields[1:2] != ["ascii"]:
            raise ParseError(f"line {number}: only ASCII PLY is supported")
        if fields[:2] == ["element", "vertex"]:
            n_vertices = int(fields[2])
        elif fields[0] == "property" and n_vertices is not None:
            properties.append(fields[-1])
        elif fields[0] == "end_header":
            body = number
            break
    if body is None or n_vertices is None:
        raise ParseError("PLY header lacks 'element vertex' or 'end_header'")
    for axis in ("x", "y", "z"):
        if axis not in properties:
            raise ParseError(f"PLY header lacks property '{axis}'")
    rows = []
    for number in range(body + 1, body + 1 + n_vertices):
        if number > len(lines):
            raise ParseError(f"line {number}: file ends after {len(rows)} of {n_vertices} vertices")
        rows.append(_parse_floats(lines[number - 1], number, len(properties)))
    data = np.asarray(rows, dtype=np.float64).reshape(n_vertices, len(properties))
    cloud = PointCloud(data[:, [properties.index(a) for a in ("x", "y", "z")]])
    scalars = data[:, properties.index("attribution")] if "attribution" in properties else None
    return cloud, scalars


def save_dataset_archive(dataset: LabeledDataset, path: PathLike) -> None:
    """Write a dataset in the ``DAM1`` binary layout."""
    coords, labels = dataset.stacked()
    n_samples = len(dataset)
    header = _ARCHIVE_HEADER.pack(
        ARCHIVE_MAGIC, n_samples, dataset.n_points, dataset.dim, dataset.n_classes
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(coords, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(labels, dtype="<i4").tobytes())


def load_dataset_archive(
    path: PathLike, class_names: Optional[Sequence[str]] = None, split: str = "train"
) -> LabeledDataset:
    """Read a ``DAM1`` archive.

    Args:
        path: archive location
        class_names: names for the ``N_C`` classes; ``class_<k>`` placeholders when omitted
        split: split tag for the returned dataset

    Raises:
        ParseError: wrong magic or truncated content (the message names the byte offset)
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _ARCHIVE_HEADER.size:
        raise ParseError(f"byte 0: archive shorter than its {_ARCHIVE_HEADER.size}-byte header")
    magic, n_samples, n, d, n_classes = _ARCHIVE_HEADER.unpack_from(blob, 0)
    if magic != ARCHIVE_MAGIC:
        raise ParseError(f"byte 0: expected magic {ARCHIVE_MAGIC!r}, found {magic!r}")
    if min(n_samples, n, d, n_classes) < 0:
        raise ParseError("byte 4: negative count in archive header")
    offset = _ARCHIVE_HEADER.size
    n_coords = n_samples * n * d
    expected = offset + 4 * n_coords + 4 * n_samples
    if len(blob) != expected:
        raise ParseError(
            f"byte {len(blob)}: archive size differs from the {expected} bytes announced"
        )
    coords = np.frombuffer(blob, dtype="<f4", count=n_coords, offset=offset)
    labels = np.frombuffer(blob, dtype="<i4", count=n_samples, offset=offset + 4 * n_coords)
    coords = coords.astype(np.float64).reshape(n_samples, n, d)
    if class_names is None:
        class_names = [f"class_{k}" for k in range(n_classes)]
    if len(class_names) != n_classes:
        raise InvalidInputError(f"Archive has {n_classes} classes, {len(class_names)} names given")
    return LabeledDataset(
        tuple(PointCloud(c) for c in coords),
        tuple(int(l) for l in labels),
        tuple(class_names),
        split,
    )
