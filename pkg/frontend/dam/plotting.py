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
Rendering of explanations and their saliency maps as 3-D scatter plots.
"""

import pathlib
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

# pylint: disable=wrong-import-position
import matplotlib.pyplot as plt
import numpy as np

from dam.igd import SaliencySequence
from dam.pointcloud import as_points
from dam.utils.exceptions import InvalidInputError

PathLike = Union[str, pathlib.Path]

plt.rcParams["savefig.bbox"] = "tight"
plt.rcParams["savefig.dpi"] = 150


def _scatter(ax, points: np.ndarray, psi: Optional[np.ndarray], title: str):
    if psi is None:
        ax.scatter(points[:, 0], points[:, 1], points[:, 2], s=4, c="tab:blue")
    else:
        # marker size grows with the attribution magnitude
        magnitude = np.abs(psi)
        sizes = 2 + 30 * magnitude / (magnitude.max() or 1.0)
        ax.scatter(points[:, 0], points[:, 1], points[:, 2], s=sizes, c=psi, cmap="coolwarm")
    ax.set_title(title, fontsize=9)
    ax.set_axis_off()
    limit = np.abs(points).max() or 1.0
    for setter in (ax.set_xlim, ax.set_ylim, ax.set_zlim):
        setter(-limit, limit)


def _check_3d(cloud) -> np.ndarray:
    points = as_points(cloud)
    if points.ndim != 2 or points.shape[1] != 3:
        raise InvalidInputError(f"Plots render 3-D clouds, got shape {points.shape}")
    return points


def plot_cloud(cloud, path: PathLike, psi=None, title: str = "") -> pathlib.Path:
    """Render one cloud, coloured and sized by ``psi`` when given."""
    points = _check_3d(cloud)
    psi = None if psi is None else np.asarray(psi, dtype=np.float64)
    if psi is not None and psi.shape != (len(points),):
        raise InvalidInputError(f"{psi.shape} attributions for a cloud of {len(points)} points")
    fig = plt.figure(figsize=(4, 4))
    _scatter(fig.add_subplot(projection="3d"), points, psi, title)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return pathlib.Path(path)


def plot_saliency_sequence(
    cloud, seq: SaliencySequence, path: PathLike, title: str = ""
) -> pathlib.Path:
    """One panel per emitted map of a saliency sequence, drawn on the explanation."""
    points = _check_3d(cloud)
    fig = plt.figure(figsize=(3 * len(seq), 3.4))
    for k, m in enumerate(seq):
        ax = fig.add_subplot(1, len(seq), k + 1, projection="3d")
        _scatter(ax, points, m.psi, f"t = {m.t_emitted}")
    if title:
        fig.suptitle(title)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return pathlib.Path(path)


def plot_gallery(clouds: Sequence, titles: Sequence[str], path: PathLike) -> pathlib.Path:
    """A row of explanations."""
    if len(clouds) != len(titles) or not clouds:
        raise InvalidInputError("Need one title per cloud and at least one cloud")
    fig = plt.figure(figsize=(3 * len(clouds), 3.4))
    for k, (cloud, title) in enumerate(zip(clouds, titles)):
        ax = fig.add_subplot(1, len(clouds), k + 1, projection="3d")
        _scatter(ax, _check_3d(cloud), None, title)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return pathlib.Path(path)
