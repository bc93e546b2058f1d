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
Self-describing model archives.

An archive is a compressed ``.npz`` file. The ``__meta__`` entry holds a JSON document with the
version tag, the model configuration, training metrics and the training step; parameter leaves
are stored in pytree-flattening order as ``param_XXXXX`` and optimizer-state leaves as
``opt_XXXXX``. The pytree structure itself is rebuilt from the configuration on load, so the
archive never pickles Python objects.
"""

import json
import pathlib
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Union

import jax
import numpy as np

from dam.utils.exceptions import CheckpointError, MissingArtifactError


@dataclass
class CheckpointData:
    """Raw content of an archive before the model structure is restored."""

    version: str
    config: Dict[str, Any]
    metrics: Dict[str, Any]
    step: int
    params: List[np.ndarray]
    opt_state: List[np.ndarray] = field(default_factory=list)
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(
    path: Union[str, pathlib.Path],
    version: str,
    config: Dict[str, Any],
    params: Any,
    metrics: Optional[Dict[str, Any]] = None,
    opt_state: Any = None,
    step: int = 0,
    arrays: Optional[Dict[str, np.ndarray]] = None,
) -> None:
    """Write a model archive.

    Args:
        path: destination file
        version: archive version tag, checked on load
        config: JSON-serializable model configuration
        params: parameter pytree
        metrics: JSON-serializable training metrics
        opt_state: optional optimizer-state pytree, stored for resuming
        step: number of completed training steps (epochs or iterations)
        arrays: additional named arrays (e.g. the noise schedule)
    """
    meta = {
        "version": version,
        "config": config,
        "metrics": metrics or {},
        "step": int(step),
    }
    payload = {"__meta__": np.array(json.dumps(meta))}
    for i, leaf in enumerate(jax.tree_util.tree_leaves(params)):
        payload[f"param_{i:05d}"] = np.asarray(leaf)
    if opt_state is not None:
        for i, leaf in enumerate(jax.tree_util.tree_leaves(opt_state)):
            payload[f"opt_{i:05d}"] = np.asarray(leaf)
    for name, value in (arrays or {}).items():
        payload[f"array_{name}"] = np.asarray(value)
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez_compressed(f, **payload)


def load_checkpoint(path: Union[str, pathlib.Path], version: str) -> CheckpointData:
    """Read a model archive and check its version tag.

    Raises:
        MissingArtifactError: the file does not exist
        CheckpointError: the archive is not a ``version`` archive
    """
    path = pathlib.Path(path)
    if not path.exists():
        raise MissingArtifactError(f"Checkpoint {path} does not exist")
    with np.load(path, allow_pickle=False) as archive:
        if "__meta__" not in archive.files:
            raise CheckpointError(f"{path} is not a dam checkpoint")
        meta = json.loads(str(archive["__meta__"]))
        if meta.get("version") != version:
            raise CheckpointError(
                f"{path} has version '{meta.get('version')}', expected '{version}'"
            )
        names = sorted(archive.files)
        params = [archive[n] for n in names if n.startswith("param_")]
        opt_state = [archive[n] for n in names if n.startswith("opt_")]
        arrays = {n[len("array_") :]: archive[n] for n in names if n.startswith("array_")}
    return CheckpointData(
        version=meta["version"],
        config=meta["config"],
        metrics=meta["metrics"],
        step=meta["step"],
        params=params,
        opt_state=opt_state,
        arrays=arrays,
    )


def restore_tree(template: Any, leaves: List[np.ndarray], what: str = "parameters") -> Any:
    """Rebuild a pytree with the structure of ``template`` from saved ``leaves``.

    Raises:
        CheckpointError: leaf count or shapes disagree with the template
    """
    template_leaves, treedef = jax.tree_util.tree_flatten(template)
    if len(template_leaves) != len(leaves):
        raise CheckpointError(
            f"Stored {what} have {len(leaves)} leaves, the configuration implies "
            f"{len(template_leaves)}"
        )
    for expected, stored in zip(template_leaves, leaves):
        if tuple(np.shape(expected)) != tuple(stored.shape):
            raise CheckpointError(
                f"Stored {what} shape {stored.shape} does not match expected {np.shape(expected)}"
            )
    return jax.tree_util.tree_unflatten(treedef, [jax.numpy.asarray(l) for l in leaves])


def restore_optimizer(init_fn: Callable[[Any], Any], params: Any, leaves: List[np.ndarray]) -> Any:
    """Rebuild an optimizer state saved next to ``params``; ``None`` when nothing was saved."""
    if not leaves:
        return None
    return restore_tree(init_fn(params), leaves, what="optimizer state")
