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
Functions to interface with the filesystem: the run directory layout and its manifest.
"""

import json
import os
import pathlib
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

from dataclasses_json import dataclass_json

from dam.utils.exceptions import MissingArtifactError

RUN_DIR_ENV = "DAM_RUN_DIR"
DEFAULT_RUN_DIR = "dam_run"
MANIFEST_SCHEMA = "dam-manifest-v1"

SUBDIRECTORIES = (
    "data", "checkpoints", "explanations", "trajectories", "saliency", "reports", "configs"
)


@dataclass_json
@dataclass
class ManifestEntry:
    """One artifact written into a run directory.

    Fields:
        kind: artifact family, e.g. ``"explanation"`` or ``"checkpoint"``
        path: path relative to the run directory root
        seed: seed the artifact was produced with
        config_hash: hash of the resolved configuration in effect
        label: target class, if any
        second_label: second target class of a multi-neuron explanation
        seconds: wall time spent producing the artifact
        per_step_seconds: mean wall time per diffusion step, for sampled artifacts
        status: ``"ok"`` or ``"failed"``
        error: failure message when ``status == "failed"``
        extra: free-form string attributes (activation mode, init mode, ...)
    """

    kind: str
    path: str
    seed: int
    config_hash: str
    label: Optional[int] = None
    second_label: Optional[int] = None
    seconds: Optional[float] = None
    per_step_seconds: Optional[float] = None
    status: str = "ok"
    error: Optional[str] = None
    extra: Dict[str, str] = field(default_factory=dict)


@dataclass_json
@dataclass
class Manifest:
    """The list of every artifact in a run directory."""

    schema: str = MANIFEST_SCHEMA
    entries: List[ManifestEntry] = field(default_factory=list)


class RunDirectory:
    """An append-only directory holding everything produced by one pipeline run.

    Layout::

        config.resolved
        manifest.json
        data/  checkpoints/  explanations/  trajectories/  saliency/  reports/  configs/

    Artifacts are never overwritten: asking for a path that already exists returns the first free
    numbered variant (``name_1.ext``, ``name_2.ext``, ...). ``config.resolved`` is written by the
    first command; configurations of later commands that differ from it go to ``configs/``.

    Args:
        root (Union[str, pathlib.Path, None]): run directory. If ``None``, the ``DAM_RUN_DIR``
            environment variable is used, falling back to ``./dam_run``.
    """

    def __init__(self, root: Union[str, pathlib.Path, None] = None):
        if root is None:
            root = os.getenv(RUN_DIR_ENV, DEFAULT_RUN_DIR)
        self.root = pathlib.Path(root)
        self._lock = threading.Lock()

    def __str__(self):
        return str(self.root)

    def create(self) -> "RunDirectory":
        """Create the directory tree if it does not exist."""
        for sub in SUBDIRECTORIES:
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        return self

    @property
    def config_path(self) -> pathlib.Path:
        """Location of the resolved configuration snapshot."""
        return self.root / "config.resolved"

    def write_snapshot(self, text: str, config_hash: str) -> Optional[pathlib.Path]:
        """Store a resolved configuration without touching an existing ``config.resolved``.

        Returns:
            Optional[pathlib.Path]: the new ``configs/<hash>.resolved`` file when ``text`` differs
            from the run snapshot and was not stored before, else ``None``
        """
        self.root.mkdir(parents=True, exist_ok=True)
        with self._lock:
            if not self.config_path.exists():
                self.config_path.write_text(text, encoding="utf-8")
                return None
            if self.config_path.read_text(encoding="utf-8") == text:
                return None
            path = self.root / "configs" / f"{config_hash}.resolved"
            if path.exists():
                return None
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
            return path

    @property
    def manifest_path(self) -> pathlib.Path:
        """Location of the manifest."""
        return self.root / "manifest.json"

    def path(self, kind: str, name: str) -> pathlib.Path:
        """Path of an existing or future artifact without any uniqueness handling."""
        return self.root / kind / name

    def require(self, kind: str, name: str, producer: str) -> pathlib.Path:
        """Return the path of an artifact that must already exist.

        Raises:
            MissingArtifactError: naming the ``dam`` command that produces the artifact
        """
        path = self.path(kind, name)
        if not path.exists():
            raise MissingArtifactError(f"{path} does not exist; run `dam {producer}` first")
        return path

    def new_path(self, kind: str, name: str) -> pathlib.Path:
        """Reserve a fresh artifact path, numbering it if ``name`` is taken."""
        directory = self.root / kind
        directory.mkdir(parents=True, exist_ok=True)
        preferred = pathlib.Path(name)
        suffix = "".join(preferred.suffixes)
        stem = preferred.name[: len(preferred.name) - len(suffix)]
        with self._lock:
            count = 1
            candidate = directory / preferred.name
            while candidate.exists():
                candidate = directory / f"{stem}_{count}{suffix}"
                count += 1
            candidate.touch()
        return candidate

    def load_manifest(self) -> Manifest:
        """Read the manifest, returning an empty one for a fresh directory."""
        if not self.manifest_path.exists():
            return Manifest()
        with open(self.manifest_path, "r", encoding="utf-8") as f:
            return Manifest.from_dict(json.load(f))

    def record(self, entries: Union[ManifestEntry, List[ManifestEntry]]) -> None:
        """Append entries to the manifest."""
        if isinstance(entries, ManifestEntry):
            entries = [entries]
        with self._lock:
            manifest = self.load_manifest()
            manifest.entries.extend(entries)
            self.root.mkdir(parents=True, exist_ok=True)
            with open(self.manifest_path, "w", encoding="utf-8") as f:
                json.dump(manifest.to_dict(), f, indent=2)

    def relative(self, path: Union[str, pathlib.Path]) -> str:
        """Express ``path`` relative to the run directory root."""
        return str(pathlib.Path(path).resolve().relative_to(self.root.resolve()))

    def artifacts(self, kind: str, pattern: str = "*") -> List[pathlib.Path]:
        """Sorted list of artifacts of one kind."""
        directory = self.root / kind
        if not directory.is_dir():
            return []
        return sorted(p for p in directory.glob(pattern) if p.is_file())
