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
Module for abstracting which toml_load to use, and for writing the flat ``section.key = value``
documents the run directories store.
"""

import importlib.util
import json
from typing import Any, Dict, Mapping

# TODO:
# Once Python version 3.11 is the oldest supported Python version, we can remove tomlkit
# and rely exclusively on tomllib.

# New in version 3.11
# https://docs.python.org/3/library/tomllib.html
tomllib = importlib.util.find_spec("tomllib")
tomlkit = importlib.util.find_spec("tomlkit")
# We need at least one of these to make sure we can read toml files.
if tomllib is None and tomlkit is None:  # pragma: nocover
    msg = "Either tomllib or tomlkit need to be installed."
    raise ImportError(msg)

# Give preference to tomllib
if tomllib:
    from tomllib import load as toml_load  # pragma: nocover
    from tomllib import loads as toml_loads  # pragma: nocover
else:
    from tomlkit import load as toml_load  # pragma: nocover
    from tomlkit import loads as toml_loads  # pragma: nocover


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    raise TypeError(f"Cannot serialize value of type {type(value).__name__}")


def toml_dumps_flat(document: Mapping[str, Mapping[str, Any]], header: str = "") -> str:
    """Serialize a two-level mapping as ``section.key = value`` lines.

    Sections and keys are emitted in sorted order so that equal documents produce equal text.
    ``None`` values are omitted since TOML has no null.
    """
    lines = [f"# {line}" for line in header.splitlines()]
    for section in sorted(document):
        for key in sorted(document[section]):
            value = document[section][key]
            if value is None:
                continue
            lines.append(f"{section}.{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def flatten_sections(document: Mapping[str, Any]) -> Dict[str, Dict[str, Any]]:
    """Return ``{section: {key: value}}`` from a parsed TOML document, rejecting deeper nesting."""
    sections = {}
    for section, body in document.items():
        if not isinstance(body, Mapping):
            raise ValueError(f"Top-level key '{section}' must be written as 'section.key = value'")
        sections[section] = {}
        for key, value in body.items():
            if isinstance(value, Mapping):
                raise ValueError(f"Key '{section}.{key}' is nested too deeply")
            sections[section][key] = value
    return sections


__all__ = ["toml_load", "toml_loads", "toml_dumps_flat", "flatten_sections"]
