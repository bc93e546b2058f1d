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
Parameter containers and building blocks shared by the networks.

Parameters are plain pytrees (nested dicts and lists of ``jax.Array``). Every learned map acts on
the last axis only, so applied to an ``N x C`` point array it is a kernel of width one across the
point axis.
"""

from typing import Any, Callable, List, Sequence, Tuple

import jax
import jax.numpy as jnp
import optax

Params = Any


def init_dense(key, d_in: int, d_out: int, zero: bool = False) -> Params:
    """He-initialized affine map ``R^{d_in} -> R^{d_out}``."""
    if zero:
        weight = jnp.zeros((d_in, d_out))
    else:
        weight = jax.random.normal(key, (d_in, d_out)) * jnp.sqrt(2.0 / d_in)
    return {"w": weight, "b": jnp.zeros((d_out,))}


def dense(params: Params, x):
    """Apply an affine map to the last axis of ``x``."""
    return x @ params["w"] + params["b"]


def init_mlp(key, widths: Sequence[int]) -> List[Params]:
    """A stack of dense layers ``widths[0] -> widths[1] -> ... -> widths[-1]``."""
    keys = jax.random.split(key, max(len(widths) - 1, 1))
    return [init_dense(k, a, b) for k, a, b in zip(keys, widths[:-1], widths[1:])]


def mlp(layers: List[Params], x, activation: Callable = jax.nn.relu) -> Tuple[Any, List[Any]]:
    """Apply every layer followed by ``activation``.

    Returns:
        Tuple: the final output and the list of every layer's activated output
    """
    outputs = []
    for layer in layers:
        x = activation(dense(layer, x))
        outputs.append(x)
    return x, outputs


def max_pool(x):
    """Symmetric reduction over the point axis."""
    return jnp.max(x, axis=-2)


def decaying_adam(lr_start: float, lr_end: float, total_steps: int) -> optax.GradientTransformation:
    """Adam whose learning rate decays exponentially from ``lr_start`` to ``lr_end``."""
    schedule = optax.exponential_decay(
        init_value=lr_start,
        transition_steps=max(total_steps, 1),
        decay_rate=lr_end / lr_start,
        end_value=min(lr_start, lr_end),
    )
    return optax.adam(schedule)


def tree_is_finite(tree: Params) -> bool:
    """True if every leaf of ``tree`` is finite."""
    leaves = jax.tree_util.tree_leaves(tree)
    return all(bool(jnp.all(jnp.isfinite(leaf))) for leaf in leaves)


def pointwise_audit(params: Params) -> List[Tuple[str, Tuple[int, ...]]]:
    """List every parameter with its shape, checking none of them spans the point axis.

    A dense weight is 2-D ``(d_in, d_out)``, a multi-head projection is 3-D
    ``(heads, d_in, d_out)`` and a bias is 1-D. All of them are fixed at construction time, before
    any point count is known.

    Raises:
        ValueError: if a parameter has an unexpected rank
    """
    report = []
    for path, leaf in jax.tree_util.tree_flatten_with_path(params)[0]:
        name = jax.tree_util.keystr(path)
        if leaf.ndim not in (1, 2, 3):
            raise ValueError(f"Parameter {name} with shape {leaf.shape} is not a per-point map")
        report.append((name, tuple(leaf.shape)))
    return report
