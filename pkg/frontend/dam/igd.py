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
Per-point attribution of explanations: integrated gradients along the diffusion path, the
straight-line integrated gradients baseline and random attributions.
"""

import functools
import json
import pathlib
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import jax
import jax.numpy as jnp
import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from dam.classifier import (
    ACTIVATION_MODES,
    Classifier,
    NeuronSelector,
    activation_value,
    check_selector,
)
from dam.pointcloud import as_points, write_ply_with_scalars
from dam.sampler import RECORDED_MODE, DiffusionTrajectory
from dam.utils.exceptions import CheckpointError, InvalidInputError, MissingArtifactError

REDUCTIONS = ("sum", "abs", "norm")
METHODS = ("igd", "linear_ig", "random")
SALIENCY_SCHEMA = "dam-saliency-v1"


def reduce_to_points(products, reduction: str = "sum") -> np.ndarray:
    """Collapse ``N x D`` per-coordinate attributions into ``N`` per-point scalars.

    ``"sum"`` keeps the attributions additive; ``"abs"`` sums magnitudes and ``"norm"`` takes
    the Euclidean norm, both for visualization.
    """
    products = np.asarray(products, dtype=np.float64)
    if reduction == "sum":
        return products.sum(axis=-1)
    if reduction == "abs":
        return np.abs(products).sum(axis=-1)
    if reduction == "norm":
        return np.linalg.norm(products, axis=-1)
    raise InvalidInputError(f"Unknown reduction '{reduction}', expected {REDUCTIONS}")


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    """Per-point attribution ``psi`` emitted at chain step ``t_emitted``."""

    psi: np.ndarray
    t_emitted: int = 0
    reduction: str = "sum"

    def __post_init__(self):
        psi = np.array(self.psi, dtype=np.float64)
        if psi.ndim != 1 or len(psi) < 1:
            raise InvalidInputError(f"A saliency map is a non-empty vector, got shape {psi.shape}")
        if not np.all(np.isfinite(psi)):
            raise InvalidInputError("Saliency values must be finite")
        if self.reduction not in REDUCTIONS:
            raise InvalidInputError(f"Unknown reduction '{self.reduction}'")
        psi.flags.writeable = False
        object.__setattr__(self, "psi", psi)

    def __len__(self):
        return len(self.psi)


@dataclass(frozen=True, eq=False)
class SaliencySequence:
    """Saliency maps of one explanation ordered by decreasing emission step.

    Args:
        maps (List[SaliencyMap]): the maps, strictly decreasing in ``t_emitted``
        stride (int): emission stride in chain steps
        method (str): ``"igd"``, ``"linear_ig"`` or ``"random"``
    """

    maps: Tuple[SaliencyMap, ...]
    stride: int
    method: str = "igd"

    def __post_init__(self):
        maps = tuple(self.maps)
        if not maps:
            raise InvalidInputError("A saliency sequence needs at least one map")
        steps = [m.t_emitted for m in maps]
        if any(a <= b for a, b in zip(steps, steps[1:])):
            raise InvalidInputError(f"Emission steps must decrease strictly, got {steps}")
        if len({len(m) for m in maps}) != 1:
            raise InvalidInputError("All maps of a sequence must cover the same points")
        if self.method not in METHODS:
            raise InvalidInputError(f"Unknown attribution method '{self.method}'")
        object.__setattr__(self, "maps", maps)

    def __len__(self):
        return len(self.maps)

    def __iter__(self):
        return iter(self.maps)

    @property
    def steps(self) -> List[int]:
        """Emission step of every map."""
        return [m.t_emitted for m in self.maps]

    @property
    def final(self) -> SaliencyMap:
        """The last emitted map, at ``t = 0`` for a full sequence."""
        return self.maps[-1]

    def stacked(self) -> np.ndarray:
        """``K x N`` array of the maps."""
        return np.stack([m.psi for m in self.maps])

    def save(self, path: Union[str, pathlib.Path]) -> None:
        """Write a compressed archive."""
        meta = {
            "schema": SALIENCY_SCHEMA,
            "stride": self.stride,
            "method": self.method,
            "reduction": self.maps[0].reduction,
        }
        with open(path, "wb") as f:
            np.savez_compressed(
                f,
                __meta__=np.array(json.dumps(meta)),
                psi=self.stacked(),
                steps=np.asarray(self.steps, dtype=np.int64),
            )

    @classmethod
    def load(cls, path: Union[str, pathlib.Path]) -> "SaliencySequence":
        """Read an archive written by ``save``."""
        path = pathlib.Path(path)
        if not path.exists():
            raise MissingArtifactError(f"Saliency {path} does not exist; run `dam saliency` first")
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            if meta.get("schema") != SALIENCY_SCHEMA:
                raise CheckpointError(f"{path} is not a {SALIENCY_SCHEMA} archive")
            maps = tuple(
                SaliencyMap(psi, int(t), meta["reduction"])
                for psi, t in zip(data["psi"], data["steps"].tolist())
            )
        return cls(maps, meta["stride"], meta["method"])

    def to_frame(self, cloud) -> pd.DataFrame:
        """Long table ``t, point, x, y, z, psi`` over every map, located on ``cloud``."""
        points = as_points(cloud)
        if points.shape[0] != len(self.maps[0]):
            raise InvalidInputError("The cloud and the saliency maps cover different points")
        frames = []
        for m in self.maps:
            frame = pd.DataFrame(points[:, :3], columns=["x", "y", "z"][: min(3, points.shape[1])])
            frame.insert(0, "point", np.arange(len(m)))
            frame.insert(0, "t", m.t_emitted)
            frame["psi"] = m.psi
            frames.append(frame)
        return pd.concat(frames, ignore_index=True)

    def export(self, cloud, directory: Union[str, pathlib.Path], stem: str) -> List[pathlib.Path]:
        """Write one PLY per map (attribution channel on ``cloud``) and one CSV of all maps."""
        directory = pathlib.Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for m in self.maps:
            path = directory / f"{stem}_t{m.t_emitted}.ply"
            write_ply_with_scalars(cloud, m.psi, path)
            written.append(path)
        csv = directory / f"{stem}.csv"
        self.to_frame(cloud).to_csv(csv, index=False)
        return written + [csv]


def emission_steps(n_timesteps: int, stride: int) -> List[int]:
    """Chain steps at which maps are emitted: every ``stride`` steps after at least one
    accumulation, and always ``t = 0``.

    **Example**

    >>> emission_steps(250, 50)
    [200, 150, 100, 50, 0]
    """
    if n_timesteps < 1 or stride < 1:
        raise InvalidInputError("T and the emission stride must be at least 1")
    if stride > n_timesteps:
        raise InvalidInputError(
            f"The emission stride {stride} exceeds the chain length T={n_timesteps}"
        )
    steps = [t for t in range(n_timesteps - 1, 0, -1) if (n_timesteps - t) % stride == 0]
    return steps + [0]


def _step_label(trajectory: DiffusionTrajectory, t: int) -> int:
    return trajectory.labels[0] if t % 2 == 0 else trajectory.labels[1]


def _resolve_unit(model: Classifier, target: NeuronSelector, mode: str, label: int) -> int:
    follows_label = target.layer == "output" and target.index is None
    return check_selector(model.config, target, mode, label if follows_label else None)


def recompute_gradients(
    model: Classifier, trajectory: DiffusionTrajectory, mode: str
) -> np.ndarray:
    """Gradients of the trajectory's target activation in another ``mode`` at every state.

    Raises:
        InvalidInputError: the trajectory does not store every state
    """
    if not trajectory.is_complete:
        raise InvalidInputError(
            "Recomputing gradients needs every state; explain with `--state-stride 1`"
        )
    target = NeuronSelector.parse(trajectory.target)
    n_timesteps = trajectory.n_timesteps
    units = [
        _resolve_unit(model, target, mode, _step_label(trajectory, t))
        for t in range(n_timesteps, 0, -1)
    ]
    grads = _batched_unit_grads(
        model.params,
        model.config,
        jnp.asarray(trajectory.states[:-1]),
        jnp.asarray(units),
        target.layer,
        mode,
    )
    return np.asarray(grads)


@functools.partial(jax.jit, static_argnames=("config", "layer", "mode"))
def _batched_unit_grads(params, config, points, units, layer, mode):
    grad = jax.grad(activation_value, argnums=2)
    empty = jnp.zeros((0,))
    return jax.vmap(lambda p, u: grad(params, config, p, empty, layer, u, mode))(points, units)


def igd_attribution(
    trajectory: DiffusionTrajectory,
    stride: int = 50,
    reduction: str = "sum",
    recompute_mode: Optional[str] = None,
    model: Optional[Classifier] = None,
) -> SaliencySequence:
    """Integrated gradients along the sampling path of an explanation.

    A running sum ``Delta g`` collects the recorded gradients at ``x_T, x_{T-1}, ...``. After
    ``k`` accumulations the map at ``t = T - k`` is ``(x_t - x_T) * Delta g / k``, reduced per
    point; the final map at ``t = 0`` integrates the whole chain.

    Args:
        trajectory: a sampled chain with its gradients
        stride: emit a map every ``stride`` steps (and always at ``t = 0``)
        reduction: coordinate-to-point reduction
        recompute_mode: recompute the gradients in this activation mode with ``model`` instead of
            using the recorded ones
        model: the explained classifier, needed with ``recompute_mode``

    Raises:
        InvalidInputError: a needed state was dropped from the trajectory, or recomputation was
            requested without a model
    """
    n_timesteps = trajectory.n_timesteps
    emit = emission_steps(n_timesteps, stride)
    for t in emit:
        if not trajectory.has_state(t):
            raise InvalidInputError(
                f"State x_{t} needed for emission is not stored; save trajectories with a stride "
                f"dividing {stride}"
            )
    grads = trajectory.grads
    if recompute_mode is not None:
        if recompute_mode not in ACTIVATION_MODES:
            raise InvalidInputError(f"Unknown activation mode '{recompute_mode}'")
        if model is None:
            raise InvalidInputError("Recomputing gradients needs the explained classifier")
        grads = recompute_gradients(model, trajectory, recompute_mode)
    x_start = trajectory.state_at(n_timesteps)
    accumulated = np.zeros_like(x_start)
    maps = []
    for k in range(1, n_timesteps + 1):
        accumulated += grads[k - 1]
        t = n_timesteps - k
        if t in emit:
            products = (trajectory.state_at(t) - x_start) * accumulated / k
            maps.append(SaliencyMap(reduce_to_points(products, reduction), t, reduction))
    return SaliencySequence(tuple(maps), stride, "igd")


def path_integrated_gradients(
    fn: Callable, x, baseline, steps: int = 256
) -> np.ndarray:
    """Per-coordinate integrated gradients of a scalar JAX function along the straight line from
    ``baseline`` to ``x``, integrated with the trapezoid rule over ``steps + 1`` points.

    Exact for functions that are linear in their input.
    """
    if steps < 1:
        raise InvalidInputError(f"steps must be at least 1, got {steps}")
    x, baseline = np.asarray(x, dtype=np.float64), np.asarray(baseline, dtype=np.float64)
    if x.shape != baseline.shape:
        raise InvalidInputError(f"Input {x.shape} and baseline {baseline.shape} differ in shape")
    alphas = np.linspace(0.0, 1.0, steps + 1)
    path = baseline[None] + alphas.reshape(-1, *([1] * x.ndim)) * (x - baseline)[None]
    grads = np.asarray(jax.vmap(jax.grad(fn))(jnp.asarray(path)))
    return (x - baseline) * trapezoid(grads, alphas, axis=0)


# pylint: disable=too-many-arguments
def linear_ig(
    model: Classifier,
    x,
    baseline,
    steps: int = 256,
    target: NeuronSelector = NeuronSelector(),
    mode: str = "log_softmax",
    label: Optional[int] = None,
    reduction: str = "sum",
    t_emitted: int = 0,
) -> SaliencyMap:
    """Straight-line integrated gradients of the target activation of the explained classifier.

    Before the reduction the attributions satisfy completeness: they sum to the difference of
    the target activation between ``x`` and ``baseline``, up to the quadrature error.

    Args:
        label: output unit when ``target`` carries no index
    """
    unit = _resolve_unit(model, target, mode, label)
    points = as_points(x)
    empty = jnp.zeros((0,))

    def fn(p):
        return activation_value(model.params, model.config, p, empty, target.layer, unit, mode)

    products = path_integrated_gradients(fn, points, as_points(baseline), steps)
    return SaliencyMap(reduce_to_points(products, reduction), t_emitted, reduction)


def linear_ig_over_trajectory(
    model: Classifier,
    trajectory: DiffusionTrajectory,
    stride: int = 50,
    steps: int = 256,
    reduction: str = "sum",
    mode: Optional[str] = None,
    include_start: bool = False,
) -> SaliencySequence:
    """Straight-line integrated gradients restarted from ``x_T`` at every emission step of
    ``igd_attribution``, the baseline IGD is compared against.

    Args:
        mode: activation mode of the target, ``RECORDED_MODE`` by default
        include_start: also emit the (all-zero) map at ``t = T``
    """
    n_timesteps = trajectory.n_timesteps
    mode = RECORDED_MODE if mode is None else mode
    target = NeuronSelector.parse(trajectory.target)
    emit = ([n_timesteps] if include_start else []) + emission_steps(n_timesteps, stride)
    x_start = trajectory.state_at(n_timesteps)
    maps = [
        linear_ig(
            model,
            trajectory.state_at(t),
            x_start,
            steps,
            target,
            mode,
            _step_label(trajectory, t),
            reduction,
            t,
        )
        for t in emit
    ]
    return SaliencySequence(tuple(maps), stride, "linear_ig")


def completeness_gap(
    model: Classifier,
    trajectory: DiffusionTrajectory,
    seq: SaliencySequence,
    mode: Optional[str] = None,
) -> Tuple[float, float]:
    """Absolute and relative gap between the total of the final map and the change of the target
    activation from ``x_T`` to ``x_0``.

    Raises:
        InvalidInputError: the map was not reduced by summation, so completeness cannot hold
    """
    if seq.final.reduction != "sum":
        raise InvalidInputError(
            f"Completeness needs the 'sum' reduction, got '{seq.final.reduction}'"
        )
    mode = RECORDED_MODE if mode is None else mode
    target = NeuronSelector.parse(trajectory.target)
    unit = _resolve_unit(model, target, mode, _step_label(trajectory, seq.final.t_emitted))
    empty = jnp.zeros((0,))

    def value(points):
        return float(
            activation_value(
                model.params, model.config, jnp.asarray(points), empty, target.layer, unit, mode
            )
        )

    change = value(trajectory.state_at(seq.final.t_emitted)) - value(
        trajectory.state_at(trajectory.n_timesteps)
    )
    gap = abs(float(seq.final.psi.sum()) - change)
    return gap, gap / max(abs(change), 1e-12)


def random_attribution(n_points: int, seed: int, t_emitted: int = 0) -> SaliencyMap:
    """Seeded i.i.d. standard-normal attributions, the uninformative baseline."""
    if n_points < 1:
        raise InvalidInputError(f"n_points must be at least 1, got {n_points}")
    return SaliencyMap(np.random.default_rng(seed).standard_normal(n_points), t_emitted)


def random_sequence(
    n_points: int, steps: Sequence[int], seed: int, stride: int
) -> SaliencySequence:
    """Independent random maps at the given emission steps."""
    seeds = np.random.SeedSequence(seed).generate_state(len(steps))
    maps = tuple(random_attribution(n_points, int(s), t) for s, t in zip(seeds, steps))
    return SaliencySequence(maps, stride, "random")
