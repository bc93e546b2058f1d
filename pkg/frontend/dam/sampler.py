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
Explanation sampling: the label-conditioned reverse diffusion steered by the gradients of the
explained classifier and its noise-aware twin.

The whole reverse chain runs as one jitted ``lax.scan``. Every step records the visited state and
the gradient of the explained classifier's target activation at that state, which is what
attribution along the diffusion path integrates.
"""

import dataclasses
import functools
import json
import pathlib
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import jax
import jax.numpy as jnp
import numpy as np

from dam.classifier import (
    ACTIVATION_MODES,
    Classifier,
    ClassifierConfig,
    NeuronSelector,
    activation_value,
    check_selector,
    time_code_bits,
    time_code_width,
)
from dam.diffusion import DiffusionModel, encode_latent, posterior_mean
from dam.pdt import PDTConfig, pdt_forward
from dam.pointcloud import PointCloud, write_ply_with_scalars
from dam.utils.exceptions import (
    CheckpointError,
    DamError,
    InvalidInputError,
    MissingArtifactError,
    NumericalError,
)
from dam.utils.filesystem import ManifestEntry, RunDirectory
from dam.utils.runtime import RunOptions, resolve_options

WEIGHT_SHAPES = ("linear", "cosine", "step")
INIT_MODES = ("random_x_then_encode", "random_z")
TRAJECTORY_SCHEMA = "dam-trajectory-v1"
# output-layer gradients are recorded in this mode whatever mode steers the chain
RECORDED_MODE = "log_softmax"


# pylint: disable=too-many-instance-attributes
@dataclass(frozen=True)
class GuidanceConfig:
    """Settings of one guided sampling run.

    Args:
        scale (float): guidance scale ``s``; ``0`` disables the steering but still records
            gradients
        weight_shape (str): how ``W_F`` decays from 1 at ``t = 0`` to 0 at ``t = T``
        activation (str): activation mode of the target unit, ``"log_softmax"`` by default
        use_dual (bool): blend in the noise-aware classifier; otherwise ``W_F`` is always 1
        target (NeuronSelector): unit to maximize; an output selector without index follows the
            conditioning label
        init_mode (str): ``"random_x_then_encode"`` encodes a random cloud into the latent,
            ``"random_z"`` draws the latent directly
        seed (int): seed of the latent, the initial state and every step's noise
    """

    scale: float = 1e-4
    weight_shape: str = "linear"
    activation: str = "log_softmax"
    use_dual: bool = True
    target: NeuronSelector = field(default_factory=NeuronSelector)
    init_mode: str = "random_x_then_encode"
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale < 0:
            raise InvalidInputError(f"The guidance scale must be finite and >= 0, got {self.scale}")
        if self.weight_shape not in WEIGHT_SHAPES:
            raise InvalidInputError(
                f"Unknown weight shape '{self.weight_shape}', expected {WEIGHT_SHAPES}"
            )
        if self.activation not in ACTIVATION_MODES:
            raise InvalidInputError(
                f"Unknown activation mode '{self.activation}', expected {ACTIVATION_MODES}"
            )
        if self.init_mode not in INIT_MODES:
            raise InvalidInputError(f"Unknown init mode '{self.init_mode}', expected {INIT_MODES}")

    def describe(self) -> Dict[str, str]:
        """String attributes recorded next to every explanation."""
        return {
            "scale": repr(self.scale),
            "weight_shape": self.weight_shape,
            "activation": self.activation,
            "use_dual": str(self.use_dual).lower(),
            "target": str(self.target),
            "init_mode": self.init_mode,
        }


def _explained_weight(t, n_timesteps, shape, xp):
    ratio = t / n_timesteps
    if shape == "linear":
        return 1.0 - ratio
    if shape == "cosine":
        return xp.cos(xp.pi / 2 * ratio) ** 2
    return xp.where(t <= n_timesteps / 2, 1.0, 0.0)


def weight_schedule(t: int, n_timesteps: int, shape: str = "linear") -> Tuple[float, float]:
    """Weights ``(W_F, W_F')`` of the explained classifier and its noise-aware twin at step ``t``.

    ``W_F`` is 1 at ``t = 0``, decays monotonically and reaches (almost) 0 at ``t = T``;
    ``W_F' = 1 - W_F``.

    **Example**

    >>> weight_schedule(125, 250)
    (0.5, 0.5)
    """
    if shape not in WEIGHT_SHAPES:
        raise InvalidInputError(f"Unknown weight shape '{shape}', expected {WEIGHT_SHAPES}")
    if not 0 <= t <= n_timesteps:
        raise InvalidInputError(f"Step {t} is outside [0, {n_timesteps}]")
    w_f = float(_explained_weight(float(t), float(n_timesteps), shape, np))
    return w_f, 1.0 - w_f


def _root_keys(seed: int):
    key = jax.random.PRNGKey(seed)
    return jax.random.fold_in(key, 0), jax.random.fold_in(key, 1), jax.random.fold_in(key, 2)


def initialize_sampling(
    mode: str,
    model: Optional[DiffusionModel],
    seed: int,
    latent_dim: Optional[int] = None,
    eps=None,
) -> np.ndarray:
    """Draw the shape latent ``z`` a sampling run is conditioned on.

    Args:
        mode: ``"random_x_then_encode"`` passes a standard-normal cloud through the encoder and
            reparameterizes; ``"random_z"`` draws ``z`` from a standard normal
        model: diffusion model owning the encoder
        seed: seed of the draw; equal seeds give bitwise equal latents
        latent_dim: latent width when no model is given (``random_z`` only)
        eps: reparameterization draw replacing the seeded one (encode mode only)

    Raises:
        InvalidInputError: unknown mode, or encode mode without a model
    """
    if mode not in INIT_MODES:
        raise InvalidInputError(f"Unknown init mode '{mode}', expected {INIT_MODES}")
    key = _root_keys(seed)[0]
    if mode == "random_z":
        if model is None and latent_dim is None:
            raise InvalidInputError("random_z needs a model or a latent width")
        width = model.config.latent_dim if model is not None else latent_dim
        return np.asarray(jax.random.normal(key, (width,)))
    if model is None:
        raise InvalidInputError("random_x_then_encode needs the diffusion model's encoder")
    k_x, k_eps = jax.random.split(key)
    x_r = jax.random.normal(k_x, (model.config.n_points, model.config.dim))
    if eps is None:
        eps = jax.random.normal(k_eps, (model.config.latent_dim,))
    return encode_latent(model, np.asarray(x_r), eps=np.asarray(eps)).z


@dataclass(frozen=True, eq=False)
class DiffusionTrajectory:
    """The states visited by one reverse chain and the gradients recorded along it.

    ``states[k]`` is the state ``x_t`` at chain step ``t = state_steps[k]``; a complete
    trajectory stores ``x_T, ..., x_0`` (``T + 1`` states). ``grads[k]`` is always at full
    resolution: the gradient of the explained classifier's target activation at ``x_{T - k}``,
    taken in ``RECORDED_MODE`` for output selectors.

    Args:
        states (np.ndarray): ``S x N x D`` stored states
        state_steps (Tuple[int]): chain step of every stored state, strictly decreasing
        grads (np.ndarray): ``T x N x D`` recorded gradients
        labels (Tuple[int, int]): conditioning labels at even and odd steps
        target (str): the selector whose activation was recorded
        activation (str): activation mode that steered the chain
        seed (int): sampling seed
    """

    states: np.ndarray
    state_steps: Tuple[int, ...]
    grads: np.ndarray
    labels: Tuple[int, int]
    target: str = "output"
    activation: str = "log_softmax"
    seed: int = 0

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.float64)
        grads = np.asarray(self.grads, dtype=np.float64)
        steps = tuple(int(t) for t in self.state_steps)
        if states.ndim != 3 or grads.ndim != 3 or len(grads) < 1:
            raise InvalidInputError("A trajectory needs S x N x D states and T x N x D gradients")
        if len(steps) != len(states) or states.shape[1:] != grads.shape[1:]:
            raise InvalidInputError("States, their steps and the gradients disagree in shape")
        if steps[0] != len(grads) or steps[-1] != 0 or np.any(np.diff(steps) >= 0):
            raise InvalidInputError("Stored steps must decrease strictly from T to 0")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "grads", grads)
        object.__setattr__(self, "state_steps", steps)
        object.__setattr__(self, "labels", tuple(int(l) for l in self.labels))

    @property
    def n_timesteps(self) -> int:
        """Length ``T`` of the chain."""
        return len(self.grads)

    @property
    def n_points(self) -> int:
        """Points per state."""
        return self.states.shape[1]

    @property
    def is_complete(self) -> bool:
        """True if every state ``x_T, ..., x_0`` is stored."""
        return len(self.states) == self.n_timesteps + 1

    @property
    def x0(self) -> np.ndarray:
        """The generated explanation."""
        return self.states[-1]

    def has_state(self, t: int) -> bool:
        """True if ``x_t`` is stored."""
        return int(t) in self.state_steps

    def state_at(self, t: int) -> np.ndarray:
        """The stored state ``x_t``.

        Raises:
            InvalidInputError: ``x_t`` was dropped by the storage stride
        """
        try:
            return self.states[self.state_steps.index(int(t))]
        except ValueError as e:
            raise InvalidInputError(f"State x_{t} is not stored in this trajectory") from e

    def grad_at(self, t: int) -> np.ndarray:
        """Gradient recorded at ``x_t``, ``t in [1, T]``."""
        if not 1 <= t <= self.n_timesteps:
            raise InvalidInputError(f"Gradients exist for steps [1, {self.n_timesteps}], got {t}")
        return self.grads[self.n_timesteps - t]

    def thinned(self, stride: int) -> "DiffusionTrajectory":
        """Keep every ``stride``-th state counted from ``x_T``, plus ``x_0``."""
        if stride < 1:
            raise InvalidInputError(f"The state stride must be at least 1, got {stride}")
        steps = self.state_steps
        keep = [k for k, t in enumerate(steps) if (self.n_timesteps - t) % stride == 0 or t == 0]
        return dataclasses.replace(
            self, states=self.states[keep], state_steps=tuple(self.state_steps[k] for k in keep)
        )

    def save(self, path: Union[str, pathlib.Path], stride: int = 1) -> None:
        """Write a compressed archive keeping every ``stride``-th state and every gradient."""
        kept = self.thinned(stride)
        meta = {
            "schema": TRAJECTORY_SCHEMA,
            "labels": list(self.labels),
            "target": self.target,
            "activation": self.activation,
            "seed": self.seed,
        }
        with open(path, "wb") as f:
            np.savez_compressed(
                f,
                __meta__=np.array(json.dumps(meta)),
                states=kept.states,
                state_steps=np.asarray(kept.state_steps, dtype=np.int64),
                grads=self.grads,
            )

    @classmethod
    def load(cls, path: Union[str, pathlib.Path]) -> "DiffusionTrajectory":
        """Read an archive written by ``save``.

        Raises:
            MissingArtifactError: no such file
            CheckpointError: not a trajectory archive
        """
        path = pathlib.Path(path)
        if not path.exists():
            raise MissingArtifactError(f"Trajectory {path} does not exist; run `dam explain` first")
        with np.load(path, allow_pickle=False) as data:
            try:
                meta = json.loads(str(data["__meta__"]))
                if meta.get("schema") != TRAJECTORY_SCHEMA:
                    raise CheckpointError(f"{path} is not a {TRAJECTORY_SCHEMA} archive")
                return cls(
                    data["states"],
                    tuple(data["state_steps"].tolist()),
                    data["grads"],
                    tuple(meta["labels"]),
                    meta["target"],
                    meta["activation"],
                    meta["seed"],
                )
            except KeyError as e:
                raise CheckpointError(f"{path} lacks the entry {e}") from e


@dataclass(frozen=True)
class _ChainSetup:
    """Static structure of a compiled chain."""

    pdt_config: PDTConfig
    f_config: Optional[ClassifierConfig] = None
    fp_config: Optional[ClassifierConfig] = None
    layer: str = "output"
    index: Optional[int] = None
    mode: str = "log_softmax"
    weight_shape: str = "linear"
    use_dual: bool = False
    guided: bool = False


_unit_grad = jax.grad(activation_value, argnums=2)


@functools.partial(jax.jit, static_argnames=("setup",))
def _run_chain(setup: _ChainSetup, params, x_start, z, labels, keys, scale):
    beta, alpha_bar = params["beta"], params["alpha_bar"]
    n_timesteps = beta.shape[0]

    def step(x, inputs):
        t, key = inputs
        level = t - 1
        label = jnp.where(t % 2 == 0, labels[0], labels[1])
        eps_hat = pdt_forward(params["pdt"], setup.pdt_config, x, z, label, level)
        mu = posterior_mean(x, eps_hat, beta[level], alpha_bar[level])
        grad_f = jnp.zeros_like(x)
        if setup.guided:
            unit = label if setup.index is None else setup.index
            empty = jnp.zeros((0,))
            grad_f = _unit_grad(
                params["f"], setup.f_config, x, empty, setup.layer, unit, setup.mode
            )
            blend = grad_f
            if setup.layer == "output" and setup.mode != RECORDED_MODE:
                grad_f = _unit_grad(
                    params["f"], setup.f_config, x, empty, setup.layer, unit, RECORDED_MODE
                )
            if setup.use_dual:
                w_f = _explained_weight(t, n_timesteps, setup.weight_shape, jnp)
                code = time_code_bits(level, setup.fp_config.time_code_len)
                grad_fp = _unit_grad(
                    params["fp"], setup.fp_config, x, code, setup.layer, unit, setup.mode
                )
                blend = w_f * blend + (1.0 - w_f) * grad_fp
            mu = mu + scale * beta[level] * blend
        sigma = jnp.where(t > 1, jnp.sqrt(beta[level]), 0.0)
        x_next = mu + sigma * jax.random.normal(key, x.shape)
        return x_next, (x, grad_f)

    steps = jnp.arange(n_timesteps, 0, -1)
    x0, (states, grads) = jax.lax.scan(step, x_start, (steps, keys))
    return x0, states, grads


def _unit(config: GuidanceConfig, label: int) -> Optional[int]:
    # only output selectors follow the conditioning label
    if config.target.layer == "output" and config.target.index is None:
        return label
    return config.target.index


def _check_models(model: DiffusionModel, f: Optional[Classifier], f_prime, config, labels):
    for label in labels:
        if not 0 <= int(label) < model.config.n_classes:
            raise InvalidInputError(f"Label {label} is outside [0, {model.config.n_classes})")
    if f is None:
        return
    if f.is_noised:
        raise InvalidInputError("The explained classifier must be the clean-data classifier")
    if (f.config.n_classes, f.config.dim) != (model.config.n_classes, model.config.dim):
        raise InvalidInputError("Classifier and diffusion model disagree on N_C or D")
    for label in labels:
        check_selector(f.config, config.target, config.activation, _unit(config, label))
    if not config.use_dual:
        return
    if f_prime is None:
        raise InvalidInputError("Dual guidance needs the noise-aware classifier")
    expected = time_code_width(model.schedule.n_timesteps)
    if f_prime.config.time_code_len != expected:
        raise InvalidInputError(
            f"The noise-aware classifier uses {f_prime.config.time_code_len}-bit time codes but "
            f"the schedule has T={model.schedule.n_timesteps} ({expected} bits)"
        )
    if (f_prime.config.n_classes, f_prime.config.dim) != (f.config.n_classes, f.config.dim):
        raise InvalidInputError("The two classifiers disagree on N_C or D")
    check_selector(f_prime.config, config.target, config.activation, _unit(config, labels[0]))


def _sample_chain(model, f, f_prime, labels, config: GuidanceConfig, z=None):
    """Run one chain and return ``(x0, trajectory, seconds)``."""
    guided = f is not None
    use_dual = guided and config.use_dual
    setup = _ChainSetup(
        pdt_config=model.config.pdt_config,
        f_config=f.config if guided else None,
        fp_config=f_prime.config if use_dual else None,
        layer=config.target.layer,
        index=config.target.index,
        mode=config.activation,
        weight_shape=config.weight_shape,
        use_dual=use_dual,
        guided=guided,
    )
    params = {
        "pdt": model.params["pdt"],
        "f": f.params if guided else None,
        "fp": f_prime.params if use_dual else None,
        "beta": jnp.asarray(model.schedule.beta),
        "alpha_bar": jnp.asarray(model.schedule.alpha_bar),
    }
    n_timesteps = model.schedule.n_timesteps
    if z is None:
        z = initialize_sampling(config.init_mode, model, config.seed)
    _, k_start, k_steps = _root_keys(config.seed)
    x_start = jax.random.normal(k_start, (model.config.n_points, model.config.dim))
    keys = jax.random.split(k_steps, n_timesteps)
    start = time.perf_counter()
    x0, states, grads = _run_chain(
        setup, params, x_start, jnp.asarray(z), jnp.asarray(labels), keys, config.scale
    )
    x0, states, grads = np.asarray(x0), np.asarray(states), np.asarray(grads)
    seconds = time.perf_counter() - start
    states = np.concatenate([states, x0[None]], axis=0)
    finite = np.isfinite(states).all(axis=(1, 2))
    if not finite.all():
        bad = int(np.argmin(finite))
        raise NumericalError(
            "Sampling produced non-finite coordinates",
            step=n_timesteps - bad + 1,
        )
    trajectory = DiffusionTrajectory(
        states,
        tuple(range(n_timesteps, -1, -1)),
        grads,
        tuple(labels),
        str(config.target),
        config.activation,
        config.seed,
    )
    return PointCloud(x0), trajectory, seconds


def multi_neuron_sample(
    model: DiffusionModel,
    f: Classifier,
    f_prime: Optional[Classifier],
    labels: Tuple[int, int],
    config: GuidanceConfig,
) -> Tuple[PointCloud, DiffusionTrajectory]:
    """Explain two classes at once by alternating them along the chain.

    At even steps the denoiser is conditioned on, and the guidance targets, ``labels[0]``; at odd
    steps ``labels[1]``. Equal labels reduce to ``dam_sample``.

    Raises:
        InvalidInputError: labels, selector or models are inconsistent
        NumericalError: a state became non-finite (the step is reported)
    """
    labels = (int(labels[0]), int(labels[1]))
    _check_models(model, f, f_prime, config, labels)
    x0, trajectory, _ = _sample_chain(model, f, f_prime, labels, config)
    return x0, trajectory


def dam_sample(
    model: DiffusionModel,
    f: Classifier,
    f_prime: Optional[Classifier],
    label: int,
    config: GuidanceConfig,
) -> Tuple[PointCloud, DiffusionTrajectory]:
    """Generate the explanation of one class.

    Every reverse step ``t = T, ..., 1`` computes the conditional mean of ``x_{t-1}``, shifts it
    by ``s * beta * (W_F grad F + (1 - W_F) grad F')`` where both gradients are those of the
    target activation at ``x_t`` (``F'`` additionally sees the time code of the step's noise
    level), and adds ``sqrt(beta)`` scaled noise except on the last step.

    Args:
        model: the label-conditioned diffusion model
        f: the explained classifier
        f_prime: its noise-aware twin; only needed with ``config.use_dual``
        label: the class to explain
        config: guidance settings

    Returns:
        Tuple[PointCloud, DiffusionTrajectory]: ``x_0`` and the recorded chain

    Raises:
        InvalidInputError: labels, selector or models are inconsistent
        NumericalError: a state became non-finite (the step is reported)
    """
    return multi_neuron_sample(model, f, f_prime, (label, label), config)


def conditional_sample(
    model: DiffusionModel, label: int, seed: int = 0, init_mode: str = "random_x_then_encode"
) -> Tuple[PointCloud, DiffusionTrajectory]:
    """Plain label-conditioned generation without classifier guidance."""
    config = GuidanceConfig(scale=0.0, use_dual=False, init_mode=init_mode, seed=seed)
    _check_models(model, None, None, config, (label,))
    x0, trajectory, _ = _sample_chain(model, None, None, (int(label), int(label)), config)
    return x0, trajectory


def reverse_to_level(model: DiffusionModel, label: int, level: int, seed: int) -> np.ndarray:
    """State at noise level ``level`` of an unguided conditional chain, i.e. ``x_{level + 1}``."""
    if not 0 <= level < model.schedule.n_timesteps:
        raise InvalidInputError(f"Noise level {level} is outside [0, {model.schedule.n_timesteps})")
    _, trajectory = conditional_sample(model, label, seed)
    return trajectory.state_at(level + 1)


def sample_seed(base: int, label: int, index: int) -> int:
    """Seed of the ``index``-th explanation of ``label`` in a batch seeded with ``base``."""
    return int(np.random.SeedSequence([base, label, index]).generate_state(1)[0])


@dataclass
class Explanation:
    """One explanation of a batch and where it was written."""

    label: int
    index: int
    seed: int
    cloud: Optional[PointCloud] = None
    trajectory: Optional[DiffusionTrajectory] = None
    seconds: float = 0.0
    path: Optional[pathlib.Path] = None
    trajectory_path: Optional[pathlib.Path] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        """True unless sampling failed."""
        return self.error is None


@dataclass
class ExplanationBatch:
    """Result of ``batch_explain`` in (label, index) order."""

    explanations: List[Explanation] = field(default_factory=list)

    @property
    def succeeded(self) -> List[Explanation]:
        """The explanations that were generated."""
        return [e for e in self.explanations if e.ok]

    @property
    def failures(self) -> List[Explanation]:
        """The explanations whose sampling failed."""
        return [e for e in self.explanations if not e.ok]


# pylint: disable=too-many-arguments,too-many-locals
def batch_explain(
    model: DiffusionModel,
    f: Classifier,
    f_prime: Optional[Classifier],
    labels: Sequence[int],
    per_class: int,
    config: GuidanceConfig,
    run_dir: Optional[RunDirectory] = None,
    config_hash: str = "",
    jobs: int = 1,
    state_stride: int = 10,
    second_label: Optional[int] = None,
    options: Optional[RunOptions] = None,
) -> ExplanationBatch:
    """Generate ``per_class`` explanations for every label.

    Sample ``i`` of ``label`` uses the seed ``sample_seed(config.seed, label, i)``. A failed sample
    is recorded and the batch continues. With a run directory, every explanation is written as a
    PLY file and its trajectory as a compressed archive, and a manifest entry (seed, labels,
    config hash, timing, status) is appended for each sample.

    Args:
        second_label: explain every label jointly with this one (alternating chain)
        jobs: number of samples run concurrently
        state_stride: keep every ``state_stride``-th state in trajectory archives
    """
    options = resolve_options(options)
    if per_class < 1 or jobs < 1:
        raise InvalidInputError("per_class and jobs must be at least 1")
    labels = [int(l) for l in labels]
    check = labels + ([] if second_label is None else [int(second_label)])
    _check_models(model, f, f_prime, config, check)
    todo = [
        Explanation(l, i, sample_seed(config.seed, l, i)) for l in labels for i in range(per_class)
    ]
    n_timesteps = model.schedule.n_timesteps

    def run(item: Explanation) -> Explanation:
        pair = (item.label, item.label if second_label is None else int(second_label))
        try:
            cloud, trajectory, seconds = _sample_chain(
                model, f, f_prime, pair, dataclasses.replace(config, seed=item.seed)
            )
        except DamError as e:
            item.error = str(e)
            options.log("SAMPLE", f"label {item.label} sample {item.index} failed: {e}")
            return item
        item.cloud, item.trajectory, item.seconds = cloud, trajectory, seconds
        options.log(
            "SAMPLE",
            f"label {item.label} sample {item.index} seed {item.seed}: {seconds:.2f}s "
            f"({seconds / n_timesteps * 1e3:.1f} ms/step)",
        )
        if run_dir is not None:
            stem = f"label{item.label}" + ("" if second_label is None else f"_{second_label}")
            item.path = run_dir.new_path("explanations", f"{stem}_sample{item.index}.ply")
            write_ply_with_scalars(cloud, None, item.path)
            item.trajectory_path = run_dir.new_path("trajectories", f"{item.path.stem}.npz")
            trajectory.save(item.trajectory_path, stride=state_stride)
        return item

    if jobs == 1:
        done = [run(item) for item in todo]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            done = list(executor.map(run, todo))
    if run_dir is not None:
        run_dir.record(
            [
                _manifest_entry(run_dir, e, config, config_hash, second_label, n_timesteps)
                for e in done
            ]
        )
    batch = ExplanationBatch(done)
    options.log("SAMPLE", f"{len(batch.succeeded)} explanations, {len(batch.failures)} failures")
    return batch


def _manifest_entry(run_dir, item: Explanation, config, config_hash, second_label, n_timesteps):
    extra = config.describe()
    if item.trajectory_path is not None:
        extra["trajectory"] = run_dir.relative(item.trajectory_path)
    extra["index"] = str(item.index)
    return ManifestEntry(
        kind="explanation",
        path=run_dir.relative(item.path) if item.path is not None else "",
        seed=item.seed,
        config_hash=config_hash,
        label=item.label,
        second_label=second_label,
        seconds=item.seconds if item.ok else None,
        per_step_seconds=item.seconds / n_timesteps if item.ok else None,
        status="ok" if item.ok else "failed",
        error=item.error,
        extra=extra,
    )


def replay(
    model: DiffusionModel,
    f: Classifier,
    f_prime: Optional[Classifier],
    run_dir: RunDirectory,
    config: GuidanceConfig,
    options: Optional[RunOptions] = None,
) -> List[str]:
    """Re-run every successful explanation in the manifest from its recorded seed and compare the
    result with the stored trajectory's ``x_0`` bit for bit.

    Returns:
        List[str]: paths of explanations that did not reproduce

    Raises:
        MissingArtifactError: the manifest holds no explanations
    """
    options = resolve_options(options)
    entries = [
        e for e in run_dir.load_manifest().entries if e.kind == "explanation" and e.status == "ok"
    ]
    if not entries:
        raise MissingArtifactError("The manifest holds no explanations; run `dam explain` first")
    mismatches = []
    for entry in entries:
        stored = DiffusionTrajectory.load(run_dir.root / entry.extra["trajectory"])
        pair = (entry.label, entry.label if entry.second_label is None else entry.second_label)
        guidance = guidance_from_entry(entry, config)
        _check_models(model, f, f_prime, guidance, pair)
        cloud, _, _ = _sample_chain(model, f, f_prime, pair, guidance)
        same = np.array_equal(cloud.points, stored.x0)
        options.log("RUN", f"replay {entry.path}: {'identical' if same else 'MISMATCH'}")
        if not same:
            mismatches.append(entry.path)
    return mismatches


def guidance_from_entry(entry: ManifestEntry, base: GuidanceConfig) -> GuidanceConfig:
    """Guidance settings recorded in a manifest entry, falling back to ``base``."""
    extra: Dict[str, Any] = entry.extra
    return dataclasses.replace(
        base,
        scale=float(extra.get("scale", base.scale)),
        weight_shape=extra.get("weight_shape", base.weight_shape),
        activation=extra.get("activation", base.activation),
        use_dual=extra.get("use_dual", str(base.use_dual).lower()) == "true",
        target=NeuronSelector.parse(extra["target"]) if "target" in extra else base.target,
        init_mode=extra.get("init_mode", base.init_mode),
        seed=entry.seed,
    )
