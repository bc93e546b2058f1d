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
Noise schedules, the forward diffusion kernels, the shape-latent encoder, the conditional reverse
step and the training loss of the label-conditioned point-cloud diffusion model.

Indexing convention: schedule arrays have length ``T`` and are indexed by the noise level
``k in [0, T)``. The reverse chain visits states ``x_T, ..., x_0``; the step ``t in [1, T]``
turns ``x_t``, which sits at level ``t - 1``, into ``x_{t-1}``.
"""

import dataclasses
import functools
import pathlib
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import jax
import jax.numpy as jnp
import numpy as np
import optax

from dam.classifier import time_code_width
from dam.pdt import PDTConfig, init_pdt, pdt_forward
from dam.pointcloud import LabeledDataset, as_points
from dam.pointcloud.clouds import like
from dam.utils.checkpoint import load_checkpoint, restore_optimizer, restore_tree, save_checkpoint
from dam.utils.exceptions import InvalidInputError, NumericalError
from dam.utils.nn import (
    decaying_adam,
    dense,
    init_dense,
    init_mlp,
    max_pool,
    mlp,
    tree_is_finite,
)
from dam.utils.runtime import RunOptions, resolve_options

CHECKPOINT_VERSION = "dam-ddpm-v1"
BETA_FLOOR = 1e-8
BETA_CAP = 0.999
SCHEDULE_KINDS = ("cosine", "linear")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Variance schedule of a ``T``-step diffusion.

    Args:
        beta (np.ndarray): per-level variances, each in ``(0, 1)``
        alpha_bar (np.ndarray): cumulative signal retention, strictly decreasing, first entry
            at least 0.99
        kind (str): ``"cosine"``, ``"linear"`` or ``"custom"``
        params (Dict): the parameters the schedule was built from
    """

    beta: np.ndarray
    alpha_bar: np.ndarray
    kind: str = "custom"
    params: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        beta = np.array(self.beta, dtype=np.float64)
        alpha_bar = np.array(self.alpha_bar, dtype=np.float64)
        if beta.ndim != 1 or beta.shape != alpha_bar.shape or len(beta) < 1:
            raise InvalidInputError("beta and alpha_bar must be equally long 1-D arrays")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise InvalidInputError("Every beta must lie in (0, 1)")
        if np.any(np.diff(alpha_bar) >= 0):
            raise InvalidInputError("alpha_bar must be strictly decreasing")
        if alpha_bar[0] < 0.99 or alpha_bar[0] > 1 or alpha_bar[-1] <= 0:
            raise InvalidInputError("alpha_bar must start in [0.99, 1] and stay positive")
        beta.flags.writeable = False
        alpha_bar.flags.writeable = False
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @property
    def n_timesteps(self) -> int:
        """The number of steps ``T``."""
        return len(self.beta)

    @property
    def alpha(self) -> np.ndarray:
        """Per-level signal retention ``1 - beta``."""
        return 1.0 - self.beta

    def arrays(self) -> Dict[str, np.ndarray]:
        """Named arrays for archiving."""
        return {"beta": self.beta, "alpha_bar": self.alpha_bar}


def cosine_schedule(n_timesteps: int, offset: float = 0.008) -> NoiseSchedule:
    """Cosine schedule ``alpha_bar[k] = f(k) / f(0)`` with
    ``f(k) = cos(((k / T + offset) / (1 + offset)) * pi / 2) ** 2``.

    ``beta[k] = 1 - alpha_bar[k] / alpha_bar[k - 1]`` is capped at 0.999; since ``alpha_bar[0]``
    is exactly one, ``beta[0]`` is the positive floor ``BETA_FLOOR``.
    """
    if n_timesteps < 2:
        raise InvalidInputError(f"T must be at least 2, got {n_timesteps}")
    if offset <= 0:
        raise InvalidInputError(f"The cosine offset must be positive, got {offset}")
    steps = np.arange(n_timesteps, dtype=np.float64)
    f = np.cos(((steps / n_timesteps + offset) / (1 + offset)) * np.pi / 2) ** 2
    alpha_bar = f / f[0]
    beta = np.empty(n_timesteps)
    beta[0] = BETA_FLOOR
    beta[1:] = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], BETA_FLOOR, BETA_CAP)
    return NoiseSchedule(beta, alpha_bar, "cosine", {"offset": offset})


def linear_schedule(
    n_timesteps: int, beta_start: float = 1e-4, beta_end: float = 2e-2
) -> NoiseSchedule:
    """Betas linearly spaced from ``beta_start`` to ``beta_end`` inclusive."""
    if n_timesteps < 2:
        raise InvalidInputError(f"T must be at least 2, got {n_timesteps}")
    if not 0 < beta_start <= beta_end < 1:
        raise InvalidInputError("Linear betas need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, n_timesteps)
    return NoiseSchedule(
        beta, np.cumprod(1.0 - beta), "linear", {"beta_start": beta_start, "beta_end": beta_end}
    )


def _check_level(level: int, schedule: NoiseSchedule) -> int:
    if not 0 <= int(level) < schedule.n_timesteps:
        raise InvalidInputError(f"Noise level {level} is outside [0, {schedule.n_timesteps})")
    return int(level)


def forward_marginal(x0, level: int, schedule: NoiseSchedule, noise):
    """Closed-form ``x = sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * noise`` at ``level``.

    Accepts a ``PointCloud`` or any array and returns the same kind.
    """
    level = _check_level(level, schedule)
    points, noise = as_points(x0), np.asarray(noise, dtype=np.float64)
    if noise.shape != points.shape:
        raise InvalidInputError(
            f"Noise shape {noise.shape} differs from cloud shape {points.shape}"
        )
    a = schedule.alpha_bar[level]
    return like(x0, np.sqrt(a) * points + np.sqrt(1.0 - a) * noise)


def forward_step(x_prev, level: int, schedule: NoiseSchedule, noise):
    """One forward kernel: noise level ``level - 1`` (or clean data for 0) to ``level``."""
    level = _check_level(level, schedule)
    points, noise = as_points(x_prev), np.asarray(noise, dtype=np.float64)
    if noise.shape != points.shape:
        raise InvalidInputError(
            f"Noise shape {noise.shape} differs from cloud shape {points.shape}"
        )
    b = schedule.beta[level]
    return like(x_prev, np.sqrt(1.0 - b) * points + np.sqrt(b) * noise)


# pylint: disable=too-many-instance-attributes
@dataclass(frozen=True)
class DiffusionConfig:
    """Everything needed to build and train the diffusion model.

    Args:
        n_classes (int): number of conditioning labels
        n_points (int): points per generated cloud
        dim (int): coordinates per point
        n_timesteps (int): diffusion length ``T``
        schedule (str): ``"cosine"`` or ``"linear"``
        cosine_offset (float): offset of the cosine schedule
        beta_start (float): first beta of the linear schedule
        beta_end (float): last beta of the linear schedule
        latent_dim (int): width ``D_z`` of the shape latent
        kl_weight (float): weight of the latent KL term in the loss
        encoder_widths (Tuple[int]): per-point widths of the latent encoder
        n_heads (int): attention heads of the denoiser
        widths (Tuple[int]): denoiser block widths
        attention_mode (str): denoiser decoder attention preset
        iterations (int): optimization steps
        batch_size (int): clouds per step
        lr_start (float): initial learning rate
        lr_end (float): final learning rate
    """

    n_classes: int
    n_points: int = 256
    dim: int = 3
    n_timesteps: int = 250
    schedule: str = "cosine"
    cosine_offset: float = 0.008
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    latent_dim: int = 128
    kl_weight: float = 1e-3
    encoder_widths: Tuple[int, ...] = (64, 128, 256)
    n_heads: int = 3
    widths: Tuple[int, ...] = (64, 128, 256)
    attention_mode: str = "pdt"
    iterations: int = 20000
    batch_size: int = 32
    lr_start: float = 1e-3
    lr_end: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(self.encoder_widths))
        object.__setattr__(self, "widths", tuple(self.widths))
        if self.schedule not in SCHEDULE_KINDS:
            raise InvalidInputError(
                f"Unknown schedule '{self.schedule}', expected {SCHEDULE_KINDS}"
            )
        if self.n_classes < 1 or self.n_points < 1 or self.latent_dim < 1:
            raise InvalidInputError("n_classes, n_points and latent_dim must be positive")
        if self.kl_weight < 0:
            raise InvalidInputError("kl_weight cannot be negative")
        if self.iterations < 0 or self.batch_size < 1:
            raise InvalidInputError("iterations must be >= 0 and batch_size >= 1")
        if not 0 < self.lr_end <= self.lr_start:
            raise InvalidInputError("Learning rates must satisfy 0 < lr_end <= lr_start")
        time_code_width(self.n_timesteps)
        self.pdt_config  # pylint: disable=pointless-statement

    @property
    def time_code_len(self) -> int:
        """Width of the binary time code."""
        return time_code_width(self.n_timesteps)

    @property
    def pdt_config(self) -> PDTConfig:
        """Architecture of the denoiser."""
        return PDTConfig(
            n_classes=self.n_classes,
            dim=self.dim,
            latent_dim=self.latent_dim,
            time_code_len=self.time_code_len,
            n_heads=self.n_heads,
            widths=self.widths,
            attention_mode=self.attention_mode,
        )

    def make_schedule(self) -> NoiseSchedule:
        """Build the configured noise schedule."""
        if self.schedule == "cosine":
            return cosine_schedule(self.n_timesteps, self.cosine_offset)
        return linear_schedule(self.n_timesteps, self.beta_start, self.beta_end)

    def to_dict(self) -> Dict[str, Any]:
        """JSON-friendly representation."""
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "DiffusionConfig":
        """Inverse of ``to_dict``."""
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})


def init_encoder(config: DiffusionConfig, key) -> Dict[str, Any]:
    """Initialize the PointNet-style latent encoder ``q(z | x0)``."""
    k_point, k_fc, k_mean = jax.random.split(key, 3)
    width = config.encoder_widths[-1]
    return {
        "point": init_mlp(k_point, (config.dim,) + config.encoder_widths),
        "fc": init_mlp(k_fc, (width, width)),
        "mean": init_dense(k_mean, width, config.latent_dim),
        # zero log-variance head: the posterior starts at unit variance
        "logvar": init_dense(k_mean, width, config.latent_dim, zero=True),
    }


def encoder_forward(params, points):
    """Mean and log-variance of the latent posterior; invariant to point order."""
    h, _ = mlp(params["point"], points)
    g, _ = mlp(params["fc"], max_pool(h))
    return dense(params["mean"], g), dense(params["logvar"], g)


def latent_kl(mean, logvar):
    """Closed-form ``KL(N(mean, exp(logvar)) || N(0, I))`` summed over latent dimensions."""
    return 0.5 * jnp.sum(jnp.exp(logvar) + mean**2 - 1.0 - logvar)


@dataclass(frozen=True, eq=False)
class LatentCode:
    """A latent posterior and one reparameterized sample ``z = mean + exp(logvar / 2) * eps``."""

    mean: np.ndarray
    logvar: np.ndarray
    eps: np.ndarray
    z: np.ndarray


def reparameterize(code: LatentCode, eps) -> np.ndarray:
    """Sample ``z = mean + exp(logvar / 2) * eps``."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != np.shape(code.mean):
        raise InvalidInputError(
            f"eps shape {eps.shape} differs from latent shape {np.shape(code.mean)}"
        )
    return np.asarray(code.mean) + np.exp(np.asarray(code.logvar) / 2) * eps


@dataclass(frozen=True)
class ReverseStepParams:
    """Mean and standard deviation of ``p(x_{t-1} | x_t, z, label)``."""

    mu: np.ndarray
    sigma: float

    @property
    def variance(self) -> float:
        """``sigma ** 2``, the step's ``beta``."""
        return self.sigma**2


@dataclass(frozen=True)
class LossTerms:
    """Components of the training loss."""

    mse: float
    kl: float
    total: float


def posterior_mean(x_t, eps_hat, beta, alpha_bar):
    """DDPM mean ``(x_t - beta / sqrt(1 - alpha_bar) * eps_hat) / sqrt(1 - beta)``.

    ``1 - alpha_bar >= beta`` always holds; taking the maximum keeps the coefficient finite where
    ``alpha_bar`` is exactly one.
    """
    coefficient = beta / jnp.sqrt(jnp.maximum(1.0 - alpha_bar, beta))
    return (x_t - coefficient * eps_hat) / jnp.sqrt(1.0 - beta)


@dataclass(frozen=True, eq=False)
class DiffusionModel:
    """Denoiser and latent encoder trained against one embedded schedule."""

    config: DiffusionConfig
    schedule: NoiseSchedule
    params: Any
    metrics: Dict[str, Any] = field(default_factory=dict)

    def save(self, path: Union[str, pathlib.Path], opt_state=None, step=None) -> None:
        """Write a ``dam-ddpm-v1`` archive embedding the schedule arrays."""
        config = self.config.to_dict()
        config["schedule_params"] = self.schedule.params
        save_checkpoint(
            path,
            CHECKPOINT_VERSION,
            config,
            self.params,
            self.metrics,
            opt_state=opt_state,
            step=self.config.iterations if step is None else step,
            arrays=self.schedule.arrays(),
        )

    @classmethod
    def load(cls, path: Union[str, pathlib.Path]) -> "DiffusionModel":
        """Read a ``dam-ddpm-v1`` archive; the schedule is taken from the archive as stored."""
        data = load_checkpoint(path, CHECKPOINT_VERSION)
        values = dict(data.config)
        schedule_params = values.pop("schedule_params", {})
        config = DiffusionConfig.from_dict(values)
        schedule = NoiseSchedule(
            data.arrays["beta"], data.arrays["alpha_bar"], config.schedule, schedule_params
        )
        params = restore_tree(init_diffusion(config, jax.random.PRNGKey(0)), data.params)
        return cls(config, schedule, params, data.metrics)


def init_diffusion(config: DiffusionConfig, key) -> Dict[str, Any]:
    """Initialize encoder and denoiser parameters."""
    k_enc, k_pdt = jax.random.split(key)
    return {"encoder": init_encoder(config, k_enc), "pdt": init_pdt(config.pdt_config, k_pdt)}


def untrained(config: DiffusionConfig, seed: int = 0) -> DiffusionModel:
    """A freshly initialized model with the configured schedule."""
    params = init_diffusion(config, jax.random.PRNGKey(seed))
    return DiffusionModel(config, config.make_schedule(), params)


def _check_cloud(model: DiffusionModel, x) -> np.ndarray:
    points = as_points(x)
    if points.ndim != 2 or points.shape[1] != model.config.dim:
        raise InvalidInputError(f"Expected an N x {model.config.dim} cloud, got {points.shape}")
    return points


def _check_label(model: DiffusionModel, label: int) -> int:
    if not 0 <= int(label) < model.config.n_classes:
        raise InvalidInputError(f"Label {label} is outside [0, {model.config.n_classes})")
    return int(label)


def encode_latent(model: DiffusionModel, x0, eps=None, seed: int = 0) -> LatentCode:
    """Encode a cloud and draw one latent sample.

    Args:
        model: the diffusion model owning the encoder
        x0: an ``N x D`` cloud
        eps: standard-normal draw for the reparameterization; drawn from ``seed`` when omitted
        seed: seed of ``eps``
    """
    points = _check_cloud(model, x0)
    mean, logvar = encoder_forward(model.params["encoder"], jnp.asarray(points))
    mean, logvar = np.asarray(mean), np.asarray(logvar)
    if eps is None:
        eps = np.asarray(jax.random.normal(jax.random.PRNGKey(seed), mean.shape))
    code = LatentCode(mean, logvar, np.asarray(eps, dtype=np.float64), mean)
    return dataclasses.replace(code, z=reparameterize(code, code.eps))


# pylint: disable=too-many-arguments
def _loss_terms(
    params, config: DiffusionConfig, alpha_bar, x0, label, level, noise, eps_z, denoiser
):
    mean, logvar = encoder_forward(params["encoder"], x0)
    z = mean + jnp.exp(logvar / 2) * eps_z
    a = alpha_bar[level]
    x_t = jnp.sqrt(a) * x0 + jnp.sqrt(1.0 - a) * noise
    if denoiser is None:
        eps_hat = pdt_forward(params["pdt"], config.pdt_config, x_t, z, label, level)
    else:
        eps_hat = denoiser(x_t, z, label, level)
    return jnp.mean((eps_hat - noise) ** 2), latent_kl(mean, logvar)


def diffusion_training_loss(
    model: DiffusionModel,
    x0,
    label: int,
    seed: int = 0,
    level: Optional[int] = None,
    noise=None,
    eps_z=None,
    denoiser: Optional[Callable] = None,
) -> LossTerms:
    """Training loss ``MSE(eps_hat, eps) + kl_weight * KL(q(z | x0) || N(0, I))`` of one cloud.

    Args:
        model: denoiser, encoder and schedule
        x0: clean ``N x D`` cloud
        label: its class
        seed: seed of any of ``level``, ``noise``, ``eps_z`` left unspecified
        level: noise level in ``[0, T)``
        noise: ``N x D`` forward-process noise
        eps_z: latent reparameterization draw
        denoiser: replaces the network, ``(x_t, z, label, level) -> eps_hat``

    Raises:
        NumericalError: the loss is not finite
    """
    points = _check_cloud(model, x0)
    label = _check_label(model, label)
    keys = jax.random.split(jax.random.PRNGKey(seed), 3)
    if level is None:
        level = int(jax.random.randint(keys[0], (), 0, model.schedule.n_timesteps))
    level = _check_level(level, model.schedule)
    noise = jax.random.normal(keys[1], points.shape) if noise is None else jnp.asarray(noise)
    if eps_z is None:
        eps_z = jax.random.normal(keys[2], (model.config.latent_dim,))
    mse, kl = _loss_terms(
        model.params,
        model.config,
        jnp.asarray(model.schedule.alpha_bar),
        jnp.asarray(points),
        label,
        level,
        noise,
        jnp.asarray(eps_z),
        denoiser,
    )
    mse, kl = float(mse), float(kl)
    total = mse + model.config.kl_weight * kl
    if not np.isfinite(total):
        raise NumericalError("Diffusion loss is not finite")
    return LossTerms(mse, kl, total)


@functools.partial(jax.jit, static_argnames=("config",))
def predict_noise(params, config: PDTConfig, x_t, z, label, level):
    """Jitted denoiser evaluation."""
    return pdt_forward(params, config, x_t, z, label, level)


def reverse_step_params(
    model: DiffusionModel, x_t, t: int, z, label: int, predicted_noise=None
) -> ReverseStepParams:
    """Mean and standard deviation of the reverse step ``x_t -> x_{t-1}``, ``t in [1, T]``.

    The step uses the schedule entry of level ``t - 1`` (the level of ``x_t``); the standard
    deviation is ``sqrt(beta)``.

    Args:
        predicted_noise: replaces the denoiser's noise prediction
    """
    if not 1 <= int(t) <= model.schedule.n_timesteps:
        raise InvalidInputError(
            f"Reverse steps run over [1, {model.schedule.n_timesteps}], got {t}"
        )
    points = _check_cloud(model, x_t)
    label = _check_label(model, label)
    level = int(t) - 1
    if predicted_noise is None:
        predicted_noise = predict_noise(
            model.params["pdt"],
            model.config.pdt_config,
            jnp.asarray(points),
            jnp.asarray(z),
            label,
            level,
        )
    beta, alpha_bar = model.schedule.beta[level], model.schedule.alpha_bar[level]
    mu = posterior_mean(jnp.asarray(points), jnp.asarray(predicted_noise), beta, alpha_bar)
    return ReverseStepParams(np.asarray(mu), float(np.sqrt(beta)))


def _make_train_step(config: DiffusionConfig, optimizer, alpha_bar, points, labels):
    n_data, n_timesteps = points.shape[0], alpha_bar.shape[0]
    batch = min(config.batch_size, n_data)

    def batch_loss(params, key):
        k_idx, k_lvl, k_noise, k_z = jax.random.split(key, 4)
        index = jax.random.choice(k_idx, n_data, (batch,), replace=False)
        levels = jax.random.randint(k_lvl, (batch,), 0, n_timesteps)
        noise = jax.random.normal(k_noise, (batch,) + points.shape[1:])
        eps_z = jax.random.normal(k_z, (batch, config.latent_dim))
        mse, kl = jax.vmap(
            lambda x, l, k, n, e: _loss_terms(params, config, alpha_bar, x, l, k, n, e, None)
        )(points[index], labels[index], levels, noise, eps_z)
        return jnp.mean(mse + config.kl_weight * kl), (jnp.mean(mse), jnp.mean(kl))

    @jax.jit
    def step(params, opt_state, key):
        (loss, aux), grads = jax.value_and_grad(batch_loss, has_aux=True)(params, key)
        updates, opt_state = optimizer.update(grads, opt_state, params)
        return optax.apply_updates(params, updates), opt_state, loss, aux

    return step


# pylint: disable=too-many-locals
def train_diffusion(
    dataset: LabeledDataset,
    config: DiffusionConfig,
    seed: int,
    options: Optional[RunOptions] = None,
    checkpoint_path=None,
    resume_from=None,
    log_every: int = 100,
) -> DiffusionModel:
    """Jointly train the latent encoder and the denoiser.

    Every iteration draws a batch of clouds, one noise level per cloud, forward noise and latent
    draws from ``fold_in(PRNGKey(seed), iteration)``, so a resumed run repeats an uninterrupted
    one.

    Args:
        dataset: clean training clouds
        config: model and optimization settings
        seed: seed of initialization and sampling
        options: verbosity
        checkpoint_path: progress is written there every ``log_every`` iterations
        resume_from: progress archive to continue from
        log_every: iterations per recorded point of the loss curve

    Raises:
        InvalidInputError: dataset and configuration disagree
        NumericalError: the loss became non-finite (the iteration is reported)
    """
    options = resolve_options(options)
    if len(dataset) == 0:
        raise InvalidInputError("Cannot train on an empty dataset")
    expected = (config.n_points, config.dim, config.n_classes)
    if (dataset.n_points, dataset.dim, dataset.n_classes) != expected:
        raise InvalidInputError(
            f"Config expects N={config.n_points}, D={config.dim}, {config.n_classes} classes; "
            f"dataset has N={dataset.n_points}, D={dataset.dim}, {dataset.n_classes} classes"
        )
    schedule = config.make_schedule()
    points, labels = dataset.stacked()
    points, labels = jnp.asarray(points), jnp.asarray(labels)
    optimizer = decaying_adam(config.lr_start, config.lr_end, config.iterations)
    params = init_diffusion(config, jax.random.PRNGKey(seed))
    opt_state = optimizer.init(params)
    curve: List[Dict[str, float]] = []
    first = 0
    if resume_from is not None and pathlib.Path(resume_from).exists():
        data = load_checkpoint(resume_from, CHECKPOINT_VERSION)
        params = restore_tree(params, data.params)
        opt_state = restore_optimizer(optimizer.init, params, data.opt_state) or opt_state
        curve = list(data.metrics.get("curve", []))
        first = data.step
        options.log("TRAIN", f"resuming diffusion training at iteration {first}")
    step = _make_train_step(config, optimizer, jnp.asarray(schedule.alpha_bar), points, labels)
    key = jax.random.PRNGKey(seed)
    window = []
    for iteration in range(first, config.iterations):
        params, opt_state, loss, (mse, kl) = step(
            params, opt_state, jax.random.fold_in(key, iteration)
        )
        loss = float(loss)
        if not np.isfinite(loss):
            raise NumericalError("Diffusion training diverged (loss is not finite)", step=iteration)
        window.append((loss, float(mse), float(kl)))
        if (iteration + 1) % log_every == 0 or iteration + 1 == config.iterations:
            mean_loss, mean_mse, mean_kl = np.mean(window, axis=0).tolist()
            curve.append(
                {"iteration": iteration + 1, "loss": mean_loss, "mse": mean_mse, "kl": mean_kl}
            )
            window = []
            options.log(
                "TRAIN",
                f"iteration {iteration + 1}/{config.iterations} loss={mean_loss:.4f} "
                f"mse={mean_mse:.4f} kl={mean_kl:.2f}",
            )
            if not tree_is_finite(params):
                raise NumericalError("Diffusion parameters became non-finite", step=iteration)
            if checkpoint_path is not None:
                DiffusionModel(config, schedule, params, {"curve": curve}).save(
                    checkpoint_path, opt_state=opt_state, step=iteration + 1
                )
    return DiffusionModel(config, schedule, params, {"curve": curve, "seed": seed})
