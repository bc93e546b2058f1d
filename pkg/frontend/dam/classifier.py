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
The classifier being explained (a PointNet-style shared per-point MLP, a max-pool and a dense
head), its noise-aware twin that additionally reads a binary time code per point, neuron
selection for activation maximization, and the training loops of both.
"""

import dataclasses
import functools
import pathlib
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import jax
import jax.numpy as jnp
import numpy as np
import optax

from dam.pointcloud import LabeledDataset, PointCloud, as_points, split_dataset
from dam.utils.checkpoint import load_checkpoint, restore_optimizer, restore_tree, save_checkpoint
from dam.utils.exceptions import InvalidInputError, NumericalError
from dam.utils.nn import decaying_adam, dense, init_dense, init_mlp, max_pool, mlp
from dam.utils.runtime import RunOptions, resolve_options

CHECKPOINT_VERSION = "dam-clf-v1"
ACTIVATION_MODES = ("logits", "softmax", "log_softmax")


def time_code_width(n_timesteps: int) -> int:
    """Width ``ceil(log2 T)`` of the binary code of a step in ``[0, T)``."""
    if n_timesteps < 2:
        raise InvalidInputError(f"A diffusion needs at least 2 steps, got {n_timesteps}")
    return (n_timesteps - 1).bit_length()


@dataclass(frozen=True)
class TimeCode:
    """Fixed-width binary code of a diffusion step, most significant bit first."""

    bits: Tuple[int, ...]

    def decode(self) -> int:
        """The step this code represents."""
        return decode_time_binary(self)

    def as_array(self) -> np.ndarray:
        """Bits as a float vector, the form the networks consume."""
        return np.asarray(self.bits, dtype=np.float64)

    def __len__(self):
        return len(self.bits)


def encode_time_binary(t: int, n_timesteps: int) -> TimeCode:
    """Encode step ``t`` of a ``T``-step diffusion in ``ceil(log2 T)`` bits.

    **Example**

    >>> encode_time_binary(5, 250).bits
    (0, 0, 0, 0, 0, 1, 0, 1)
    """
    width = time_code_width(n_timesteps)
    if not 0 <= t < n_timesteps:
        raise InvalidInputError(f"Step {t} is outside [0, {n_timesteps})")
    return TimeCode(tuple((int(t) >> shift) & 1 for shift in range(width - 1, -1, -1)))


def decode_time_binary(code: TimeCode) -> int:
    """Inverse of ``encode_time_binary``."""
    value = 0
    for bit in code.bits:
        value = (value << 1) | int(bit)
    return value


def time_code_bits(level, width: int):
    """Traceable counterpart of ``encode_time_binary`` returning a float vector."""
    shifts = jnp.arange(width - 1, -1, -1)
    return (jnp.right_shift(jnp.asarray(level), shifts) & 1).astype(jnp.float64)


@dataclass(frozen=True)
class NeuronSelector:
    """The unit whose activation is maximized or attributed.

    Args:
        layer (str): ``"output"`` (class scores), ``"latent"`` (pooled feature), ``"point.<k>"``
            (k-th per-point layer, averaged over points), ``"head.<k>"`` (k-th dense layer after
            pooling), ``"tnet.point.<k>"`` / ``"tnet.fc.<k>"`` (alignment network layers)
        index (Optional[int]): unit index within the layer. ``None`` selects the class the
            sampler is conditioned on, which only makes sense for the output layer.
    """

    layer: str = "output"
    index: Optional[int] = None

    @classmethod
    def parse(cls, text: str) -> "NeuronSelector":
        """Parse ``"layer"`` or ``"layer:index"``."""
        layer, _, index = text.partition(":")
        return cls(layer, int(index) if index else None)

    def __str__(self):
        return self.layer if self.index is None else f"{self.layer}:{self.index}"


# pylint: disable=too-many-instance-attributes
@dataclass(frozen=True)
class ClassifierConfig:
    """Architecture and training hyperparameters of a classifier.

    Args:
        n_classes (int): number of classes ``N_C`` (at least 2)
        dim (int): coordinates per point
        per_point_widths (Tuple[int]): widths of the shared per-point layers
        head_widths (Tuple[int]): widths of the dense layers after pooling
        time_code_len (int): width of the per-point time code; ``0`` for the explained
            classifier, ``ceil(log2 T)`` for its noise-aware twin
        use_tnet (bool): prepend an input alignment network
        epochs (int): training epochs
        batch_size (int): clouds per optimization step
        lr_start (float): initial learning rate
        lr_end (float): learning rate reached at the last step
    """

    n_classes: int
    dim: int = 3
    per_point_widths: Tuple[int, ...] = (64, 128, 256)
    head_widths: Tuple[int, ...] = (128,)
    time_code_len: int = 0
    use_tnet: bool = False
    epochs: int = 30
    batch_size: int = 32
    lr_start: float = 1e-2
    lr_end: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "per_point_widths", tuple(self.per_point_widths))
        object.__setattr__(self, "head_widths", tuple(self.head_widths))
        if self.n_classes < 2:
            raise InvalidInputError("A classifier needs at least two classes")
        if self.dim < 2:
            raise InvalidInputError(f"Points need at least 2 coordinates, got {self.dim}")
        if not self.per_point_widths:
            raise InvalidInputError("At least one per-point layer is required")
        if self.time_code_len < 0:
            raise InvalidInputError("time_code_len cannot be negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidInputError("epochs must be >= 0 and batch_size >= 1")
        if not 0 < self.lr_end <= self.lr_start:
            raise InvalidInputError("Learning rates must satisfy 0 < lr_end <= lr_start")

    @property
    def is_noised(self) -> bool:
        """True for the noise-aware twin."""
        return self.time_code_len > 0

    def to_dict(self) -> Dict[str, Any]:
        """JSON-friendly representation."""
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "ClassifierConfig":
        """Inverse of ``to_dict``."""
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})


@dataclass(frozen=True)
class ClassifierOutput:
    """Result of ``classify``."""

    logits: np.ndarray
    probabilities: np.ndarray
    latent: np.ndarray

    @property
    def predicted(self) -> int:
        """Index of the most likely class."""
        return int(np.argmax(self.logits))


_TNET_WIDTHS = (64, 128)
_TNET_FC = (64,)


def init_classifier(config: ClassifierConfig, key) -> Dict[str, Any]:
    """Randomly initialize classifier parameters."""
    keys = jax.random.split(key, 5)
    widths = (config.dim + config.time_code_len,) + config.per_point_widths
    heads = (config.per_point_widths[-1],) + config.head_widths
    params = {
        "point": init_mlp(keys[0], widths),
        "head": init_mlp(keys[1], heads),
        "out": init_dense(keys[2], heads[-1], config.n_classes),
    }
    if config.use_tnet:
        params["tnet"] = {
            "point": init_mlp(keys[3], (config.dim,) + _TNET_WIDTHS),
            "fc": init_mlp(keys[4], (_TNET_WIDTHS[-1],) + _TNET_FC),
            # zero transform: the alignment starts as the identity
            "transform": init_dense(keys[4], _TNET_FC[-1], config.dim * config.dim, zero=True),
        }
    return params


def classifier_forward(params, config: ClassifierConfig, points, code=None) -> Dict[str, Any]:
    """Evaluate the network on one ``N x D`` cloud and return every named activation.

    Args:
        params: parameter pytree
        config: the architecture
        points: ``N x D`` coordinates
        code: time-code bits for the noise-aware twin, ``None`` otherwise

    Returns:
        Dict: ``"logits"``, ``"latent"``, ``"point.<k>"``, ``"head.<k>"`` and, with an alignment
        network, ``"tnet.point.<k>"`` and ``"tnet.fc.<k>"``
    """
    acts = {}
    coords = points
    if config.use_tnet:
        tnet = params["tnet"]
        h, outs = mlp(tnet["point"], coords)
        acts.update({f"tnet.point.{k}": o for k, o in enumerate(outs)})
        g, outs = mlp(tnet["fc"], max_pool(h))
        acts.update({f"tnet.fc.{k}": o for k, o in enumerate(outs)})
        transform = dense(tnet["transform"], g).reshape(config.dim, config.dim)
        coords = coords @ (transform + jnp.eye(config.dim))
    if config.time_code_len:
        tiled = jnp.broadcast_to(code, (points.shape[0], config.time_code_len))
        coords = jnp.concatenate([coords, tiled], axis=-1)
    h, outs = mlp(params["point"], coords)
    acts.update({f"point.{k}": o for k, o in enumerate(outs)})
    latent = max_pool(h)
    acts["latent"] = latent
    g, outs = mlp(params["head"], latent)
    acts.update({f"head.{k}": o for k, o in enumerate(outs)})
    acts["logits"] = dense(params["out"], g)
    return acts


def layer_width(config: ClassifierConfig, layer: str) -> int:
    """Number of units of a selectable layer.

    Raises:
        InvalidInputError: the layer does not exist in this architecture
    """
    widths = {"output": config.n_classes, "latent": config.per_point_widths[-1]}
    widths.update({f"point.{k}": w for k, w in enumerate(config.per_point_widths)})
    widths.update({f"head.{k}": w for k, w in enumerate(config.head_widths)})
    if config.use_tnet:
        widths.update({f"tnet.point.{k}": w for k, w in enumerate(_TNET_WIDTHS)})
        widths.update({f"tnet.fc.{k}": w for k, w in enumerate(_TNET_FC)})
    if layer not in widths:
        raise InvalidInputError(f"Unknown layer '{layer}', expected one of {sorted(widths)}")
    return widths[layer]


def check_selector(config: ClassifierConfig, target: NeuronSelector, mode: str, index=None) -> int:
    """Validate a selector with its resolved unit index and return that index."""
    if mode not in ACTIVATION_MODES:
        raise InvalidInputError(f"Unknown activation mode '{mode}', expected {ACTIVATION_MODES}")
    width = layer_width(config, target.layer)
    index = target.index if index is None else index
    if index is None:
        raise InvalidInputError(f"Selector on layer '{target.layer}' needs a unit index")
    if not 0 <= int(index) < width:
        raise InvalidInputError(f"Unit {index} is outside layer '{target.layer}' of width {width}")
    return int(index)


def select_activation(acts: Dict[str, Any], layer: str, index, mode: str):
    """Scalar activation of one unit; ``mode`` applies to the output layer only.

    Per-point layers are reduced by averaging the unit over points, which keeps the result
    invariant to point order.
    """
    if layer == "output":
        logits = acts["logits"]
        if mode == "softmax":
            return jax.nn.softmax(logits)[index]
        if mode == "log_softmax":
            return jax.nn.log_softmax(logits)[index]
        return logits[index]
    value = acts[layer]
    if value.ndim == 2:
        return jnp.mean(value[:, index])
    return value[index]


def activation_value(params, config, points, code, layer, index, mode):
    """Traceable target activation, the building block of guidance and attribution."""
    return select_activation(classifier_forward(params, config, points, code), layer, index, mode)


_activation_and_grad = jax.jit(
    jax.value_and_grad(activation_value, argnums=2), static_argnames=("config", "layer", "mode")
)


@functools.partial(jax.jit, static_argnames=("config",))
def _batched_outputs(params, config, points, codes):
    def single(p, c):
        acts = classifier_forward(params, config, p, c)
        return acts["logits"], acts["latent"]

    return jax.vmap(single)(points, codes)


@dataclass(frozen=True, eq=False)
class Classifier:
    """A trained (or freshly initialized) classifier.

    Args:
        config: the architecture and training settings
        params: parameter pytree
        metrics: training record (loss curve, accuracies)
    """

    config: ClassifierConfig
    params: Any
    metrics: Dict[str, Any] = field(default_factory=dict)

    @property
    def is_noised(self) -> bool:
        """True for the noise-aware twin."""
        return self.config.is_noised

    def time_codes(self, n, codes):
        """Validated ``n x width`` time codes; an empty ``n x 0`` array for the clean classifier."""
        if not self.is_noised:
            if codes is not None:
                raise InvalidInputError("The clean-data classifier takes no time code")
            return jnp.zeros((n, 0))
        if codes is None:
            raise InvalidInputError("The noise-aware classifier needs a time code per cloud")
        codes = jnp.asarray(np.asarray(codes, dtype=np.float64).reshape(n, -1))
        if codes.shape[1] != self.config.time_code_len:
            raise InvalidInputError(
                f"Time code width {codes.shape[1]} differs from {self.config.time_code_len}"
            )
        return codes

    def outputs(self, points, codes=None) -> Tuple[np.ndarray, np.ndarray]:
        """Logits and pooled latents of a batch ``S x N x D`` (or a single ``N x D`` cloud)."""
        points = np.asarray(points, dtype=np.float64)
        single = points.ndim == 2
        if single:
            points = points[None]
            codes = None if codes is None else np.asarray(codes)[None]
        if points.ndim != 3 or points.shape[2] != self.config.dim:
            raise InvalidInputError(
                f"Expected clouds with D={self.config.dim}, got shape {points.shape}"
            )
        logits, latents = _batched_outputs(
            self.params, self.config, jnp.asarray(points), self.time_codes(points.shape[0], codes)
        )
        logits, latents = np.asarray(logits), np.asarray(latents)
        return (logits[0], latents[0]) if single else (logits, latents)

    def probabilities(self, points, codes=None) -> np.ndarray:
        """Softmax class probabilities of one cloud or a batch."""
        logits, _ = self.outputs(points, codes)
        return np.asarray(jax.nn.softmax(logits, axis=-1))

    def latent(self, points, codes=None) -> np.ndarray:
        """Pooled global features of one cloud or a batch."""
        return self.outputs(points, codes)[1]

    def save(self, path: Union[str, pathlib.Path], opt_state=None, step=None) -> None:
        """Write a ``dam-clf-v1`` archive."""
        save_checkpoint(
            path,
            CHECKPOINT_VERSION,
            self.config.to_dict(),
            self.params,
            self.metrics,
            opt_state=opt_state,
            step=self.config.epochs if step is None else step,
        )

    @classmethod
    def load(cls, path: Union[str, pathlib.Path]) -> "Classifier":
        """Read a ``dam-clf-v1`` archive."""
        data = load_checkpoint(path, CHECKPOINT_VERSION)
        config = ClassifierConfig.from_dict(data.config)
        params = restore_tree(init_classifier(config, jax.random.PRNGKey(0)), data.params)
        return cls(config, params, data.metrics)


def _as_code(model: Classifier, time_code) -> Optional[np.ndarray]:
    if time_code is None:
        return None
    if isinstance(time_code, TimeCode):
        return time_code.as_array()
    return np.asarray(time_code, dtype=np.float64)


def classify(model: Classifier, cloud, time_code: Optional[TimeCode] = None) -> ClassifierOutput:
    """Classify one cloud.

    The result is invariant under any permutation of the input points.

    Raises:
        InvalidInputError: wrong dimension, or a time code given to (or missing for) the model
    """
    logits, latent = model.outputs(as_points(cloud), _as_code(model, time_code))
    return ClassifierOutput(
        logits=logits, probabilities=np.asarray(jax.nn.softmax(logits)), latent=latent
    )


def _gradient_call(model, cloud, target, mode, time_code):
    points = as_points(cloud)
    if points.ndim != 2 or points.shape[1] != model.config.dim:
        raise InvalidInputError(f"Expected an N x {model.config.dim} cloud, got {points.shape}")
    index = check_selector(model.config, target, mode)
    code = model.time_codes(1, _as_code(model, time_code))[0]
    value, grad = _activation_and_grad(
        model.params, model.config, jnp.asarray(points), code, target.layer, index, mode
    )
    return float(value), np.asarray(grad)


def target_activation(
    model: Classifier, cloud, target: NeuronSelector, mode: str = "log_softmax", time_code=None
) -> float:
    """Scalar activation of the selected unit.

    For the output layer ``mode`` chooses between raw logits, softmax probabilities and their
    logarithm; hidden layers always report raw activations.
    """
    return _gradient_call(model, cloud, target, mode, time_code)[0]


def activation_gradient(
    model: Classifier, cloud, target: NeuronSelector, mode: str = "log_softmax", time_code=None
) -> np.ndarray:
    """Gradient ``N x D`` of ``target_activation`` with respect to the point coordinates."""
    return _gradient_call(model, cloud, target, mode, time_code)[1]


def _check_trainable(dataset: LabeledDataset) -> None:
    counts = dataset.class_counts()
    if np.count_nonzero(counts >= 2) < 2:
        raise InvalidInputError(
            "Training needs at least two classes with at least two samples each, "
            f"got class counts {counts.tolist()}"
        )


def _dataset_codes(dataset: LabeledDataset, width: int) -> np.ndarray:
    if width == 0:
        return np.zeros((len(dataset), 0))
    if dataset.timesteps is None:
        raise InvalidInputError("The noise-aware classifier needs a dataset with timesteps")
    return stack_codes(dataset.timesteps, dataset.n_timesteps)


def accuracy(model: Classifier, dataset: LabeledDataset, batch_size: int = 256) -> float:
    """Fraction of correctly classified clouds."""
    if len(dataset) == 0:
        return float("nan")
    points, labels = dataset.stacked()
    codes = _dataset_codes(dataset, model.config.time_code_len)
    correct = 0
    for start in range(0, len(dataset), batch_size):
        chunk = slice(start, start + batch_size)
        logits, _ = model.outputs(points[chunk], codes[chunk] if model.is_noised else None)
        correct += int(np.sum(np.argmax(logits, axis=-1) == labels[chunk]))
    return correct / len(dataset)


def accuracy_by_level(
    model: Classifier, dataset: LabeledDataset, n_bins: int = 5
) -> Dict[str, float]:
    """Accuracy of the noise-aware twin per range of noise levels.

    Returns:
        Dict[str, float]: ``"lo-hi"`` level ranges mapped to accuracy (ranges without samples
        are omitted)
    """
    if dataset.timesteps is None:
        raise InvalidInputError("accuracy_by_level needs a dataset with timesteps")
    edges = np.linspace(0, dataset.n_timesteps, n_bins + 1).astype(int)
    levels = np.asarray(dataset.timesteps)
    result = {}
    for lo, hi in zip(edges[:-1], edges[1:]):
        members = np.flatnonzero((levels >= lo) & (levels < hi))
        if len(members):
            result[f"{lo}-{hi - 1}"] = accuracy(model, dataset.subset(members))
    return result


def _make_step(config: ClassifierConfig, optimizer: optax.GradientTransformation) -> Callable:
    def loss_fn(params, points, codes, labels):
        logits = jax.vmap(lambda p, c: classifier_forward(params, config, p, c)["logits"])(
            points, codes
        )
        return jnp.mean(optax.softmax_cross_entropy_with_integer_labels(logits, labels))

    @jax.jit
    def step(params, opt_state, points, codes, labels):
        loss, grads = jax.value_and_grad(loss_fn)(params, points, codes, labels)
        updates, opt_state = optimizer.update(grads, opt_state, params)
        return optax.apply_updates(params, updates), opt_state, loss

    return step


# pylint: disable=too-many-arguments,too-many-locals
def _fit(
    params,
    config: ClassifierConfig,
    train: LabeledDataset,
    test: LabeledDataset,
    seed: int,
    options: RunOptions,
    checkpoint_path=None,
    resume_from=None,
    extra_metrics: Optional[Callable[[Classifier], Dict[str, Any]]] = None,
) -> Classifier:
    points, labels = train.stacked()
    codes = _dataset_codes(train, config.time_code_len)
    steps_per_epoch = max(1, -(-len(train) // config.batch_size))
    optimizer = decaying_adam(config.lr_start, config.lr_end, config.epochs * steps_per_epoch)
    opt_state = optimizer.init(params)
    curve: List[Dict[str, float]] = []
    first_epoch = 0
    if resume_from is not None and pathlib.Path(resume_from).exists():
        data = load_checkpoint(resume_from, CHECKPOINT_VERSION)
        params = restore_tree(params, data.params)
        opt_state = restore_optimizer(optimizer.init, params, data.opt_state) or opt_state
        curve = list(data.metrics.get("curve", []))
        first_epoch = data.step
        options.log("TRAIN", f"resuming from {resume_from} at epoch {first_epoch}")
    step = _make_step(config, optimizer)
    key = jax.random.PRNGKey(seed)

    for epoch in range(first_epoch, config.epochs):
        order = np.asarray(jax.random.permutation(jax.random.fold_in(key, epoch), len(train)))
        losses = []
        for start in range(0, len(train), config.batch_size):
            batch = order[start : start + config.batch_size]
            params, opt_state, loss = step(
                params,
                opt_state,
                jnp.asarray(points[batch]),
                jnp.asarray(codes[batch]),
                jnp.asarray(labels[batch]),
            )
            losses.append(float(loss))
        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            raise NumericalError("Classifier training diverged (loss is not finite)", step=epoch)
        model = Classifier(config, params)
        record = {"epoch": epoch, "loss": mean_loss, "test_accuracy": accuracy(model, test)}
        curve.append(record)
        options.log(
            "TRAIN",
            f"epoch {epoch + 1}/{config.epochs} loss={mean_loss:.4f} "
            f"test_acc={record['test_accuracy']:.3f}",
        )
        if checkpoint_path is not None:
            Classifier(config, params, {"curve": curve}).save(
                checkpoint_path, opt_state=opt_state, step=epoch + 1
            )

    model = Classifier(config, params)
    metrics = {"curve": curve, "test_accuracy": accuracy(model, test), "seed": seed}
    if extra_metrics is not None:
        metrics.update(extra_metrics(model))
    return Classifier(config, params, metrics)


def train_classifier(
    dataset: LabeledDataset,
    config: ClassifierConfig,
    seed: int,
    test_dataset: Optional[LabeledDataset] = None,
    options: Optional[RunOptions] = None,
    checkpoint_path=None,
    resume_from=None,
) -> Classifier:
    """Train the classifier to be explained.

    Args:
        dataset: training clouds. When ``test_dataset`` is omitted a seeded 20% stratified
            split of ``dataset`` is held out
        config: architecture and hyperparameters (``time_code_len`` must be 0)
        seed: seed of initialization and batch order
        test_dataset: held-out clouds used for the recorded accuracy
        options: verbosity
        checkpoint_path: if given, progress is written there after every epoch
        resume_from: progress archive to continue from

    Returns:
        Classifier: with ``metrics["test_accuracy"]`` and the per-epoch ``metrics["curve"]``

    Raises:
        InvalidInputError: fewer than two classes with two samples each
        NumericalError: the loss became non-finite
    """
    options = resolve_options(options)
    if config.is_noised:
        raise InvalidInputError("Use train_noised_classifier for a classifier with a time code")
    if config.n_classes != dataset.n_classes or config.dim != dataset.dim:
        raise InvalidInputError(
            f"Config expects {config.n_classes} classes in D={config.dim}, dataset has "
            f"{dataset.n_classes} classes in D={dataset.dim}"
        )
    _check_trainable(dataset)
    if test_dataset is None:
        dataset, test_dataset = split_dataset(dataset, 0.2, seed)
    params = init_classifier(config, jax.random.PRNGKey(seed))
    options.log("TRAIN", f"classifier on {len(dataset)} clouds, {config.n_classes} classes")
    return _fit(params, config, dataset, test_dataset, seed, options, checkpoint_path, resume_from)


def make_noised_dataset(
    dataset: LabeledDataset,
    schedule,
    seed: int,
    t_sampler: Optional[Callable[[np.random.Generator, int], np.ndarray]] = None,
    copies: int = 1,
    reverse_fn: Optional[Callable[[int, int, int], np.ndarray]] = None,
) -> LabeledDataset:
    """Noise every cloud to a random level of the forward process.

    Args:
        dataset: clean clouds
        schedule (NoiseSchedule): the diffusion schedule the twin will serve
        seed: seed of levels and noise
        t_sampler: ``(rng, n) -> levels`` in ``[0, T)``; uniform by default
        copies: number of independently noised copies per clean cloud
        reverse_fn: if given, ``(label, level, seed) -> points`` producing the state at a level by
            running the trained reverse process instead of the closed-form forward marginal

    Returns:
        LabeledDataset: same labels (repeated ``copies`` times) with per-cloud ``timesteps``
    """
    # pylint: disable=import-outside-toplevel
    from dam.diffusion import forward_marginal

    if copies < 1:
        raise InvalidInputError(f"copies must be at least 1, got {copies}")
    rng = np.random.default_rng(seed)
    n = len(dataset) * copies
    if t_sampler is None:
        levels = rng.integers(0, schedule.n_timesteps, size=n)
    else:
        levels = np.asarray(t_sampler(rng, n), dtype=np.int64)
    if levels.shape != (n,) or np.any(levels < 0) or np.any(levels >= schedule.n_timesteps):
        raise InvalidInputError(f"t_sampler must return {n} levels in [0, {schedule.n_timesteps})")
    clouds, labels = [], []
    for i, level in enumerate(levels):
        source = i % len(dataset)
        label = dataset.labels[source]
        if reverse_fn is None:
            x0 = dataset.clouds[source].points
            noise = rng.normal(size=x0.shape)
            points = forward_marginal(x0, int(level), schedule, noise)
        else:
            points = reverse_fn(label, int(level), int(rng.integers(2**31)))
        clouds.append(PointCloud(points))
        labels.append(label)
    return LabeledDataset(
        tuple(clouds),
        tuple(labels),
        dataset.class_names,
        split=dataset.split,
        timesteps=tuple(int(t) for t in levels),
        n_timesteps=schedule.n_timesteps,
    )


def _expand_for_time_code(base: Classifier, config: ClassifierConfig):
    """Copy the clean classifier's weights; the time-code rows of the first layer start at zero."""
    params = jax.tree_util.tree_map(jnp.array, base.params)
    first = params["point"][0]
    rows = jnp.zeros((config.time_code_len, first["w"].shape[1]))
    params["point"][0] = {"w": jnp.concatenate([first["w"], rows], axis=0), "b": first["b"]}
    return params


def train_noised_classifier(
    base: Classifier,
    noised_dataset: LabeledDataset,
    config: ClassifierConfig,
    seed: int,
    test_dataset: Optional[LabeledDataset] = None,
    options: Optional[RunOptions] = None,
    checkpoint_path=None,
    resume_from=None,
) -> Classifier:
    """Continue training the clean classifier on noised clouds with their time codes.

    The twin shares the architecture of ``base``; its first per-point layer gains
    ``time_code_len`` input rows initialized to zero, so before training it behaves exactly like
    ``base``.

    Raises:
        InvalidInputError: ``config.time_code_len`` does not match ``ceil(log2 T)`` of the noised
            dataset, or the architecture differs from ``base``
    """
    options = resolve_options(options)
    if noised_dataset.timesteps is None:
        raise InvalidInputError("The noised dataset carries no timesteps")
    expected = time_code_width(noised_dataset.n_timesteps)
    if config.time_code_len != expected:
        raise InvalidInputError(
            f"time_code_len {config.time_code_len} differs from ceil(log2 T) = {expected}"
        )
    same = ("n_classes", "dim", "per_point_widths", "head_widths", "use_tnet")
    if any(getattr(config, f) != getattr(base.config, f) for f in same):
        raise InvalidInputError("The noise-aware twin must share the base classifier architecture")
    _check_trainable(noised_dataset)
    if test_dataset is None:
        noised_dataset, test_dataset = split_dataset(noised_dataset, 0.2, seed)
    params = _expand_for_time_code(base, config)
    options.log("TRAIN", f"noise-aware classifier on {len(noised_dataset)} noised clouds")
    return _fit(
        params,
        config,
        noised_dataset,
        test_dataset,
        seed,
        options,
        checkpoint_path,
        resume_from,
        extra_metrics=lambda m: {"accuracy_by_level": accuracy_by_level(m, test_dataset)},
    )


def noised_config(base: ClassifierConfig, n_timesteps: int, **overrides) -> ClassifierConfig:
    """The configuration of the noise-aware twin of ``base`` for a ``T``-step diffusion."""
    return dataclasses.replace(base, time_code_len=time_code_width(n_timesteps), **overrides)


def untrained(config: ClassifierConfig, seed: int = 0) -> Classifier:
    """A freshly initialized classifier."""
    return Classifier(config, init_classifier(config, jax.random.PRNGKey(seed)))


def stack_codes(levels: Sequence[int], n_timesteps: int) -> np.ndarray:
    """Time codes of several levels as a ``len(levels) x width`` array."""
    return np.stack([encode_time_binary(int(t), n_timesteps).as_array() for t in levels])
