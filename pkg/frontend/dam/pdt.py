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
The point diffusion transformer: a permutation-equivariant noise predictor.

Every point is first augmented with the shape latent, the one-hot label and the binary time code.
An encoder of stacked multi-head self-attention blocks (widths 64, 128, 256 by default) turns the
augmented points into features; a decoder of the same shape attends with queries and keys taken
from ``x* + encoder(x*)`` and values taken from ``x*``, and a final per-point projection predicts
the noise. All learned maps act on single points, so the only interaction between points is the
attention softmax over the point axis.
"""

import dataclasses
from dataclasses import dataclass
from typing import Any, Dict, Tuple

import jax
import jax.numpy as jnp
import numpy as np

from dam.classifier import time_code_bits
from dam.utils.exceptions import InvalidInputError
from dam.utils.nn import dense, init_dense

RAW_X = "raw_x"
ENCODED = "encoded"
RESIDUAL = "residual"
SOURCES = (RAW_X, ENCODED, RESIDUAL)


@dataclass(frozen=True)
class AttentionInputMode:
    """Where the decoder takes its queries, keys and values from.

    ``raw_x`` is the augmented input ``x*``, ``encoded`` the encoder output and ``residual``
    their sum (the input lifted to the encoder width first).
    """

    query_src: str
    key_src: str
    value_src: str

    PRESETS = {
        "pdt": (RESIDUAL, RESIDUAL, RAW_X),
        "all_encoded": (ENCODED, ENCODED, ENCODED),
        "query_encoded": (ENCODED, RAW_X, RAW_X),
        "query_raw": (RAW_X, ENCODED, ENCODED),
        "value_encoded": (RAW_X, RAW_X, ENCODED),
        "value_raw": (ENCODED, ENCODED, RAW_X),
    }

    def __post_init__(self):
        if any(s not in SOURCES for s in self.sources):
            raise InvalidInputError(
                f"Attention sources must be among {SOURCES}, got {self.sources}"
            )
        if self.sources not in self.PRESETS.values():
            raise InvalidInputError(
                f"Unsupported query/key/value combination {self.sources}, "
                f"supported presets are {sorted(self.PRESETS)}"
            )

    @property
    def sources(self) -> Tuple[str, str, str]:
        """``(query, key, value)`` sources."""
        return (self.query_src, self.key_src, self.value_src)

    @property
    def name(self) -> str:
        """Preset name of this combination."""
        return next(k for k, v in self.PRESETS.items() if v == self.sources)

    @classmethod
    def from_name(cls, name: str) -> "AttentionInputMode":
        """Look a preset up by name."""
        if name not in cls.PRESETS:
            raise InvalidInputError(
                f"Unknown attention mode '{name}', expected {sorted(cls.PRESETS)}"
            )
        return cls(*cls.PRESETS[name])


# pylint: disable=too-many-instance-attributes
@dataclass(frozen=True)
class PDTConfig:
    """Architecture of the denoiser.

    Each head projects to the full block width and the heads are concatenated and mapped back,
    so block widths need not be divisible by the number of heads.

    Args:
        n_classes (int): label one-hot width ``D_l``
        dim (int): point coordinates ``D``
        latent_dim (int): shape latent width ``D_p``
        time_code_len (int): binary time code width
        n_heads (int): attention heads per block
        widths (Tuple[int]): model width of each stacked block
        attention_mode (str): decoder query/key/value preset, see ``AttentionInputMode``
        zero_init_output (bool): start the final projection at zero (the model predicts no noise)
    """

    n_classes: int
    dim: int = 3
    latent_dim: int = 128
    time_code_len: int = 8
    n_heads: int = 3
    widths: Tuple[int, ...] = (64, 128, 256)
    attention_mode: str = "pdt"
    zero_init_output: bool = False

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        if not self.widths or min(self.widths) < 1:
            raise InvalidInputError(f"Block widths must be positive, got {self.widths}")
        if self.n_heads < 1:
            raise InvalidInputError("At least one attention head is required")
        if min(self.n_classes, self.dim, self.latent_dim) < 1 or self.time_code_len < 0:
            raise InvalidInputError("Input segment widths must be positive")
        AttentionInputMode.from_name(self.attention_mode)

    @property
    def input_width(self) -> int:
        """Width of an augmented point row."""
        return self.dim + self.latent_dim + self.n_classes + self.time_code_len

    @property
    def mode(self) -> AttentionInputMode:
        """The decoder's attention sources."""
        return AttentionInputMode.from_name(self.attention_mode)

    def source_width(self, source: str) -> int:
        """Feature width of an attention source."""
        return self.input_width if source == RAW_X else self.widths[-1]

    def to_dict(self) -> Dict[str, Any]:
        """JSON-friendly representation."""
        return dataclasses.asdict(self)


@dataclass(frozen=True, eq=False)
class AugmentedInput:
    """Per-point rows ``[coordinates | z | one-hot label | time code]``."""

    x_star: Any
    config: PDTConfig

    def segments(self) -> Dict[str, Any]:
        """Split the rows back into their named segments."""
        c = self.config
        bounds = np.cumsum([0, c.dim, c.latent_dim, c.n_classes, c.time_code_len])
        names = ("coordinates", "latent", "label", "time")
        return {n: self.x_star[:, lo:hi] for n, lo, hi in zip(names, bounds[:-1], bounds[1:])}


def augment(x_t, z, label, level, config: PDTConfig):
    """Traceable construction of ``x*`` from an ``N x D`` cloud."""
    n = x_t.shape[0]
    rows = [
        x_t,
        jnp.broadcast_to(z, (n, config.latent_dim)),
        jnp.broadcast_to(jax.nn.one_hot(label, config.n_classes), (n, config.n_classes)),
    ]
    if config.time_code_len:
        bits = time_code_bits(level, config.time_code_len)
        rows.append(jnp.broadcast_to(bits, (n, config.time_code_len)))
    return jnp.concatenate(rows, axis=-1)


def build_augmented_input(x_t, z, label: int, t: int, config: PDTConfig) -> AugmentedInput:
    """Concatenate every point with the shape latent, the one-hot label and the time code.

    Raises:
        InvalidInputError: a segment has the wrong width or the label is out of range
    """
    x_t = jnp.asarray(x_t)
    z = jnp.asarray(z)
    if x_t.ndim != 2 or x_t.shape[1] != config.dim:
        raise InvalidInputError(f"Expected an N x {config.dim} cloud, got shape {x_t.shape}")
    if z.shape != (config.latent_dim,):
        raise InvalidInputError(f"Expected a latent of width {config.latent_dim}, got {z.shape}")
    if not 0 <= int(label) < config.n_classes:
        raise InvalidInputError(f"Label {label} is outside [0, {config.n_classes})")
    if not 0 <= int(t) < 2**config.time_code_len:
        raise InvalidInputError(f"Step {t} does not fit in {config.time_code_len} bits")
    return AugmentedInput(augment(x_t, z, label, t, config), config)


def _init_block(key, n_heads, d_q, d_k, d_v, width):
    kq, kk, kv, ko = jax.random.split(key, 4)

    def projection(k, d_in):
        return jax.random.normal(k, (n_heads, d_in, width)) / jnp.sqrt(d_in)

    return {
        "q": projection(kq, d_q),
        "k": projection(kk, d_k),
        "v": projection(kv, d_v),
        "o": init_dense(ko, n_heads * width, width),
    }


def init_pdt(config: PDTConfig, key) -> Dict[str, Any]:
    """Randomly initialize encoder, decoder, input lift and output projection."""
    k_enc, k_dec, k_lift, k_out = jax.random.split(key, 4)
    encoder, d_in = [], config.input_width
    for k, width in zip(jax.random.split(k_enc, len(config.widths)), config.widths):
        encoder.append(_init_block(k, config.n_heads, d_in, d_in, d_in, width))
        d_in = width
    q_src, k_src, v_src = config.mode.sources
    decoder, d_v = [], config.source_width(v_src)
    for k, width in zip(jax.random.split(k_dec, len(config.widths)), config.widths):
        d_q, d_k = config.source_width(q_src), config.source_width(k_src)
        decoder.append(_init_block(k, config.n_heads, d_q, d_k, d_v, width))
        d_v = width
    return {
        "encoder": encoder,
        "decoder": decoder,
        "lift": init_dense(k_lift, config.input_width, config.widths[-1]),
        "out": init_dense(k_out, config.widths[-1], config.dim, zero=config.zero_init_output),
    }


def attention(block, q_in, k_in, v_in):
    """Multi-head scaled dot-product attention over the point axis."""
    q = jnp.einsum("nc,hcw->hnw", q_in, block["q"])
    k = jnp.einsum("nc,hcw->hnw", k_in, block["k"])
    v = jnp.einsum("nc,hcw->hnw", v_in, block["v"])
    scores = jnp.einsum("hnw,hmw->hnm", q, k) / jnp.sqrt(q.shape[-1])
    heads = jnp.einsum("hnm,hmw->hnw", jax.nn.softmax(scores, axis=-1), v)
    concat = jnp.transpose(heads, (1, 0, 2)).reshape(q_in.shape[0], -1)
    return dense(block["o"], concat)


def _check_width(x, width, what):
    if x.ndim != 2 or x.shape[1] != width:
        raise InvalidInputError(f"{what} must be N x {width}, got shape {x.shape}")


def pde_forward(params, config: PDTConfig, x_star):
    """Encoder: stacked self-attention blocks whose queries, keys and values are all ``x*``."""
    _check_width(x_star, config.input_width, "Encoder input")
    h = x_star
    for block in params["encoder"]:
        h = jax.nn.silu(attention(block, h, h, h))
    return h


def pdd_forward(params, config: PDTConfig, x_star, pde_out):
    """Decoder: predicts the ``N x D`` noise from ``x*`` and the encoder features.

    Queries and keys of every block come from the configured sources; the values flow from the
    configured value source through the stacked blocks.
    """
    _check_width(x_star, config.input_width, "Decoder input")
    _check_width(pde_out, config.widths[-1], "Encoder features")
    if pde_out.shape[0] != x_star.shape[0]:
        raise InvalidInputError("Encoder features and input disagree on the number of points")
    sources = {
        RAW_X: x_star,
        ENCODED: pde_out,
        RESIDUAL: dense(params["lift"], x_star) + pde_out,
    }
    q_src, k_src, v_src = config.mode.sources
    h = sources[v_src]
    for block in params["decoder"]:
        h = jax.nn.silu(attention(block, sources[q_src], sources[k_src], h))
    return dense(params["out"], h)


def pdt_forward(params, config: PDTConfig, x_t, z, label, level):
    """Predicted noise of an ``N x D`` cloud at a noise level, given its latent and label."""
    x_star = augment(x_t, z, label, level, config)
    return pdd_forward(params, config, x_star, pde_forward(params, config, x_star))
