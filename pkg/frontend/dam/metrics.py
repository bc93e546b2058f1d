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
Quantitative evaluation of explanations.

Generation quality: Chamfer and earth mover's distances, the Frechet distance of classifier
latents, the modified inception score, their composite and the success rate. Attribution quality:
the MoRF/LeRF faithfulness area and the coherence of saliency sequences along the diffusion path.
"""

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from dataclasses_json import dataclass_json
from scipy import linalg
from scipy.integrate import trapezoid
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from scipy.special import logsumexp
from scipy.stats import spearmanr

from dam.classifier import Classifier
from dam.igd import SaliencySequence
from dam.pointcloud import as_points
from dam.utils.exceptions import InvalidInputError, UndefinedMetricError

METRICS_SCHEMA = "dam-metrics-v1"
EXACT_EMD_LIMIT = 1024
KL_FLOOR = 1e-12
ABLATION_MODES = ("centroid", "delete")

GENERATION_COLUMNS = ["method", "m_is", "fid", "cd", "emd", "pcams", "msr"]
ATTRIBUTION_COLUMNS = ["method", "s_0.5", "s_1.0", "l_var", "l_d", "l_w", "l_sc"]


def _pair(x_g, x_i):
    a, b = as_points(x_g), as_points(x_i)
    if a.ndim != 2 or b.ndim != 2 or len(a) == 0 or len(b) == 0:
        raise InvalidInputError("Distances need two non-empty N x D clouds")
    if a.shape[1] != b.shape[1]:
        raise InvalidInputError(f"Clouds differ in dimension: {a.shape[1]} vs {b.shape[1]}")
    return a, b


def chamfer(x_g, x_i, symmetric: bool = False) -> float:
    """Mean distance from every point of ``x_g`` to its nearest neighbour in ``x_i``.

    The symmetric variant averages both directions.

    **Example**

    >>> chamfer([[0.0, 0.0, 0.0]], [[3.0, 4.0, 0.0]])
    5.0
    """
    a, b = _pair(x_g, x_i)
    forward = float(np.mean(cKDTree(b).query(a)[0]))
    if not symmetric:
        return forward
    return 0.5 * (forward + float(np.mean(cKDTree(a).query(b)[0])))


def emd_method(n_points: int, exact_limit: int = EXACT_EMD_LIMIT) -> str:
    """``"exact"`` or ``"sinkhorn"``, the solver ``emd`` uses for clouds of ``n_points``."""
    return "exact" if n_points <= exact_limit else "sinkhorn"


def _sinkhorn_cost(cost: np.ndarray, n_iter: int = 200) -> float:
    """Entropic optimal transport between uniform measures, in the log domain."""
    n = cost.shape[0]
    eps = 1e-2 * float(np.mean(cost)) or 1e-12
    log_w = np.full(n, -np.log(n))
    f, g = np.zeros(n), np.zeros(n)
    for _ in range(n_iter):
        f = -eps * logsumexp((g[None, :] - cost) / eps + log_w[None, :], axis=1)
        g = -eps * logsumexp((f[:, None] - cost) / eps + log_w[:, None], axis=0)
    log_plan = (f[:, None] + g[None, :] - cost) / eps + log_w[:, None] + log_w[None, :]
    return float(np.sum(np.exp(log_plan) * cost))


def emd(x_g, x_i, exact_limit: int = EXACT_EMD_LIMIT) -> float:
    """Earth mover's distance: the mean matched distance of the optimal one-to-one assignment.

    Clouds above ``exact_limit`` points use an entropic approximation and emit a warning.

    Raises:
        InvalidInputError: the clouds have different sizes
    """
    a, b = _pair(x_g, x_i)
    if len(a) != len(b):
        raise InvalidInputError(f"EMD needs equally sized clouds, got {len(a)} and {len(b)}")
    cost = cdist(a, b)
    if emd_method(len(a), exact_limit) == "exact":
        rows, cols = linear_sum_assignment(cost)
        return float(cost[rows, cols].mean())
    warnings.warn(
        f"EMD of {len(a)}-point clouds uses the entropic approximation", UserWarning
    )
    return _sinkhorn_cost(cost)


def frechet_distance(mu_1, cov_1, mu_2, cov_2, diagonal: bool = False) -> float:
    """Frechet distance of two Gaussians ``||mu_1 - mu_2||^2 + Tr(C_1 + C_2 - 2 (C_1 C_2)^(1/2))``.

    With ``diagonal=True`` the covariances are per-dimension variance vectors.
    """
    mu_1, mu_2 = np.asarray(mu_1, dtype=np.float64), np.asarray(mu_2, dtype=np.float64)
    if mu_1.shape != mu_2.shape:
        raise InvalidInputError(f"Mean shapes differ: {mu_1.shape} vs {mu_2.shape}")
    mean_term = float(np.sum((mu_1 - mu_2) ** 2))
    if diagonal:
        var_1, var_2 = np.asarray(cov_1), np.asarray(cov_2)
        return mean_term + float(np.sum(var_1 + var_2 - 2.0 * np.sqrt(var_1 * var_2)))
    cov_1, cov_2 = np.atleast_2d(cov_1), np.atleast_2d(cov_2)
    covmean = linalg.sqrtm(cov_1 @ cov_2)
    if not np.isfinite(covmean).all():
        offset = np.eye(cov_1.shape[0]) * 1e-6
        covmean = linalg.sqrtm((cov_1 + offset) @ (cov_2 + offset))
    covmean = np.real(covmean)
    return max(0.0, mean_term + float(np.trace(cov_1 + cov_2 - 2.0 * covmean)))


def latent_statistics(latents, full_covariance: bool = False):
    """Mean and (co)variance of a ``S x K`` set of latents.

    Raises:
        UndefinedMetricError: fewer than two latents
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[0] < 2:
        raise UndefinedMetricError("Latent statistics need at least two samples per set")
    if full_covariance:
        return latents.mean(axis=0), np.cov(latents, rowvar=False)
    return latents.mean(axis=0), latents.var(axis=0, ddof=1)


def _stack(clouds) -> np.ndarray:
    if isinstance(clouds, np.ndarray) and clouds.ndim == 3:
        return clouds.astype(np.float64)
    return np.stack([as_points(c) for c in clouds])


def fid_latent(gen_set, real_set, model: Classifier, full_covariance: bool = False) -> float:
    """Frechet distance between the pooled classifier latents of generated and real clouds.

    Raises:
        UndefinedMetricError: a set has fewer than two clouds
    """
    gen, real = _stack(gen_set), _stack(real_set)
    if len(gen) < 2 or len(real) < 2:
        raise UndefinedMetricError("FID needs at least two clouds per set")
    mu_g, cov_g = latent_statistics(model.latent(gen), full_covariance)
    mu_r, cov_r = latent_statistics(model.latent(real), full_covariance)
    return frechet_distance(mu_r, cov_r, mu_g, cov_g, diagonal=not full_covariance)


def modified_inception_score(probabilities) -> float:
    """``exp`` of the mean ``KL(p_i || p_j)`` over ordered pairs ``i != j`` of predictive
    distributions; probabilities are floored at ``1e-12``.

    Raises:
        InvalidInputError: fewer than two distributions
    """
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 2:
        raise InvalidInputError("The modified inception score needs at least two samples")
    p = np.maximum(p, KL_FLOOR)
    log_p = np.log(p)
    # kl[i, j] = sum_c p_i (log p_i - log p_j)
    kl = np.sum(p * log_p, axis=1)[:, None] - p @ log_p.T
    n = p.shape[0]
    mean_kl = (kl.sum() - np.trace(kl)) / (n * (n - 1))
    return float(np.exp(mean_kl))


def modified_is(gen_set, model: Classifier) -> float:
    """Modified inception score of a generated set under the explained classifier."""
    return modified_inception_score(model.probabilities(_stack(gen_set)))


def pcams(m_is: float, fid: float, cd: float) -> float:
    """Composite ``m_is - (ln fid + ln cd) / 2``.

    **Example**

    >>> round(pcams(1.781, 0.009, 0.045), 2)
    5.69

    Raises:
        UndefinedMetricError: ``fid`` or ``cd`` is not positive; floor them upstream
    """
    if not fid > 0 or not cd > 0:
        raise UndefinedMetricError(
            f"PCAMS needs positive FID and CD (got {fid}, {cd}); apply an epsilon floor upstream"
        )
    return m_is - (math.log(fid) + math.log(cd)) / 2


def success_rate(predicted: Sequence[int], targets: Sequence[int]) -> float:
    """Fraction of predictions equal to their target."""
    predicted, targets = np.asarray(predicted), np.asarray(targets)
    if predicted.shape != targets.shape:
        raise InvalidInputError("Predictions and targets must be aligned")
    if len(targets) == 0:
        return float("nan")
    return float(np.mean(predicted == targets))


def msr(gen_set, target_labels: Sequence[int], model: Classifier) -> float:
    """Fraction of generated explanations the classifier assigns to their target class."""
    gen = _stack(gen_set)
    if len(gen) != len(target_labels):
        raise InvalidInputError("Generated set and target labels must be aligned")
    logits, _ = model.outputs(gen)
    return success_rate(np.argmax(logits, axis=-1), target_labels)


@dataclass(frozen=True, eq=False)
class FaithfulnessCurve:
    """Confidences of the originally predicted class while ablating the most (positive arm) and
    least (negative arm) attributed points first."""

    fractions: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    predicted: int
    ablation: str = "centroid"

    def __post_init__(self):
        fractions = np.asarray(self.fractions, dtype=np.float64)
        if np.any(np.diff(fractions) <= 0):
            raise InvalidInputError("Ablation fractions must increase strictly")
        if not len(fractions) == len(self.positive) == len(self.negative):
            raise InvalidInputError("Both ablation arms must match the fractions")
        object.__setattr__(self, "fractions", fractions)
        object.__setattr__(self, "positive", np.asarray(self.positive, dtype=np.float64))
        object.__setattr__(self, "negative", np.asarray(self.negative, dtype=np.float64))

    @property
    def area(self) -> float:
        """Trapezoidal area of ``positive - negative`` over the whole curve; attributions that
        rank the decisive points first score below zero."""
        return self.area_up_to(self.fractions[-1])

    def area_up_to(self, j: float) -> float:
        """Area over the fractions ``<= j``."""
        keep = self.fractions <= j + 1e-9
        if keep.sum() < 2:
            return 0.0
        return float(trapezoid(self.positive[keep] - self.negative[keep], self.fractions[keep]))


def _fractions(j: float, step: float) -> np.ndarray:
    n_steps = j / step
    if not 0 < j <= 1.0 or abs(n_steps - round(n_steps)) > 1e-9:
        raise InvalidInputError(f"j must be a positive multiple of {step} up to 1, got {j}")
    return np.round(np.arange(round(n_steps) + 1) * step, 12)


def ablate(points: np.ndarray, order: np.ndarray, k: int, mode: str) -> np.ndarray:
    """Ablate the first ``k`` points of ``order``: move them to the centroid, or delete them
    (at least one point is always kept)."""
    if mode == "centroid":
        out = points.copy()
        out[order[:k]] = points.mean(axis=0)
        return out
    if mode == "delete":
        keep = np.sort(order[min(k, len(points) - 1) :])
        return points[keep]
    raise InvalidInputError(f"Unknown ablation mode '{mode}', expected {ABLATION_MODES}")


Confidence = Union[Classifier, Callable[[np.ndarray], np.ndarray]]


def _probabilities(model: Confidence, points: np.ndarray) -> np.ndarray:
    if isinstance(model, Classifier):
        return model.probabilities(points)
    return np.asarray(model(points), dtype=np.float64)


def faithfulness_area(
    model: Confidence,
    x,
    psi,
    j: float = 1.0,
    step: float = 0.05,
    ablation: str = "centroid",
) -> FaithfulnessCurve:
    """Ablate ``round(f * N)`` points for ``f = 0, step, ..., j`` in decreasing (positive arm) and
    increasing (negative arm) order of ``psi`` and record the probability of the class predicted
    on the intact cloud.

    Ties in ``psi`` are broken by point index, so a constant ``psi`` yields identical arms.

    Args:
        model: the explained classifier, or any function from an ``N x D`` cloud to class
            probabilities
        x: the explanation
        psi: its per-point attribution
        j: the largest ablated fraction, a multiple of ``step``
        step: the fraction increment
        ablation: ``"centroid"`` or ``"delete"``
    """
    points = as_points(x)
    psi = np.asarray(psi, dtype=np.float64).reshape(-1)
    if len(psi) != len(points):
        raise InvalidInputError(f"{len(psi)} attributions for a cloud of {len(points)} points")
    if ablation not in ABLATION_MODES:
        raise InvalidInputError(f"Unknown ablation mode '{ablation}', expected {ABLATION_MODES}")
    fractions = _fractions(j, step)
    predicted = int(np.argmax(_probabilities(model, points)))
    most_first = np.argsort(-psi, kind="stable")
    least_first = np.argsort(psi, kind="stable")
    arms = []
    for order in (most_first, least_first):
        arm = []
        for f in fractions:
            ablated = ablate(points, order, int(round(f * len(points))), ablation)
            arm.append(_probabilities(model, ablated)[predicted])
        arms.append(arm)
    return FaithfulnessCurve(fractions, arms[0], arms[1], predicted, ablation)


def spearman(a, b) -> float:
    """Spearman rank correlation with average ranks for ties.

    **Example**

    >>> round(spearman([1, 2, 3, 4], [1, 3, 2, 4]), 6)
    0.8

    Raises:
        InvalidInputError: the vectors differ in length or are shorter than 2
        UndefinedMetricError: a vector is constant
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise InvalidInputError(
            "Spearman correlation needs two equally long vectors of length >= 2"
        )
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise UndefinedMetricError("Spearman correlation is undefined for a constant vector")
    return float(np.clip(spearmanr(a, b)[0], -1.0, 1.0))


@dataclass_json
@dataclass
class CoherenceReport:
    """Stability of a saliency sequence along the diffusion path.

    Fields:
        l_var: mean variance of the attributions of one map
        l_d: mean absolute difference between consecutive maps
        l_w: mean absolute deviation from the three-map sliding average
        l_sc: mean Spearman correlation of consecutive maps
        excluded_pairs: consecutive pairs left out of ``l_sc`` because a map is constant
    """

    l_var: float
    l_d: float
    l_w: float
    l_sc: float
    excluded_pairs: int = 0


def coherence(seq: SaliencySequence) -> CoherenceReport:
    """Coherence metrics of a sequence of at least two maps.

    A constant map makes the Spearman correlation undefined: a pair of identical maps counts as
    1.0, any other pair involving a constant map is excluded with a warning.
    """
    if len(seq) < 2:
        raise InvalidInputError("Coherence needs at least two saliency maps")
    psi = seq.stacked()
    n_maps = len(psi)
    l_var = float(np.mean(np.var(psi, axis=1)))
    l_d = float(np.mean(np.abs(np.diff(psi, axis=0))))
    windows = np.stack(
        [psi[max(0, k - 1) : min(n_maps, k + 2)].mean(axis=0) for k in range(n_maps)]
    )
    l_w = float(np.mean(np.abs(psi - windows)))
    correlations, excluded = [], 0
    for a, b in zip(psi[:-1], psi[1:]):
        try:
            correlations.append(spearman(a, b))
        except UndefinedMetricError:
            if np.array_equal(a, b):
                correlations.append(1.0)
            else:
                excluded += 1
    if excluded:
        warnings.warn(
            f"{excluded} consecutive map pairs with a constant map were excluded from L_SC",
            UserWarning,
        )
    if correlations:
        l_sc = float(np.mean(correlations))
    else:
        warnings.warn("Every pair was excluded; L_SC is undefined", UserWarning)
        l_sc = float("nan")
    return CoherenceReport(l_var, l_d, l_w, l_sc, excluded)


@dataclass_json
@dataclass
class ClassMetrics:
    """Generation metrics of the explanations of one class."""

    label: int
    n_samples: int
    m_is: Optional[float] = None
    cd: Optional[float] = None
    emd: Optional[float] = None
    msr: Optional[float] = None


# pylint: disable=too-many-instance-attributes
@dataclass_json
@dataclass
class MetricsReport:
    """Evaluation of a set of explanations, written as JSON.

    ``pcams`` always equals ``m_is - (ln fid + ln cd) / 2`` of the stored components.
    """

    m_is: float
    fid: float
    cd: float
    emd: float
    pcams: float
    msr: float
    schema: str = METRICS_SCHEMA
    method: str = "dam"
    emd_method: str = "exact"
    symmetric_cd: bool = False
    full_covariance: bool = False
    per_class: List[ClassMetrics] = field(default_factory=list)
    attribution: Dict[str, Dict[str, float]] = field(default_factory=dict)
    provenance: Dict[str, str] = field(default_factory=dict)

    def check(self) -> None:
        """Verify the composite against its components.

        Raises:
            UndefinedMetricError: the stored composite disagrees with its components
        """
        expected = pcams(self.m_is, self.fid, self.cd)
        if abs(expected - self.pcams) > 1e-9:
            raise UndefinedMetricError(
                f"PCAMS {self.pcams} differs from its components ({expected})"
            )

    def generation_row(self) -> Dict[str, Union[str, float]]:
        """One row of the generation-quality table."""
        return {
            "method": self.method,
            "m_is": self.m_is,
            "fid": self.fid,
            "cd": self.cd,
            "emd": self.emd,
            "pcams": self.pcams,
            "msr": self.msr,
        }


def _mean(values: List[float]) -> float:
    return float(np.mean(values)) if values else float("nan")


# pylint: disable=too-many-arguments,too-many-locals
def evaluate_generation(
    gen_set,
    gen_labels: Sequence[int],
    real_clouds,
    real_labels: Sequence[int],
    model: Classifier,
    real_per_class: int = 5,
    symmetric_cd: bool = False,
    full_covariance: bool = False,
    seed: int = 0,
    method: str = "dam",
) -> MetricsReport:
    """Score generated explanations against real clouds of their target classes.

    CD and EMD of an explanation are averaged over ``real_per_class`` real clouds of its class
    drawn with ``seed``; FID compares the generated set with all real clouds drawn.

    Raises:
        InvalidInputError: a target class has no real clouds
        UndefinedMetricError: FID or PCAMS is undefined on the inputs
    """
    gen, real = _stack(gen_set), _stack(real_clouds)
    gen_labels, real_labels = np.asarray(gen_labels), np.asarray(real_labels)
    if len(gen) != len(gen_labels) or len(real) != len(real_labels):
        raise InvalidInputError("Clouds and labels must be aligned")
    rng = np.random.default_rng(seed)
    references: Dict[int, np.ndarray] = {}
    for label in np.unique(gen_labels):
        pool = np.flatnonzero(real_labels == label)
        if len(pool) == 0:
            raise InvalidInputError(f"No real clouds of class {label} to compare against")
        size = min(real_per_class, len(pool))
        references[int(label)] = rng.choice(pool, size=size, replace=False)
    cds, emds = [], []
    for cloud, label in zip(gen, gen_labels):
        refs = real[references[int(label)]]
        cds.append(np.mean([chamfer(cloud, r, symmetric_cd) for r in refs]))
        emds.append(np.mean([emd(cloud, r) for r in refs]))
    cds, emds = np.asarray(cds), np.asarray(emds)
    chosen = np.concatenate(list(references.values()))
    probabilities = model.probabilities(gen)
    predicted = np.argmax(probabilities, axis=-1)
    m_is = modified_inception_score(probabilities)
    fid = fid_latent(gen, real[chosen], model, full_covariance)
    cd = float(cds.mean())
    per_class = []
    for label in np.unique(gen_labels):
        mask = gen_labels == label
        per_class.append(
            ClassMetrics(
                label=int(label),
                n_samples=int(mask.sum()),
                m_is=modified_inception_score(probabilities[mask]) if mask.sum() >= 2 else None,
                cd=float(cds[mask].mean()),
                emd=float(emds[mask].mean()),
                msr=success_rate(predicted[mask], gen_labels[mask]),
            )
        )
    return MetricsReport(
        m_is=m_is,
        fid=fid,
        cd=cd,
        emd=float(emds.mean()),
        pcams=pcams(m_is, fid, cd),
        msr=success_rate(predicted, gen_labels),
        method=method,
        emd_method=emd_method(gen.shape[1]),
        symmetric_cd=symmetric_cd,
        full_covariance=full_covariance,
        per_class=per_class,
    )


@dataclass_json
@dataclass
class AttributionSummary:
    """Faithfulness and coherence of one attribution method over a set of explanations."""

    method: str
    s_half: float
    s_full: float
    l_var: float
    l_d: float
    l_w: float
    l_sc: float
    n_explanations: int

    def row(self) -> Dict[str, Union[str, float]]:
        """One row of the attribution table."""
        return dict(
            zip(
                ATTRIBUTION_COLUMNS,
                [self.method, self.s_half, self.s_full, self.l_var, self.l_d, self.l_w, self.l_sc],
            )
        )


def evaluate_attribution(
    model: Confidence,
    clouds,
    sequences: Sequence[SaliencySequence],
    method: str,
    ablation: str = "centroid",
    j: float = 1.0,
) -> AttributionSummary:
    """Faithfulness of the final map of every sequence on its explanation, and the sequences'
    coherence, averaged over explanations."""
    if len(clouds) != len(sequences) or not sequences:
        raise InvalidInputError("Need one saliency sequence per explanation")
    curves = [
        faithfulness_area(model, cloud, seq.final.psi, j=j, ablation=ablation)
        for cloud, seq in zip(clouds, sequences)
    ]
    reports = [coherence(seq) for seq in sequences if len(seq) >= 2]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return AttributionSummary(
            method=method,
            s_half=_mean([c.area_up_to(0.5) for c in curves]) if j >= 0.5 else float("nan"),
            s_full=_mean([c.area_up_to(1.0) for c in curves]) if j >= 1.0 else float("nan"),
            l_var=_mean([r.l_var for r in reports]),
            l_d=_mean([r.l_d for r in reports]),
            l_w=_mean([r.l_w for r in reports]),
            l_sc=float(np.nanmean([r.l_sc for r in reports])) if reports else float("nan"),
            n_explanations=len(sequences),
        )


def generation_table(reports: Sequence[MetricsReport]) -> pd.DataFrame:
    """Generation-quality table, one row per method."""
    return pd.DataFrame([r.generation_row() for r in reports], columns=GENERATION_COLUMNS)


def attribution_table(summaries: Sequence[AttributionSummary]) -> pd.DataFrame:
    """Attribution table, one row per method."""
    return pd.DataFrame([s.row() for s in summaries], columns=ATTRIBUTION_COLUMNS)
