"""Retrieval metrics, class-distance summaries, and operation counts.

Average precision at cutoff ``k`` follows the retrieval convention
``AP@k = (1 / min(R, k)) * sum_i Prec(i) * Rel(i)`` where ``R`` is the number
of relevant references for the query; queries with ``R = 0`` are undefined
and get excluded (with a warning) from mean scores.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError
from .retrieval import HashCode, RetrievalIndex, query

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QueryResult:
    """Rank-ordered relevance flags for one query, with its relevant count."""

    flags: tuple[int, ...]
    total_relevant: int
    k: int

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be positive")
        if len(self.flags) > self.k:
            raise ValueError("cannot have more flags than the cutoff k")
        if any(f not in (0, 1) for f in self.flags):
            raise ValueError("flags must be 0 or 1")
        if self.total_relevant < 0:
            raise ValueError("total_relevant must be non-negative")


def ap_at_k(result: QueryResult) -> float:
    """Average precision at cutoff ``k`` for one query."""
    if result.total_relevant == 0:
        raise DataError("average precision is undefined for a query with no "
                        "relevant references")
    hits = 0
    total = 0.0
    for rank, flag in enumerate(result.flags, start=1):
        if flag:
            hits += 1
            total += hits / rank
    return total / min(result.total_relevant, result.k)


def map_at_k(results: list[QueryResult]) -> float:
    """Mean AP@k over queries; undefined queries (R = 0) are excluded."""
    kept = [r for r in results if r.total_relevant > 0]
    skipped = len(results) - len(kept)
    if skipped:
        logger.warning("excluded %d queries with no relevant references", skipped)
    if not kept:
        raise DataError("no query has relevant references")
    return float(np.mean([ap_at_k(r) for r in kept]))


def relevance_results(
    index: RetrievalIndex,
    query_codes: list[HashCode],
    query_labels: list[str],
    k: int,
) -> list[QueryResult]:
    """Run each query and flag which of its top-k neighbours share its label."""
    if len(query_codes) != len(query_labels):
        raise DataError("query codes and labels must have equal length")
    relevant_counts = Counter(index.labels)
    results = []
    for code, label in zip(query_codes, query_labels):
        hits = query(index, code, k)
        flags = tuple(int(hit.label == label) for hit in hits)
        results.append(QueryResult(flags, relevant_counts.get(str(label), 0), k))
    return results


@dataclass(frozen=True)
class ClassMapReport:
    """Per-class mAP at a per-query cutoff of that query's relevant count."""

    per_class: dict
    average: float


def map_at_r(
    index: RetrievalIndex,
    query_codes: list[HashCode],
    query_labels: list[str],
) -> ClassMapReport:
    """mAP@(k = R) per class, plus the unweighted average over classes.

    Each query uses its own class frequency in the index as the cutoff, so a
    perfect score requires retrieving the entire class before any
    out-of-class reference.
    """
    if len(query_codes) != len(query_labels):
        raise DataError("query codes and labels must have equal length")
    relevant_counts = Counter(index.labels)
    per_class_aps: dict[str, list[float]] = {}
    skipped = 0
    for code, label in zip(query_codes, query_labels):
        r = relevant_counts.get(str(label), 0)
        if r == 0:
            skipped += 1
            continue
        hits = query(index, code, r)
        flags = tuple(int(hit.label == str(label)) for hit in hits)
        per_class_aps.setdefault(str(label), []).append(
            ap_at_k(QueryResult(flags, r, r))
        )
    if skipped:
        logger.warning("excluded %d queries with no relevant references", skipped)
    if not per_class_aps:
        raise DataError("no query has relevant references")
    per_class = {
        label: {
            "relevant": int(relevant_counts[label]),
            "queries": len(aps),
            "map": float(np.mean(aps)),
        }
        for label, aps in sorted(per_class_aps.items())
    }
    average = float(np.mean([entry["map"] for entry in per_class.values()]))
    return ClassMapReport(per_class, average)


# ---------------------------------------------------------------------------
# Class distance structure
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassDistanceMatrix:
    """Mean Hamming distance between every ordered pair of classes."""

    classes: tuple[str, ...]
    means: np.ndarray
    counts: np.ndarray


def _pack_matrix(codes: list[HashCode]) -> np.ndarray:
    nbits = codes[0].nbits
    if any(c.nbits != nbits for c in codes):
        raise DataError("all codes must share one length")
    return np.stack([c.words for c in codes])


def _full_distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.bitwise_count(a[:, None, :] ^ b[None, :, :]).sum(axis=2).astype(np.int64)


def class_distance_matrix(codes: list[HashCode], labels: list[str]) -> ClassDistanceMatrix:
    """Within-set mean distances; diagonal cells use distinct unordered pairs."""
    if not codes or len(codes) != len(labels):
        raise DataError("codes and labels must be non-empty and equal-length")
    names = tuple(sorted(set(str(l) for l in labels)))
    groups = {name: np.array([i for i, l in enumerate(labels) if str(l) == name])
              for name in names}
    for name in names:
        if groups[name].size < 2:
            raise DataError(
                f"class {name!r} has fewer than 2 members; its within-class "
                f"mean distance is undefined"
            )
    matrix = _pack_matrix(codes)
    dist = _full_distance_matrix(matrix, matrix)
    c = len(names)
    means = np.zeros((c, c))
    counts = np.zeros((c, c), dtype=np.int64)
    for i, a in enumerate(names):
        for j, b in enumerate(names):
            block = dist[np.ix_(groups[a], groups[b])]
            if i == j:
                iu = np.triu_indices(block.shape[0], k=1)
                values = block[iu]
            else:
                values = block.ravel()
            means[i, j] = float(values.mean())
            counts[i, j] = values.size
    return ClassDistanceMatrix(names, means, counts)


def class_distance_matrix_between(
    codes_a: list[HashCode],
    labels_a: list[str],
    codes_b: list[HashCode],
    labels_b: list[str],
) -> ClassDistanceMatrix:
    """Bipartite mean distances: rows index set A classes, columns set B."""
    if not codes_a or len(codes_a) != len(labels_a):
        raise DataError("set A codes and labels must be non-empty and equal-length")
    if not codes_b or len(codes_b) != len(labels_b):
        raise DataError("set B codes and labels must be non-empty and equal-length")
    names = tuple(sorted(set(str(l) for l in labels_a) | set(str(l) for l in labels_b)))
    groups_a = {n: np.array([i for i, l in enumerate(labels_a) if str(l) == n]) for n in names}
    groups_b = {n: np.array([i for i, l in enumerate(labels_b) if str(l) == n]) for n in names}
    empty = [n for n in names if groups_a[n].size == 0 or groups_b[n].size == 0]
    if empty:
        raise DataError(f"classes {empty} are missing from one side; cell means "
                        f"would be undefined")
    ma = _pack_matrix(codes_a)
    mb = _pack_matrix(codes_b)
    if codes_a[0].nbits != codes_b[0].nbits:
        raise DataError("the two sets use different code lengths")
    dist = _full_distance_matrix(ma, mb)
    c = len(names)
    means = np.zeros((c, c))
    counts = np.zeros((c, c), dtype=np.int64)
    for i, a in enumerate(names):
        for j, b in enumerate(names):
            block = dist[np.ix_(groups_a[a], groups_b[b])]
            means[i, j] = float(block.mean())
            counts[i, j] = block.size
    return ClassDistanceMatrix(names, means, counts)


def separability_ratio(matrix: ClassDistanceMatrix) -> float:
    """Mean diagonal over mean off-diagonal cell; lower is better."""
    c = len(matrix.classes)
    if c < 2:
        raise DataError("separability needs at least two classes")
    diag = np.diag(matrix.means)
    off = matrix.means[~np.eye(c, dtype=bool)]
    off_mean = float(off.mean())
    if off_mean == 0.0:
        raise NumericalError("mean inter-class distance is zero")
    return float(diag.mean()) / off_mean


# ---------------------------------------------------------------------------
# Operation counts
# ---------------------------------------------------------------------------

# Published per-image cost of the full 372-filter descriptor stage, reported
# alongside the network cost for end-to-end comparisons.
DESCRIPTOR_STAGE_FLOPS = 1_139_692_788


@dataclass(frozen=True)
class FlopsBreakdown:
    """Named per-component operation counts for one forward pass."""

    components: tuple[tuple[str, int], ...]

    @property
    def total(self) -> int:
        return sum(flops for _, flops in self.components)


def mlp_flops(
    layer_sizes: list[int],
    batchnorm: list[bool],
    activations: list[bool],
) -> FlopsBreakdown:
    """Per-component forward-pass cost for a single input vector.

    A linear layer of ``m`` inputs and ``n`` outputs counts ``2 * m * n``
    operations (multiply and accumulate), batch normalization counts
    ``4 * n`` (subtract, divide, scale, shift), and tanh counts ``n``.
    """
    if len(layer_sizes) < 2:
        raise ValueError("layer_sizes needs an input and at least one layer")
    n_layers = len(layer_sizes) - 1
    if len(batchnorm) != n_layers or len(activations) != n_layers:
        raise ValueError("batchnorm and activations need one flag per layer")
    if any(s < 1 for s in layer_sizes):
        raise ValueError("layer sizes must be positive")
    components: list[tuple[str, int]] = []
    for i in range(n_layers):
        m, n = layer_sizes[i], layer_sizes[i + 1]
        components.append((f"linear_{i + 1}", 2 * m * n))
        if batchnorm[i]:
            components.append((f"batchnorm_{i + 1}", 4 * n))
        if activations[i]:
            components.append((f"tanh_{i + 1}", n))
    return FlopsBreakdown(tuple(components))


def hashing_network_flops(input_dim: int = 372, code_bits: int = 72) -> FlopsBreakdown:
    """Cost of the standard three-layer hashing head for one descriptor."""
    from .hashnet import HIDDEN_1, HIDDEN_2

    return mlp_flops(
        [input_dim, HIDDEN_1, HIDDEN_2, code_bits],
        batchnorm=[True, True, False],
        activations=[True, True, True],
    )


def descriptor_stage_estimate(
    n_filters: int,
    tuples_per_filter: list[int],
    n_orientations: int,
    width: int,
    height: int,
    hyperparams,
) -> int:
    """Analytic operation count of the descriptor stage for one image.

    Convention: a 1-D convolution pass costs ``(2 * taps - 1)`` operations
    per pixel (taps multiplies, taps - 1 adds) and a separable blur runs two
    passes.  Each distinct (scale, polarity) pair costs two blurs plus a
    subtraction, a rectification, and a two-pass threshold; each distinct
    blur std per pair costs one more separable blur.  Applying a filter with
    ``n`` keypoints costs ``2n - 1`` operations per pixel per orientation
    (fractional powers and products), and the orientation maximum plus the
    global maximum cost one comparison per pixel each.
    """
    if len(tuples_per_filter) != n_filters:
        raise ValueError("tuples_per_filter must list one count per filter")
    pixels = width * height

    def blur_cost(std: float) -> int:
        taps = 2 * math.ceil(3.0 * std) + 1
        return 2 * (2 * taps - 1) * pixels

    total = 0
    pair_stds: dict[tuple, set] = {}
    pair_seen = set()
    for sigma in hyperparams.sigma_bank:
        for polarity in ("on", "off"):
            pair_seen.add((sigma, polarity))
    for sigma, _polarity in pair_seen:
        # inner and outer blur, then subtract + rectify + threshold (2 passes)
        total += blur_cost(0.5 * sigma) + blur_cost(sigma) + 4 * pixels
    for rho in hyperparams.radii:
        std = hyperparams.sigma0_blur + hyperparams.alpha_blur * rho
        for pair in pair_seen:
            pair_stds.setdefault(pair, set()).add(std)
    for pair, stds in pair_stds.items():
        for std in stds:
            total += blur_cost(std)
    for n_tuples in tuples_per_filter:
        per_orientation = (2 * n_tuples - 1) * pixels
        total += n_orientations * per_orientation
        total += (n_orientations - 1) * pixels  # pixel-wise max over rotations
        total += pixels  # global max
    return total
