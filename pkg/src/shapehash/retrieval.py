"""Binary hash codes, exact Hamming-distance search, and threshold calibration.

Codes are bit vectors packed into uint64 words, least-significant bit first
(bit ``j`` lives in word ``j // 64`` at bit position ``j % 64``).  Search is
an exact linear scan: XOR plus popcount against every stored code, ascending
distance, ties broken by insertion order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    DataError,
    FormatVersionError,
    TruncatedPayloadError,
)

CODES_MAGIC = b"CODE"

_WORD_BITS = 64


@dataclass(frozen=True, eq=False)
class HashCode:
    """An immutable ``nbits``-long bit vector packed into uint64 words."""

    words: np.ndarray
    nbits: int

    def __post_init__(self) -> None:
        words = np.ascontiguousarray(self.words, dtype=np.uint64)
        if self.nbits < 1:
            raise ValueError("nbits must be positive")
        expected = (self.nbits + _WORD_BITS - 1) // _WORD_BITS
        if words.ndim != 1 or words.size != expected:
            raise ValueError(
                f"{self.nbits}-bit code needs {expected} words, got shape {words.shape}"
            )
        tail = self.nbits % _WORD_BITS
        if tail and int(words[-1]) >> tail:
            raise ValueError("bits beyond nbits must be zero")
        words = words.copy()
        words.setflags(write=False)
        object.__setattr__(self, "words", words)

    @staticmethod
    def from_bits(bits: np.ndarray) -> "HashCode":
        arr = np.asarray(bits)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("bits must be a non-empty 1-D sequence")
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError("bits must be 0 or 1")
        packed = np.packbits(arr.astype(np.uint8), bitorder="little")
        n_words = (arr.size + _WORD_BITS - 1) // _WORD_BITS
        padded = np.zeros(n_words * 8, dtype=np.uint8)
        padded[: packed.size] = packed
        words = padded.view("<u8").astype(np.uint64)
        return HashCode(words, int(arr.size))

    def bits(self) -> np.ndarray:
        """Unpack to a 0/1 uint8 vector of length ``nbits``."""
        raw = self.words.astype("<u8").tobytes()
        return np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")[
            : self.nbits
        ]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, HashCode)
            and self.nbits == other.nbits
            and bool(np.array_equal(self.words, other.words))
        )

    def __hash__(self) -> int:
        return hash((self.nbits, self.words.tobytes()))


def binarize(activations: np.ndarray, threshold: float) -> HashCode:
    """Bit ``j`` is 1 exactly when activation ``j`` exceeds the threshold."""
    if not -1.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [-1, 1]")
    acts = np.asarray(activations, dtype=np.float64)
    if acts.ndim != 1 or acts.size < 1:
        raise ValueError("activations must be a non-empty 1-D vector")
    return HashCode.from_bits(acts > threshold)


def hamming(a: HashCode, b: HashCode) -> int:
    """Number of differing bits between two equal-length codes."""
    if a.nbits != b.nbits:
        raise DataError(f"code lengths differ: {a.nbits} vs {b.nbits}")
    return int(np.bitwise_count(a.words ^ b.words).sum())


class QueryHit(NamedTuple):
    """One retrieval result: stored id, class label, Hamming distance."""

    id: int
    label: str
    distance: int


class RetrievalIndex:
    """An in-memory reference database of equal-length hash codes."""

    def __init__(
        self,
        codes: list[HashCode],
        labels: list[str],
        ids: list[int] | None = None,
    ) -> None:
        if len(codes) != len(labels):
            raise DataError("codes and labels must have equal length")
        if ids is None:
            ids = list(range(len(codes)))
        if len(ids) != len(codes):
            raise DataError("ids and codes must have equal length")
        if codes:
            nbits = codes[0].nbits
            if any(c.nbits != nbits for c in codes):
                raise DataError("all codes in an index must share one length")
            self.nbits = nbits
            self._matrix = np.stack([c.words for c in codes])
        else:
            self.nbits = 0
            self._matrix = np.zeros((0, 0), dtype=np.uint64)
        self.labels = tuple(str(l) for l in labels)
        self.ids = tuple(int(i) for i in ids)

    def __len__(self) -> int:
        return len(self.labels)

    def codes(self) -> list[HashCode]:
        return [HashCode(row, self.nbits) for row in self._matrix]

    def distances(self, query: HashCode) -> np.ndarray:
        """Hamming distance from the query to every stored code, in order."""
        if len(self) == 0:
            raise DataError("index is empty")
        if query.nbits != self.nbits:
            raise DataError(
                f"query has {query.nbits} bits, index stores {self.nbits}"
            )
        return np.bitwise_count(self._matrix ^ query.words).sum(axis=1).astype(np.int64)


def query(index: RetrievalIndex, code: HashCode, top_n: int) -> list[QueryHit]:
    """Top ``top_n`` stored codes by ascending Hamming distance.

    Ties are returned in insertion order, so results are fully deterministic.
    """
    if top_n < 1:
        raise ValueError("top_n must be positive")
    dists = index.distances(code)
    order = np.argsort(dists, kind="stable")[:top_n]
    return [QueryHit(index.ids[i], index.labels[i], int(dists[i])) for i in order]


# ---------------------------------------------------------------------------
# Threshold calibration
# ---------------------------------------------------------------------------


class SweepPoint(NamedTuple):
    threshold: float
    score: float


class SweepResult(NamedTuple):
    best_threshold: float
    curve: list[SweepPoint]


def default_thresholds() -> tuple[float, ...]:
    """21 candidate thresholds from -1.0 to 1.0 in steps of 0.1."""
    return tuple(round(t / 10.0, 1) for t in range(-10, 11))


def threshold_sweep(
    query_acts: np.ndarray,
    query_labels,
    ref_acts: np.ndarray,
    ref_labels,
    k_eval: int,
    thresholds: tuple[float, ...] | None = None,
) -> SweepResult:
    """Score retrieval quality at each binarization threshold.

    Both activation sets are binarized at the same candidate threshold, the
    queries are run against the references, and mAP@``k_eval`` is recorded.
    The best threshold is the argmax; ties go to the smallest threshold.
    """
    # imported here because evaluation depends on this module for distances
    from .evaluation import map_at_k, relevance_results

    if thresholds is None:
        thresholds = default_thresholds()
    if not thresholds:
        raise ValueError("thresholds must be non-empty")
    q = np.asarray(query_acts, dtype=np.float64)
    r = np.asarray(ref_acts, dtype=np.float64)
    if q.ndim != 2 or r.ndim != 2 or q.shape[1] != r.shape[1]:
        raise DataError("activation matrices must be 2-D with equal widths")
    if len(set(query_labels)) < 2 or len(set(ref_labels)) < 2:
        raise DataError("threshold sweep needs at least two classes per side")
    curve: list[SweepPoint] = []
    best_threshold = None
    best_score = -np.inf
    for t in thresholds:
        ref_codes = [binarize(row, t) for row in r]
        query_codes = [binarize(row, t) for row in q]
        index = RetrievalIndex(ref_codes, list(ref_labels))
        score = map_at_k(relevance_results(index, query_codes, list(query_labels), k_eval))
        curve.append(SweepPoint(float(t), float(score)))
        if score > best_score:
            best_score = score
            best_threshold = float(t)
    assert best_threshold is not None
    return SweepResult(best_threshold, curve)


# ---------------------------------------------------------------------------
# Codes file format
# ---------------------------------------------------------------------------


def save_codes(
    path: Path,
    codes: list[HashCode],
    labels: list[str],
    ids: list[int] | None = None,
) -> None:
    """Write codes with labels and ids; label names go to a JSON sidecar.

    Layout: magic ``CODE``, u32 bit count, u32 record count, then per record
    a u32 id, a u8 index into the sorted label-name list, and the packed code
    bytes (``ceil(nbits / 8)``, least-significant bit first).
    """
    if not codes:
        raise DataError("refusing to write an empty codes file")
    if len(codes) != len(labels):
        raise DataError("codes and labels must have equal length")
    if ids is None:
        ids = list(range(len(codes)))
    nbits = codes[0].nbits
    if any(c.nbits != nbits for c in codes):
        raise DataError("all codes in a file must share one length")
    names = sorted(set(str(l) for l in labels))
    if len(names) > 256:
        raise DataError("codes files support at most 256 distinct labels")
    name_index = {name: i for i, name in enumerate(names)}
    n_bytes = (nbits + 7) // 8
    out = [CODES_MAGIC, struct.pack("<II", nbits, len(codes))]
    for code, label, rid in zip(codes, labels, ids):
        if not 0 <= int(rid) < 2**32:
            raise DataError(f"record id {rid} does not fit in u32")
        out.append(struct.pack("<IB", int(rid), name_index[str(label)]))
        out.append(code.words.astype("<u8").tobytes()[:n_bytes])
    Path(path).write_bytes(b"".join(out))
    sidecar = Path(path).with_name(Path(path).name + ".json")
    sidecar.write_text(
        json.dumps({"labels": names}, indent=2, sort_keys=True), encoding="utf-8"
    )


def load_codes(path: Path) -> RetrievalIndex:
    """Read a codes file written by :func:`save_codes` into an index."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read codes file {path}: {exc}") from exc
    if len(buf) < 4 or buf[:4] != CODES_MAGIC:
        raise FormatVersionError(f"{path}: bad magic, expected CODE")
    if len(buf) < 12:
        raise TruncatedPayloadError(f"{path}: header is incomplete")
    nbits, count = struct.unpack_from("<II", buf, 4)
    if nbits < 1:
        raise DataError(f"{path}: bit count must be positive")
    sidecar = path.with_name(path.name + ".json")
    if not sidecar.exists():
        raise DataError(f"{path}: missing label sidecar {sidecar.name}")
    try:
        names = json.loads(sidecar.read_text(encoding="utf-8"))["labels"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{sidecar}: malformed label sidecar: {exc}") from exc
    n_bytes = (nbits + 7) // 8
    record = 5 + n_bytes
    expected = 12 + record * count
    if len(buf) < expected:
        raise TruncatedPayloadError(
            f"{path}: file holds {len(buf)} bytes, expected {expected}"
        )
    if len(buf) > expected:
        raise DataError(f"{path}: {len(buf) - expected} trailing bytes after payload")
    n_words = (nbits + _WORD_BITS - 1) // _WORD_BITS
    codes: list[HashCode] = []
    labels: list[str] = []
    ids: list[int] = []
    offset = 12
    for _ in range(count):
        rid, label_idx = struct.unpack_from("<IB", buf, offset)
        offset += 5
        if label_idx >= len(names):
            raise DataError(f"{path}: label index {label_idx} out of range")
        padded = np.zeros(n_words * 8, dtype=np.uint8)
        padded[:n_bytes] = np.frombuffer(buf, dtype=np.uint8, count=n_bytes, offset=offset)
        offset += n_bytes
        words = padded.view("<u8").astype(np.uint64)
        tail = nbits % _WORD_BITS
        if tail and int(words[-1]) >> tail:
            raise DataError(f"{path}: record {rid} sets bits beyond the bit count")
        codes.append(HashCode(words, nbits))
        labels.append(str(names[label_idx]))
        ids.append(int(rid))
    return RetrievalIndex(codes, labels, ids)
