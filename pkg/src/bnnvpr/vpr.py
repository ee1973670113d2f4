"""Descriptor extraction, nearest-reference matching and ground-truth verdicts."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .bitcore import DimensionError
from .network import FrozenNetwork, forward


class DegenerateDescriptorError(ValueError):
    """The feature vector is all zeros, so it has no direction to normalize."""


class GroundTruthError(KeyError):
    pass


@dataclass(frozen=True, eq=False)
class Descriptor:
    values: np.ndarray
    source_layer: str = ""
    image_id: str = ""

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.size


def normalize(features, source_layer: str = "", image_id: str = "") -> Descriptor:
    """L2-normalize a flattened feature vector."""
    x = np.asarray(features, dtype=np.float64).reshape(-1)
    norm = np.linalg.norm(x)
    if norm == 0 or not np.isfinite(norm):
        raise DegenerateDescriptorError(
            f"feature vector of {image_id or 'image'} has norm {norm}; cannot normalize"
        )
    return Descriptor(x / norm, source_layer, image_id)


def extract(net: FrozenNetwork, image, layer: str | None = None, image_id: str = "") -> Descriptor:
    name = layer or net.spec.output_layer
    return normalize(forward(net, image, name), name, image_id)


def _vec(d: Descriptor | np.ndarray) -> np.ndarray:
    return d.values if isinstance(d, Descriptor) else np.asarray(d, dtype=np.float64).reshape(-1)


def distance(d1: Descriptor | np.ndarray, d2: Descriptor | np.ndarray) -> float:
    a, b = _vec(d1), _vec(d2)
    if a.shape != b.shape:
        raise DimensionError(f"descriptor dimensions differ: {a.size} vs {b.size}")
    return float(np.linalg.norm(a - b))


@dataclass(frozen=True, eq=False)
class ReferenceDB:
    ids: tuple[str, ...]
    matrix: np.ndarray
    dataset: str = ""

    def __post_init__(self) -> None:
        ids = tuple(str(i) for i in self.ids)
        object.__setattr__(self, "ids", ids)
        m = np.array(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != len(ids):
            raise DimensionError(f"matrix shape {m.shape} does not fit {len(ids)} ids")
        if len(set(ids)) != len(ids):
            raise ValueError("reference ids must be unique")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_descriptors(cls, descriptors: Sequence[Descriptor], dataset: str = "") -> ReferenceDB:
        dims = {d.dim for d in descriptors}
        if len(dims) > 1:
            raise DimensionError(f"reference descriptors have mixed dimensions {sorted(dims)}")
        matrix = np.stack([d.values for d in descriptors]) if descriptors else np.zeros((0, 0))
        return cls(tuple(d.image_id for d in descriptors), matrix, dataset)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def index_of(self, ref_id: str) -> int:
        return self.ids.index(ref_id)


def distances(query: Descriptor | np.ndarray, db: ReferenceDB) -> np.ndarray:
    q = _vec(query)
    if len(db) and q.size != db.dim:
        raise DimensionError(f"query dimension {q.size} != database dimension {db.dim}")
    return np.linalg.norm(db.matrix - q, axis=1)


def match(query: Descriptor | np.ndarray, db: ReferenceDB) -> tuple[str, float]:
    """Closest reference by Euclidean distance; ties go to the lowest index."""
    if len(db) == 0:
        raise ValueError("reference database is empty")
    d = distances(query, db)
    best = int(np.argmin(d))
    return db.ids[best], float(d[best])


@dataclass(frozen=True)
class GroundTruth:
    """Which references count as the true place of each query.

    ``frame_tolerance``: query i is correct when matched to a reference whose
    frame index is within ``tolerance`` of i. ``explicit_pairs``: each query id
    maps to the set of acceptable reference ids.
    """

    mode: str
    tolerance: int = 0
    pairs: Mapping[str, frozenset[str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.mode not in ("frame_tolerance", "explicit_pairs"):
            raise ValueError(f"unknown ground-truth mode {self.mode!r}")
        if self.tolerance < 0:
            raise ValueError("tolerance must be non-negative")
        object.__setattr__(
            self, "pairs", {str(q): frozenset(str(r) for r in refs) for q, refs in self.pairs.items()}
        )

    @classmethod
    def frames(cls, tolerance: int) -> GroundTruth:
        return cls("frame_tolerance", tolerance=tolerance)

    @classmethod
    def explicit(cls, pairs: Mapping[str, Iterable[str]]) -> GroundTruth:
        return cls("explicit_pairs", pairs={q: frozenset(r) for q, r in pairs.items()})

    def covers(self, query_id: str) -> bool:
        return self.mode == "frame_tolerance" or query_id in self.pairs

    def is_correct(self, query_index: int, query_id: str, ref_index: int, ref_id: str) -> bool:
        if self.mode == "frame_tolerance":
            return abs(ref_index - query_index) <= self.tolerance
        if query_id not in self.pairs:
            raise GroundTruthError(f"query {query_id!r} has no ground-truth entry")
        return ref_id in self.pairs[query_id]

    def validate(self, query_ids: Sequence[str], ref_ids: Sequence[str]) -> None:
        if self.mode != "explicit_pairs":
            return
        missing = [q for q in query_ids if q not in self.pairs]
        if missing:
            raise GroundTruthError(f"queries without ground truth: {missing[:5]}")
        known = set(ref_ids)
        unknown = sorted({r for refs in self.pairs.values() for r in refs} - known)
        if unknown:
            raise GroundTruthError(f"ground truth names unknown references: {unknown[:5]}")


@dataclass(frozen=True)
class MatchResult:
    query_id: str
    ref_id: str
    distance: float
    correct: bool


@dataclass(frozen=True)
class MatchReport:
    results: tuple[MatchResult, ...]
    dataset: str = ""

    @property
    def total(self) -> int:
        return len(self.results)

    @property
    def n_correct(self) -> int:
        return sum(r.correct for r in self.results)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["query", "ref", "distance", "correct"])
        for r in self.results:
            writer.writerow([r.query_id, r.ref_id, f"{r.distance:.9g}", int(r.correct)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, dataset: str = "") -> MatchReport:
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls(
            tuple(
                MatchResult(r["query"], r["ref"], float(r["distance"]), r["correct"] in ("1", "True", "true"))
                for r in rows
            ),
            dataset,
        )


def match_descriptors(queries: Sequence[Descriptor], db: ReferenceDB, gt: GroundTruth) -> MatchReport:
    gt.validate([q.image_id for q in queries], db.ids)
    results = []
    for qi, q in enumerate(queries):
        if not gt.covers(q.image_id):
            raise GroundTruthError(f"query {q.image_id!r} has no ground-truth entry")
        ref_id, d = match(q, db)
        ok = gt.is_correct(qi, q.image_id, db.index_of(ref_id), ref_id)
        results.append(MatchResult(q.image_id, ref_id, d, ok))
    return MatchReport(tuple(results), db.dataset)


def build_db(net: FrozenNetwork, images: Sequence[tuple[str, np.ndarray]], layer: str | None = None, dataset: str = "") -> ReferenceDB:
    return ReferenceDB.from_descriptors([extract(net, img, layer, image_id) for image_id, img in images], dataset)


def run_queries(
    net: FrozenNetwork,
    queries: Sequence[tuple[str, np.ndarray]],
    db: ReferenceDB,
    gt: GroundTruth,
    layer: str | None = None,
) -> MatchReport:
    """Extract each query descriptor, match it against ``db`` and judge it."""
    for query_id, _ in queries:
        if not gt.covers(query_id):
            raise GroundTruthError(f"query {query_id!r} has no ground-truth entry")
    descriptors = [extract(net, img, layer, query_id) for query_id, img in queries]
    return match_descriptors(descriptors, db, gt)
