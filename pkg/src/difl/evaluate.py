"""Retrieval-based localization benchmark: 6-DOF pose error against the
retrieved reference, bucketed into nested precision regimes.

A query is localized by inheriting the pose of its top-1 retrieved reference;
there is no pose refinement stage.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetManifest, Pose
from .errors import ConfigError, DegenerateRotationError
from .index import FeatureIndex, retrieve

DEFAULT_THRESHOLDS = [(0.25, 2.0), (0.5, 5.0), (5.0, 10.0)]
REGIME_NAMES = ["high", "medium", "coarse"]


@dataclass(frozen=True)
class PrecisionRegimes:
    """Nested (max position m, max rotation deg) thresholds, loosest last."""

    thresholds: tuple = tuple(DEFAULT_THRESHOLDS)

    def __post_init__(self):
        if not self.thresholds:
            raise ConfigError("need at least one threshold pair")
        prev = (0.0, 0.0)
        for pos, rot in self.thresholds:
            if not (pos > prev[0] and rot > prev[1]):
                raise ConfigError(
                    f"thresholds must be strictly nested, got {self.thresholds}")
            prev = (pos, rot)


def position_error(p_query: Pose, p_ref: Pose) -> float:
    """Euclidean distance between camera positions, meters."""
    return float(np.linalg.norm(p_query.position - p_ref.position))


def rotation_error(q_query: np.ndarray, q_ref: np.ndarray) -> float:
    """Relative rotation angle in degrees via the quaternion inner product.

    Sign-insensitive (q and -q are the same rotation); inputs are normalized
    on entry. Range [0, 180].
    """
    q1 = np.asarray(q_query, dtype=np.float64).reshape(4)
    q2 = np.asarray(q_ref, dtype=np.float64).reshape(4)
    n1, n2 = np.linalg.norm(q1), np.linalg.norm(q2)
    if n1 == 0.0 or n2 == 0.0:
        raise DegenerateRotationError("zero quaternion has no orientation")
    dot = abs(float(np.dot(q1 / n1, q2 / n2)))
    return math.degrees(2.0 * math.acos(min(dot, 1.0)))


def classify(e_pos: float, e_rot: float,
             regimes: PrecisionRegimes = PrecisionRegimes()) -> tuple[bool, ...]:
    """Membership flag per regime; nesting makes the flags monotone."""
    return tuple(e_pos <= pos and e_rot <= rot
                 for pos, rot in regimes.thresholds)


@dataclass
class RetrievalRecord:
    """One retrieval outcome plus its pose errors, for offline re-checks."""

    query_id: str
    retrieved_id: str
    distance: float
    e_pos: float
    e_rot: float


@dataclass
class LocalizationReport:
    per_regime_accuracy: list[float]          # percentages, loosest last
    per_slice: dict[str, list[float]]
    n_queries: int
    n_skipped: int
    metric: str
    pca: str

    def __post_init__(self):
        accs = self.per_regime_accuracy
        assert all(0.0 <= a <= 100.0 for a in accs)
        assert all(a <= b for a, b in zip(accs, accs[1:])), \
            "regime accuracies must be non-decreasing"

    def to_text(self) -> str:
        def fmt(accs):
            return "/".join(f"{a:.1f}" for a in accs)

        lines = [f"queries: {self.n_queries} (skipped without pose: "
                 f"{self.n_skipped}), metric: {self.metric}, pca: {self.pca}",
                 f"overall: {fmt(self.per_regime_accuracy)}"]
        for name in sorted(self.per_slice):
            lines.append(f"slice {name}: {fmt(self.per_slice[name])}")
        return "\n".join(lines)

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scope", "n_queries",
                             *[f"acc_{n}" for n in REGIME_NAMES[:len(self.per_regime_accuracy)]]])
            writer.writerow(["overall", self.n_queries,
                             *[repr(a) for a in self.per_regime_accuracy]])
            for name in sorted(self.per_slice):
                writer.writerow([f"slice:{name}", "",
                                 *[repr(a) for a in self.per_slice[name]]])


def pose_errors(q_pose: Pose, ref_pose: Pose) -> tuple[float, float]:
    return (position_error(q_pose, ref_pose),
            rotation_error(q_pose.orientation, ref_pose.orientation))


def report_from_retrievals(records: list[RetrievalRecord],
                           slices: dict[str, str],
                           n_skipped: int,
                           regimes: PrecisionRegimes = PrecisionRegimes(),
                           metric: str = "", pca: str = "") -> LocalizationReport:
    """Aggregate per-query errors into regime percentages, overall and per slice.

    ``slices`` maps query_id to its slice. Percentages are per-query means, so
    the report is a pure function of the retrieval records.
    """
    n_regimes = len(regimes.thresholds)
    flags = {rec.query_id: classify(rec.e_pos, rec.e_rot, regimes)
             for rec in records}

    def accuracy(ids) -> list[float]:
        if not ids:
            return [0.0] * n_regimes
        return [100.0 * sum(flags[i][k] for i in ids) / len(ids)
                for k in range(n_regimes)]

    all_ids = [rec.query_id for rec in records]
    per_slice_ids: dict[str, list[str]] = {}
    for rec in records:
        per_slice_ids.setdefault(slices[rec.query_id], []).append(rec.query_id)
    return LocalizationReport(
        per_regime_accuracy=accuracy(all_ids),
        per_slice={s: accuracy(ids) for s, ids in per_slice_ids.items()},
        n_queries=len(records), n_skipped=n_skipped,
        metric=metric, pca=pca)


def run_retrievals(index: FeatureIndex, bank, manifest: DatasetManifest,
                   queries=None) -> tuple[list[RetrievalRecord], int]:
    """Top-1 retrieval for every query with ground truth; returns records and
    the count of queries skipped for lack of a pose."""
    ref_poses = {r.id: r.pose for r in manifest.references()}
    records = []
    skipped = 0
    for q in (queries if queries is not None else manifest.queries()):
        if q.pose is None:
            skipped += 1
            continue
        [(ref_id, dist)] = retrieve(index, bank, q, top_k=1)
        e_pos, e_rot = pose_errors(q.pose, ref_poses[ref_id])
        records.append(RetrievalRecord(q.id, ref_id, dist, e_pos, e_rot))
    return records, skipped


def evaluate(index: FeatureIndex, bank, manifest: DatasetManifest,
             regimes: PrecisionRegimes = PrecisionRegimes(),
             queries=None, log_path: str | Path | None = None
             ) -> LocalizationReport:
    """Full benchmark pass: retrieve, inherit poses, classify, aggregate."""
    records, skipped = run_retrievals(index, bank, manifest, queries)
    if log_path is not None:
        save_retrieval_log(records, log_path)
    slices = {q.id: q.slice for q in manifest.queries()}
    pca = "none" if index.pca is None else index.pca_description()
    return report_from_retrievals(records, slices, skipped, regimes,
                                  metric=index.metric, pca=pca)


LOG_COLUMNS = ["query_id", "retrieved_id", "distance", "e_pos", "e_rot"]


def save_retrieval_log(records: list[RetrievalRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for rec in records:
            writer.writerow([rec.query_id, rec.retrieved_id,
                             repr(rec.distance), repr(rec.e_pos),
                             repr(rec.e_rot)])


def load_retrieval_log(path: str | Path) -> list[RetrievalRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LOG_COLUMNS:
            raise ConfigError(f"bad retrieval log header: {reader.fieldnames}")
        return [RetrievalRecord(row["query_id"], row["retrieved_id"],
                                float(row["distance"]), float(row["e_pos"]),
                                float(row["e_rot"]))
                for row in reader]
