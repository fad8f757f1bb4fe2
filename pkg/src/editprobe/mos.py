"""Subjective-rating processing: kurtosis-based outlier screening, subject
rejection, per-subject z-normalization, and aggregation into 0-100 MOS.

Stages run in a fixed order: screen outliers per (sample, dimension) group,
reject subjects whose flagged fraction exceeds the threshold, recompute each
retained subject's mean/std over the surviving (unflagged) ratings, then
z-normalize and average. Record order never matters: everything is sorted
canonically first.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from editprobe.common import DIMENSIONS
from editprobe.errors import ContractError, DataError

GAUSSIAN_KURTOSIS_RANGE = (2.0, 4.0)
GAUSSIAN_SIGMA_FACTOR = 2.0
NON_GAUSSIAN_SIGMA_FACTOR = math.sqrt(20.0)
DEFAULT_REJECT_THRESHOLD = 0.05

_MOS_KEY = {"quality": "mos_q", "alignment": "mos_e", "preservation": "mos_p"}


@dataclass(frozen=True)
class RatingRecord:
    subject_id: str
    sample_id: str
    dimension: str
    score: int


@dataclass
class SubjectStats:
    subject_id: str
    mean: float
    std: float
    flagged_fraction: float
    rating_count: int


@dataclass
class MosResult:
    per_sample: dict[str, dict]
    excluded_samples: list[str]
    rejected_subjects: list[str]
    outlier_fraction: float
    subject_stats: dict[str, SubjectStats] = field(default_factory=dict)


def kurtosis(values) -> float | None:
    """Pearson kurtosis m4/m2^2 with population moments; None when variance is zero."""
    x = np.asarray(values, dtype=np.float64)
    if x.size < 2:
        raise ContractError(f"kurtosis needs at least 2 values, got {x.size}")
    centered = x - x.mean()
    m2 = float((centered**2).mean())
    if m2 == 0.0:
        return None
    m4 = float((centered**4).mean())
    return m4 / (m2 * m2)


def validate_records(records: list[RatingRecord]) -> None:
    if not records:
        raise DataError("no rating records")
    seen = set()
    for r in records:
        if r.dimension not in DIMENSIONS:
            raise DataError(f"unknown dimension {r.dimension!r} (expected one of {DIMENSIONS})")
        if not isinstance(r.score, int) or not 1 <= r.score <= 5:
            raise DataError(f"score must be an integer in [1,5], got {r.score!r}")
        key = (r.subject_id, r.sample_id, r.dimension)
        if key in seen:
            raise DataError(f"duplicate rating for {key}")
        seen.add(key)


def _canonical(records: list[RatingRecord]) -> list[RatingRecord]:
    return sorted(records, key=lambda r: (r.subject_id, r.sample_id, r.dimension))


def screen_outliers(records: list[RatingRecord]) -> dict[tuple[str, str, str], bool]:
    """Flag ratings deviating from their (sample, dimension) group mean.

    Gaussian groups (kurtosis in [2, 4]) use a 2-sigma threshold, other groups
    the sqrt(20)-sigma criterion; both comparisons are strict. Sigma is the
    sample (N-1) standard deviation of the group.
    """
    groups: dict[tuple[str, str], list[RatingRecord]] = {}
    for r in _canonical(records):
        groups.setdefault((r.sample_id, r.dimension), []).append(r)

    flags: dict[tuple[str, str, str], bool] = {
        (r.subject_id, r.sample_id, r.dimension): False for r in records
    }
    for (sample_id, dimension), members in sorted(groups.items()):
        scores = np.array([m.score for m in members], dtype=np.float64)
        if scores.size < 2:
            warnings.warn(
                f"group ({sample_id}, {dimension}) has {scores.size} rating(s); skipped screening"
            )
            continue
        mu = scores.mean()
        sigma = scores.std(ddof=1)
        k = kurtosis(scores)
        gaussian = k is not None and GAUSSIAN_KURTOSIS_RANGE[0] <= k <= GAUSSIAN_KURTOSIS_RANGE[1]
        factor = GAUSSIAN_SIGMA_FACTOR if gaussian else NON_GAUSSIAN_SIGMA_FACTOR
        threshold = factor * sigma
        for m in members:
            if abs(m.score - mu) > threshold:
                flags[(m.subject_id, m.sample_id, m.dimension)] = True
    return flags


def reject_subjects(
    records: list[RatingRecord],
    flags: dict[tuple[str, str, str], bool],
    threshold: float = DEFAULT_REJECT_THRESHOLD,
) -> tuple[set[str], dict[str, float]]:
    """Subjects whose flagged fraction strictly exceeds the threshold are dropped."""
    totals: dict[str, int] = {}
    flagged: dict[str, int] = {}
    for r in records:
        totals[r.subject_id] = totals.get(r.subject_id, 0) + 1
        if flags[(r.subject_id, r.sample_id, r.dimension)]:
            flagged[r.subject_id] = flagged.get(r.subject_id, 0) + 1
    fractions = {s: flagged.get(s, 0) / totals[s] for s in totals}
    retained = {s for s, frac in fractions.items() if frac <= threshold}
    if not retained:
        raise DataError("all subjects rejected by outlier screening; no data survives")
    return retained, fractions


def compute_mos(
    records: list[RatingRecord],
    flags: dict[tuple[str, str, str], bool],
    retained: set[str],
    fractions: dict[str, float] | None = None,
) -> MosResult:
    """z-normalize surviving ratings per subject and aggregate to per-sample MOS.

    z = (m - mu_subject) / sigma_subject with the sample standard deviation,
    mapped through 100*(z+3)/6; a subject with zero spread contributes z = 0.
    Samples missing any dimension after screening are excluded and reported.
    """
    surviving = [
        r
        for r in _canonical(records)
        if r.subject_id in retained and not flags[(r.subject_id, r.sample_id, r.dimension)]
    ]
    if not surviving:
        raise DataError("no ratings survive screening")

    by_subject: dict[str, list[RatingRecord]] = {}
    for r in surviving:
        by_subject.setdefault(r.subject_id, []).append(r)

    subject_stats: dict[str, SubjectStats] = {}
    for subject_id, items in sorted(by_subject.items()):
        scores = np.array([r.score for r in items], dtype=np.float64)
        std = scores.std(ddof=1) if scores.size > 1 else 0.0
        subject_stats[subject_id] = SubjectStats(
            subject_id=subject_id,
            mean=float(scores.mean()),
            std=float(std),
            flagged_fraction=(fractions or {}).get(subject_id, 0.0),
            rating_count=int(scores.size),
        )

    z_values: dict[tuple[str, str], list[float]] = {}
    for r in surviving:
        stats = subject_stats[r.subject_id]
        z = 0.0 if stats.std == 0.0 else (r.score - stats.mean) / stats.std
        z_prime = 100.0 * (z + 3.0) / 6.0
        z_values.setdefault((r.sample_id, r.dimension), []).append(z_prime)

    sample_ids = sorted({r.sample_id for r in records})
    per_sample: dict[str, dict] = {}
    excluded: list[str] = []
    for sample_id in sample_ids:
        dims_present = all((sample_id, d) in z_values for d in DIMENSIONS)
        if not dims_present:
            excluded.append(sample_id)
            continue
        entry: dict = {"counts": {}, "z_std": {}}
        for d in DIMENSIONS:
            vals = np.array(z_values[(sample_id, d)], dtype=np.float64)
            entry[_MOS_KEY[d]] = float(vals.mean())
            entry["counts"][d] = int(vals.size)
            entry["z_std"][d] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        entry["mos_o"] = (entry["mos_q"] + entry["mos_e"] + entry["mos_p"]) / 3.0
        per_sample[sample_id] = entry

    return MosResult(
        per_sample=per_sample,
        excluded_samples=excluded,
        rejected_subjects=[],
        outlier_fraction=0.0,
        subject_stats=subject_stats,
    )


def process_ratings(
    records: list[RatingRecord], threshold: float = DEFAULT_REJECT_THRESHOLD
) -> MosResult:
    """Full pipeline: screen, reject, renormalize, aggregate."""
    validate_records(records)
    flags = screen_outliers(records)
    retained, fractions = reject_subjects(records, flags, threshold)
    result = compute_mos(records, flags, retained, fractions)
    result.rejected_subjects = sorted(s for s in fractions if s not in retained)
    result.outlier_fraction = sum(flags.values()) / len(records)
    return result


def read_ratings_csv(path: str) -> list[RatingRecord]:
    """UTF-8 CSV with header subject_id,sample_id,dimension,score."""
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["subject_id", "sample_id", "dimension", "score"]
        if reader.fieldnames != expected:
            raise DataError(f"ratings header must be {expected}, got {reader.fieldnames}")
        for line_no, row in enumerate(reader, start=2):
            try:
                score = int(row["score"])
            except (TypeError, ValueError):
                raise DataError(f"line {line_no}: score {row.get('score')!r} is not an integer")
            records.append(
                RatingRecord(
                    subject_id=row["subject_id"],
                    sample_id=row["sample_id"],
                    dimension=row["dimension"],
                    score=score,
                )
            )
    return records


def write_ratings_csv(path: str, records: list[RatingRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "sample_id", "dimension", "score"])
        for r in records:
            writer.writerow([r.subject_id, r.sample_id, r.dimension, r.score])
