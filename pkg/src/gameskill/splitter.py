"""Stratified train/val/test splits over videos or over users, and leakage checks."""

from __future__ import annotations

import enum
import json
import logging
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .manifest import Manifest, RankSection

logger = logging.getLogger(__name__)

DEFAULT_RATIOS = (0.8, 0.1, 0.1)
STRATIFICATION_TOLERANCE = 0.03


class SplitError(ValueError):
    pass


class SmallClassWarning(UserWarning):
    """A class (or user group) is too small to populate every subset."""


class SplitMode(str, enum.Enum):
    VIDEO_BASED = "VIDEO_BASED"
    USER_BASED = "USER_BASED"


class Subset(str, enum.Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"


SUBSETS = (Subset.TRAIN, Subset.VAL, Subset.TEST)


@dataclass(frozen=True)
class SplitAssignment:
    mode: SplitMode
    assignment: dict[str, Subset]
    seed: int
    ratios: tuple[float, float, float] = DEFAULT_RATIOS

    def ids(self, subset: Subset | str) -> list[str]:
        subset = Subset(subset)
        return sorted(sid for sid, s in self.assignment.items() if s is subset)

    def sizes(self) -> dict[Subset, int]:
        return {s: len(self.ids(s)) for s in SUBSETS}

    def to_json(self) -> dict:
        return {
            "mode": self.mode.value,
            "seed": self.seed,
            "ratios": list(self.ratios),
            "assignment": {k: v.value for k, v in sorted(self.assignment.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SplitAssignment":
        return cls(
            mode=SplitMode(obj["mode"]),
            assignment={k: Subset(v) for k, v in obj["assignment"].items()},
            seed=int(obj["seed"]),
            ratios=tuple(float(r) for r in obj["ratios"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "SplitAssignment":
        return cls.from_json(json.loads(Path(path).read_text()))


def _check_ratios(ratios) -> tuple[float, float, float]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    return ratios


def largest_remainder(n: int, ratios) -> list[int]:
    """Integer counts summing to n, closest to n * ratios; ties go to the earlier subset."""
    quotas = [n * r for r in ratios]
    counts = [math.floor(q + 1e-9) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    order = sorted(range(len(ratios)), key=lambda i: (-remainders[i], i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _class_seed(seed: int, rank: RankSection) -> np.random.Generator:
    return np.random.default_rng([seed, int(rank)])


def stratified_video_split(manifest: Manifest, ratios=DEFAULT_RATIOS, seed: int = 0) -> SplitAssignment:
    ratios = _check_ratios(ratios)
    if not len(manifest):
        raise SplitError("cannot split an empty manifest")
    by_class: dict[RankSection, list[str]] = defaultdict(list)
    for rec in manifest.records:
        by_class[rec.rank].append(rec.sample_id)

    assignment: dict[str, Subset] = {}
    for rank in sorted(by_class):
        ids = sorted(by_class[rank])
        if len(ids) < 3:
            warnings.warn(f"class {rank.name} has {len(ids)} sample(s); placed wholly in TRAIN", SmallClassWarning, stacklevel=2)
            assignment.update({sid: Subset.TRAIN for sid in ids})
            continue
        ids = [ids[i] for i in _class_seed(seed, rank).permutation(len(ids))]
        start = 0
        for subset, count in zip(SUBSETS, largest_remainder(len(ids), ratios)):
            assignment.update({sid: subset for sid in ids[start : start + count]})
            start += count
    return SplitAssignment(SplitMode.VIDEO_BASED, assignment, seed, ratios)


def user_ranks(manifest: Manifest) -> dict[str, RankSection]:
    """Rank of each user; every user's videos must share one rank section."""
    ranks: dict[str, RankSection] = {}
    for rec in manifest.records:
        prev = ranks.setdefault(rec.user_id, rec.rank)
        if prev is not rec.rank:
            raise SplitError(f"user {rec.user_id!r} has videos in sections {prev.name} and {rec.rank.name}")
    return ranks


def stratified_user_split(manifest: Manifest, ratios=DEFAULT_RATIOS, seed: int = 0) -> SplitAssignment:
    """Partition users per rank class; all of a user's videos follow the user.

    Within a class, users are shuffled and split by user count; users are then
    swapped between subsets so per-class video counts also track ``ratios``.
    """
    ratios = _check_ratios(ratios)
    if not len(manifest):
        raise SplitError("cannot split an empty manifest")
    ranks = user_ranks(manifest)
    videos: dict[str, list[str]] = defaultdict(list)
    for rec in manifest.records:
        videos[rec.user_id].append(rec.sample_id)

    users_by_class: dict[RankSection, list[str]] = defaultdict(list)
    for uid, rank in ranks.items():
        users_by_class[rank].append(uid)

    assignment: dict[str, Subset] = {}
    for rank in sorted(users_by_class):
        users = sorted(users_by_class[rank])
        if len(users) < 3:
            warnings.warn(
                f"class {rank.name} has {len(users)} user(s); placed wholly in TRAIN", SmallClassWarning, stacklevel=2
            )
            for uid in users:
                assignment.update({sid: Subset.TRAIN for sid in videos[uid]})
            continue
        users = [users[i] for i in _class_seed(seed, rank).permutation(len(users))]
        groups = _balance_users(users, {u: len(videos[u]) for u in users}, ratios)
        for subset, group in zip(SUBSETS, groups):
            for uid in group:
                assignment.update({sid: subset for sid in videos[uid]})
    return SplitAssignment(SplitMode.USER_BASED, assignment, seed, ratios)


def _balance_users(users: list[str], n_videos: dict[str, int], ratios) -> list[list[str]]:
    """Split users by user-count quota, then swap users across subsets to bring video counts to target.

    Quotas come from largest-remainder rounding of the user count, so each subset
    holds its share of users; swaps (best improvement first, ties to the earliest
    pair) only change which users fill each subset.
    """
    quota = largest_remainder(len(users), ratios)
    groups, start = [], 0
    for q in quota:
        groups.append(list(users[start : start + q]))
        start += q
    total = sum(n_videos.values())
    targets = [total * r for r in ratios]

    def cost(fill):
        return sum((f - t) ** 2 for f, t in zip(fill, targets))

    fill = [sum(n_videos[u] for u in g) for g in groups]
    while True:
        best = None
        current = cost(fill)
        for a in range(3):
            for b in range(a + 1, 3):
                for i, ua in enumerate(groups[a]):
                    for j, ub in enumerate(groups[b]):
                        delta = n_videos[ub] - n_videos[ua]
                        if delta == 0:
                            continue
                        trial = list(fill)
                        trial[a] += delta
                        trial[b] -= delta
                        gain = current - cost(trial)
                        if gain > 1e-9 and (best is None or gain > best[0]):
                            best = (gain, a, b, i, j, trial)
        if best is None:
            return groups
        _, a, b, i, j, fill = best
        groups[a][i], groups[b][j] = groups[b][j], groups[a][i]


def make_split(manifest: Manifest, mode: SplitMode | str, ratios=DEFAULT_RATIOS, seed: int = 0) -> SplitAssignment:
    mode = SplitMode(mode)
    if mode is SplitMode.VIDEO_BASED:
        return stratified_video_split(manifest, ratios, seed)
    return stratified_user_split(manifest, ratios, seed)


@dataclass
class SplitReport:
    mode: SplitMode
    sizes: dict[str, int]
    global_fractions: list[float]
    subset_fractions: dict[str, list[float]]
    max_deviation: float
    user_overlap: dict[str, int] = field(default_factory=dict)
    tolerance: float = STRATIFICATION_TOLERANCE
    passed: bool = False

    def as_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "sizes": self.sizes,
            "global_fractions": self.global_fractions,
            "subset_fractions": self.subset_fractions,
            "max_deviation": self.max_deviation,
            "user_overlap": self.user_overlap,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def _fractions(ranks: list[RankSection]) -> list[float]:
    counts = np.bincount([int(r) for r in ranks], minlength=len(RankSection)).astype(float)
    return list(counts / counts.sum()) if counts.sum() else [0.0] * len(RankSection)


def verify_split(assignment: SplitAssignment, manifest: Manifest, tolerance: float = STRATIFICATION_TOLERANCE) -> SplitReport:
    records = manifest.by_id()
    unknown = sorted(set(assignment.assignment) - set(records))
    if unknown:
        raise SplitError(f"assignment names unknown sample id {unknown[0]!r}")
    uncovered = sorted(set(records) - set(assignment.assignment))
    if uncovered:
        raise SplitError(f"sample id {uncovered[0]!r} is not assigned to any subset")

    global_fracs = _fractions([r.rank for r in manifest.records])
    subset_fracs: dict[str, list[float]] = {}
    users: dict[Subset, set[str]] = {}
    max_dev = 0.0
    for subset in SUBSETS:
        ids = assignment.ids(subset)
        users[subset] = {records[i].user_id for i in ids}
        fracs = _fractions([records[i].rank for i in ids])
        subset_fracs[subset.value] = fracs
        if ids:
            max_dev = max(max_dev, max(abs(a - b) for a, b in zip(fracs, global_fracs)))

    overlap = {
        "TRAIN_VAL": len(users[Subset.TRAIN] & users[Subset.VAL]),
        "TRAIN_TEST": len(users[Subset.TRAIN] & users[Subset.TEST]),
        "VAL_TEST": len(users[Subset.VAL] & users[Subset.TEST]),
    }
    passed = max_dev <= tolerance
    if assignment.mode is SplitMode.USER_BASED:
        passed = passed and not any(overlap.values())
    return SplitReport(
        mode=assignment.mode,
        sizes={s.value: len(assignment.ids(s)) for s in SUBSETS},
        global_fractions=global_fracs,
        subset_fractions=subset_fracs,
        max_deviation=float(max_dev),
        user_overlap=overlap,
        tolerance=tolerance,
        passed=bool(passed),
    )
