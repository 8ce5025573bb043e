"""Train/test partitioning along the trial/block/session/subject axes.

Each axis value is identified by its fully qualified prefix of the
(subject, session, block, trial) key, so holdout happens within the value's
parent scope: trials within their block, blocks within their
(subject, session), sessions within their subject, subjects globally. This
guarantees no axis value leaks across the partition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DatasetIndex
from .errors import ConfigError, DataError

AXES = ("trial", "block", "session", "subject")
_AXIS_DEPTH = {"subject": 0, "session": 1, "block": 2, "trial": 3}
MAX_STRATIFY_ATTEMPTS = 100


@dataclass
class SplitSpec:
    """One holdout request: axis, held-out amount per scope, and seed.

    ``test_fraction`` is either a float in (0, 1) (the held-out share of
    each scope's distinct values, rounded, at least 1 and never all of
    them) or a positive integer (the exact number of values to hold out
    per scope).
    """

    axis: str
    test_fraction: float | int = 1.0 / 3.0
    seed: int = 0

    def validate(self) -> None:
        if self.axis not in AXES:
            raise ConfigError(f"split axis must be one of {AXES}, got {self.axis!r}")
        f = self.test_fraction
        if isinstance(f, bool) or not isinstance(f, (int, float)):
            raise ConfigError("test_fraction must be a float in (0,1) or an int >= 1")
        if isinstance(f, int):
            if f < 1:
                raise ConfigError("integer test_fraction must be >= 1")
        elif not (0.0 < f < 1.0):
            raise ConfigError("fractional test_fraction must lie in (0, 1)")


@dataclass
class SplitResult:
    """A partition plus the record of which axis values were held out."""

    train: DatasetIndex
    test: DatasetIndex
    axis: str
    held: dict[tuple, list[int]] = field(default_factory=dict)

    def held_as_json(self) -> dict:
        return {"/".join(str(x) for x in scope) or "*": sorted(vals)
                for scope, vals in sorted(self.held.items())}


def _scoped_values(index: DatasetIndex, axis: str) -> dict[tuple, list[int]]:
    depth = _AXIS_DEPTH[axis]
    scopes: dict[tuple, set[int]] = {}
    for key in index.keys_array:
        scope = tuple(int(x) for x in key[:depth])
        scopes.setdefault(scope, set()).add(int(key[depth]))
    return {s: sorted(v) for s, v in sorted(scopes.items())}


def _held_count(spec: SplitSpec, n_values: int) -> int:
    if isinstance(spec.test_fraction, int):
        count = spec.test_fraction
        if count >= n_values:
            raise DataError(
                f"cannot hold out {count} of {n_values} values on axis {spec.axis}"
            )
        return count
    count = int(round(spec.test_fraction * n_values))
    return min(max(count, 1), n_values - 1)


def split_by_axis_detail(index: DatasetIndex, spec: SplitSpec) -> SplitResult:
    """Partition the corpus by holding out axis values within each scope.

    The held values are drawn uniformly per scope from the spec seed; if a
    class ends up absent from the training side the draw is retried (up to
    100 reseeded attempts) before failing. Both sides keep manifest order.
    """
    spec.validate()
    if len(index) == 0:
        raise DataError("cannot split an empty dataset")
    scopes = _scoped_values(index, spec.axis)
    for scope, values in scopes.items():
        if len(values) < 2:
            raise DataError(
                f"axis {spec.axis} has a single distinct value in scope "
                f"{scope or 'global'}; nothing to hold out"
            )
    depth = _AXIS_DEPTH[spec.axis]
    last_error = None
    for attempt in range(MAX_STRATIFY_ATTEMPTS):
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((spec.seed, attempt)))
        )
        held: dict[tuple, list[int]] = {}
        for scope, values in scopes.items():
            count = _held_count(spec, len(values))
            picked = rng.choice(np.asarray(values), size=count, replace=False)
            held[scope] = sorted(int(v) for v in picked)
        test_mask = np.zeros(len(index), dtype=bool)
        for i, key in enumerate(index.keys_array):
            scope = tuple(int(x) for x in key[:depth])
            test_mask[i] = int(key[depth]) in held[scope]
        train_idx = np.flatnonzero(~test_mask)
        test_idx = np.flatnonzero(test_mask)
        if train_idx.size == 0 or test_idx.size == 0:
            last_error = DataError(f"axis {spec.axis} split produced an empty side")
            continue
        train_classes = set(index.labels_array[train_idx].tolist())
        if train_classes != set(range(index.class_count)):
            missing = sorted(set(range(index.class_count)) - train_classes)
            last_error = DataError(
                f"class(es) {missing} absent from training split on axis {spec.axis}"
            )
            continue
        return SplitResult(train=index.subset(train_idx),
                           test=index.subset(test_idx),
                           axis=spec.axis, held=held)
    raise last_error


def split_by_axis(index: DatasetIndex, spec: SplitSpec):
    """Partition and return (train, test) only."""
    result = split_by_axis_detail(index, spec)
    return result.train, result.test


@dataclass
class FoldPlan:
    """k disjoint subject sets covering every subject in the corpus."""

    k: int
    fold_members: list[list[int]]

    def validate(self, subjects: list[int] | None = None) -> None:
        if self.k != len(self.fold_members):
            raise ConfigError("fold count does not match member lists")
        seen: set[int] = set()
        for fold in self.fold_members:
            for s in fold:
                if s in seen:
                    raise ConfigError(f"subject {s} assigned to multiple folds")
                seen.add(s)
        if subjects is not None and seen != set(subjects):
            raise ConfigError("fold plan does not cover the corpus subjects")

    def to_dict(self) -> dict:
        return {"k": self.k, "fold_members": [list(f) for f in self.fold_members]}

    @classmethod
    def from_dict(cls, data: dict) -> "FoldPlan":
        plan = cls(k=int(data["k"]),
                   fold_members=[[int(s) for s in f] for f in data["fold_members"]])
        plan.validate()
        return plan


def kfold_by_subject(index: DatasetIndex, k: int, seed: int = 0) -> FoldPlan:
    """Shuffle subjects with the seed and deal them round-robin into k folds."""
    if k < 2:
        raise ConfigError("k-fold needs k >= 2")
    subjects = index.subjects()
    if k > len(subjects):
        raise DataError(f"k={k} exceeds the {len(subjects)} subjects available")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    members = [sorted(order[i::k]) for i in range(k)]
    plan = FoldPlan(k=k, fold_members=members)
    plan.validate(subjects)
    return plan


def split_for_fold(index: DatasetIndex, plan: FoldPlan, fold: int):
    """Materialize one fold: (train = other subjects, test = fold subjects)."""
    if not (0 <= fold < plan.k):
        raise ConfigError(f"fold index {fold} outside [0, {plan.k})")
    held = set(plan.fold_members[fold])
    subjects = index.keys_array[:, 0]
    test_idx = np.flatnonzero(np.isin(subjects, sorted(held)))
    train_idx = np.flatnonzero(~np.isin(subjects, sorted(held)))
    if test_idx.size == 0 or train_idx.size == 0:
        raise DataError(f"fold {fold} produces an empty train or test side")
    return index.subset(train_idx), index.subset(test_idx)


def holdout_by_group(index: DatasetIndex, seed: int, fraction: float = 0.1):
    """Carve an early-stopping validation share out of a training corpus.

    Holds out whole subjects when the corpus has at least two, otherwise
    whole (subject, session, block) groups, so the stopping criterion never
    sees rows from the units it trains on. The held count is
    round(fraction * n) clamped to [1, n - 1]. Returns (fit, val).
    """
    if not (0.0 < fraction < 1.0):
        raise ConfigError("holdout fraction must lie in (0, 1)")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0))))
    subjects = index.subjects()
    if len(subjects) >= 2:
        units = [(s,) for s in subjects]
        depth = 1
    else:
        units = sorted({tuple(int(x) for x in k[:3]) for k in index.keys_array})
        depth = 3
        if len(units) < 2:
            raise DataError(
                "cannot carve a validation set: single subject with a single block"
            )
    count = min(max(1, round(fraction * len(units))), len(units) - 1)
    picked = rng.choice(len(units), size=count, replace=False)
    held = {units[int(i)] for i in picked}
    val_mask = np.array(
        [tuple(int(x) for x in k[:depth]) in held for k in index.keys_array]
    )
    fit_idx = np.flatnonzero(~val_mask)
    val_idx = np.flatnonzero(val_mask)
    if fit_idx.size == 0 or val_idx.size == 0:
        raise DataError("validation carve produced an empty side")
    return index.subset(fit_idx), index.subset(val_idx)
