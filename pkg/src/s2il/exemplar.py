"""Herding-based exemplar selection and memory budgeting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError

POLICIES = ("M1", "M2")


def herding_select(features: np.ndarray, k: int, ids: Sequence[int] | None = None,
                   normalize: bool = True) -> list[int]:
    """Greedy herding: each pick moves the running mean closest to the class mean.

    Returns the ids of the first ``k`` picks in selection order. Candidates are
    visited in ascending id order, so exact ties go to the lowest id and the
    result does not depend on the order rows were passed in.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or len(feats) == 0:
        raise ContractError("herding needs a non-empty (n, d) feature matrix")
    ids = np.arange(len(feats)) if ids is None else np.asarray(ids)
    if len(ids) != len(feats):
        raise ContractError("ids and features differ in length")
    if not 0 <= k <= len(feats):
        raise ContractError(f"cannot select {k} exemplars from {len(feats)} samples")
    order = np.argsort(ids, kind="stable")
    feats, ids = feats[order], ids[order]
    if normalize:
        feats = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
    target = feats.mean(axis=0)
    running = np.zeros_like(target)
    available = np.ones(len(feats), dtype=bool)
    picked: list[int] = []
    for m in range(1, k + 1):
        cand = (running[None, :] + feats) / m
        dist = np.linalg.norm(target[None, :] - cand, axis=1)
        dist[~available] = np.inf
        best = int(np.argmin(dist))
        picked.append(int(ids[best]))
        available[best] = False
        running += feats[best]
    return picked


@dataclass
class ExemplarStore:
    """Per-class exemplar ids kept in herding order.

    ``M1`` keeps ``per_class`` exemplars for every class; ``M2`` shares a fixed
    ``budget`` equally over all seen classes.
    """

    policy: str = "M2"
    budget: int = 2000
    per_class: int = 20
    exemplars: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ContractError(f"exemplar policy must be one of {POLICIES}, got {self.policy!r}")
        if self.budget < 1 or self.per_class < 1:
            raise ContractError("exemplar budget and per-class count must be positive")

    @property
    def classes(self) -> list[int]:
        return sorted(self.exemplars)

    def __len__(self) -> int:
        return sum(len(v) for v in self.exemplars.values())

    def ids(self, classes: Sequence[int] | None = None) -> np.ndarray:
        classes = self.classes if classes is None else classes
        parts = [self.exemplars[c] for c in classes]
        return np.array([i for p in parts for i in p], dtype=np.int64)

    def quotas(self, class_ids: Sequence[int]) -> dict[int, int]:
        """Target size for each class: fixed (M1) or an equal share of the budget (M2)."""
        class_ids = sorted(int(c) for c in class_ids)
        if not class_ids:
            return {}
        if self.policy == "M1":
            return {c: self.per_class for c in class_ids}
        base, extra = divmod(self.budget, len(class_ids))
        if base == 0:
            raise ContractError(f"budget {self.budget} leaves no exemplar for some of {len(class_ids)} classes")
        return {c: base + (1 if i < extra else 0) for i, c in enumerate(class_ids)}

    def add(self, class_id: int, ordered_ids: Sequence[int]) -> None:
        if class_id in self.exemplars:
            raise ContractError(f"class {class_id} already has exemplars")
        self.exemplars[int(class_id)] = [int(i) for i in ordered_ids]

    def copy(self) -> "ExemplarStore":
        return ExemplarStore(self.policy, self.budget, self.per_class,
                             {c: list(v) for c, v in self.exemplars.items()})

    def to_dict(self) -> dict[str, list[int]]:
        return {str(c): list(v) for c, v in sorted(self.exemplars.items())}


def rebalance(store: ExemplarStore, classes_seen: int | None = None) -> ExemplarStore:
    """Truncate every class to its quota, relying on the herding-prefix property."""
    if classes_seen is not None and classes_seen != len(store.exemplars):
        raise ContractError(f"store holds {len(store.exemplars)} classes, expected {classes_seen}")
    quotas = store.quotas(store.classes)
    for c, q in quotas.items():
        store.exemplars[c] = store.exemplars[c][:q]
    return store
