"""Accuracy bookkeeping and forgetting metrics.

``acc[t][i]`` is the accuracy on task ``i``'s test classes after training task
``t``; only ``i <= t`` is defined. All summary metrics are reported in percent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import ContractError


@dataclass
class RunRecord:
    task_sizes: list[int]
    acc: list[list[float]] = field(default_factory=list)
    overall: list[float] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)
    alphas: dict[int, dict[int, list[float]]] = field(default_factory=dict)
    extras: list[dict[str, Any]] = field(default_factory=list)

    @property
    def num_tasks(self) -> int:
        return len(self.task_sizes)

    @property
    def complete(self) -> bool:
        return len(self.acc) == self.num_tasks

    def add_row(self, accs: Sequence[float], overall: float | None = None, **extras) -> None:
        t = len(self.acc)
        if t >= self.num_tasks:
            raise ContractError("record already holds a row for every task")
        if len(accs) != t + 1:
            raise ContractError(f"row {t} needs {t + 1} task accuracies, got {len(accs)}")
        accs = [float(a) for a in accs]
        if any(not 0.0 <= a <= 1.0 for a in accs):
            raise ContractError("accuracies must lie in [0, 1]")
        if overall is None:
            overall = weighted_overall(accs, self.task_sizes[:t + 1])
        self.acc.append(accs)
        self.overall.append(float(overall))
        self.extras.append(extras)

    def matrix(self) -> np.ndarray:
        """Lower-triangular matrix with NaN above the diagonal."""
        n = len(self.acc)
        out = np.full((n, n), np.nan)
        for t, row in enumerate(self.acc):
            out[t, :len(row)] = row
        return out

    @classmethod
    def from_matrix(cls, matrix, task_sizes: Sequence[int] | None = None) -> "RunRecord":
        m = np.asarray(matrix, dtype=np.float64)
        n = m.shape[0]
        rec = cls(list(task_sizes) if task_sizes is not None else [1] * n)
        for t in range(n):
            rec.add_row(m[t, :t + 1])
        return rec


def weighted_overall(accs: Sequence[float], task_sizes: Sequence[int]) -> float:
    """Overall accuracy on all seen classes as the class-count-weighted task mean."""
    w = np.asarray(task_sizes, dtype=np.float64)
    return float(np.dot(w, np.asarray(accs, dtype=np.float64)) / w.sum())


def _final_index(record: RunRecord) -> int:
    if not record.complete:
        raise ContractError(f"record has {len(record.acc)} of {record.num_tasks} task rows")
    return len(record.acc) - 1


def aia(record: RunRecord) -> float:
    """Average incremental accuracy, base task included."""
    _final_index(record)
    return 100.0 * float(np.mean(record.overall))


def bt(record: RunRecord) -> float:
    """Backward transfer: mean change of each old task from learning time to the end."""
    last = _final_index(record)
    if last < 1:
        raise ContractError("backward transfer needs at least one incremental task")
    a = record.acc
    return 100.0 * float(np.mean([a[last][i] - a[i][i] for i in range(last)]))


def fgt(record: RunRecord) -> float:
    """Forgetting: mean gap between each old task's best and final accuracy."""
    last = _final_index(record)
    if last < 1:
        raise ContractError("forgetting needs at least one incremental task")
    a = record.acc
    gaps = [max(a[t][i] for t in range(i, last + 1)) - a[last][i] for i in range(last)]
    return 100.0 * float(np.mean(gaps))


def oracle_deviation(alpha_m_final, alpha_m_base, alpha_o_final, alpha_o_base,
                     eps: float = 1e-8, diagnostics: list[int] | None = None) -> float:
    """Mean squared gap between 1 and the model/oracle ratio of importance drift.

    Channels whose oracle drift has magnitude below ``eps`` have no defined
    ratio; they are left out of the mean and their indices appended to
    ``diagnostics`` when given.
    """
    vecs = [np.asarray(v, dtype=np.float64).reshape(-1) for v in
            (alpha_m_final, alpha_m_base, alpha_o_final, alpha_o_base)]
    if len({v.size for v in vecs}) != 1:
        raise ContractError("all importance vectors must have the same length")
    m_drift = vecs[0] - vecs[1]
    o_drift = vecs[2] - vecs[3]
    keep = np.abs(o_drift) >= eps
    if diagnostics is not None:
        diagnostics.extend(int(j) for j in np.flatnonzero(~keep))
    if not keep.any():
        raise ContractError("oracle importances did not change in any channel; deviation undefined")
    ratio = m_drift[keep] / o_drift[keep]
    return float(np.mean((1.0 - ratio) ** 2))


def summary(record: RunRecord) -> dict[str, float]:
    out = {"aia": aia(record), "final_acc": 100.0 * record.overall[-1]}
    if record.num_tasks > 1:
        out["bt"] = bt(record)
        out["fgt"] = fgt(record)
    return out
