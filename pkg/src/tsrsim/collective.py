"""Simulated data-parallel all-reduce over in-process workers, plus the
append-only communication ledger that counts every synchronized object.

Byte accounting is payload-level: each shared object is charged once per
step, elements times the configured wire-dtype width, regardless of how a
real transport would route it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .linalg import as_matrix

__all__ = [
    "CommLedger",
    "CommObjectKind",
    "CommRecord",
    "all_reduce_mean",
]


class CommObjectKind(Enum):
    DENSE_GRAD = "DenseGrad"
    CORE = "Core"
    SKETCH_Q = "SketchQ"
    SKETCH_B = "SketchB"
    NON_MATRIX_DENSE = "NonMatrixDense"
    ONE_SIDED_FACTOR = "OneSidedFactor"


@dataclass(frozen=True)
class CommRecord:
    step: int
    layer: str
    kind: CommObjectKind
    elements: int
    bytes: int


class CommLedger:
    """Append-only record of synchronized objects and derived byte metrics."""

    def __init__(self, dtype_bytes: int = 2):
        if dtype_bytes < 1:
            raise ValueError(f"dtype_bytes must be >= 1, got {dtype_bytes}")
        self.dtype_bytes = int(dtype_bytes)
        self.records: list[CommRecord] = []
        self._by_step: dict[int, int] = {}

    def record(self, step: int, layer: str, kind: CommObjectKind, elements: int) -> CommRecord:
        rec = CommRecord(int(step), str(layer), kind, int(elements),
                         int(elements) * self.dtype_bytes)
        self.records.append(rec)
        self._by_step[rec.step] = self._by_step.get(rec.step, 0) + rec.bytes
        return rec

    def bytes_per_step(self, t: int) -> int:
        return self._by_step.get(t, 0)

    def peak_bytes(self) -> int:
        if not self._by_step:
            raise ValueError("peak_bytes on an empty ledger")
        return max(self._by_step.values())

    def peak_step(self) -> int:
        if not self._by_step:
            raise ValueError("peak_step on an empty ledger")
        # Earliest step attaining the maximum, for reproducible reporting.
        peak = max(self._by_step.values())
        return min(s for s, b in self._by_step.items() if b == peak)

    def cumulative_bytes(self, t: int) -> int:
        return sum(b for s, b in self._by_step.items() if s <= t)

    def total_bytes(self) -> int:
        return sum(self._by_step.values())

    def average_bytes_per_step(self, T: int) -> float:
        """Mean per-step bytes over steps 1..T; any step-0 initialization
        charge is included in the numerator (documented convention)."""
        if T < 1:
            raise ValueError(f"average needs T >= 1, got {T}")
        return sum(b for s, b in self._by_step.items() if s <= T) / T

    def steps(self) -> list[int]:
        return sorted(self._by_step)

    def write_records_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "layer", "kind", "elements", "bytes"])
            for r in self.records:
                w.writerow([r.step, r.layer, r.kind.value, r.elements, r.bytes])

    def write_summary_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "bytes_step", "cumulative_bytes"])
            cum = 0
            for s in self.steps():
                b = self._by_step[s]
                cum += b
                w.writerow([s, b, cum])


def all_reduce_mean(inputs, *, step: int, layer: str, kind: CommObjectKind,
                    ledger: CommLedger) -> np.ndarray:
    """Elementwise mean of the per-worker tensors, summed in worker-index
    order for bitwise determinism.  Charges exactly one ledger record: the
    shared object is counted once per step, not once per worker.
    """
    if not inputs:
        raise ValueError("all_reduce_mean needs at least one worker input")
    mats = [as_matrix(x, f"worker {i} input") for i, x in enumerate(inputs)]
    shape = mats[0].shape
    for i, m in enumerate(mats[1:], start=1):
        if m.shape != shape:
            raise ValueError(
                f"all_reduce_mean: worker {i} shape {m.shape} != worker 0 shape {shape}")
    acc = mats[0].copy()
    for m in mats[1:]:
        acc += m
    acc /= len(mats)
    ledger.record(step, layer, kind, elements=acc.size)
    return acc
