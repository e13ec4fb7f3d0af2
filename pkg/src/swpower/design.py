"""Stepped-wedge randomization schedules and the design constants U, V, W."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class DesignConstants:
    """Schedule summaries entering every closed-form variance.

    U is the number of treated cluster-periods, V the sum over clusters of
    squared treated-period counts, W the sum over periods of squared
    treated-cluster counts.
    """

    U: int
    V: int
    W: int


@dataclass(frozen=True)
class DesignSchedule:
    """Balanced cluster-by-period treatment schedule.

    ``treatment`` is the I x T 0/1 matrix; row i is cluster i.  ``sequences``
    lists ``(first treated period, cluster count)`` pairs with 1-based
    periods, in the order the rows appear.
    """

    treatment: np.ndarray
    cluster_period_size: int
    sequences: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        X = np.array(self.treatment, dtype=float)
        if X.ndim != 2 or X.size == 0:
            raise ValidationError("treatment must be a non-empty I x T matrix")
        if not np.all((X == 0) | (X == 1)):
            raise ValidationError("treatment cells must be 0 or 1")
        if np.any(np.diff(X, axis=1) < 0):
            bad = int(np.flatnonzero(np.any(np.diff(X, axis=1) < 0, axis=1))[0])
            raise ValidationError(f"cluster {bad} leaves the intervention after crossing over")
        if X.sum() == 0:
            raise ValidationError("no cluster-period is treated; intervention effect is inestimable")
        if np.any(X.all(axis=1)):
            raise ValidationError("a cluster is treated in every period")
        col = X.sum(axis=0)
        if not np.any((col > 0) & (col < X.shape[0])):
            raise ValidationError("treatment is collinear with period")
        if int(self.cluster_period_size) < 1:
            raise ValidationError("cluster_period_size must be >= 1")
        X.setflags(write=False)
        object.__setattr__(self, "treatment", X)
        object.__setattr__(self, "cluster_period_size", int(self.cluster_period_size))
        if not self.sequences:
            object.__setattr__(self, "sequences", _infer_sequences(X))

    @property
    def num_clusters(self) -> int:
        return self.treatment.shape[0]

    @property
    def num_periods(self) -> int:
        return self.treatment.shape[1]

    @property
    def I(self) -> int:  # noqa: E743
        return self.num_clusters

    @property
    def T(self) -> int:
        return self.num_periods

    @property
    def N(self) -> int:
        return self.cluster_period_size

    def with_size(self, N: int) -> DesignSchedule:
        return DesignSchedule(self.treatment, N, self.sequences)


def _infer_sequences(X):
    seqs = []
    for row in X:
        first = int(np.argmax(row)) + 1 if row.any() else X.shape[1] + 1
        if seqs and seqs[-1][0] == first:
            seqs[-1] = (first, seqs[-1][1] + 1)
        else:
            seqs.append((first, 1))
    return tuple(seqs)


def build_standard_schedule(num_sequences: int, clusters_per_sequence: int, T: int, N: int) -> DesignSchedule:
    """Staircase design: sequence s crosses over at period 1 + round(s (T-1) / S).

    With T = S + 1 this is the usual one-step staircase where sequence s is
    treated in periods j > s.
    """
    S = int(num_sequences)
    if T < 2:
        raise ValidationError("T must be >= 2")
    if S < 1:
        raise ValidationError("num_sequences must be >= 1")
    if clusters_per_sequence < 1 or N < 1:
        raise ValidationError("clusters_per_sequence and N must be >= 1")
    if T < S + 1:
        raise ValidationError(f"T={T} is too short for {S} sequences (need T >= {S + 1})")
    X = np.zeros((S * clusters_per_sequence, T))
    seqs = []
    for s in range(1, S + 1):
        first = 1 + int(round(s * (T - 1) / S))
        rows = slice((s - 1) * clusters_per_sequence, s * clusters_per_sequence)
        X[rows, first - 1:] = 1
        seqs.append((first, int(clusters_per_sequence)))
    return DesignSchedule(X, N, tuple(seqs))


def design_constants(schedule: DesignSchedule) -> DesignConstants:
    X = schedule.treatment
    U = X.sum()
    V = (X.sum(axis=1) ** 2).sum()
    W = (X.sum(axis=0) ** 2).sum()
    return DesignConstants(int(U), int(V), int(W))


def read_schedule_csv(path, N: int) -> DesignSchedule:
    """Read a 0/1 schedule; rows are clusters, columns are periods, no header."""
    rows = []
    with open(Path(path), newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            try:
                rows.append([int(c) for c in rec])
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: non-integer cell in schedule") from None
    if len({len(r) for r in rows}) > 1:
        raise ValidationError(f"{path}: rows have unequal lengths")
    return DesignSchedule(np.array(rows), N)
