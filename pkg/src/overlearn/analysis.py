"""Association and representation-similarity statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np


class DegenerateInputError(ValueError):
    """A representation matrix has zero variance after centering."""


@dataclass
class AssociationStat:
    cramers_v: float
    contingency_table: np.ndarray
    n: int
    degenerate: bool = False


@dataclass
class CKAMatrix:
    """values[i, j] = CKA(layer i of model A, layer j of model B); NaN marks a failed cell."""

    values: np.ndarray
    layers_a: list[int]
    layers_b: list[int]
    model_a: str = ""
    model_b: str = ""
    errors: dict = field(default_factory=dict)

    def diagonal(self) -> np.ndarray:
        return np.diag(self.values)

    def to_csv(self, path) -> None:
        # rows are layers of B, columns layers of A
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer_b"] + [f"a{la}" for la in self.layers_a])
            for j, lb in enumerate(self.layers_b):
                row = [f"b{lb}"]
                for i in range(len(self.layers_a)):
                    v = self.values[i, j]
                    row.append("" if np.isnan(v) else repr(float(v)))
                w.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "CKAMatrix":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        layers_a = [int(h[1:]) for h in rows[0][1:]]
        layers_b = [int(r[0][1:]) for r in rows[1:]]
        values = np.full((len(layers_a), len(layers_b)), np.nan)
        for j, r in enumerate(rows[1:]):
            for i, cell in enumerate(r[1:]):
                if cell != "":
                    values[i, j] = float(cell)
        return cls(values, layers_a, layers_b)

    def to_dict(self) -> dict:
        return {
            "layers_a": self.layers_a,
            "layers_b": self.layers_b,
            "model_a": self.model_a,
            "model_b": self.model_b,
            "values": [[None if np.isnan(v) else float(v) for v in row] for row in self.values],
        }


def _matrix(x) -> np.ndarray:
    x = getattr(x, "values", x)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x


def linear_cka(X, Y) -> float:
    """Linear CKA: ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)."""
    X, Y = _matrix(X), _matrix(Y)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"row counts differ: {X.shape[0]} vs {Y.shape[0]}")
    if X.shape[0] < 2:
        raise ValueError("at least two rows are required")
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    # normalize scale first; CKA is scale invariant and this keeps the
    # Frobenius products well inside floating-point range
    nx, ny = np.linalg.norm(Xc), np.linalg.norm(Yc)
    if nx == 0 or ny == 0:
        raise DegenerateInputError("representation has zero variance after centering")
    Xc = Xc / nx
    Yc = Yc / ny
    cross = np.linalg.norm(Yc.T @ Xc) ** 2
    denom = np.linalg.norm(Xc.T @ Xc) * np.linalg.norm(Yc.T @ Yc)
    return float(min(max(cross / denom, 0.0), 1.0))


def cka_heatmap(model_a, model_b, examples, layers_a=None, layers_b=None,
                preactivation: bool = False) -> CKAMatrix:
    """Pairwise linear CKA between every layer of two models on the same examples.

    Defaults to layers 1..L of each model (the input layer is identical for both).
    """
    from overlearn.data import features

    x = features(examples) if not isinstance(examples, np.ndarray) else examples
    reps_a = model_a.layer_outputs(x, preactivation=preactivation)
    reps_b = model_b.layer_outputs(x, preactivation=preactivation)
    layers_a = list(range(1, len(reps_a))) if layers_a is None else list(layers_a)
    layers_b = list(range(1, len(reps_b))) if layers_b is None else list(layers_b)
    values = np.full((len(layers_a), len(layers_b)), np.nan)
    errors = {}
    for i, la in enumerate(layers_a):
        for j, lb in enumerate(layers_b):
            try:
                values[i, j] = linear_cka(reps_a[la], reps_b[lb])
            except DegenerateInputError as exc:
                errors[(la, lb)] = str(exc)
    return CKAMatrix(values, layers_a, layers_b, model_a.digest(), model_b.digest(), errors)


def similarity_to_init(model, snapshots, examples) -> dict[int, list[float]]:
    """Per-layer CKA between each snapshot's representations and the initial ones.

    ``snapshots[0]`` is taken as the initialization when given; otherwise the
    model's ``init_snapshot``. Returns {layer: [similarity per snapshot]}.
    """
    from overlearn.data import features

    init = model.init_snapshot if not snapshots else snapshots[0]
    if not init:
        raise ValueError("model has no init_snapshot")
    snapshots = snapshots or [init, [p.copy() for p in model.params()]]
    x = features(examples) if not isinstance(examples, np.ndarray) else examples
    probe = model.copy()
    probe.set_params(init)
    ref = probe.layer_outputs(x)
    curves: dict[int, list[float]] = {l: [] for l in range(1, len(ref))}
    for snap in snapshots:
        probe.set_params(snap)
        reps = probe.layer_outputs(x)
        for l in curves:
            try:
                curves[l].append(linear_cka(reps[l], ref[l]))
            except DegenerateInputError:
                curves[l].append(float("nan"))
    return curves


def contingency_table(labels_a, labels_b) -> np.ndarray:
    a = np.asarray(labels_a, dtype=np.int64)
    b = np.asarray(labels_b, dtype=np.int64)
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


def cramers_v_from_table(table) -> AssociationStat:
    table = np.asarray(table, dtype=np.float64)
    n = table.sum()
    # drop empty rows/columns: classes that never occur carry no information
    table_nz = table[table.sum(axis=1) > 0][:, table.sum(axis=0) > 0]
    r, c = table_nz.shape
    k = min(r - 1, c - 1)
    if k == 0 or n == 0:
        return AssociationStat(0.0, table.astype(np.int64), int(n), degenerate=True)
    expected = np.outer(table_nz.sum(axis=1), table_nz.sum(axis=0)) / n
    mask = expected > 0
    chi2 = float(np.sum((table_nz[mask] - expected[mask]) ** 2 / expected[mask]))
    v = math.sqrt((chi2 / n) / k)
    return AssociationStat(min(v, 1.0), table.astype(np.int64), int(n))


def cramers_v(labels_a, labels_b) -> AssociationStat:
    """Cramer's V between two categorical label sequences."""
    if len(labels_a) != len(labels_b):
        raise ValueError(f"length mismatch: {len(labels_a)} vs {len(labels_b)}")
    if len(labels_a) == 0:
        raise ValueError("at least one observation is required")
    return cramers_v_from_table(contingency_table(labels_a, labels_b))


def majority_baseline(labels) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("labels must be non-empty")
    counts = np.bincount(labels - labels.min())
    return float(counts.max() / labels.size)
