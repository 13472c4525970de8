"""Synthetic (x, y, s) datasets, splits, and the tabular CSV adapter."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Invalid dataset arguments or malformed input file."""


@dataclass(frozen=True)
class LabeledExample:
    features: np.ndarray
    task_label: int
    sensitive_attr: int
    group_id: int | None = None
    uid: int = -1

    def __eq__(self, other):
        if not isinstance(other, LabeledExample):
            return NotImplemented
        return (self.task_label == other.task_label
                and self.sensitive_attr == other.sensitive_attr
                and self.group_id == other.group_id
                and np.array_equal(self.features, other.features))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class ContingencySpec:
    joint: np.ndarray

    def __post_init__(self):
        joint = np.asarray(self.joint, dtype=np.float64)
        if joint.ndim != 2 or joint.size == 0:
            raise DataError("joint must be a non-empty 2-D matrix")
        if not np.all(np.isfinite(joint)) or np.any(joint < 0):
            raise DataError("joint probabilities must be finite and non-negative")
        if abs(joint.sum() - 1.0) > 1e-9:
            raise DataError(f"joint probabilities must sum to 1, got {joint.sum()!r}")
        object.__setattr__(self, "joint", joint)

    @property
    def num_task_classes(self) -> int:
        return self.joint.shape[0]

    @property
    def num_attr_classes(self) -> int:
        return self.joint.shape[1]

    @classmethod
    def independent(cls, task_marginal, attr_marginal) -> "ContingencySpec":
        return cls(np.outer(task_marginal, attr_marginal))


@dataclass
class DatasetBundle:
    train: list[LabeledExample]
    test: list[LabeledExample]
    aux: list[LabeledExample] = field(default_factory=list)
    transfer: dict[float, list[LabeledExample]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return int(self.metadata["feature_dim"])

    @property
    def num_task_classes(self) -> int:
        return int(self.metadata["num_task_classes"])

    @property
    def num_attr_classes(self) -> int:
        return int(self.metadata["num_attr_classes"])

    def all_examples(self) -> list[LabeledExample]:
        return self.train + self.test


def features(examples) -> np.ndarray:
    if not examples:
        return np.zeros((0, 0))
    return np.stack([ex.features for ex in examples])


def task_labels(examples) -> np.ndarray:
    return np.array([ex.task_label for ex in examples], dtype=np.int64)


def attr_labels(examples) -> np.ndarray:
    return np.array([ex.sensitive_attr for ex in examples], dtype=np.int64)


def _metadata(examples, **extra) -> dict:
    y = task_labels(examples)
    s = attr_labels(examples)
    meta = {
        "feature_dim": int(examples[0].features.shape[0]) if examples else 0,
        "num_task_classes": int(y.max()) + 1 if len(y) else 0,
        "num_attr_classes": int(s.max()) + 1 if len(s) else 0,
    }
    meta.update(extra)
    return meta


def exact_cell_counts(joint: np.ndarray, n: int) -> np.ndarray:
    """Largest-remainder rounding of n * joint; ties go to the lower flat index."""
    target = joint.reshape(-1) * n
    counts = np.floor(target).astype(np.int64)
    remainder = target - counts
    order = np.lexsort((np.arange(remainder.size), -remainder))
    counts[order[: n - counts.sum()]] += 1
    return counts


def generate_examples(spec: ContingencySpec, n: int, feature_dim: int,
                      noise_scale: float, seed: int, label_sampling: str = "iid") -> list[LabeledExample]:
    """Sample n examples with x = tanh(A e_y + B e_s + noise).

    ``label_sampling="iid"`` draws each (y, s) from the joint; ``"exact"``
    gives every cell round(n * P(y, s)) examples in shuffled order, so the
    sample's association matches the joint's.
    """
    k_y, k_s = spec.num_task_classes, spec.num_attr_classes
    if n < 20 * k_y * k_s:
        raise DataError(f"n={n} is below the minimum 20*{k_y}*{k_s}={20 * k_y * k_s}")
    if feature_dim < k_y + k_s:
        raise DataError(f"feature_dim={feature_dim} must be >= {k_y + k_s}")
    if noise_scale < 0:
        raise DataError("noise_scale must be >= 0")
    if label_sampling not in ("iid", "exact"):
        raise DataError(f"label_sampling must be 'iid' or 'exact', got {label_sampling!r}")
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(feature_dim)
    mix_y = rng.standard_normal((feature_dim, k_y)) * scale
    mix_s = rng.standard_normal((feature_dim, k_s)) * scale
    if label_sampling == "exact":
        counts = exact_cell_counts(spec.joint, n)
        cells = rng.permutation(np.repeat(np.arange(k_y * k_s), counts))
    else:
        cells = rng.choice(k_y * k_s, size=n, p=spec.joint.reshape(-1))
    y = cells // k_s
    s = cells % k_s
    noise = rng.standard_normal((n, feature_dim)) * noise_scale
    x = np.tanh(mix_y[:, y].T + mix_s[:, s].T + noise)
    return [LabeledExample(x[i], int(y[i]), int(s[i]), uid=i) for i in range(n)]


def split(source: list[LabeledExample], train_frac: float = 0.8, aux_frac: float = 0.5,
          transfer_fracs=(), seed: int = 0, aux_from_heldout: bool = False,
          metadata: dict | None = None) -> DatasetBundle:
    """Deterministic shuffled partition into train/test plus aux and transfer subsets.

    aux and transfer subsets are sampled from train without replacement. With
    ``aux_from_heldout`` the aux set is instead drawn from test (and removed
    from it), sized against train all the same.
    """
    if not 0 < train_frac < 1:
        raise DataError(f"train_frac must be in (0, 1), got {train_frac}")
    if not 0 < aux_frac <= 1:
        raise DataError(f"aux_frac must be in (0, 1], got {aux_frac}")
    for f in transfer_fracs:
        if not 0 < f <= 1:
            raise DataError(f"transfer fraction must be in (0, 1], got {f}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(source))
    n_train = int(round(train_frac * len(source)))
    train = [source[i] for i in order[:n_train]]
    test = [source[i] for i in order[n_train:]]
    n_aux = int(round(aux_frac * len(train)))
    if aux_from_heldout:
        if n_aux > len(test):
            raise DataError(f"held-out pool of {len(test)} cannot supply {n_aux} aux examples")
        idx = rng.permutation(len(test))
        aux = [test[i] for i in idx[:n_aux]]
        test = [test[i] for i in idx[n_aux:]]
    else:
        aux = [train[i] for i in rng.permutation(len(train))[:n_aux]]
    transfer = {}
    for f in transfer_fracs:
        size = int(round(f * len(train)))
        transfer[float(f)] = [train[i] for i in rng.permutation(len(train))[:size]]
    meta = _metadata(source) if metadata is None else dict(metadata)
    meta.update({"split_seed": seed, "train_frac": train_frac, "aux_frac": aux_frac,
                 "aux_from_heldout": aux_from_heldout})
    return DatasetBundle(train, test, aux, transfer, meta)


def generate_synthetic(spec: ContingencySpec, n: int, feature_dim: int,
                       noise_scale: float, seed: int, train_frac: float = 0.8,
                       aux_frac: float = 0.5, transfer_fracs=(),
                       label_sampling: str = "iid") -> DatasetBundle:
    examples = generate_examples(spec, n, feature_dim, noise_scale, seed, label_sampling)
    meta = {
        "feature_dim": feature_dim,
        "num_task_classes": spec.num_task_classes,
        "num_attr_classes": spec.num_attr_classes,
        "generator_seed": seed,
        "noise_scale": noise_scale,
        "label_sampling": label_sampling,
        "joint": spec.joint.tolist(),
    }
    return split(examples, train_frac, aux_frac, transfer_fracs, seed=seed, metadata=meta)


def restrict_attribute(bundle: DatasetBundle, keep_attr: int) -> DatasetBundle:
    """Keep only training examples whose sensitive attribute equals keep_attr."""
    train = [ex for ex in bundle.train if ex.sensitive_attr == keep_attr]
    if not train:
        raise DataError(f"attribute class {keep_attr} does not occur in train")
    meta = dict(bundle.metadata, restricted_to_attr=int(keep_attr))
    return replace(bundle, train=train, metadata=meta)


def generate_clustered(num_task_classes: int, clusters_per_class: int, n: int,
                       feature_dim: int, noise_scale: float, seed: int) -> DatasetBundle:
    """Each task class is a mixture of ``clusters_per_class`` Gaussian blobs.

    The sensitive attribute is the blob index within the class; this controls
    how many distinct distributions make up each task class.
    """
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_task_classes, clusters_per_class, feature_dim))
    y = rng.integers(0, num_task_classes, size=n)
    s = rng.integers(0, clusters_per_class, size=n)
    x = np.tanh(centers[y, s] + rng.standard_normal((n, feature_dim)) * noise_scale)
    examples = [LabeledExample(x[i], int(y[i]), int(s[i]), uid=i) for i in range(n)]
    meta = {"feature_dim": feature_dim, "num_task_classes": num_task_classes,
            "num_attr_classes": clusters_per_class, "generator_seed": seed}
    return split(examples, 0.8, 0.5, seed=seed, metadata=meta)


# -- CSV adapter ------------------------------------------------------------

def write_tabular(path, examples) -> None:
    examples = list(examples)
    d = examples[0].features.shape[0] if examples else 0
    with_group = any(ex.group_id is not None for ex in examples)
    header = [f"f{i}" for i in range(d)] + ["y", "s"] + (["g"] if with_group else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for ex in examples:
            row = [repr(float(v)) for v in ex.features] + [ex.task_label, ex.sensitive_attr]
            if with_group:
                row.append("" if ex.group_id is None else ex.group_id)
            w.writerow(row)


def read_examples(path) -> list[LabeledExample]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        for col in ("y", "s"):
            if col not in header:
                raise DataError(f"{path}: missing label column '{col}'")
        feat_cols = [i for i, h in enumerate(header) if h.startswith("f")]
        expected = [f"f{i}" for i in range(len(feat_cols))]
        if [header[i] for i in feat_cols] != expected:
            raise DataError(f"{path}: feature columns must be f0..f{len(feat_cols) - 1}")
        iy, is_ = header.index("y"), header.index("s")
        ig = header.index("g") if "g" in header else None
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                feats = np.array([float(row[i]) for i in feat_cols], dtype=np.float64)
            except ValueError:
                raise DataError(f"{path}: row {lineno}: non-numeric feature") from None
            if not np.all(np.isfinite(feats)):
                raise DataError(f"{path}: row {lineno}: non-finite feature")
            labels = []
            for name, i in (("y", iy), ("s", is_)):
                try:
                    v = int(row[i])
                except ValueError:
                    raise DataError(f"{path}: row {lineno}: label '{name}' is not an integer") from None
                if v < 0:
                    raise DataError(f"{path}: row {lineno}: label '{name}' out of range: {v}")
                labels.append(v)
            group = None
            if ig is not None and row[ig].strip() != "":
                try:
                    group = int(row[ig])
                except ValueError:
                    raise DataError(f"{path}: row {lineno}: group id is not an integer") from None
            out.append(LabeledExample(feats, labels[0], labels[1], group, uid=lineno - 2))
    return out


def load_tabular(path, train_frac: float = 0.8, aux_frac: float = 0.5,
                 transfer_fracs=(), seed: int = 0) -> DatasetBundle:
    examples = read_examples(path)
    if not examples:
        raise DataError(f"{path}: no data rows")
    meta = _metadata(examples, source=str(path))
    return split(examples, train_frac, aux_frac, transfer_fracs, seed=seed, metadata=meta)
