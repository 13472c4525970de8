"""Encoder/classifier stacks with layer-addressable representations."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from overlearn import nn
from overlearn.data import attr_labels, features, task_labels

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "overlearn-checkpoint/1"


class TrainingError(RuntimeError):
    """Raised when a loss becomes non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")


@dataclass
class RepresentationMatrix:
    values: np.ndarray
    model_id: str = ""
    layer: int = 0
    dataset_id: str = ""

    @property
    def shape(self):
        return self.values.shape


@dataclass
class ModelBundle:
    """Encoder E (layer-addressable), classifier C, and bookkeeping.

    Layer 0 is the raw input; layer l (1..num_encoder_layers) is the output of
    the l-th dense+tanh block. When a stochastic head is attached (info-
    theoretic censoring), one extra layer holds the latent mean.
    """

    encoder: nn.MLP
    classifier: nn.MLP
    seed: int = 0
    init_snapshot: list[np.ndarray] = field(default_factory=list)
    training_log: list[dict] = field(default_factory=list)
    snapshots: list[list[np.ndarray]] = field(default_factory=list)
    head: object | None = None
    discriminator: nn.MLP | None = None
    decoder: object | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return self.encoder.in_dim

    @property
    def num_classes(self) -> int:
        return self.classifier.out_dim

    @property
    def num_encoder_layers(self) -> int:
        return self.encoder.num_layers + (1 if self.head is not None else 0)

    def layer_widths(self) -> list[int]:
        widths = list(self.encoder.sizes)
        if self.head is not None:
            widths.append(self.head.latent_dim)
        return widths

    def params(self) -> list[np.ndarray]:
        ps = self.encoder.params()
        if self.head is not None:
            ps += self.head.params()
        return ps + self.classifier.params()

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def set_params(self, values) -> None:
        for p, v in zip(self.params(), values):
            p[...] = v

    def copy(self) -> "ModelBundle":
        return copy.deepcopy(self)

    def layer_outputs(self, x: np.ndarray, preactivation: bool = False) -> list[np.ndarray]:
        outs = self.encoder.activations(x, preactivation=preactivation)
        if self.head is not None:
            outs.append(self.head.mean(self.encoder(x)))
        return outs

    def represent(self, x: np.ndarray) -> np.ndarray:
        """Last-layer representation z (latent mean for stochastic models)."""
        h = self.encoder(x)
        return self.head.mean(h) if self.head is not None else h

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.classifier(self.represent(x))

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return nn.softmax(self.logits(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return nn.predict(self.logits(x))

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]


def build_model(feature_dim: int, hidden_widths=(128, 32), num_classes: int = 2,
                seed: int = 0) -> ModelBundle:
    if feature_dim < 1 or num_classes < 1 or any(w < 1 for w in hidden_widths):
        raise ValueError("all dimensions must be >= 1")
    if not hidden_widths:
        raise ValueError("at least one hidden layer is required")
    rng = np.random.default_rng(seed)
    encoder = nn.MLP([feature_dim, *hidden_widths], rng, activate_last=True)
    classifier = nn.MLP([hidden_widths[-1], num_classes], rng)
    model = ModelBundle(encoder, classifier, seed=seed)
    model.init_snapshot = [p.copy() for p in model.params()]
    return model


def accuracy(model: ModelBundle, examples, target: str = "task") -> float:
    if not examples:
        return float("nan")
    labels = task_labels(examples) if target == "task" else attr_labels(examples)
    return float(np.mean(model.predict(features(examples)) == labels))


def task_loss_and_grads(model: ModelBundle, x: np.ndarray, y: np.ndarray):
    """Cross-entropy -mean log p(y|z) and gradients for a deterministic model."""
    z, enc_cache = model.encoder.forward(x)
    logits, cls_cache = model.classifier.forward(z)
    loss, dlogits = nn.cross_entropy(logits, y)
    cls_grads, dz = model.classifier.backward(cls_cache, dlogits)
    enc_grads, _ = model.encoder.backward(enc_cache, dz)
    return loss, enc_grads + cls_grads, logits


def check_finite(loss: float, epoch: int, batch: int, what: str = "loss") -> None:
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite {what} at epoch {epoch}, batch {batch}: {loss!r}")


def train_task(model: ModelBundle, examples_or_bundle, config: TrainConfig = TrainConfig(),
               labels: str = "task", record_snapshots: bool = False) -> ModelBundle:
    """Train encoder+classifier on cross-entropy with Adam (in place; returns model).

    ``labels`` selects the target column: ``"task"`` (y) or ``"attr"`` (s).
    """
    if model.head is not None:
        raise ValueError("train_task expects a deterministic model; use censoring.train_it_censored")
    examples = getattr(examples_or_bundle, "train", examples_or_bundle)
    x = features(examples)
    if x.shape[1] != model.feature_dim:
        raise ValueError(f"feature dim {x.shape[1]} does not match model input {model.feature_dim}")
    y = task_labels(examples) if labels == "task" else attr_labels(examples)
    if y.max() >= model.num_classes:
        raise ValueError(f"label {y.max()} out of range for {model.num_classes} classes")
    params = model.params()
    opt = nn.Adam(params, lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    if record_snapshots:
        model.snapshots = [[p.copy() for p in params]]
    for epoch in range(config.epochs):
        total, correct = 0.0, 0
        for b, idx in enumerate(nn.minibatches(len(x), config.batch_size, rng)):
            loss, grads, logits = task_loss_and_grads(model, x[idx], y[idx])
            check_finite(loss, epoch, b)
            opt.step(grads)
            total += loss * len(idx)
            correct += int(np.sum(nn.predict(logits) == y[idx]))
        model.training_log.append({"epoch": epoch + 1, "loss": total / len(x),
                                   "accuracy": correct / len(x)})
        if record_snapshots:
            model.snapshots.append([p.copy() for p in params])
    logger.debug("trained %s for %d epochs, final loss %.4f", model.digest(),
                 config.epochs, model.training_log[-1]["loss"])
    return model


def extract_representations(model: ModelBundle, layer: int, examples,
                            preactivation: bool = False, dataset_id: str = "") -> RepresentationMatrix:
    """Layer-``layer`` activations, one row per example (inference mode, no sampling)."""
    if not 0 <= layer <= model.num_encoder_layers:
        raise ValueError(f"layer {layer} out of range [0, {model.num_encoder_layers}]")
    x = features(examples) if not isinstance(examples, np.ndarray) else examples
    if layer == 0:
        values = x.copy()
    elif model.head is not None and layer == model.num_encoder_layers:
        values = model.represent(x)
    else:
        values = model.layer_outputs(x, preactivation=preactivation)[layer]
    return RepresentationMatrix(values, model.digest(), layer, dataset_id)


def gradient_check(model: ModelBundle, batch, epsilon: float = 1e-5) -> float:
    """Max relative error of the task-loss gradient against central differences."""
    if model.num_params() > 1000:
        raise ValueError(f"gradient_check is limited to 1000 parameters, model has {model.num_params()}")
    x = features(batch)
    y = task_labels(batch)
    _, grads, _ = task_loss_and_grads(model, x, y)
    return nn.check_gradients(lambda: task_loss_and_grads(model, x, y)[0],
                              model.params(), grads, epsilon)


# -- checkpoints --------------------------------------------------------------

def model_to_dict(model: ModelBundle) -> dict:
    d = {
        "format": CHECKPOINT_FORMAT,
        "seed": model.seed,
        "encoder": model.encoder.to_dict(),
        "classifier": model.classifier.to_dict(),
        "init_snapshot": [p.tolist() for p in model.init_snapshot],
        "training_log": model.training_log,
        "metadata": model.metadata,
    }
    if model.head is not None:
        d["head"] = model.head.to_dict()
    if model.discriminator is not None:
        d["discriminator"] = model.discriminator.to_dict()
    if model.decoder is not None:
        d["decoder"] = model.decoder.to_dict()
    return d


def model_from_dict(d: dict) -> ModelBundle:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format: {d.get('format')!r}")
    model = ModelBundle(nn.MLP.from_dict(d["encoder"]), nn.MLP.from_dict(d["classifier"]),
                        seed=int(d["seed"]), training_log=list(d.get("training_log", [])),
                        metadata=dict(d.get("metadata", {})))
    if "head" in d:
        from overlearn.censoring import StochasticEncoderHead
        model.head = StochasticEncoderHead.from_dict(d["head"])
    if "discriminator" in d:
        model.discriminator = nn.MLP.from_dict(d["discriminator"])
    if "decoder" in d:
        from overlearn.censoring import DecoderHead
        model.decoder = DecoderHead.from_dict(d["decoder"])
    shapes = [p.shape for p in model.params()]
    model.init_snapshot = [np.array(v, dtype=np.float64).reshape(s)
                           for v, s in zip(d.get("init_snapshot", []), shapes)]
    return model


def save_model(model: ModelBundle, path, extra: dict | None = None) -> str:
    """Write a JSON checkpoint; returns the sha256 of the written bytes."""
    d = model_to_dict(model)
    if extra:
        d.update(extra)
    data = json.dumps(d, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_model(path) -> ModelBundle:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
