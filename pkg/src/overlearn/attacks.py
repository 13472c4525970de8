"""Attacks on learned representations.

* :func:`infer_attribute` trains an attack classifier on (E(x), s) pairs from
  the adversary's auxiliary data and applies it to observed representations.
* :func:`decensor_attack` additionally learns a transform T that maps censored
  representations onto an auxiliary model's uncensored ones before attacking.
* :func:`repurpose` grafts a fresh head onto a trained encoder layer and
  fine-tunes it on a small attribute-labeled transfer set.
* :func:`pairwise_infer` decides whether two representations share a group
  with a bilinear head.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from overlearn import nn
from overlearn.analysis import majority_baseline
from overlearn.data import attr_labels, features
from overlearn.models import (
    ModelBundle,
    RepresentationMatrix,
    TrainConfig,
    build_model,
    check_finite,
    train_task,
)

logger = logging.getLogger(__name__)

ATTACK_WIDTHS = (256, 128)
ATTACK_CONFIG = TrainConfig(epochs=50, batch_size=128, learning_rate=0.001)
REPURPOSE_CONFIG = TrainConfig(epochs=50, batch_size=32, learning_rate=0.001)


@dataclass
class AttackModel:
    net: nn.MLP
    provenance: dict = field(default_factory=dict)
    training_log: list[dict] = field(default_factory=list)

    @property
    def in_dim(self) -> int:
        return self.net.in_dim

    def predict(self, reps: np.ndarray) -> np.ndarray:
        return nn.predict(self.net(reps))

    def accuracy(self, reps: np.ndarray, labels) -> float:
        return float(np.mean(self.predict(reps) == np.asarray(labels)))


@dataclass
class TransformModel:
    net: nn.MLP
    training_log: list[dict] = field(default_factory=list)

    def __call__(self, reps: np.ndarray) -> np.ndarray:
        return self.net(reps)


def _values(reps) -> np.ndarray:
    return reps.values if isinstance(reps, RepresentationMatrix) else np.asarray(reps, dtype=np.float64)


def as_oracle(model: ModelBundle, layer: int | None = None):
    """Black-box representation oracle x -> E_l(x) for a trained model."""
    layer = model.num_encoder_layers if layer is None else layer

    def oracle(x: np.ndarray) -> np.ndarray:
        if layer == 0:
            return np.array(x, dtype=np.float64)
        if model.head is not None and layer == model.num_encoder_layers:
            return model.represent(x)
        return model.layer_outputs(x)[layer]

    oracle.model_id = model.digest()
    oracle.layer = layer
    return oracle


def fit_classifier(reps: np.ndarray, labels: np.ndarray, num_classes: int,
                   widths=ATTACK_WIDTHS, config: TrainConfig = ATTACK_CONFIG) -> AttackModel:
    """Train an MLP classifier on fixed inputs with Adam and cross-entropy."""
    rng = np.random.default_rng(config.seed)
    net = nn.MLP([reps.shape[1], *widths, num_classes], rng)
    opt = nn.Adam(net.params(), lr=config.learning_rate)
    model = AttackModel(net)
    for epoch in range(config.epochs):
        total = 0.0
        for b, idx in enumerate(nn.minibatches(len(reps), config.batch_size, rng)):
            logits, cache = net.forward(reps[idx])
            loss, dlogits = nn.cross_entropy(logits, labels[idx])
            check_finite(loss, epoch, b)
            grads, _ = net.backward(cache, dlogits)
            opt.step(grads)
            total += loss * len(idx)
        model.training_log.append({"epoch": epoch + 1, "loss": total / len(reps)})
    return model


def infer_attribute(aux, oracle, probe_reps, probe_attrs,
                    train_config: TrainConfig = ATTACK_CONFIG, widths=ATTACK_WIDTHS,
                    num_classes: int | None = None) -> tuple[AttackModel, float]:
    """Attack from representations: train on {(E(x), s)} for x in aux, score on the probe."""
    x_aux = features(aux)
    s_aux = attr_labels(aux)
    z_aux = np.asarray(oracle(x_aux), dtype=np.float64)
    probe = _values(probe_reps)
    probe_attrs = np.asarray(probe_attrs)
    if probe.shape[1] != z_aux.shape[1]:
        raise ValueError(f"probe representation dim {probe.shape[1]} != oracle output dim {z_aux.shape[1]}")
    k = num_classes or int(max(s_aux.max(), probe_attrs.max())) + 1
    attack = fit_classifier(z_aux, s_aux, k, widths, train_config)
    attack.provenance = {
        "source_model": getattr(oracle, "model_id", ""),
        "layer": getattr(oracle, "layer", None),
        "aux_uids": sorted(int(ex.uid) for ex in aux),
        "kind": "infer_attribute",
    }
    acc = attack.accuracy(probe, probe_attrs)
    logger.info("attribute inference accuracy %.4f (majority %.4f)", acc,
                majority_baseline(probe_attrs))
    return attack, acc


def decensor_attack(aux, oracle, probe_reps, probe_attrs,
                    train_config: TrainConfig = ATTACK_CONFIG, widths=ATTACK_WIDTHS,
                    aux_widths=(128, 32), aux_config: TrainConfig | None = None,
                    num_classes: int | None = None, aux_model: ModelBundle | None = None,
                    transform_lr: float | None = None, aux_layer: int | None = None,
                    transform_hidden=None):
    """De-censoring attack; returns (transform, attack, probe accuracy).

    An auxiliary model M_aux is trained on aux to predict s from x. Then, per
    iteration over aux batches, T is updated on ||T(z) - z_aux||^2 and the
    attack model on cross-entropy over (T(z), s), in that order.
    """
    x_aux = features(aux)
    s_aux = attr_labels(aux)
    probe = _values(probe_reps)
    probe_attrs = np.asarray(probe_attrs)
    z = np.asarray(oracle(x_aux), dtype=np.float64)
    if probe.shape[1] != z.shape[1]:
        raise ValueError(f"probe representation dim {probe.shape[1]} != oracle output dim {z.shape[1]}")
    k = num_classes or int(max(s_aux.max(), probe_attrs.max())) + 1

    if aux_model is None:
        aux_cfg = aux_config or TrainConfig(epochs=30, batch_size=train_config.batch_size,
                                            learning_rate=train_config.learning_rate,
                                            seed=train_config.seed + 1)
        aux_model = build_model(x_aux.shape[1], aux_widths, k, seed=aux_cfg.seed)
        train_task(aux_model, aux, aux_cfg, labels="attr")
    target = as_oracle(aux_model, aux_layer)(x_aux)

    rng = np.random.default_rng(train_config.seed)
    hidden = (target.shape[1],) if transform_hidden is None else tuple(transform_hidden)
    transform = TransformModel(nn.MLP([z.shape[1], *hidden, target.shape[1]], rng))
    attack = AttackModel(nn.MLP([target.shape[1], *widths, k], rng))
    opt_t = nn.Adam(transform.net.params(), lr=transform_lr or train_config.learning_rate)
    opt_a = nn.Adam(attack.net.params(), lr=train_config.learning_rate)
    update_order: list[str] = []
    for epoch in range(train_config.epochs):
        t_total = a_total = 0.0
        for b, idx in enumerate(nn.minibatches(len(z), train_config.batch_size, rng)):
            out, t_cache = transform.net.forward(z[idx])
            diff = out - target[idx]
            t_loss = float(np.mean(np.sum(diff ** 2, axis=1)))
            check_finite(t_loss, epoch, b, "transform loss")
            t_grads, _ = transform.net.backward(t_cache, 2.0 * diff / len(idx))
            opt_t.step(t_grads)
            if epoch == 0 and b == 0:
                update_order.append("transform")

            logits, a_cache = attack.net.forward(transform(z[idx]))
            a_loss, dlogits = nn.cross_entropy(logits, s_aux[idx])
            check_finite(a_loss, epoch, b, "attack loss")
            a_grads, _ = attack.net.backward(a_cache, dlogits)
            opt_a.step(a_grads)
            if epoch == 0 and b == 0:
                update_order.append("attack")
            t_total += t_loss * len(idx)
            a_total += a_loss * len(idx)
        transform.training_log.append({"epoch": epoch + 1, "loss": t_total / len(z)})
        attack.training_log.append({"epoch": epoch + 1, "loss": a_total / len(z)})
    attack.provenance = {
        "source_model": getattr(oracle, "model_id", ""),
        "layer": getattr(oracle, "layer", None),
        "aux_model": aux_model.digest(),
        "aux_layer": aux_layer if aux_layer is not None else aux_model.num_encoder_layers,
        "aux_uids": sorted(int(ex.uid) for ex in aux),
        "update_order": update_order,
        "kind": "decensor",
    }
    acc = attack.accuracy(transform(probe), probe_attrs)
    return transform, attack, acc


def _transfer_model(model: ModelBundle, layer: int, num_classes: int, seed: int) -> ModelBundle:
    widths = model.encoder.sizes[1:]
    fresh = build_model(model.feature_dim, widths, num_classes, seed=seed)
    for i in range(layer):
        fresh.encoder.weights[i][...] = model.encoder.weights[i]
        fresh.encoder.biases[i][...] = model.encoder.biases[i]
    fresh.init_snapshot = [p.copy() for p in fresh.params()]
    return fresh


def _train_frozen(model: ModelBundle, layer: int, examples, config: TrainConfig) -> ModelBundle:
    """Fine-tune only the layers above ``layer``."""
    x = features(examples)
    s = attr_labels(examples)
    n_frozen = 2 * layer
    params = model.params()
    opt = nn.Adam(params[n_frozen:], lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    from overlearn.models import task_loss_and_grads

    for epoch in range(config.epochs):
        total = 0.0
        for b, idx in enumerate(nn.minibatches(len(x), config.batch_size, rng)):
            loss, grads, _ = task_loss_and_grads(model, x[idx], s[idx])
            check_finite(loss, epoch, b)
            opt.step(grads[n_frozen:])
            total += loss * len(idx)
        model.training_log.append({"epoch": epoch + 1, "loss": total / len(x)})
    return model


def repurpose(model: ModelBundle, layer: int, transfer, test,
              train_config: TrainConfig = REPURPOSE_CONFIG, num_classes: int | None = None,
              freeze_encoder: bool = False, seed: int | None = None):
    """Re-purpose ``model``'s encoder up to ``layer`` to predict s; returns (model, test accuracy).

    Layers 1..layer are copied from ``model``; everything above is freshly
    initialized from ``seed`` exactly as :func:`scratch_baseline` would, so
    layer 0 reproduces training from scratch.
    """
    if not transfer:
        raise ValueError("transfer set is empty")
    if model.head is not None:
        raise ValueError("re-purposing expects a deterministic encoder")
    if not 0 <= layer <= model.encoder.num_layers:
        raise ValueError(f"layer {layer} out of range [0, {model.encoder.num_layers}]")
    seed = train_config.seed if seed is None else seed
    k = num_classes or int(max(attr_labels(transfer).max(), attr_labels(test).max())) + 1
    new = _transfer_model(model, layer, k, seed)
    new.metadata["repurposed_from"] = {"model": model.digest(), "layer": layer}
    if freeze_encoder and layer > 0:
        _train_frozen(new, layer, transfer, train_config)
    else:
        train_task(new, transfer, train_config, labels="attr")
    acc = float(np.mean(new.predict(features(test)) == attr_labels(test)))
    return new, acc


def scratch_baseline(transfer, test, hidden_widths=(128, 32),
                     train_config: TrainConfig = REPURPOSE_CONFIG, num_classes: int | None = None,
                     seed: int | None = None) -> float:
    """Train the same architecture from fresh initialization on the transfer set only."""
    if not transfer:
        raise ValueError("transfer set is empty")
    seed = train_config.seed if seed is None else seed
    k = num_classes or int(max(attr_labels(transfer).max(), attr_labels(test).max())) + 1
    model = build_model(transfer[0].features.shape[0], hidden_widths, k, seed=seed)
    train_task(model, transfer, train_config, labels="attr")
    return float(np.mean(model.predict(features(test)) == attr_labels(test)))


# -- pairwise ------------------------------------------------------------------

@dataclass
class PairwiseHead:
    """p(same | z1, z2) = sigmoid(h(z1) W h(z2)^T) with h shared."""

    h: nn.MLP
    W: np.ndarray
    training_log: list[dict] = field(default_factory=list)

    @classmethod
    def create(cls, in_dim: int, widths=(64, 32), seed: int = 0):
        rng = np.random.default_rng(seed)
        h = nn.MLP([in_dim, *widths], rng, activate_last=True)
        W = nn.glorot_uniform(rng, widths[-1], widths[-1])
        return cls(h, W)

    def params(self) -> list[np.ndarray]:
        return self.h.params() + [self.W]

    def scores(self, z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
        return np.einsum("ij,jk,ik->i", self.h(z1), self.W, self.h(z2))

    def prob(self, z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
        return sigmoid(self.scores(z1, z2))

    def predict(self, z1, z2) -> np.ndarray:
        # exactly 0.5 counts as "different"
        return self.prob(z1, z2) > 0.5

    def loss_and_grads(self, z1, z2, labels):
        h1, c1 = self.h.forward(z1)
        h2, c2 = self.h.forward(z2)
        score = np.einsum("ij,jk,ik->i", h1, self.W, h2)
        t = labels.astype(np.float64)
        # binary cross-entropy with logits, computed stably
        loss = float(np.mean(np.logaddexp(0.0, score) - t * score))
        dscore = (sigmoid(score) - t) / len(t)
        dW = h1.T @ (dscore[:, None] * h2)
        dh1 = dscore[:, None] * (h2 @ self.W.T)
        dh2 = dscore[:, None] * (h1 @ self.W)
        g1, _ = self.h.backward(c1, dh1)
        g2, _ = self.h.backward(c2, dh2)
        return loss, [a + b for a, b in zip(g1, g2)] + [dW]


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def pairwise_infer(rep_pairs, same_group_labels, train_config: TrainConfig = ATTACK_CONFIG,
                   widths=(64, 32), probe_pairs=None, probe_labels=None):
    """Train the bilinear pairwise head; returns (head, accuracy).

    Accuracy is measured on ``probe_pairs`` when given, otherwise on the
    training pairs.
    """
    z1, z2 = (_values(r) for r in rep_pairs)
    if z1.shape != z2.shape:
        raise ValueError(f"pair matrices differ in shape: {z1.shape} vs {z2.shape}")
    labels = np.asarray(same_group_labels, dtype=bool)
    if len(labels) != len(z1):
        raise ValueError("one label per pair is required")
    head = PairwiseHead.create(z1.shape[1], widths, seed=train_config.seed)
    opt = nn.Adam(head.params(), lr=train_config.learning_rate)
    rng = np.random.default_rng(train_config.seed)
    for epoch in range(train_config.epochs):
        total = 0.0
        for b, idx in enumerate(nn.minibatches(len(z1), train_config.batch_size, rng)):
            loss, grads = head.loss_and_grads(z1[idx], z2[idx], labels[idx])
            check_finite(loss, epoch, b)
            opt.step(grads)
            total += loss * len(idx)
        head.training_log.append({"epoch": epoch + 1, "loss": total / len(z1)})
    if probe_pairs is not None:
        p1, p2 = (_values(r) for r in probe_pairs)
        acc = float(np.mean(head.predict(p1, p2) == np.asarray(probe_labels, dtype=bool)))
    else:
        acc = float(np.mean(head.predict(z1, z2) == labels))
    return head, acc


def make_pairs(examples, n_pairs: int, seed: int = 0, key: str = "sensitive_attr"):
    """Sample balanced index pairs labeled by whether ``key`` matches."""
    rng = np.random.default_rng(seed)
    keys = np.array([getattr(ex, key) for ex in examples])
    n = len(examples)
    first, second, labels = [], [], []
    by_key = {k: np.flatnonzero(keys == k) for k in np.unique(keys)}
    while len(first) < n_pairs:
        i = int(rng.integers(n))
        want_same = len(first) % 2 == 0
        if want_same:
            pool = by_key[keys[i]]
            pool = pool[pool != i]
            if len(pool) == 0:
                continue
            j = int(rng.choice(pool))
        else:
            pool = np.flatnonzero(keys != keys[i])
            if len(pool) == 0:
                continue
            j = int(rng.choice(pool))
        first.append(i)
        second.append(j)
        labels.append(keys[i] == keys[j])
    return np.array(first), np.array(second), np.array(labels, dtype=bool)
