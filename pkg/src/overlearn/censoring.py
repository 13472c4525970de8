"""Censoring defenses: adversarial mini-max and information-theoretic (VAE-style).

Adversarial censoring alternates one discriminator step and one
encoder/classifier step per batch. The encoder side minimizes

    -mean log p_C(y|z) + gamma * mean log p_D(s|z)

while the discriminator minimizes -mean log p_D(s|z).

Information-theoretic censoring minimizes the negated lower bound

    task_nll + (beta + lambda) * KL[q(z|x) || N(0, I)] + lambda * recon

with z drawn by reparameterization and recon the unit-variance Gaussian
reconstruction loss of a decoder R(z, s).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from overlearn import nn
from overlearn.data import attr_labels, features, task_labels
from overlearn.models import (
    ModelBundle,
    TrainConfig,
    build_model,
    check_finite,
)

logger = logging.getLogger(__name__)

METHODS = ("none", "adversarial", "info_theoretic")


@dataclass(frozen=True)
class CensorConfig:
    method: str = "none"
    target_layer: int | None = None  # None means the last encoder layer
    gamma: float = 1.0
    beta: float = 0.01
    lambda_: float = 0.0001
    discriminator_widths: tuple = (256, 128)
    latent_dim: int | None = None
    decoder_widths: tuple = (64,)
    discriminator_steps: int = 1
    encoder_steps: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown censoring method {self.method!r}; expected one of {METHODS}")
        for name in ("gamma", "beta", "lambda_"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.discriminator_steps < 1 or self.encoder_steps < 1:
            raise ValueError("update schedule step counts must be >= 1")
        object.__setattr__(self, "discriminator_widths", tuple(self.discriminator_widths))
        object.__setattr__(self, "decoder_widths", tuple(self.decoder_widths))

    def resolved_layer(self, num_layers: int) -> int:
        layer = num_layers if self.target_layer is None else self.target_layer
        if not 1 <= layer <= num_layers:
            raise ValueError(f"censoring layer {layer} out of range [1, {num_layers}]")
        return layer

    def to_dict(self) -> dict:
        d = asdict(self)
        d["discriminator_widths"] = list(self.discriminator_widths)
        d["decoder_widths"] = list(self.decoder_widths)
        return d


# -- adversarial ---------------------------------------------------------------

def build_discriminator(in_dim: int, num_attr_classes: int, widths=(256, 128),
                        seed: int = 0) -> nn.MLP:
    return nn.MLP([in_dim, *widths, num_attr_classes], np.random.default_rng(seed))


def _discriminator_loss_grads(disc: nn.MLP, z: np.ndarray, s: np.ndarray):
    logits, cache = disc.forward(z)
    loss, dlogits = nn.cross_entropy(logits, s)
    grads, _ = disc.backward(cache, dlogits)
    return loss, grads


def _encoder_loss_grads(model: ModelBundle, disc: nn.MLP, layer: int, gamma: float,
                        x: np.ndarray, y: np.ndarray, s: np.ndarray):
    """Encoder/classifier objective with the discriminator held fixed."""
    top, enc_cache = model.encoder.forward(x)
    logits, cls_cache = model.classifier.forward(top)
    task_nll, dlogits = nn.cross_entropy(logits, y)
    cls_grads, dtop = model.classifier.backward(cls_cache, dlogits)
    z = enc_cache["acts"][layer]
    d_logits, d_cache = disc.forward(z)
    loglik, d_dlogits = nn.mean_log_likelihood(d_logits, s)
    loss = task_nll + gamma * loglik
    extra = {}
    if gamma != 0:
        _, dz = disc.backward(d_cache, gamma * d_dlogits)
        extra[layer] = dz
    enc_grads, _ = model.encoder.backward(enc_cache, dtop, extra)
    return loss, enc_grads + cls_grads, logits, task_nll


def adversarial_losses(batch, model: ModelBundle, discriminator: nn.MLP,
                       config: CensorConfig) -> tuple[float, float]:
    """(encoder_classifier_loss, discriminator_loss) on one batch."""
    disc = discriminator
    layer = config.resolved_layer(model.encoder.num_layers)
    if disc.in_dim != model.encoder.sizes[layer]:
        raise ValueError(f"discriminator input {disc.in_dim} != layer {layer} width "
                         f"{model.encoder.sizes[layer]}")
    x, y, s = features(batch), task_labels(batch), attr_labels(batch)
    z = model.encoder.activations(x)[layer]
    d_loss, _ = _discriminator_loss_grads(disc, z, s)
    e_loss, _, _, _ = _encoder_loss_grads(model, disc, layer, config.gamma, x, y, s)
    return e_loss, d_loss


def train_adversarial_censored(bundle, model: ModelBundle, config: CensorConfig,
                               train_config: TrainConfig = TrainConfig(epochs=50)) -> ModelBundle:
    """Alternating mini-max training (in place; returns the model).

    Each batch gets ``discriminator_steps`` discriminator updates followed by
    ``encoder_steps`` encoder/classifier updates (1:1 by default). The batch
    order matches :func:`overlearn.models.train_task` for the same seed.
    """
    if config.method != "adversarial":
        raise ValueError(f"expected method='adversarial', got {config.method!r}")
    examples = getattr(bundle, "train", bundle)
    x, y, s = features(examples), task_labels(examples), attr_labels(examples)
    if x.shape[1] != model.feature_dim:
        raise ValueError("feature dim does not match model input")
    layer = config.resolved_layer(model.encoder.num_layers)
    num_attr = int(getattr(bundle, "metadata", {}).get("num_attr_classes", s.max() + 1))
    if model.discriminator is None:
        model.discriminator = build_discriminator(model.encoder.sizes[layer], num_attr,
                                                  config.discriminator_widths,
                                                  seed=train_config.seed + 7919)
    disc = model.discriminator
    if disc.in_dim != model.encoder.sizes[layer]:
        raise ValueError("discriminator input dim does not match censored layer width")
    opt_model = nn.Adam(model.params(), lr=train_config.learning_rate)
    opt_disc = nn.Adam(disc.params(), lr=train_config.learning_rate)
    rng = np.random.default_rng(train_config.seed)
    for epoch in range(train_config.epochs):
        tot_e = tot_d = tot_task = 0.0
        correct = 0
        for b, idx in enumerate(nn.minibatches(len(x), train_config.batch_size, rng)):
            xb, yb, sb = x[idx], y[idx], s[idx]
            for _ in range(config.discriminator_steps):
                z = model.encoder.activations(xb)[layer]
                d_loss, d_grads = _discriminator_loss_grads(disc, z, sb)
                check_finite(d_loss, epoch, b, "discriminator loss")
                opt_disc.step(d_grads)
            for _ in range(config.encoder_steps):
                e_loss, e_grads, logits, task_nll = _encoder_loss_grads(
                    model, disc, layer, config.gamma, xb, yb, sb)
                check_finite(e_loss, epoch, b, "encoder/classifier loss")
                opt_model.step(e_grads)
            tot_e += e_loss * len(idx)
            tot_d += d_loss * len(idx)
            tot_task += task_nll * len(idx)
            correct += int(np.sum(nn.predict(logits) == yb))
        n = len(x)
        model.training_log.append({"epoch": epoch + 1, "loss": tot_task / n,
                                   "encoder_loss": tot_e / n, "discriminator_loss": tot_d / n,
                                   "accuracy": correct / n})
    model.metadata["censor"] = dict(config.to_dict(), target_layer=layer)
    return model


def adversarial_gradient_check(model: ModelBundle, discriminator: nn.MLP, batch,
                               config: CensorConfig, epsilon: float = 1e-5) -> dict:
    """Finite-difference check of both mini-max losses; returns max relative errors."""
    n_params = model.num_params() + discriminator.num_params()
    if n_params > 1000:
        raise ValueError(f"gradient check limited to 1000 parameters, got {n_params}")
    layer = config.resolved_layer(model.encoder.num_layers)
    x, y, s = features(batch), task_labels(batch), attr_labels(batch)

    def enc_loss():
        return _encoder_loss_grads(model, discriminator, layer, config.gamma, x, y, s)[0]

    def disc_loss():
        return _discriminator_loss_grads(discriminator, model.encoder.activations(x)[layer], s)[0]

    _, e_grads, _, _ = _encoder_loss_grads(model, discriminator, layer, config.gamma, x, y, s)
    _, d_grads = _discriminator_loss_grads(discriminator, model.encoder.activations(x)[layer], s)
    return {
        "encoder_classifier": nn.check_gradients(enc_loss, model.params(), e_grads, epsilon),
        "discriminator": nn.check_gradients(disc_loss, discriminator.params(), d_grads, epsilon),
    }


# -- information-theoretic -------------------------------------------------------

@dataclass
class StochasticEncoderHead:
    """Maps an activation h to a diagonal Gaussian q(z|x) = N(mu(h), exp(logstd(h))^2)."""

    mean_map: nn.MLP
    logstd_map: nn.MLP

    @classmethod
    def create(cls, in_dim: int, latent_dim: int, rng: np.random.Generator):
        return cls(nn.MLP([in_dim, latent_dim], rng), nn.MLP([in_dim, latent_dim], rng))

    @property
    def latent_dim(self) -> int:
        return self.mean_map.out_dim

    def params(self) -> list[np.ndarray]:
        return self.mean_map.params() + self.logstd_map.params()

    def mean(self, h: np.ndarray) -> np.ndarray:
        return self.mean_map(h)

    def to_dict(self) -> dict:
        return {"mean_map": self.mean_map.to_dict(), "logstd_map": self.logstd_map.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "StochasticEncoderHead":
        return cls(nn.MLP.from_dict(d["mean_map"]), nn.MLP.from_dict(d["logstd_map"]))


@dataclass
class DecoderHead:
    """R(z, s): reconstructs x from the latent concatenated with one-hot s."""

    net: nn.MLP
    num_attr_classes: int

    @classmethod
    def create(cls, latent_dim: int, num_attr_classes: int, feature_dim: int,
               widths=(64,), rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(nn.MLP([latent_dim + num_attr_classes, *widths, feature_dim], rng),
                   num_attr_classes)

    @property
    def feature_dim(self) -> int:
        return self.net.out_dim

    def params(self) -> list[np.ndarray]:
        return self.net.params()

    def inputs(self, z: np.ndarray, s: np.ndarray) -> np.ndarray:
        onehot = np.zeros((len(s), self.num_attr_classes))
        onehot[np.arange(len(s)), s] = 1.0
        return np.concatenate([z, onehot], axis=1)

    def __call__(self, z: np.ndarray, s: np.ndarray) -> np.ndarray:
        return self.net(self.inputs(z, s))

    def to_dict(self) -> dict:
        return {"net": self.net.to_dict(), "num_attr_classes": self.num_attr_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderHead":
        return cls(nn.MLP.from_dict(d["net"]), int(d["num_attr_classes"]))


def gaussian_kl(mu: np.ndarray, logstd: np.ndarray) -> np.ndarray:
    """Per-example KL[N(mu, sigma^2) || N(0, I)]."""
    var = np.exp(2.0 * logstd)
    return 0.5 * np.sum(mu ** 2 + var - 2.0 * logstd - 1.0, axis=1)


def _it_loss_grads(model: ModelBundle, decoder: DecoderHead, x, y, s, eta,
                   beta: float, lambda_: float):
    head = model.head
    h, enc_cache = model.encoder.forward(x)
    mu, mu_cache = head.mean_map.forward(h)
    logstd, ls_cache = head.logstd_map.forward(h)
    sigma = np.exp(logstd)
    if not np.all(np.isfinite(sigma)):
        raise FloatingPointError("non-finite standard deviation in stochastic head")
    z = mu + sigma * eta
    n = len(x)

    logits, cls_cache = model.classifier.forward(z)
    task_nll, dlogits = nn.cross_entropy(logits, y)
    cls_grads, dz = model.classifier.backward(cls_cache, dlogits)

    kl = float(gaussian_kl(mu, logstd).mean())
    kl_w = beta + lambda_

    recon_out, dec_cache = decoder.net.forward(decoder.inputs(z, s))
    diff = recon_out - x
    recon = 0.5 * float(np.mean(diff ** 2))
    dec_grads, dinp = decoder.net.backward(dec_cache, lambda_ * diff / diff.size)
    dz = dz + dinp[:, : z.shape[1]]

    dmu = dz + kl_w * mu / n
    dlogstd = dz * eta * sigma + kl_w * (sigma ** 2 - 1.0) / n
    mu_grads, dh_mu = head.mean_map.backward(mu_cache, dmu)
    ls_grads, dh_ls = head.logstd_map.backward(ls_cache, dlogstd)
    enc_grads, _ = model.encoder.backward(enc_cache, dh_mu + dh_ls)

    total = task_nll + kl_w * kl + lambda_ * recon
    grads = enc_grads + mu_grads + ls_grads + cls_grads
    parts = {"task_nll": task_nll, "kl": kl, "recon": recon, "loss": total}
    return parts, grads, dec_grads, logits


def it_censor_loss(batch, model: ModelBundle, decoder: DecoderHead, beta: float,
                   lambda_: float, rng: np.random.Generator | None = None,
                   eta: np.ndarray | None = None) -> dict:
    """Loss components {task_nll, kl, recon, loss} for one batch.

    One latent sample per example; pass ``eta`` to fix the standard-normal noise.
    """
    x, y, s = features(batch), task_labels(batch), attr_labels(batch)
    if eta is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        eta = rng.standard_normal((len(x), model.head.latent_dim))
    parts, _, _, _ = _it_loss_grads(model, decoder, x, y, s, eta, beta, lambda_)
    return parts


def build_it_model(feature_dim: int, hidden_widths, num_classes: int, num_attr_classes: int,
                   config: CensorConfig, seed: int = 0) -> tuple[ModelBundle, DecoderHead]:
    """Encoder up to the censored layer, stochastic head, and classifier on z.

    Layers above the censored one become hidden layers of the classifier.
    """
    hidden_widths = list(hidden_widths)
    layer = config.resolved_layer(len(hidden_widths))
    latent = config.latent_dim or hidden_widths[layer - 1]
    rng = np.random.default_rng(seed)
    encoder = nn.MLP([feature_dim, *hidden_widths[:layer]], rng, activate_last=True)
    head = StochasticEncoderHead.create(hidden_widths[layer - 1], latent, rng)
    classifier = nn.MLP([latent, *hidden_widths[layer:], num_classes], rng)
    decoder = DecoderHead.create(latent, num_attr_classes, feature_dim, config.decoder_widths, rng)
    model = ModelBundle(encoder, classifier, seed=seed, head=head, decoder=decoder)
    model.init_snapshot = [p.copy() for p in model.params()]
    return model, decoder


def train_it_censored(bundle, config: CensorConfig, train_config: TrainConfig = TrainConfig(),
                      hidden_widths=(128, 32), model: ModelBundle | None = None):
    """Jointly minimize the negated lower bound; returns (model, head, decoder).

    Evaluation-time representations use the latent mean. Runs that fail to
    learn the task still terminate and report normally.
    """
    if config.method != "info_theoretic":
        raise ValueError(f"expected method='info_theoretic', got {config.method!r}")
    examples = getattr(bundle, "train", bundle)
    x, y, s = features(examples), task_labels(examples), attr_labels(examples)
    meta = getattr(bundle, "metadata", {})
    num_classes = int(meta.get("num_task_classes", y.max() + 1))
    num_attr = int(meta.get("num_attr_classes", s.max() + 1))
    if model is None:
        model, decoder = build_it_model(x.shape[1], hidden_widths, num_classes, num_attr,
                                        config, seed=train_config.seed)
    else:
        decoder = model.decoder
    params = model.params()
    opt = nn.Adam(params + decoder.params(), lr=train_config.learning_rate)
    rng = np.random.default_rng(train_config.seed)
    noise_rng = np.random.default_rng(train_config.seed + 104729)
    latent = model.head.latent_dim
    for epoch in range(train_config.epochs):
        sums = {"task_nll": 0.0, "kl": 0.0, "recon": 0.0, "loss": 0.0}
        correct = 0
        for b, idx in enumerate(nn.minibatches(len(x), train_config.batch_size, rng)):
            eta = noise_rng.standard_normal((len(idx), latent))
            parts, grads, dec_grads, logits = _it_loss_grads(
                model, decoder, x[idx], y[idx], s[idx], eta, config.beta, config.lambda_)
            check_finite(parts["loss"], epoch, b)
            opt.step(grads + dec_grads)
            for k in sums:
                sums[k] += parts[k] * len(idx)
            correct += int(np.sum(nn.predict(logits) == y[idx]))
        entry = {k: v / len(x) for k, v in sums.items()}
        entry.update(epoch=epoch + 1, accuracy=correct / len(x))
        model.training_log.append(entry)
    layer = config.resolved_layer(len(hidden_widths))
    model.metadata["censor"] = dict(config.to_dict(), target_layer=layer)
    return model, model.head, decoder


def it_gradient_check(model: ModelBundle, decoder: DecoderHead, batch, beta: float,
                      lambda_: float, epsilon: float = 1e-5, seed: int = 0) -> float:
    """Finite-difference check of the information-theoretic loss with fixed noise."""
    params = model.params() + decoder.params()
    n_params = sum(p.size for p in params)
    if n_params > 1000:
        raise ValueError(f"gradient check limited to 1000 parameters, got {n_params}")
    x, y, s = features(batch), task_labels(batch), attr_labels(batch)
    eta = np.random.default_rng(seed).standard_normal((len(x), model.head.latent_dim))
    parts, grads, dec_grads, _ = _it_loss_grads(model, decoder, x, y, s, eta, beta, lambda_)

    def loss():
        return _it_loss_grads(model, decoder, x, y, s, eta, beta, lambda_)[0]["loss"]

    return nn.check_gradients(loss, params, grads + dec_grads, epsilon)


def censor(bundle, config: CensorConfig, hidden_widths=(128, 32),
           train_config: TrainConfig | None = None, seed: int = 0) -> ModelBundle:
    """Train a model under ``config`` (method 'none' trains plainly)."""
    from overlearn.models import train_task

    meta = bundle.metadata
    if config.method == "info_theoretic":
        tc = train_config or TrainConfig(seed=seed)
        return train_it_censored(bundle, config, tc, hidden_widths)[0]
    model = build_model(bundle.feature_dim, hidden_widths, int(meta["num_task_classes"]), seed=seed)
    if config.method == "adversarial":
        tc = train_config or TrainConfig(epochs=50, seed=seed)
        return train_adversarial_censored(bundle, model, config, tc)
    return train_task(model, bundle, train_config or TrainConfig(seed=seed))
