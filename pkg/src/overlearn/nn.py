"""Dense tanh networks with hand-written backprop and an Adam optimizer.

Everything here is float64 numpy so analytic gradients can be checked
against central finite differences.
"""

from __future__ import annotations

import numpy as np


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def mean_log_likelihood(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean log p(label) and its gradient w.r.t. the logits (negated cross-entropy)."""
    loss, grad = cross_entropy(logits, labels)
    return -loss, -grad


def predict(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(logits, axis=1)


class MLP:
    """Stack of dense layers with tanh between them.

    ``sizes`` lists the widths from input to output. With ``activate_last``
    the final dense layer is also followed by tanh (encoders); otherwise the
    final layer is linear (logit heads, regressors).
    """

    def __init__(self, sizes, rng: np.random.Generator | None = None, activate_last: bool = False):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 1 or any(s < 1 for s in sizes):
            raise ValueError(f"layer widths must be >= 1, got {sizes}")
        self.sizes = sizes
        self.activate_last = bool(activate_last)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            if rng is None:
                self.weights.append(np.zeros((fan_in, fan_out)))
            else:
                self.weights.append(glorot_uniform(rng, fan_in, fan_out))
            self.biases.append(np.zeros(fan_out))

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def set_params(self, values) -> None:
        # in place, so optimizers holding references stay valid
        for p, v in zip(self.params(), values):
            p[...] = v

    def copy(self) -> "MLP":
        new = MLP.__new__(MLP)
        new.sizes = list(self.sizes)
        new.activate_last = self.activate_last
        new.weights = [w.copy() for w in self.weights]
        new.biases = [b.copy() for b in self.biases]
        return new

    def truncated(self, n_layers: int) -> "MLP":
        """The first ``n_layers`` dense layers, each followed by tanh."""
        new = MLP.__new__(MLP)
        new.sizes = list(self.sizes[: n_layers + 1])
        new.activate_last = True
        new.weights = [w.copy() for w in self.weights[:n_layers]]
        new.biases = [b.copy() for b in self.biases[:n_layers]]
        return new

    def _activated(self, i: int) -> bool:
        return i < self.num_layers - 1 or self.activate_last

    def forward(self, x: np.ndarray):
        """Return (output, cache). ``cache['acts'][i]`` is the input to layer i;
        ``cache['acts'][-1]`` is the output."""
        acts = [x]
        pre = []
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w + b
            pre.append(a)
            h = np.tanh(a) if self._activated(i) else a
            acts.append(h)
        return h, {"acts": acts, "pre": pre}

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def activations(self, x: np.ndarray, preactivation: bool = False) -> list[np.ndarray]:
        """Outputs of every layer, index 0 being the input itself."""
        _, cache = self.forward(x)
        if preactivation:
            return [x] + cache["pre"]
        return cache["acts"]

    def backward(self, cache, grad_out: np.ndarray | None, extra: dict | None = None):
        """Backpropagate.

        ``grad_out`` is dLoss/d(output); ``extra`` maps a layer index l
        (1..num_layers) to an additional gradient w.r.t. the activation
        ``acts[l]``. Returns (param_grads, grad_input) with param_grads
        ordered like :meth:`params`.
        """
        extra = extra or {}
        acts, pre = cache["acts"], cache["pre"]
        L = self.num_layers
        g = np.zeros_like(acts[-1]) if grad_out is None else grad_out
        if L in extra:
            g = g + extra[L]
        grads: list[np.ndarray] = [None] * (2 * L)  # type: ignore[list-item]
        for i in range(L - 1, -1, -1):
            if self._activated(i):
                g = g * (1.0 - acts[i + 1] ** 2)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i in extra and i > 0:
                g = g + extra[i]
        return grads, g

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "activate_last": self.activate_last,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        new = cls.__new__(cls)
        new.sizes = [int(s) for s in d["sizes"]]
        new.activate_last = bool(d["activate_last"])
        new.weights = [np.array(w, dtype=np.float64).reshape(a, b)
                       for w, a, b in zip(d["weights"], new.sizes[:-1], new.sizes[1:])]
        new.biases = [np.array(b, dtype=np.float64).reshape(-1) for b in d["biases"]]
        return new


class Adam:
    """Adam over a fixed list of parameter arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        if self.lr == 0:
            return
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def check_gradients(loss_fn, params: list[np.ndarray], analytic: list[np.ndarray],
                    epsilon: float = 1e-5) -> float:
    """Max relative error between ``analytic`` and central differences of ``loss_fn``.

    ``loss_fn()`` must read ``params`` in place. Relative error per coordinate
    is |a - n| / max(|a| + |n|, 1e-7); coordinates where both are below 1e-10
    count as exact.
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError(f"epsilon must be in (0, 1e-2], got {epsilon}")
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_fn()
            flat[i] = orig - epsilon
            down = loss_fn()
            flat[i] = orig
            numeric = (up - down) / (2 * epsilon)
            a = gflat[i]
            if abs(a) < 1e-10 and abs(numeric) < 1e-10:
                continue
            worst = max(worst, abs(a - numeric) / max(abs(a) + abs(numeric), 1e-7))
    return worst
