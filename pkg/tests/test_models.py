import numpy as np
import pytest

from overlearn.data import LabeledExample, features
from overlearn.models import (
    TrainConfig,
    TrainingError,
    accuracy,
    build_model,
    extract_representations,
    gradient_check,
    load_model,
    save_model,
    train_task,
)


def _separable(n=200, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(n, 3))
    x[:, 0] += np.sign(x[:, 0]) * 0.1
    return [LabeledExample(x[i], int(x[i, 0] > 0), 0, uid=i) for i in range(n)]


def test_layer_widths():
    m = build_model(10, (128, 32), 2, seed=0)
    reps = m.layer_outputs(np.zeros((3, 10)))
    assert [r.shape[1] for r in reps] == [10, 128, 32]


def test_same_seed_same_init():
    a, b = build_model(5, (4, 3), 2, seed=9), build_model(5, (4, 3), 2, seed=9)
    for p, q in zip(a.init_snapshot, b.init_snapshot):
        np.testing.assert_array_equal(p, q)


def test_probabilities_sum_to_one():
    m = build_model(5, (4, 3), 3, seed=1)
    p = m.predict_proba(np.random.default_rng(0).standard_normal((9, 5)) * 10)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_learns_separable_toy_set():
    ex = _separable()
    # the closed-form rule sign(x0) separates the set exactly
    assert all((e.features[0] > 0) == bool(e.task_label) for e in ex)
    m = train_task(build_model(3, (16, 8), 2, seed=0), ex, TrainConfig(epochs=30, batch_size=16))
    assert accuracy(m, ex) >= 0.99


def test_zero_learning_rate_keeps_init():
    m = train_task(build_model(3, (4,), 2, seed=0), _separable(), TrainConfig(epochs=2, learning_rate=0.0))
    for p, q in zip(m.params(), m.init_snapshot):
        np.testing.assert_array_equal(p, q)


def test_constant_labels_reach_zero_loss():
    ex = [LabeledExample(e.features, 1, 0, uid=e.uid) for e in _separable()]
    m = train_task(build_model(3, (8,), 2, seed=0), ex, TrainConfig(epochs=200, batch_size=50,
                                                                      learning_rate=0.05))
    assert accuracy(m, ex) == 1.0
    assert m.training_log[-1]["loss"] < 1e-3


def test_non_finite_loss_raises():
    ex = _separable(20)
    m = build_model(3, (4,), 2, seed=0)
    m.classifier.weights[0][...] = np.nan
    with pytest.raises(TrainingError):
        train_task(m, ex, TrainConfig(epochs=1))


def test_extract_layer_zero_is_identity():
    ex = _separable(10)
    m = build_model(3, (4, 2), 2, seed=0)
    np.testing.assert_array_equal(extract_representations(m, 0, ex).values, features(ex))


def test_extract_is_deterministic_and_shaped():
    ex = _separable(10)
    m = build_model(3, (4, 2), 2, seed=0)
    a = extract_representations(m, 1, ex)
    b = extract_representations(m, 1, ex)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.shape == (10, 4) and a.layer == 1 and a.model_id == m.digest()
    with pytest.raises(ValueError):
        extract_representations(m, 3, ex)


def test_gradient_check_task_loss(tiny_batch):
    m = build_model(4, (6, 5), 2, seed=0)
    assert gradient_check(m, tiny_batch, 1e-5) <= 1e-4


def test_zero_weight_classifier_bias_gradient():
    # symmetric batch: logits are all zero, so dL/db = mean(softmax) - mean(onehot) = 0
    ex = [LabeledExample(np.array([1.0, -1.0]), 0, 0), LabeledExample(np.array([-1.0, 1.0]), 1, 0)]
    m = build_model(2, (3,), 2, seed=0)
    m.classifier.weights[0][...] = 0.0
    from overlearn.models import task_loss_and_grads

    _, grads, _ = task_loss_and_grads(m, features(ex), np.array([0, 1]))
    np.testing.assert_allclose(grads[-1], [0.0, 0.0], atol=1e-15)
    assert gradient_check(m, ex) <= 1e-4


def test_gradient_check_rejects_zero_epsilon(tiny_batch):
    with pytest.raises(ValueError):
        gradient_check(build_model(4, (3,), 2), tiny_batch, 0.0)


def test_checkpoint_round_trip(tmp_path):
    m = train_task(build_model(3, (4, 2), 2, seed=0), _separable(40), TrainConfig(epochs=2))
    digest = save_model(m, tmp_path / "m.json")
    assert len(digest) == 64
    again = load_model(tmp_path / "m.json")
    x = features(_separable(5, seed=3))
    np.testing.assert_array_equal(m.logits(x), again.logits(x))
    assert again.digest() == m.digest()
