import numpy as np
import pytest

from overlearn import nn


def test_softmax_rows_sum_to_one():
    logits = np.random.default_rng(0).standard_normal((7, 5)) * 50
    p = nn.softmax(logits)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_cross_entropy_matches_direct_log():
    logits = np.array([[2.0, 0.5, -1.0], [0.0, 0.0, 0.0]])
    labels = np.array([0, 2])
    # oracle: explicit log of normalized exponentials
    e = np.exp(logits)
    expected = -np.mean(np.log(e[[0, 1], labels] / e.sum(axis=1)))
    loss, _ = nn.cross_entropy(logits, labels)
    assert loss == pytest.approx(expected, abs=1e-12)


def test_predict_breaks_ties_toward_lower_index():
    assert nn.predict(np.array([[1.0, 1.0, 0.0]])).tolist() == [0]


def test_mlp_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    net = nn.MLP([3, 5, 4, 2], rng)
    x = rng.standard_normal((6, 3))
    y = np.array([0, 1, 1, 0, 1, 0])

    def loss():
        return nn.cross_entropy(net(x), y)[0]

    out, cache = net.forward(x)
    _, dlogits = nn.cross_entropy(out, y)
    grads, _ = net.backward(cache, dlogits)
    assert nn.check_gradients(loss, net.params(), grads) <= 1e-6


def test_set_params_keeps_array_identity():
    net = nn.MLP([2, 3], np.random.default_rng(0))
    before = [id(p) for p in net.params()]
    net.set_params([np.zeros_like(p) for p in net.params()])
    assert [id(p) for p in net.params()] == before
    assert all(not p.any() for p in net.params())


def test_adam_zero_lr_is_noop():
    net = nn.MLP([2, 3], np.random.default_rng(0))
    snapshot = [p.copy() for p in net.params()]
    nn.Adam(net.params(), lr=0.0).step([np.ones_like(p) for p in net.params()])
    for a, b in zip(net.params(), snapshot):
        np.testing.assert_array_equal(a, b)


def test_minibatches_cover_every_index_once():
    idx = np.concatenate(list(nn.minibatches(103, 10, np.random.default_rng(0))))
    assert sorted(idx.tolist()) == list(range(103))


@pytest.mark.parametrize("eps", [0.0, -1e-5, 0.1])
def test_check_gradients_rejects_bad_epsilon(eps):
    net = nn.MLP([2, 2], np.random.default_rng(0))
    with pytest.raises(ValueError):
        nn.check_gradients(lambda: 0.0, net.params(), net.params(), eps)


def test_mlp_dict_round_trip():
    net = nn.MLP([3, 4, 2], np.random.default_rng(5), activate_last=True)
    again = nn.MLP.from_dict(net.to_dict())
    x = np.random.default_rng(6).standard_normal((4, 3))
    np.testing.assert_array_equal(net(x), again(x))
