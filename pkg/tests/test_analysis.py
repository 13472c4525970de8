import numpy as np
import pytest
from scipy.stats import chi2_contingency, ortho_group

from overlearn.analysis import (
    CKAMatrix,
    DegenerateInputError,
    cka_heatmap,
    contingency_table,
    cramers_v,
    cramers_v_from_table,
    linear_cka,
    majority_baseline,
    similarity_to_init,
)
from overlearn.data import features
from overlearn.models import TrainConfig, build_model, train_task


def test_cka_hand_example():
    X = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
    Y = X[:, :1]
    # X is already centered; explicit products
    ytx = Y.T @ X              # [[2, 1]]
    xtx = X.T @ X              # [[2, 1], [1, 2]]
    yty = Y.T @ Y              # [[2]]
    expected = (2 ** 2 + 1 ** 2) / (np.sqrt(4 + 1 + 1 + 4) * 2)
    assert np.sum(ytx ** 2) / (np.linalg.norm(xtx) * np.linalg.norm(yty)) == pytest.approx(expected)
    assert linear_cka(X, Y) == pytest.approx(expected, abs=1e-12)


def test_cka_self_rotation_scaling():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((50, 6))
    Q = ortho_group.rvs(6, random_state=1)
    assert linear_cka(X, X) == pytest.approx(1.0, abs=1e-9)
    assert linear_cka(X, X @ Q) == pytest.approx(1.0, abs=1e-9)
    assert linear_cka(X, -3.5 * X) == pytest.approx(1.0, abs=1e-9)


def test_cka_symmetric_and_bounded():
    rng = np.random.default_rng(2)
    X, Y = rng.standard_normal((40, 5)), rng.standard_normal((40, 3))
    assert abs(linear_cka(X, Y) - linear_cka(Y, X)) <= 1e-9
    assert 0.0 <= linear_cka(X, Y) < 1.0


def test_cka_errors():
    with pytest.raises(ValueError):
        linear_cka(np.zeros((4, 2)), np.zeros((5, 2)))
    with pytest.raises(DegenerateInputError):
        linear_cka(np.ones((4, 2)), np.random.default_rng(0).standard_normal((4, 2)))


def test_heatmap_self_diagonal(small_bundle):
    m = build_model(8, (16, 8), 2, seed=0)
    heat = cka_heatmap(m, m, small_bundle.test)
    np.testing.assert_allclose(heat.diagonal(), 1.0, atol=1e-9)


def test_heatmap_scaled_layer_at_preactivation(small_bundle):
    a = build_model(8, (16, 8), 2, seed=0)
    b = a.copy()
    b.encoder.weights[1] *= 2.0
    b.encoder.biases[1] *= 2.0
    heat = cka_heatmap(a, b, small_bundle.test, preactivation=True)
    assert heat.values[1, 1] == pytest.approx(1.0, abs=1e-9)


def test_heatmap_independent_models_off_diagonal(small_bundle):
    heat = cka_heatmap(build_model(8, (16, 8), 2, seed=0), build_model(8, (16, 8), 2, seed=1),
                       small_bundle.test)
    assert heat.values[0, 1] < 1.0 and heat.values[1, 0] < 1.0


def test_heatmap_csv_orientation(tmp_path):
    values = np.array([[0.1, 0.2, 0.3], [0.4, np.nan, 0.6]])
    heat = CKAMatrix(values, [1, 2], [1, 2, 3])
    path = tmp_path / "c.csv"
    heat.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "layer_b,a1,a2"
    assert lines[2] == "b2,0.2,"
    back = CKAMatrix.from_csv(path)
    np.testing.assert_array_equal(np.isnan(back.values), np.isnan(values))
    np.testing.assert_allclose(back.values[~np.isnan(values)], values[~np.isnan(values)])


def test_similarity_to_init(small_bundle):
    m = build_model(8, (16, 8), 2, seed=0)
    train_task(m, small_bundle, TrainConfig(epochs=3), record_snapshots=True)
    curves = similarity_to_init(m, m.snapshots, small_bundle.test)
    assert set(curves) == {1, 2}
    for series in curves.values():
        assert len(series) == 4
        assert series[0] == pytest.approx(1.0, abs=1e-9)


def test_similarity_to_init_without_learning(small_bundle):
    m = build_model(8, (16, 8), 2, seed=0)
    train_task(m, small_bundle, TrainConfig(epochs=3, learning_rate=0.0), record_snapshots=True)
    for series in similarity_to_init(m, m.snapshots, small_bundle.test).values():
        np.testing.assert_allclose(series, 1.0, atol=1e-9)


def _labels_from_table(table):
    a, b = [], []
    for i, row in enumerate(table):
        for j, count in enumerate(row):
            a += [i] * count
            b += [j] * count
    return np.array(a), np.array(b)


def test_cramers_v_perfect_and_independent():
    assert cramers_v(*_labels_from_table([[5, 0], [0, 5]])).cramers_v == pytest.approx(1.0, abs=1e-12)
    assert cramers_v(*_labels_from_table([[2, 2], [2, 2]])).cramers_v == pytest.approx(0.0, abs=1e-12)


def test_cramers_v_2x3_against_scipy():
    table = np.array([[10, 5, 5], [2, 8, 10]])
    chi2 = chi2_contingency(table, correction=False)[0]
    expected = np.sqrt(chi2 / table.sum() / 1)
    got = cramers_v(*_labels_from_table(table.tolist()))
    assert got.cramers_v == pytest.approx(expected, abs=1e-9)
    np.testing.assert_array_equal(got.contingency_table, table)


def test_cramers_v_properties():
    rng = np.random.default_rng(0)
    a, b = rng.integers(0, 3, 200), rng.integers(0, 4, 200)
    assert cramers_v(a, a).cramers_v == pytest.approx(1.0)
    assert cramers_v(a, b).cramers_v == pytest.approx(cramers_v(b, a).cramers_v, abs=1e-12)
    stat = cramers_v(a, np.zeros(200, int))
    assert stat.degenerate and stat.cramers_v == 0.0
    with pytest.raises(ValueError):
        cramers_v([0, 1], [0])


def test_cramers_v_skips_empty_cells():
    stat = cramers_v_from_table(np.array([[3, 0, 0], [0, 4, 0]]))
    assert stat.cramers_v == pytest.approx(1.0)
    assert contingency_table([5, 5, 7], [1, 2, 2]).tolist() == [[1, 1], [0, 1]]


def test_majority_baseline():
    assert majority_baseline([0, 0, 0, 1]) == 0.75
    assert majority_baseline([2, 2, 2]) == 1.0
    assert majority_baseline(np.repeat(np.arange(4), 100)) == 0.25
    with pytest.raises(ValueError):
        majority_baseline([])
