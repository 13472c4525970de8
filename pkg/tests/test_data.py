import numpy as np
import pytest
from scipy.stats import chi2_contingency

from overlearn.data import (
    ContingencySpec,
    DataError,
    LabeledExample,
    attr_labels,
    features,
    generate_examples,
    generate_synthetic,
    load_tabular,
    read_examples,
    restrict_attribute,
    split,
    task_labels,
    write_tabular,
)


def _scipy_cramers_v(a, b):
    table = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(table, (a, b), 1)
    table = table[table.sum(1) > 0][:, table.sum(0) > 0]
    chi2 = chi2_contingency(table, correction=False)[0]
    return np.sqrt(chi2 / table.sum() / (min(table.shape) - 1))


def test_contingency_spec_validation():
    with pytest.raises(DataError):
        ContingencySpec(np.array([[0.5, 0.6], [0.0, 0.0]]))
    with pytest.raises(DataError):
        ContingencySpec(np.array([[1.5, -0.5]]))


def test_diagonal_joint_makes_s_a_function_of_y():
    spec = ContingencySpec(np.array([[0.5, 0.0], [0.0, 0.5]]))
    ex = generate_examples(spec, 1000, 8, 0.3, seed=7)
    np.testing.assert_array_equal(task_labels(ex), attr_labels(ex))


def test_uniform_joint_is_nearly_independent():
    spec = ContingencySpec(np.full((2, 2), 0.25))
    ex = generate_examples(spec, 4000, 8, 0.3, seed=7)
    assert _scipy_cramers_v(task_labels(ex), attr_labels(ex)) <= 0.05


def test_generation_is_deterministic():
    spec = ContingencySpec(np.full((2, 2), 0.25))
    a = features(generate_examples(spec, 200, 8, 0.3, seed=7))
    b = features(generate_examples(spec, 200, 8, 0.3, seed=7))
    assert a.tobytes() == b.tobytes()


def test_generation_rejects_too_few_examples():
    spec = ContingencySpec(np.full((2, 4), 0.125))
    with pytest.raises(DataError):
        generate_examples(spec, 100, 8, 0.3, seed=0)


def test_split_sizes():
    source = [LabeledExample(np.zeros(2), 0, 0, uid=i) for i in range(100)]
    b = split(source, 0.8, 0.5, seed=1)
    assert (len(b.train), len(b.test), len(b.aux)) == (80, 20, 40)
    aux_ids = {ex.uid for ex in b.aux}
    assert aux_ids <= {ex.uid for ex in b.train}
    assert not aux_ids & {ex.uid for ex in b.test}


def test_transfer_subset_sizes():
    source = [LabeledExample(np.zeros(2), 0, 0, uid=i) for i in range(1250)]
    b = split(source, 0.8, 0.5, transfer_fracs=(0.02, 0.10), seed=1)
    assert len(b.train) == 1000
    assert [len(b.transfer[f]) for f in (0.02, 0.10)] == [20, 100]


def test_aux_from_heldout_is_disjoint_from_train_and_test():
    source = [LabeledExample(np.zeros(2), 0, 0, uid=i) for i in range(500)]
    b = split(source, 0.5, 0.2, seed=2, aux_from_heldout=True)
    ids = lambda xs: {ex.uid for ex in xs}  # noqa: E731
    assert not ids(b.aux) & ids(b.train)
    assert not ids(b.aux) & ids(b.test)
    assert len(b.aux) == 50


def test_restrict_attribute_filters_train_only():
    spec = ContingencySpec(np.full((2, 3), 1 / 6))
    b = generate_synthetic(spec, 600, 8, 0.3, seed=1)
    r = restrict_attribute(b, 0)
    assert set(attr_labels(r.train)) == {0}
    assert r.test == b.test
    with pytest.raises(DataError):
        restrict_attribute(b, 5)


def test_csv_round_trip(tmp_path, small_bundle):
    path = tmp_path / "d.csv"
    write_tabular(path, small_bundle.train)
    assert read_examples(path) == small_bundle.train


def test_csv_three_rows(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("f0,f1,f2,f3,y,s\n1,2,3,4,0,1\n0,0,0,0,1,0\n.5,.5,.5,.5,1,1\n")
    ex = read_examples(path)
    assert len(ex) == 3 and features(ex).shape == (3, 4)


def test_csv_missing_label_column_is_named(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("f0,f1,y\n1,2,0\n")
    with pytest.raises(DataError, match="'s'|s column|column s"):
        read_examples(path)


def test_load_tabular_splits(tmp_path, small_bundle):
    path = tmp_path / "d.csv"
    write_tabular(path, small_bundle.all_examples())
    b = load_tabular(path, seed=0)
    assert b.feature_dim == 8
    assert len(b.train) + len(b.test) == 400


def test_exact_cell_counts_largest_remainder():
    from overlearn.data import exact_cell_counts

    # 7 * [.5, .3, .2, 0] = [3.5, 2.1, 1.4, 0]: floors sum to 6, the .5 remainder wins
    assert exact_cell_counts(np.array([[0.5, 0.3], [0.2, 0.0]]), 7).tolist() == [4, 2, 1, 0]


def test_exact_label_sampling_matches_joint():
    spec = ContingencySpec(np.full((2, 4), 0.125))
    ex = generate_examples(spec, 4000, 32, 0.45, seed=2, label_sampling="exact")
    y, s = task_labels(ex), attr_labels(ex)
    table = np.zeros((2, 4), int)
    np.add.at(table, (y, s), 1)
    assert (table == 500).all()
    assert _scipy_cramers_v(y, s) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DataError):
        generate_examples(spec, 4000, 32, 0.45, seed=2, label_sampling="stratified")
