"""Dataset tests: determinism, split roles, ingestion errors, transfer probe."""
import numpy as np
import pytest

from sentinelzsl import datasets
from sentinelzsl.datasets import (
    DatasetError, SplitPlan, SyntheticSpec, ZslDataset, export_csv,
    generate_synthetic, load_csv, teacher_view,
)


def small_spec(**kw):
    base = dict(num_seen=4, num_unseen=2, feature_dim=6, semantic_dim=3,
                samples_per_class=20, noise_std=0.1, seed=1)
    base.update(kw)
    return SyntheticSpec(**base)


# --- generation ----------------------------------------------------------------

def test_same_seed_bit_identical():
    a = generate_synthetic(small_spec())
    b = generate_synthetic(small_spec())
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(a.semantics, b.semantics)
    assert list(a.split) == list(b.split)


def test_different_seed_differs():
    a = generate_synthetic(small_spec(seed=1))
    b = generate_synthetic(small_spec(seed=2))
    assert not np.array_equal(a.features, b.features)


def test_row_count_arithmetic():
    spec = small_spec()
    ds = generate_synthetic(spec)
    assert len(ds.features) == (spec.num_seen + spec.num_unseen) * spec.samples_per_class
    assert ds.num_classes == spec.num_seen + spec.num_unseen
    for c in range(ds.num_classes):
        assert int((ds.labels == c).sum()) == spec.samples_per_class


def test_split_bucket_sizes():
    ds = generate_synthetic(small_spec(samples_per_class=20))
    for c in ds.seen_classes:
        tags = ds.split[ds.labels == c]
        assert (tags == "teacher_train_seen").sum() == 12   # 60%
        assert (tags == "eval_seen").sum() == 8             # 40%
    for c in ds.unseen_classes:
        tags = ds.split[ds.labels == c]
        assert (tags == "teacher_train_unseen").sum() == 16  # 60% + 20%
        assert (tags == "eval_unseen").sum() == 4            # 20%


def test_features_nonnegative_and_semantics_on_sphere():
    spec = small_spec(semantic_scale=2.5)
    ds = generate_synthetic(spec)
    assert ds.features.min() >= 0.0
    np.testing.assert_allclose(np.linalg.norm(ds.semantics, axis=1), 2.5, rtol=1e-12)


def test_invalid_spec_rejected():
    with pytest.raises(DatasetError):
        generate_synthetic(small_spec(num_seen=0))
    with pytest.raises(DatasetError):
        generate_synthetic(small_spec(noise_std=-1.0))


def test_ridge_probe_transfers_to_unseen_classes():
    # Independent least-squares oracle: fit map semantics -> class feature
    # means on seen classes only; it must predict unseen-class means well,
    # otherwise zero-shot transfer on this data would be luck.
    ds = generate_synthetic(SyntheticSpec())  # desk-scale defaults, noise 0.1
    means = datasets.class_means(ds)
    a_seen = ds.semantics[ds.seen_classes]                      # (K_s, d_a)
    y_seen = np.stack([means[int(c)] for c in ds.seen_classes])  # (K_s, d_x)
    lam = 1e-6
    # M minimizes |A M - Y|^2 + lam |M|^2  => M = (A^T A + lam I)^-1 A^T Y
    gram = a_seen.T @ a_seen + lam * np.eye(a_seen.shape[1])
    m = np.linalg.solve(gram, a_seen.T @ y_seen)                # (d_a, d_x)
    for c in ds.unseen_classes:
        pred = ds.semantics[int(c)] @ m
        actual = means[int(c)]
        cos = pred @ actual / (np.linalg.norm(pred) * np.linalg.norm(actual))
        assert cos >= 0.9, f"class {int(c)}: cosine {cos:.3f}"


# --- invariants ------------------------------------------------------------------

def test_overlapping_class_sets_rejected():
    ds = generate_synthetic(small_spec())
    with pytest.raises(DatasetError, match="overlap"):
        ZslDataset(ds.features, ds.labels, ds.semantics,
                   [0, 1, 2, 3], [3, 4, 5], ds.split, ds.provenance)


def test_label_without_semantics_row_rejected():
    ds = generate_synthetic(small_spec())
    with pytest.raises(DatasetError, match="class 9"):
        ZslDataset(ds.features, np.full_like(ds.labels, 9), ds.semantics,
                   ds.seen_classes, ds.unseen_classes, ds.split, ds.provenance)


def test_mismatched_split_tag_rejected():
    ds = generate_synthetic(small_spec())
    bad = ds.split.copy()
    seen_row = int(np.where(ds.labels == 0)[0][0])
    bad[seen_row] = "eval_unseen"
    with pytest.raises(DatasetError, match="mismatched split tag"):
        ZslDataset(ds.features, ds.labels, ds.semantics,
                   ds.seen_classes, ds.unseen_classes, bad, ds.provenance)


# --- CSV ingestion ----------------------------------------------------------------

def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_csv_three_row_example(tmp_path):
    f = write(tmp_path, "f.csv", "1.0,2.0\n3.0,4.0\n5.0,6.0\n")
    l = write(tmp_path, "l.csv", "0\n0\n1\n")
    s = write(tmp_path, "s.csv", "0.1,0.2,0.3\n0.4,0.5,0.6\n")
    ds = load_csv(f, l, s, SplitPlan(seen_classes=[0], unseen_classes=[1]))
    np.testing.assert_array_equal(ds.features, [[1, 2], [3, 4], [5, 6]])
    np.testing.assert_array_equal(ds.labels, [0, 0, 1])
    np.testing.assert_allclose(ds.semantics, [[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]])
    assert all(p == "real" for p in ds.provenance)


def test_load_csv_missing_semantics_row_names_class(tmp_path):
    f = write(tmp_path, "f.csv", "1,2\n3,4\n")
    l = write(tmp_path, "l.csv", "0\n7\n")
    s = write(tmp_path, "s.csv", "0.1,0.2\n0.3,0.4\n")
    with pytest.raises(DatasetError, match="class 7"):
        load_csv(f, l, s, SplitPlan([0], [7]))


def test_load_csv_ragged_row_names_line(tmp_path):
    f = write(tmp_path, "f.csv", "1,2\n3,4,5\n")
    l = write(tmp_path, "l.csv", "0\n0\n")
    s = write(tmp_path, "s.csv", "0.1,0.2\n")
    with pytest.raises(DatasetError, match="line 2"):
        load_csv(f, l, s, SplitPlan([0], []))


def test_load_csv_non_numeric_cell_names_line(tmp_path):
    f = write(tmp_path, "f.csv", "1,2\n3,oops\n")
    l = write(tmp_path, "l.csv", "0\n0\n")
    s = write(tmp_path, "s.csv", "0.1,0.2\n")
    with pytest.raises(DatasetError, match="line 2"):
        load_csv(f, l, s, SplitPlan([0], []))


def test_export_load_round_trip_is_identity(tmp_path):
    ds = generate_synthetic(small_spec())
    paths = (tmp_path / "f.csv", tmp_path / "l.csv", tmp_path / "s.csv")
    export_csv(ds, *paths)
    back = load_csv(*paths, SplitPlan(list(ds.seen_classes), list(ds.unseen_classes)))
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.semantics, ds.semantics)
    assert list(back.split) == list(ds.split)


# --- teacher views ---------------------------------------------------------------

def test_quasi_view_has_zero_unseen_rows():
    ds = generate_synthetic(small_spec())
    view = teacher_view(ds, "quasi_omniscient")
    assert not np.isin(view.labels, ds.unseen_classes).any()
    assert set(view.split) == {"teacher_train_seen"}


def test_omniscient_view_spans_all_classes():
    ds = generate_synthetic(small_spec())
    view = teacher_view(ds, "omniscient")
    assert set(view.labels.tolist()) == set(range(ds.num_classes))


def test_view_size_difference_is_unseen_train_count():
    ds = generate_synthetic(small_spec())
    om = teacher_view(ds, "omniscient")
    quasi = teacher_view(ds, "quasi_omniscient")
    unseen_train = int((ds.split == "teacher_train_unseen").sum())
    assert len(om.labels) - len(quasi.labels) == unseen_train


def test_unknown_mode_rejected():
    ds = generate_synthetic(small_spec())
    with pytest.raises(ValueError, match="teacher mode"):
        teacher_view(ds, "clairvoyant")
