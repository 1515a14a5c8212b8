import numpy as np
import pytest
from hypothesis import given, strategies as st

from amffuse.data import (DataError, batches, ingest_csv, rfm_noise, synthetic_dataset,
                          weighted_epoch_indices)
from amffuse.metrics import auc

SPEC = {"age": "numerical", "bmi": "numerical", "sex": "categorical", "y": "label", "split": "split"}


def write_csv(path, rows):
    lines = ["age,bmi,sex,y,split"] + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


ROWS = [(50, 20.0, "m", 0, "train"), (60, "", "f", 1, "train"), (70, 30.0, "m", 1, "train"),
        (40, 25.0, "f", 0, "val"), (55, 22.0, "x", 1, "test")]


def test_zscore_from_training_rows(tmp_path):
    ds = ingest_csv(write_csv(tmp_path / "d.csv", ROWS), SPEC)
    age = ds.schema.features[0]
    assert age.mean == pytest.approx(60.0)
    assert age.std == pytest.approx(np.std([50, 60, 70]))
    assert ds.val.tab[0, 0] == pytest.approx((40 - 60) / np.std([50, 60, 70]))


def test_missing_numeric_takes_training_median(tmp_path):
    ds = ingest_csv(write_csv(tmp_path / "d.csv", ROWS), SPEC)
    bmi = ds.schema.features[1]
    assert bmi.median == 25.0
    # the imputed row sits exactly at the median
    assert ds.train.tab[1, 1] == pytest.approx((25.0 - bmi.mean) / bmi.std)


def test_unseen_category_gets_reserved_index(tmp_path):
    ds = ingest_csv(write_csv(tmp_path / "d.csv", ROWS), SPEC)
    sex = ds.schema.features[2]
    assert sex.cardinality == 3 and sex.categories == ["f", "m"]
    assert ds.test.tab[0, 2] == 2


def test_val_and_test_rows_do_not_leak_into_statistics(tmp_path):
    a = ingest_csv(write_csv(tmp_path / "a.csv", ROWS), SPEC)
    changed = ROWS[:3] + [(1000, 99.0, "q", 0, "val"), (-5, 1.0, "m", 1, "test")]
    b = ingest_csv(write_csv(tmp_path / "b.csv", changed), SPEC)
    for fa, fb in zip(a.schema.features, b.schema.features):
        assert (fa.mean, fa.std, fa.median, fa.categories) == (fb.mean, fb.std, fb.median, fb.categories)
    assert np.array_equal(a.train.tab, b.train.tab)


def test_unparseable_cell_names_row_and_column(tmp_path):
    rows = ROWS[:2] + [(70, "heavy", "m", 1, "train")] + ROWS[3:]
    with pytest.raises(DataError, match=r"row 4.*'bmi'"):
        ingest_csv(write_csv(tmp_path / "d.csv", rows), SPEC)


def test_constant_column_rejected(tmp_path):
    rows = [(50, 20.0, "m", 0, "train"), (50, 21.0, "f", 1, "train"), (40, 25.0, "f", 0, "val")]
    with pytest.raises(DataError, match="constant"):
        ingest_csv(write_csv(tmp_path / "d.csv", rows), SPEC)


def test_schema_errors(tmp_path):
    path = write_csv(tmp_path / "d.csv", ROWS)
    with pytest.raises(DataError, match="missing columns"):
        ingest_csv(path, dict(SPEC, height="numerical"))
    with pytest.raises(DataError, match="label"):
        ingest_csv(path, {k: v for k, v in SPEC.items() if v != "label"})
    with pytest.raises(DataError, match="unknown kind"):
        ingest_csv(path, dict(SPEC, age="ordinal"))


def test_embedding_rows_follow_their_records(tmp_path):
    (tmp_path / "e.csv").write_text("x,img,y\n2.0,2,0\n0.0,0,1\n1.0,1,0\n3.0,3,1\n")
    emb = np.arange(4.0)[:, None] * np.array([[10.0, -1.0]])
    ds = ingest_csv(tmp_path / "e.csv", {"x": "numerical", "img": "image", "y": "label"},
                    rng=np.random.default_rng(0), embeddings=emb)
    x = ds.schema.features[0]
    for s in ("train", "val", "test"):
        sp = ds.split(s)
        raw = sp.tab[:, 0] * x.std + x.mean
        assert np.allclose(sp.embeddings[:, 0], 10 * raw)


# -- random feature missingness ---------------------------------------------

@pytest.fixture(scope="module")
def small_synth():
    return synthetic_dataset(200, seed=3)


def test_rfm_rate_zero_is_identity(small_synth):
    noisy, cols = rfm_noise(small_synth, 0.0, np.random.default_rng(0))
    assert cols.size == 0
    for s in ("train", "val", "test"):
        assert np.array_equal(noisy.split(s).tab, small_synth.split(s).tab)


def test_rfm_rate_one_makes_every_column_constant(small_synth):
    noisy, cols = rfm_noise(small_synth, 1.0, np.random.default_rng(0))
    assert cols.tolist() == list(range(12))
    for s in ("train", "val", "test"):
        assert np.all(noisy.split(s).tab == noisy.split(s).tab[0])


def test_rfm_half_masks_same_columns_everywhere():
    ds = synthetic_dataset(200, seed=1, n_features=10)
    noisy, cols = rfm_noise(ds, 0.5, np.random.default_rng(7))
    assert len(cols) == 5
    for s in ("train", "val", "test"):
        t = noisy.split(s).tab
        changed = [j for j in range(10) if not np.array_equal(t[:, j], ds.split(s).tab[:, j])]
        assert set(changed) <= set(cols.tolist())
        assert all(np.unique(t[:, j]).size == 1 for j in cols)
        assert np.array_equal(np.delete(t, cols, axis=1), np.delete(ds.split(s).tab, cols, axis=1))


@given(st.integers(0, 2**31 - 1))
def test_rfm_nested_as_rate_grows(seed):
    ds = synthetic_dataset(40, seed=0)
    sets = [set(rfm_noise(ds, r, np.random.default_rng(seed))[1].tolist()) for r in (0.25, 0.5, 0.75)]
    assert sets[0] <= sets[1] <= sets[2]


def test_rfm_rate_bounds(small_synth):
    for bad in (-0.1, 1.5):
        with pytest.raises(ValueError):
            rfm_noise(small_synth, bad, np.random.default_rng(0))


def test_rfm_fills_with_training_mean_and_mode(small_synth):
    noisy, cols = rfm_noise(small_synth, 1.0, np.random.default_rng(0))
    num, cat = 0, 3
    assert noisy.test.tab[0, num] == pytest.approx(small_synth.train.tab[:, num].mean())
    vals, counts = np.unique(small_synth.train.tab[:, cat], return_counts=True)
    assert noisy.val.tab[0, cat] == vals[np.argmax(counts)]


# -- sampling ----------------------------------------------------------------

def test_weighted_sampler_class_sizes():
    labels = np.array([0] * 100 + [1] * 10)
    idx = weighted_epoch_indices(labels, np.random.default_rng(0), (0.5, 5.0))
    assert np.sum(labels[idx] == 0) == 50
    assert np.sum(labels[idx] == 1) == 50
    # downsampled class is drawn without replacement; every minority sample kept
    assert len(set(idx[labels[idx] == 0])) == 50
    assert set(range(100, 110)) <= set(idx.tolist())


def test_batches_cover_indices():
    chunks = list(batches(np.arange(10), 4))
    assert [len(c) for c in chunks] == [4, 4, 2]
    assert [len(c) for c in batches(np.arange(10), 4, drop_last=True)] == [4, 4]


# -- synthetic task ----------------------------------------------------------

@pytest.fixture(scope="module")
def synth():
    return synthetic_dataset(2000, seed=0)



def test_synthetic_shapes(synth):
    assert len(synth.train) + len(synth.val) + len(synth.test) == 2000
    assert synth.train.images.shape[1:] == (16, 16, 1)
    assert synth.train.tab.shape[1] == 12
    assert 0.0 <= synth.train.images.min() and synth.train.images.max() <= 1.0


def test_synthetic_bayes_bounds(synth):
    # Bayes scores from the latent bits: each bit alone stays weak, the pair is near perfect
    splits = ("train", "val", "test")
    a = np.concatenate([synth.meta["bits"][s][0] for s in splits])
    b = np.concatenate([synth.meta["bits"][s][1] for s in splits])
    y = np.concatenate([synth.split(s).labels for s in splits])
    assert auc(a, y) <= 0.85
    assert auc(b, y) <= 0.85
    assert auc(a & b, y) > 0.97


def test_synthetic_roughly_balanced(synth):
    y = np.concatenate([synth.split(s).labels for s in ("train", "val", "test")])
    assert 0.45 < y.mean() < 0.55


def test_synthetic_informative_column_tracks_tabular_bit(synth):
    col = synth.meta["informative"]
    b = synth.meta["bits"]["train"][1]
    assert auc(synth.train.tab[:, col], b) > 0.95
    for j in range(12):
        if j != col and synth.schema.features[j].kind == "numerical":
            assert 0.4 < auc(synth.train.tab[:, j], synth.train.labels) < 0.6


def test_synthetic_deterministic():
    a, b = synthetic_dataset(100, seed=5), synthetic_dataset(100, seed=5)
    assert np.array_equal(a.train.images, b.train.images) and np.array_equal(a.test.tab, b.test.tab)
