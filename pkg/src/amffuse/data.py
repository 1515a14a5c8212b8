"""Paired image-tabular datasets: CSV ingestion, splits, noise simulation, sampling.

Tabular values are held as one float matrix per split in schema order;
categorical columns store integer codes. Numerical columns are z-scored
with train-split statistics after median imputation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .image import gaussian_noise
from .tokenizer import FeatureSpec, TabularSchema

SPLITS = ("train", "val", "test")


class DataError(ValueError):
    pass


@dataclass
class Split:
    tab: np.ndarray                  # (n, N) float, schema order
    labels: np.ndarray               # (n,) int
    images: np.ndarray | None = None      # (n, H, W, C) in [0, 1]
    embeddings: np.ndarray | None = None  # (n, D_img) precomputed image embeddings

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_input(self) -> np.ndarray:
        return self.embeddings if self.embeddings is not None else self.images

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx, dtype=np.intp)
        return Split(self.tab[idx], self.labels[idx],
                     None if self.images is None else self.images[idx],
                     None if self.embeddings is None else self.embeddings[idx])


@dataclass
class Dataset:
    schema: TabularSchema
    train: Split
    val: Split
    test: Split
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> Split:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def map_splits(self, fn) -> "Dataset":
        return replace(self, train=fn(self.train), val=fn(self.val), test=fn(self.test))


# -- CSV ingestion -----------------------------------------------------------

_KINDS = {"numerical", "categorical", "label", "image", "split", "ignore"}


def random_split_indices(n: int, rng: np.random.Generator, fractions=(0.72, 0.18, 0.10)) -> dict[str, np.ndarray]:
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {"train": np.sort(perm[:n_train]), "val": np.sort(perm[n_train:n_train + n_val]),
            "test": np.sort(perm[n_train + n_val:])}


def _parse_numeric(frame: pd.DataFrame, col: str) -> np.ndarray:
    raw = frame[col]
    values = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=np.float64)
    bad = np.isnan(values) & raw.notna().to_numpy() & (raw.astype(str).str.strip() != "").to_numpy()
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise DataError(f"unparseable value {raw.iloc[row]!r} at row {row + 2}, column {col!r}")
    return values


def ingest_csv(path, schema_spec: dict[str, str], rng: np.random.Generator | None = None,
               image_loader=None, embeddings: np.ndarray | None = None) -> Dataset:
    """Load a paired dataset described by ``schema_spec`` (column -> kind).

    Kinds: numerical, categorical, label, image (a file path or an integer
    row index into ``embeddings``), split (train/val/test), ignore. Without a
    split column rows are split 72/18/10 at random.
    """
    path = Path(path)
    for col, kind in schema_spec.items():
        if kind not in _KINDS:
            raise DataError(f"column {col!r}: unknown kind {kind!r}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[""])
    missing = [c for c in schema_spec if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    label_cols = [c for c, k in schema_spec.items() if k == "label"]
    if len(label_cols) != 1:
        raise DataError("schema needs exactly one label column")
    n = len(frame)

    split_cols = [c for c, k in schema_spec.items() if k == "split"]
    if split_cols:
        tags = frame[split_cols[0]].str.strip().str.lower().to_numpy()
        unknown = set(tags) - set(SPLITS)
        if unknown:
            raise DataError(f"unknown split tags {sorted(unknown)}")
        index = {s: np.flatnonzero(tags == s) for s in SPLITS}
    else:
        index = random_split_indices(n, rng or np.random.default_rng(0))
    train_rows = index["train"]
    if train_rows.size == 0:
        raise DataError("training split is empty")

    features, columns = [], []
    for col, kind in schema_spec.items():
        if kind == "numerical":
            v = _parse_numeric(frame, col)
            tr = v[train_rows]
            tr = tr[~np.isnan(tr)]
            if tr.size == 0:
                raise DataError(f"column {col!r}: no observed training values")
            median = float(np.median(tr))
            v = np.where(np.isnan(v), median, v)
            mu, sd = float(v[train_rows].mean()), float(v[train_rows].std())
            if not sd > 0:
                raise DataError(f"column {col!r}: constant numerical column")
            features.append(FeatureSpec(col, "numerical", mean=mu, std=sd, median=median))
            columns.append((v - mu) / sd)
        elif kind == "categorical":
            raw = frame[col].fillna("").str.strip().to_numpy()
            seen = sorted(set(raw[train_rows]))
            codes_map = {c: i for i, c in enumerate(seen)}
            reserved = len(seen)
            codes = np.array([codes_map.get(c, reserved) for c in raw], dtype=np.float64)
            freq = {int(k): int(c) for k, c in zip(*np.unique(codes[train_rows].astype(int), return_counts=True))}
            features.append(FeatureSpec(col, "categorical", cardinality=len(seen) + 1,
                                        categories=seen, frequencies=freq))
            columns.append(codes)
    if not features:
        raise DataError("schema has no tabular feature columns")
    schema = TabularSchema(features)
    tab = np.stack(columns, axis=1)
    labels_raw = frame[label_cols[0]].str.strip()
    try:
        labels = labels_raw.astype(int).to_numpy()
    except ValueError:
        classes = sorted(set(labels_raw))
        labels = labels_raw.map({c: i for i, c in enumerate(classes)}).to_numpy().astype(int)

    images = embeds = None
    image_cols = [c for c, k in schema_spec.items() if k == "image"]
    if image_cols:
        refs = frame[image_cols[0]].to_numpy()
        if embeddings is not None:
            try:
                idx = np.array([int(r) for r in refs])
            except ValueError as exc:
                raise DataError(f"image column {image_cols[0]!r} must hold embedding row indices") from exc
            embeds = np.asarray(embeddings, dtype=np.float64)[idx]
        else:
            loader = image_loader or load_image
            images = np.stack([loader(path.parent / r) for r in refs])

    def make(rows):
        return Split(tab[rows], labels[rows], None if images is None else images[rows],
                     None if embeds is None else embeds[rows])

    return Dataset(schema, make(index["train"]), make(index["val"]), make(index["test"]),
                   meta={"source": str(path)})


def load_image(path) -> np.ndarray:
    """PNG (scaled to [0, 1]) or .npy array, returned as (H, W, C)."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float64)
    else:
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


# -- noise simulation --------------------------------------------------------

def rfm_noise(dataset: Dataset, missing_rate: float, rng: np.random.Generator) -> tuple[Dataset, np.ndarray]:
    """Random feature missingness: floor(rate * N) whole columns are overwritten
    in every split with the training mean (numerical) or mode (categorical).

    Columns are a prefix of one random permutation, so for a fixed ``rng``
    state the masked sets are nested as the rate grows. Returns the noisy
    dataset and the masked column indices.
    """
    if not 0.0 <= missing_rate <= 1.0:
        raise ValueError(f"missing rate must be in [0, 1], got {missing_rate}")
    N = len(dataset.schema)
    k = int(math.floor(missing_rate * N + 1e-9))
    cols = np.sort(rng.permutation(N)[:k])
    fill = {}
    for c in cols:
        spec = dataset.schema.features[c]
        col = dataset.train.tab[:, c]
        if spec.kind == "numerical":
            fill[c] = float(col.mean())
        else:
            vals, counts = np.unique(col, return_counts=True)
            fill[c] = float(vals[np.argmax(counts)])

    def apply(split: Split) -> Split:
        tab = split.tab.copy()
        for c, v in fill.items():
            tab[:, c] = v
        return replace(split, tab=tab)

    noisy = dataset.map_splits(apply)
    noisy.meta = dict(dataset.meta, rfm_rate=missing_rate, rfm_columns=cols.tolist())
    return noisy, cols


def image_noise(dataset: Dataset, sigma: float, rng: np.random.Generator) -> Dataset:
    """Additive clipped Gaussian pixel noise on every split."""
    if dataset.train.images is None:
        raise DataError("image noise needs raw images, not precomputed embeddings")
    noisy = dataset.map_splits(lambda s: replace(s, images=gaussian_noise(s.images, sigma, rng)))
    noisy.meta = dict(dataset.meta, image_sigma=sigma)
    return noisy


# -- sampling ----------------------------------------------------------------

def weighted_epoch_indices(labels: np.ndarray, rng: np.random.Generator,
                           factors=(0.5, 5.0)) -> np.ndarray:
    """Per-epoch index list that resizes each class by ``factors[c]``.

    Factors below 1 subsample without replacement; factors above 1 keep
    every sample and draw the remainder with replacement.
    """
    labels = np.asarray(labels)
    out = []
    for c, f in enumerate(factors):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        target = max(1, int(round(f * idx.size)))
        if target <= idx.size:
            out.append(rng.choice(idx, target, replace=False))
        else:
            out.append(np.concatenate([idx, rng.choice(idx, target - idx.size, replace=True)]))
    # classes without a factor are kept as-is
    rest = np.flatnonzero(labels >= len(factors))
    out.append(rest)
    return rng.permutation(np.concatenate(out))


def batches(indices: np.ndarray, batch_size: int, drop_last: bool = False):
    for lo in range(0, len(indices), batch_size):
        chunk = indices[lo:lo + batch_size]
        if drop_last and len(chunk) < batch_size:
            return
        yield chunk


# -- synthetic paired task ---------------------------------------------------

def synthetic_dataset(n: int = 2000, seed: int = 0, n_features: int = 12, size: int = 16,
                      p_bit: float = math.sqrt(0.5), label_noise: float = 0.05,
                      blob_amp: float = 0.35, blob_sigma: float = 1.6, pixel_noise: float = 0.1,
                      informative: int | None = None, shared_factors: int = 3,
                      shared_brightness: float = 0.08) -> Dataset:
    """Image-tabular pairs whose label is the AND of an image bit and a tabular bit.

    The image bit puts a Gaussian blob in the upper or lower half of a
    ``size`` x ``size`` grayscale image (vertical, so horizontal flips keep
    it). The tabular bit is carried by column ``informative``; the other
    columns are label-free (every fourth one categorical). With probability
    ``label_noise`` the label is redrawn uniformly. Bits are 1 with
    probability ``p_bit`` each, so the classes are balanced at the default.
    Latent bits are kept in ``meta`` for Bayes-rule checks.

    The two views also share label-free nuisance factors so contrastive
    pretraining has something to align. Up to three blob attributes
    (distance from the vertical midline, amplitude, width) are copied with noise into the first
    ``shared_factors`` free numerical columns, and the noise term of the
    informative column shifts the background brightness by
    ``shared_brightness`` per standard deviation. None of these factors
    carries label information on its own side.
    """
    if not 0 <= shared_factors <= 3:
        raise ValueError("shared_factors must be between 0 and 3")
    if informative is None:
        # the CLS token is read out after the last feature, so signal-bearing
        # columns go at the end of the row by default
        informative = max(j for j in range(n_features) if j % 4 != 3)
    rng = np.random.default_rng(seed)
    a = (rng.random(n) < p_bit).astype(int)
    b = (rng.random(n) < p_bit).astype(int)
    clean = a & b
    resample = rng.random(n) < label_noise
    labels = np.where(resample, rng.integers(0, 2, n), clean)

    factors = rng.normal(0, 1, (3, n))
    on = np.arange(3) < shared_factors
    ecc_f, amp_f, width_f = factors * on[:, None]
    tab_noise = rng.normal(0, 0.35, n)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    rows_c = np.where(a == 1, size * 0.28, size * 0.72) + rng.normal(0, 0.6, n)
    # distance from the vertical midline survives horizontal flips
    ecc = np.clip(size * (0.12 + 0.06 * ecc_f), 0.0, size * 0.3)
    cols_c = size / 2 + np.where(rng.random(n) < 0.5, -1.0, 1.0) * ecc
    amp = blob_amp * (1.0 + 0.3 * amp_f)
    sig = blob_sigma * np.exp(0.2 * width_f)
    blob = np.exp(-((yy[None] - rows_c[:, None, None]) ** 2 + (xx[None] - cols_c[:, None, None]) ** 2)
                  / (2 * sig[:, None, None] ** 2))
    background = 0.3 + shared_brightness * tab_noise / 0.35
    images = np.clip(background[:, None, None] + amp[:, None, None] * blob
                     + rng.normal(0, pixel_noise, (n, size, size)), 0, 1)[..., None]
    free = [j for j in reversed(range(n_features)) if j != informative and j % 4 != 3]
    shared_cols = free[:shared_factors]

    specs, cols = [], []
    for j in range(n_features):
        if j == informative:
            v = (2.0 * b - 1.0) + tab_noise
        elif j in shared_cols:
            v = factors[shared_cols.index(j)] + rng.normal(0, 0.3, n)
        elif j % 4 == 3:
            card = 4
            v = rng.integers(0, card - 1, n).astype(np.float64)  # last code reserved for unseen
            specs.append(FeatureSpec(f"cat{j}", "categorical", cardinality=card,
                                     categories=[str(k) for k in range(card - 1)]))
            cols.append(v)
            continue
        else:
            v = rng.normal(0, 1, n)
        specs.append(FeatureSpec(f"num{j}", "numerical"))
        cols.append(v)
    tab = np.stack(cols, axis=1)

    idx = random_split_indices(n, rng)
    train = idx["train"]
    for j, spec in enumerate(specs):
        if spec.kind == "numerical":
            mu, sd = tab[train, j].mean(), tab[train, j].std()
            spec.mean, spec.std, spec.median = float(mu), float(sd), float(np.median(tab[train, j]))
            tab[:, j] = (tab[:, j] - mu) / sd
        else:
            vals, counts = np.unique(tab[train, j].astype(int), return_counts=True)
            spec.frequencies = {int(v): int(c) for v, c in zip(vals, counts)}
    schema = TabularSchema(specs)

    def make(rows):
        return Split(tab[rows], labels[rows], images[rows])

    meta = {"source": "synthetic", "seed": seed, "informative": informative,
            "shared_columns": shared_cols,
            "bits": {s: (a[idx[s]], b[idx[s]]) for s in SPLITS},
            "clean_labels": {s: clean[idx[s]] for s in SPLITS}}
    return Dataset(schema, make(idx["train"]), make(idx["val"]), make(idx["test"]), meta=meta)
