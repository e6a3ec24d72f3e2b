"""Shared fixtures: grid case, small and full datasets, helpers."""

import numpy as np
import pytest

from gridssl.gridsim import Dataset, generate_dataset, load_case
from gridssl.numkit import Rng


@pytest.fixture(scope="session")
def grid_case():
    return load_case()


@pytest.fixture(scope="session")
def tiny_dataset(grid_case):
    """30 samples per class; enough labels for quick training smoke tests."""
    return generate_dataset(grid_case, Rng(2024), samples_per_class=30, label_fraction=0.1)


@pytest.fixture(scope="session")
def full_dataset(grid_case):
    """The desk-scale dataset behind the acceptance table: 7200 samples."""
    return generate_dataset(grid_case, Rng(42), samples_per_class=800, label_fraction=0.0125)


def synthetic_dataset(n_per_class=40, classes=2, window=4, gap=4.0, seed=5, label_fraction=1.0):
    """Linearly separable blobs wearing the dataset schema (3*window features)."""
    rng = Rng(seed)
    n = n_per_class * classes
    centers = rng.gaussian(classes, 3 * window, 0.0, 1.0) * gap
    feats = np.vstack([centers[c] + rng.gaussian(n_per_class, 3 * window, 0.0, 0.5) for c in range(classes)])
    labels_true = np.repeat(np.arange(classes), n_per_class)
    val = np.arange(0, n, 5)
    val_mask = np.zeros(n, bool)
    val_mask[val] = True
    train_idx = np.nonzero(~val_mask)[0]
    n_lab = int(round(label_fraction * n))
    labeled = train_idx[: min(n_lab, len(train_idx))]
    labels = np.full(n, -1, dtype=np.int64)
    labels[labeled] = labels_true[labeled]
    labels[val] = labels_true[val]
    manifest = {
        "format": "gridssl dataset v1",
        "class_count": classes,
        "n_samples": n,
        "window": window,
        "feature_dt": 0.05,
        "M": [0.1, 0.05, 0.02],
        "D": [0.03, 0.02, 0.01],
        "feature_std": float(feats.std()),
        "c_sync": 1e9,
        "c_phase": 1e9,
        "sync_settle": 0,
        "label_fraction": label_fraction,
        "n_labeled": int(len(labeled)),
        "labeled_indices": [int(i) for i in labeled],
        "val_indices": [int(i) for i in val],
        "labels_true": [int(v) for v in labels_true],
        "seed": seed,
    }
    return Dataset(features=feats, labels=labels, class_count=classes, manifest=manifest)
