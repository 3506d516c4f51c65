"""Deterministic train/test partitioning and K-fold assignment."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

# the published split: 922 train / 244 test of 1166 slices
DEFAULT_TEST_FRACTION = 244 / 1166


@dataclass
class Split:
    train: list
    test: list
    folds: list  # one list of training-set positions per fold

    def fold(self, k: int) -> tuple[list, list]:
        """(train items, validation items) for fold ``k``."""
        val_idx = set(self.folds[k])
        tr = [s for i, s in enumerate(self.train) if i not in val_idx]
        va = [self.train[i] for i in self.folds[k]]
        return tr, va


def split_dataset(samples: Sequence, test_fraction: float = DEFAULT_TEST_FRACTION, folds: int = 4,
                  seed: int = 0) -> Split:
    n = len(samples)
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must be in [0, 1)")
    n_test = int(round(n * test_fraction))
    n_train = n - n_test
    if n_train < folds:
        raise ValueError(f"{n_train} training samples cannot fill {folds} folds")
    if test_fraction > 0 and n_test == 0:
        raise ValueError("test split would be empty")
    order = np.random.default_rng(seed).permutation(n)
    test = [samples[i] for i in order[:n_test]]
    train = [samples[i] for i in order[n_test:]]
    fold_idx = [list(map(int, part)) for part in np.array_split(np.arange(n_train), folds)]
    return Split(train=train, test=test, folds=fold_idx)
