"""Interaction data: loading, relation matrix construction, sparsity grouping.

Input files are UTF-8 TSV with one ``user<TAB>item`` pair per line; lines
starting with ``#`` are ignored. Raw IDs are arbitrary strings and get dense
0-based indices in first-seen order over train, then val, then test, so
reloading the same files always yields the same indexing.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

DEFAULT_SPARSITY_THRESHOLDS = (5, 10)


class DataError(Exception):
    """Malformed or inconsistent input data."""


@dataclass
class InteractionDataset:
    num_users: int
    num_items: int
    train: np.ndarray  # (E, 2) int64 (user, item) pairs
    val: np.ndarray
    test: np.ndarray
    user_ids: dict  # raw id -> dense index
    item_ids: dict
    cold_start_users: frozenset = field(default_factory=frozenset)
    cold_start_items: frozenset = field(default_factory=frozenset)

    def split(self, name):
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass
class RelationMatrix:
    """Binary user-item interactions in CSR form plus degree arrays."""

    matrix: sp.csr_matrix
    user_degrees: np.ndarray
    item_degrees: np.ndarray

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def nnz(self):
        return self.matrix.nnz


@dataclass
class SparsityGrouping:
    thresholds: tuple  # strictly increasing interaction-count cut points
    groups: np.ndarray  # group index per user

    @property
    def num_groups(self):
        return len(self.thresholds) + 1

    def label(self, g):
        t = self.thresholds
        if not t:
            return "all"
        if g == 0:
            return f"<={t[0]}"
        if g == len(t):
            return f">{t[-1]}"
        return f"{t[g - 1] + 1}-{t[g]}"


def _read_pairs(path):
    """Yield (line_number, user, item) for every data line of a TSV file."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DataError(f"{path}:{lineno}: expected 'user<TAB>item', got {line!r}")
            yield lineno, parts[0], parts[1]


def load_interactions(train_path, val_path=None, test_path=None, format="tsv"):
    """Load train/val/test interaction files into one indexed dataset.

    Duplicate pairs within a split collapse to one interaction (warning).
    Pairs that reappear in a later split are dropped from the later split to
    keep the splits disjoint. Users/items first seen in val or test are kept
    and flagged as cold-start.
    """
    if format != "tsv":
        raise DataError(f"unsupported format {format!r}")

    user_ids, item_ids = {}, {}
    seen_pairs = set()
    splits = {}
    for split, path in (("train", train_path), ("val", val_path), ("test", test_path)):
        edges = []
        if path is not None:
            own = set()
            dup = 0
            cross = 0
            for lineno, user, item in _read_pairs(path):
                u = user_ids.setdefault(user, len(user_ids))
                i = item_ids.setdefault(item, len(item_ids))
                if (u, i) in own:
                    dup += 1
                    continue
                if (u, i) in seen_pairs:
                    cross += 1
                    continue
                own.add((u, i))
                edges.append((u, i))
            seen_pairs |= own
            if dup:
                log.warning("%s: %d duplicate pair(s) collapsed", path, dup)
            if cross:
                log.warning("%s: %d pair(s) already present in an earlier split, dropped", path, cross)
        splits[split] = np.asarray(edges, dtype=np.int64).reshape(-1, 2)

    if splits["train"].shape[0] == 0:
        raise DataError(f"train split {train_path!r} contains no interactions")

    train_users = set(splits["train"][:, 0].tolist())
    train_items = set(splits["train"][:, 1].tolist())
    cold_users = set()
    cold_items = set()
    for split in ("val", "test"):
        if splits[split].size:
            cold_users.update(set(splits[split][:, 0].tolist()) - train_users)
            cold_items.update(set(splits[split][:, 1].tolist()) - train_items)
    if cold_users or cold_items:
        log.warning(
            "cold-start nodes kept: %d user(s), %d item(s) absent from train",
            len(cold_users), len(cold_items),
        )

    return InteractionDataset(
        num_users=len(user_ids),
        num_items=len(item_ids),
        train=splits["train"],
        val=splits["val"],
        test=splits["test"],
        user_ids=user_ids,
        item_ids=item_ids,
        cold_start_users=frozenset(cold_users),
        cold_start_items=frozenset(cold_items),
    )


def split_edges(edges, ratios=(0.7, 0.2, 0.1), seed=0):
    """Globally random-split an (E, 2) edge array into train/val/test parts.

    Ratios are normalized; the split is over edges, not per user.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    ratios = np.asarray(ratios, dtype=float)
    if len(ratios) != 3 or (ratios < 0).any() or ratios.sum() <= 0:
        raise DataError("ratios must be three nonnegative numbers with positive sum")
    ratios = ratios / ratios.sum()
    rng = np.random.default_rng(seed)
    order = rng.permutation(edges.shape[0])
    n_train = int(round(ratios[0] * len(order)))
    n_val = int(round(ratios[1] * len(order)))
    tr = edges[order[:n_train]]
    va = edges[order[n_train:n_train + n_val]]
    te = edges[order[n_train + n_val:]]
    return tr, va, te


def build_relation_matrix(dataset):
    """CSR matrix of the train edges with user/item degree arrays."""
    m, n = dataset.num_users, dataset.num_items
    e = dataset.train
    mat = sp.csr_matrix(
        (np.ones(e.shape[0], dtype=np.float64), (e[:, 0], e[:, 1])), shape=(m, n)
    )
    mat.sum_duplicates()
    mat.sort_indices()
    mat.data.fill(1.0)  # repeated edges collapse, the relation stays binary
    return RelationMatrix(
        matrix=mat,
        user_degrees=mat.getnnz(axis=1).astype(np.int64),
        item_degrees=mat.getnnz(axis=0).astype(np.int64),
    )


def assign_sparsity_groups(dataset, thresholds=DEFAULT_SPARSITY_THRESHOLDS):
    """Bucket users by train interaction count into half-open bands.

    With thresholds (5, 10) the bands are [0, 5], (5, 10], (10, inf).
    Empty thresholds put every user in a single group.
    """
    thresholds = tuple(thresholds)
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise DataError(f"thresholds must be strictly increasing, got {thresholds}")
    counts = np.zeros(dataset.num_users, dtype=np.int64)
    if dataset.train.size:
        np.add.at(counts, dataset.train[:, 0], 1)
    if not thresholds:
        groups = np.zeros(dataset.num_users, dtype=np.int64)
    else:
        groups = np.searchsorted(np.asarray(thresholds), counts, side="left")
    return SparsityGrouping(thresholds=thresholds, groups=groups)


def dataset_stats(dataset, grouping=None):
    m, n = dataset.num_users, dataset.num_items
    stats = {
        "num_users": m,
        "num_items": n,
        "nnz": {s: int(dataset.split(s).shape[0]) for s in ("train", "val", "test")},
        "density": float(dataset.train.shape[0]) / float(m * n) if m and n else 0.0,
        "cold_start_users": len(dataset.cold_start_users),
        "cold_start_items": len(dataset.cold_start_items),
    }
    if grouping is not None:
        sizes = np.bincount(grouping.groups, minlength=grouping.num_groups)
        stats["group_sizes"] = {
            grouping.label(g): int(sizes[g]) for g in range(grouping.num_groups)
        }
    return stats


def write_dataset_stats(dataset, path, grouping=None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dataset_stats(dataset, grouping), fh, indent=2)
        fh.write("\n")
