"""Per-(user, item) effectiveness scores derived from behavioral similarity.

Two criteria exist for how relevant a candidate item is to a user:

* user-based: how similar the user is to the users who interacted with the
  item, scaled by 1/d(item);
* item-based: how similar the item is to the items the user interacted with,
  scaled by 1/d(user).

Raw scores are min-max normalized per user over the full dense row (implicit
zeros count toward the minimum), then split into the addition pool (scores on
non-interacted pairs) and the interacted-edge pool.
"""

import logging
import os
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .similarity import (
    METRICS,
    _METRIC_TAG,
    _read_array,
    _read_csr,
    _read_exact,
    _write_csr,
    compute_similarity,
    relation_hash,
)

log = logging.getLogger(__name__)

CRITERIA = ("user", "item")

_MAGIC = b"SCAREFF1"


@dataclass
class EffectivenessScores:
    criterion: str  # "user" | "item"
    add: sp.csr_matrix  # normalized scores on non-interacted pairs
    rep: sp.csr_matrix  # normalized scores on interacted pairs
    row_max: np.ndarray  # per-user raw max used by the normalization
    row_min: np.ndarray  # per-user raw min (dense-row semantics)


def user_based_scores(user_sim, relation):
    """Raw m x n scores: similarity mass of each item's audience to the user."""
    r = relation.tocsr()
    if user_sim.matrix.shape[0] != r.shape[0]:
        raise ValueError(
            f"user similarity is {user_sim.matrix.shape}, relation is {r.shape}"
        )
    item_deg = r.getnnz(axis=0).astype(np.float64)
    w = np.divide(1.0, item_deg, out=np.zeros_like(item_deg), where=item_deg > 0)
    raw = (user_sim.matrix @ r) @ sp.diags(w)
    raw.sort_indices()
    return raw.tocsr()


def item_based_scores(item_sim, relation):
    """Raw m x n scores: similarity mass of the user's history to the item."""
    r = relation.tocsr()
    if item_sim.matrix.shape[0] != r.shape[1]:
        raise ValueError(
            f"item similarity is {item_sim.matrix.shape}, relation is {r.shape}"
        )
    user_deg = r.getnnz(axis=1).astype(np.float64)
    w = np.divide(1.0, user_deg, out=np.zeros_like(user_deg), where=user_deg > 0)
    raw = sp.diags(w) @ (r @ item_sim.matrix)
    raw.sort_indices()
    return raw.tocsr()


def normalize_and_split(raw, relation, criterion="user"):
    """Min-max normalize each user's row, then split by interaction status.

    The min/max range over all n items, so with sparse nonnegative scores the
    minimum is 0 unless a row is fully dense. Rows with max == min normalize
    to all-zeros, removing the user from the addition pool.
    """
    raw = raw.tocsr()
    raw.eliminate_zeros()
    m, n = raw.shape
    r = relation.tocsr()

    counts = np.diff(raw.indptr)
    row_max = np.zeros(m)
    row_min = np.zeros(m)
    # segment-wise max/min over stored values per row
    if raw.nnz:
        rows = np.repeat(np.arange(m), counts)
        np.maximum.at(row_max, rows, raw.data)
        stored_min = np.full(m, np.inf)
        np.minimum.at(stored_min, rows, raw.data)
        full = counts == n  # only fully dense rows can have a positive min
        row_min[full] = stored_min[full]
    denom = row_max - row_min
    ok = denom > 0

    norm = raw.copy()
    if raw.nnz:
        rows = np.repeat(np.arange(m), counts)
        scale = np.divide(1.0, denom, out=np.zeros_like(denom), where=ok)
        norm.data = (raw.data - row_min[rows]) * scale[rows]
        norm.data[~ok[rows]] = 0.0
    norm.eliminate_zeros()

    pattern = r.copy()
    pattern.data = np.ones_like(pattern.data)
    rep = norm.multiply(pattern).tocsr()
    rep.eliminate_zeros()
    add = (norm - rep).tocsr()
    add.eliminate_zeros()
    add.sort_indices()
    rep.sort_indices()
    return EffectivenessScores(
        criterion=criterion, add=add, rep=rep, row_max=row_max, row_min=row_min
    )


def compute_effectiveness(relation, user_sim, item_sim):
    """Both criteria's normalized and split score matrices."""
    eff_user = normalize_and_split(user_based_scores(user_sim, relation), relation, "user")
    eff_item = normalize_and_split(item_based_scores(item_sim, relation), relation, "item")
    return eff_user, eff_item


def _write_scores(fh, eff):
    _write_csr(fh, eff.add)
    _write_csr(fh, eff.rep)
    fh.write(np.asarray(eff.row_max, dtype="<f8").tobytes())
    fh.write(np.asarray(eff.row_min, dtype="<f8").tobytes())


def _read_scores(fh, criterion, m):
    add = _read_csr(fh)
    rep = _read_csr(fh)
    row_max = _read_array(fh, np.float64, m)
    row_min = _read_array(fh, np.float64, m)
    return EffectivenessScores(criterion, add, rep, row_max, row_min)


def write_effectiveness_cache(path, eff_user, eff_item, content_hash):
    m, n = eff_user.add.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<QQ", m, n))
        _write_scores(fh, eff_user)
        _write_scores(fh, eff_item)
        fh.write(content_hash)


def read_effectiveness_cache(path, content_hash):
    try:
        with open(path, "rb") as fh:
            if _read_exact(fh, 8) != _MAGIC:
                return None
            m, n = struct.unpack("<QQ", _read_exact(fh, 16))
            eff_user = _read_scores(fh, "user", m)
            eff_item = _read_scores(fh, "item", m)
            stored_hash = _read_exact(fh, 32)
            if fh.read(1):
                return None
        if stored_hash != content_hash:
            return None
        if eff_user.add.shape != (m, n) or eff_item.add.shape != (m, n):
            return None
        return eff_user, eff_item
    except (OSError, EOFError, struct.error, ValueError):
        return None


def cache_path(cache_dir, metric):
    return os.path.join(cache_dir, f"eff-{metric}.bin")


def precompute_effectiveness(relation, user_sim, item_sim, metric="aa", cache_dir=None):
    """Compute (or reload) both criteria's scores, keyed by hash of (R, metric)."""
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    content_hash = relation_hash(relation, extra=bytes([_METRIC_TAG[metric]]))
    path = cache_path(cache_dir, metric) if cache_dir else None
    if path and os.path.exists(path):
        cached = read_effectiveness_cache(path, content_hash)
        if cached is not None:
            return cached
        log.warning("effectiveness cache %s is stale or corrupted, recomputing", path)
    eff_user, eff_item = compute_effectiveness(relation, user_sim, item_sim)
    if path:
        os.makedirs(cache_dir, exist_ok=True)
        write_effectiveness_cache(path, eff_user, eff_item, content_hash)
    return eff_user, eff_item


def precompute_all(relation, metric="aa", cache_dir=None):
    """Similarities plus effectiveness scores, all cache-backed."""
    from .similarity import precompute_cache

    user_sim, item_sim = precompute_cache(relation, metric, cache_dir)
    eff_user, eff_item = precompute_effectiveness(
        relation, user_sim, item_sim, metric, cache_dir
    )
    return user_sim, item_sim, eff_user, eff_item
