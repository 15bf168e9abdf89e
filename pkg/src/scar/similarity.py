"""Same-type behavioral similarity matrices from the bipartite interaction graph.

Adamic-Adar is the default metric; Jaccard and raw common-neighbor counts are
kept for ablation. All three are computed as sparse products over the binary
relation matrix, stay exactly symmetric, and carry a zero diagonal.
"""

import hashlib
import logging
import os
import struct
import sys
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

METRICS = ("aa", "jc", "cn")
SIDES = ("user", "item")

_MAGIC = b"SCARSIM1"
_METRIC_TAG = {m: i for i, m in enumerate(METRICS)}
_SIDE_TAG = {s: i for i, s in enumerate(SIDES)}


@dataclass
class SimilarityMatrix:
    side: str  # "user" (m x m) or "item" (n x n)
    metric: str  # "aa" | "jc" | "cn"
    matrix: sp.csr_matrix


def _neighbor_matrix(relation, side):
    """Rows = nodes of the requested side, columns = their 1-hop neighbors."""
    if side == "user":
        return relation.tocsr()
    if side == "item":
        return relation.T.tocsr()
    raise ValueError(f"side must be one of {SIDES}, got {side!r}")


def _finish(mat, side, metric):
    mat = mat.tocsr()
    mat.setdiag(0.0)
    mat.eliminate_zeros()
    mat.sort_indices()
    return SimilarityMatrix(side=side, metric=metric, matrix=mat)


def adamic_adar(relation, side):
    """Common neighbors weighted by inverse log degree of the intermediary.

    Natural log; intermediaries of degree <= 1 contribute nothing (log 1 = 0
    would otherwise divide by zero).
    """
    b = _neighbor_matrix(relation, side)
    deg = b.getnnz(axis=0).astype(np.float64)
    w = np.zeros_like(deg)
    mask = deg > 1
    w[mask] = 1.0 / np.log(deg[mask])
    out = (b @ sp.diags(w)) @ b.T
    return _finish(out, side, "aa")


def common_neighbors(relation, side):
    b = _neighbor_matrix(relation, side)
    out = (b @ b.T).astype(np.float64)
    return _finish(out, side, "cn")


def jaccard(relation, side):
    """Common-neighbor count over union size; 0 when both neighborhoods are empty."""
    b = _neighbor_matrix(relation, side)
    inter = (b @ b.T).tocsr()
    inter.setdiag(0.0)
    inter.eliminate_zeros()
    deg = b.getnnz(axis=1).astype(np.float64)
    rows = np.repeat(np.arange(inter.shape[0]), np.diff(inter.indptr))
    union = deg[rows] + deg[inter.indices] - inter.data
    out = inter.copy()
    out.data = inter.data / union  # stored entries have inter >= 1, so union > 0
    return _finish(out, side, "jc")


_METRIC_FN = {"aa": adamic_adar, "jc": jaccard, "cn": common_neighbors}


def compute_similarity(relation, side, metric="aa"):
    if metric not in _METRIC_FN:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    return _METRIC_FN[metric](relation, side)


def relation_hash(relation, extra=b""):
    """SHA-256 over the CSR structure of a binary relation matrix."""
    mat = relation.tocsr()
    h = hashlib.sha256()
    h.update(struct.pack("<QQ", mat.shape[0], mat.shape[1]))
    h.update(np.asarray(mat.indptr, dtype="<u8").tobytes())
    h.update(np.asarray(mat.indices, dtype="<u4").tobytes())
    h.update(extra)
    return h.digest()


def _write_csr(fh, mat):
    fh.write(struct.pack("<QQQ", mat.shape[0], mat.shape[1], mat.nnz))
    fh.write(np.asarray(mat.indptr, dtype="<u8").tobytes())
    fh.write(np.asarray(mat.indices, dtype="<u4").tobytes())
    fh.write(np.asarray(mat.data, dtype="<f8").tobytes())


def _read_exact(fh, count):
    buf = fh.read(count)
    if len(buf) != count:
        raise EOFError("truncated cache file")
    return buf


def _read_array(fh, dtype, count):
    """Read count little-endian items straight into a fresh writable array."""
    arr = np.empty(count, dtype=dtype)
    view = memoryview(arr).cast("B")
    if fh.readinto(view) != len(view):
        raise EOFError("truncated cache file")
    if sys.byteorder != "little":
        arr.byteswap(inplace=True)
    return arr


def _read_csr(fh):
    nrows, ncols, nnz = struct.unpack("<QQQ", _read_exact(fh, 24))
    # int32 indptr matches the u4 indices so scipy adopts all three arrays
    # without another copy
    indptr = _read_array(fh, np.int64, nrows + 1).astype(np.int32)
    indices = _read_array(fh, np.int32, nnz)
    data = _read_array(fh, np.float64, nnz)
    return sp.csr_matrix((data, indices, indptr), shape=(nrows, ncols))


def write_similarity_cache(path, sim, content_hash):
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BB", _METRIC_TAG[sim.metric], _SIDE_TAG[sim.side]))
        _write_csr(fh, sim.matrix)
        fh.write(content_hash)


def read_similarity_cache(path, metric, side, content_hash):
    """Load a cached similarity matrix; None on any mismatch or corruption."""
    try:
        with open(path, "rb") as fh:
            if _read_exact(fh, 8) != _MAGIC:
                return None
            mtag, stag = struct.unpack("<BB", _read_exact(fh, 2))
            if mtag != _METRIC_TAG[metric] or stag != _SIDE_TAG[side]:
                return None
            mat = _read_csr(fh)
            stored_hash = _read_exact(fh, 32)
            if fh.read(1):
                return None  # trailing bytes
        if stored_hash != content_hash:
            return None
        return SimilarityMatrix(side=side, metric=metric, matrix=mat)
    except (OSError, EOFError, struct.error, ValueError):
        return None


def cache_path(cache_dir, metric, side):
    return os.path.join(cache_dir, f"sim-{metric}-{side}.bin")


def precompute_cache(relation, metric="aa", cache_dir=None):
    """Compute (or reload) the user-user and item-item similarity matrices.

    With a cache directory, matrices are persisted per (metric, side) and keyed
    by a content hash of the relation matrix; a stale or corrupted file is
    recomputed and overwritten.
    """
    content_hash = relation_hash(relation)
    out = {}
    for side in SIDES:
        sim = None
        path = cache_path(cache_dir, metric, side) if cache_dir else None
        if path and os.path.exists(path):
            sim = read_similarity_cache(path, metric, side, content_hash)
            if sim is None:
                log.warning("similarity cache %s is stale or corrupted, recomputing", path)
        if sim is None:
            sim = compute_similarity(relation, side, metric)
            if path:
                os.makedirs(cache_dir, exist_ok=True)
                write_similarity_cache(path, sim, content_hash)
        out[side] = sim
    return out["user"], out["item"]
