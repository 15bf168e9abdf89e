"""Per-epoch augmented views of the interaction graph.

Edge addition samples a share of users and grafts each one's top-k highest
scoring non-interacted items onto the graph as weighted pseudo-edges; the
original edges are never touched. Edge replacement samples users and swaps
the interacted item with the lowest effectiveness score for the most similar
non-interacted item, keeping the edge count constant. Every added item sits
exactly three hops from its user in the original graph.

Both functions are pure in (relation, scores, seed, epoch): the trainer feeds
them generators derived from the epoch so a view can be regenerated exactly.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

CRITERIA = ("user", "item")
KINDS = ("add", "rep", "original")

# stream labels for epoch-derived generators
STREAM_CRITERION = 0
STREAM_ADD = 1
STREAM_REP = 2


@dataclass
class AugmentationConfig:
    rho_add: float = 0.2  # share of users receiving pseudo-edges
    rho_rep: float = 0.2  # share of users with one edge replaced
    k: int = 5  # pseudo-edges per sampled user
    criterion_policy: str = "random"  # "random" | "user" | "item"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho_add <= 1.0 or not 0.0 <= self.rho_rep <= 1.0:
            raise ValueError("rho_add and rho_rep must lie in [0, 1]")
        if self.k < 1:
            raise ValueError("k must be a positive count")
        if self.criterion_policy not in ("random",) + CRITERIA:
            raise ValueError(f"unknown criterion policy {self.criterion_policy!r}")


@dataclass
class AugmentedGraph:
    kind: str  # "add" | "rep" | "original"
    relation: sp.csr_matrix  # weighted m x n, values in (0, 1]
    norm_adj: sp.csr_matrix  # symmetric (m+n) x (m+n)
    epoch: int = 0
    criterion: str | None = None


def epoch_rng(seed, epoch, stream=0):
    """Deterministic generator for one (seed, epoch, stream) triple."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(stream)]))


def select_criterion(rng, policy="random"):
    """Fair coin between the two score criteria unless pinned by policy."""
    if policy in CRITERIA:
        return policy
    if policy != "random":
        raise ValueError(f"unknown criterion policy {policy!r}")
    return "user" if rng.random() < 0.5 else "item"


def select_criteria(seed, epoch, policy="random"):
    """Per-epoch criteria for (addition, replacement), drawn independently."""
    rng = epoch_rng(seed, epoch, STREAM_CRITERION)
    return select_criterion(rng, policy), select_criterion(rng, policy)


def normalize_adjacency(relation):
    """Symmetrically normalized bipartite adjacency of a weighted relation.

    Degrees are weighted row/column sums; zero-degree nodes keep an all-zero
    row instead of dividing. The two off-diagonal blocks share one value
    array, so the result is symmetric down to the last bit.
    """
    r = relation.tocsr()
    m, n = r.shape
    user_deg = np.asarray(r.sum(axis=1)).ravel()
    item_deg = np.asarray(r.sum(axis=0)).ravel()
    su = np.divide(1.0, np.sqrt(user_deg), out=np.zeros(m), where=user_deg > 0)
    si = np.divide(1.0, np.sqrt(item_deg), out=np.zeros(n), where=item_deg > 0)
    scaled = (sp.diags(su) @ r @ sp.diags(si)).tocsr()
    adj = sp.bmat([[None, scaled], [scaled.T, None]], format="csr")
    adj.sort_indices()
    return adj


def original_graph(relation, epoch=0):
    return AugmentedGraph(
        kind="original",
        relation=relation.tocsr(),
        norm_adj=normalize_adjacency(relation),
        epoch=epoch,
    )


def _sample_users(num_users, ratio, rng):
    count = math.ceil(ratio * num_users)
    if count == 0:
        return np.empty(0, dtype=np.int64)
    users = rng.choice(num_users, size=count, replace=False)
    users.sort()  # deterministic merge order
    return users


def col_add(relation, scores, config, rng, epoch=0):
    """Add each sampled user's top-k addition-pool items as weighted edges.

    Tie scores break toward the lower item index; users with fewer than k
    scored candidates contribute what they have. New edge weights are the
    normalized scores, so the original edges (weight 1) are retained exactly.
    """
    r = relation.tocsr()
    r.sort_indices()
    m, n = r.shape
    users = _sample_users(m, config.rho_add, rng)
    pool = scores.add
    rows, cols, vals = [], [], []
    for u in users:
        lo, hi = pool.indptr[u], pool.indptr[u + 1]
        if lo == hi:
            continue
        idx = pool.indices[lo:hi]
        val = pool.data[lo:hi]
        take = min(config.k, hi - lo)
        order = np.argsort(-val, kind="stable")[:take]  # stable: low index wins ties
        rows.append(np.full(take, u, dtype=np.int64))
        cols.append(idx[order].astype(np.int64))
        vals.append(val[order])
    if rows:
        added = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(m, n),
        )
        aug = (r + added).tocsr()
    else:
        aug = r.copy()
    aug.sort_indices()
    return AugmentedGraph(
        kind="add",
        relation=aug,
        norm_adj=normalize_adjacency(aug),
        epoch=epoch,
        criterion=scores.criterion,
    )


def aligned_row_scores(matrix, row, cols):
    """Values of `matrix[row, cols]` where cols is sorted and covers the support."""
    lo, hi = matrix.indptr[row], matrix.indptr[row + 1]
    out = np.zeros(len(cols))
    if lo != hi:
        stored = matrix.indices[lo:hi]
        pos = np.searchsorted(cols, stored)
        out[pos] = matrix.data[lo:hi]
    return out


def col_rep(relation, scores, item_sim, config, rng, epoch=0):
    """Swap each sampled user's least effective edge for its nearest unseen item.

    The replacement is the non-interacted item most similar to the removed
    one; if no such item has positive similarity the user is skipped and the
    edge kept, so the total edge count never changes.
    """
    r = relation.tocsr()
    r.sort_indices()
    m, n = r.shape
    sim = item_sim.matrix
    users = _sample_users(m, config.rho_rep, rng)
    rem_u, rem_i, add_u, add_i = [], [], [], []
    for u in users:
        lo, hi = r.indptr[u], r.indptr[u + 1]
        if lo == hi:
            continue
        items = r.indices[lo:hi]
        eff = aligned_row_scores(scores.rep, u, items)
        removed = items[int(np.argmin(eff))]  # first min = lowest item index

        slo, shi = sim.indptr[removed], sim.indptr[removed + 1]
        if slo == shi:
            continue
        cand = sim.indices[slo:shi]
        cval = sim.data[slo:shi]
        pos = np.searchsorted(items, cand)
        pos[pos == len(items)] = len(items) - 1
        keep = (items[pos] != cand) & (cval > 0)
        if not keep.any():
            continue
        cand = cand[keep]
        cval = cval[keep]
        repl = cand[int(np.argmax(cval))]  # first max = lowest item index

        rem_u.append(u)
        rem_i.append(removed)
        add_u.append(u)
        add_i.append(repl)
    if rem_u:
        ones_rem = np.ones(len(rem_u))
        removed_m = sp.csr_matrix((ones_rem, (rem_u, rem_i)), shape=(m, n))
        added_m = sp.csr_matrix((np.ones(len(add_u)), (add_u, add_i)), shape=(m, n))
        aug = (r - removed_m + added_m).tocsr()
        aug.eliminate_zeros()
    else:
        aug = r.copy()
    aug.sort_indices()
    return AugmentedGraph(
        kind="rep",
        relation=aug,
        norm_adj=normalize_adjacency(aug),
        epoch=epoch,
        criterion=scores.criterion,
    )


def dump_relation_tsv(relation, path):
    """Write a (possibly augmented) relation as `user<TAB>item<TAB>weight` lines."""
    r = relation.tocoo()
    order = np.lexsort((r.col, r.row))
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, w in zip(r.row[order], r.col[order], r.data[order]):
            fh.write(f"{u}\t{i}\t{w:.17g}\n")


def load_relation_tsv(path, shape):
    rows, cols, vals = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            u, i, w = line.split("\t")
            rows.append(int(u))
            cols.append(int(i))
            vals.append(float(w))
    return sp.csr_matrix((vals, (rows, cols)), shape=shape)
