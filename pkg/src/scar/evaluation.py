"""Top-N evaluation under the all-ranking protocol.

Every item the user did not interact with in training is a candidate; ranked
lists exclude training items, break score ties toward the lower item index,
and users without relevant items in the evaluated split are left out of the
averages entirely. Recall and NDCG use binary relevance with the ideal DCG
truncated at min(N, number of relevant items).
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import encoder

DEFAULT_KS = (10, 20, 40)

_CHUNK = 512  # users scored per dense block


@dataclass
class EvalReport:
    ks: tuple
    recall: dict
    ndcg: dict
    num_users: int
    group_recall: dict = field(default_factory=dict)
    group_ndcg: dict = field(default_factory=dict)
    group_counts: dict = field(default_factory=dict)
    wall_time: float = 0.0
    per_user: dict | None = None

    def to_dict(self):
        out = {"num_users": self.num_users, "wall_time": self.wall_time}
        for n in self.ks:
            out[f"recall@{n}"] = self.recall[n]
            out[f"ndcg@{n}"] = self.ndcg[n]
        if self.group_counts:
            groups = {}
            for label in self.group_counts:
                entry = {"num_users": self.group_counts[label]}
                for n in self.ks:
                    entry[f"recall@{n}"] = self.group_recall[label][n]
                    entry[f"ndcg@{n}"] = self.group_ndcg[label][n]
                groups[label] = entry
            out["groups"] = groups
        return out


def rank_items(z, num_users, user, exclusion):
    """Full candidate ranking for one user: score desc, index asc on ties."""
    scores = z[user] @ z[num_users:].T
    candidates = np.setdiff1d(np.arange(len(scores)), np.asarray(exclusion, dtype=np.int64))
    order = np.lexsort((candidates, -scores[candidates]))
    return candidates[order]


def recall_at(ranked, relevant, n):
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    hits = sum(1 for item in ranked[:n] if item in relevant)
    return hits / len(relevant)


def ndcg_at(ranked, relevant, n):
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    dcg = sum(
        1.0 / np.log2(rank + 2)
        for rank, item in enumerate(ranked[:n])
        if item in relevant
    )
    ideal = sum(1.0 / np.log2(rank + 2) for rank in range(min(n, len(relevant))))
    return dcg / ideal


def _top_n(scores, n):
    """Indices of the n best scores, ties resolved toward the lower index.

    Masked entries (-inf) never qualify. Partitions first, then widens to
    every score tied with the boundary so the final lexsort sees all
    contenders.
    """
    valid = np.flatnonzero(scores > -np.inf)
    if len(valid) <= n:
        cand = valid
    else:
        vals = scores[valid]
        part = np.argpartition(-vals, n - 1)[:n]
        thr = vals[part].min()
        cand = valid[vals >= thr]
    order = np.lexsort((cand, -scores[cand]))
    return cand[order][:n]


def _split_items_by_user(edges, num_users):
    """List of sorted item arrays per user from an (E, 2) edge array."""
    out = [np.empty(0, dtype=np.int64)] * num_users
    if len(edges):
        order = np.argsort(edges[:, 0], kind="stable")
        users, starts = np.unique(edges[order, 0], return_index=True)
        bounds = np.append(starts, len(edges))
        for u, lo, hi in zip(users, bounds[:-1], bounds[1:]):
            out[u] = np.sort(edges[order[lo:hi], 1])
    return out


def evaluate(z, num_users, dataset, split="test", ks=DEFAULT_KS, grouping=None,
             per_user=False):
    """Averaged Recall@N / NDCG@N over all users with relevant items.

    Scores are produced in user chunks; training items are masked out before
    ranking so no ranked list can contain them.
    """
    start = time.perf_counter()
    ks = tuple(sorted(ks))
    n_max = ks[-1]
    num_items = z.shape[0] - num_users
    train_items = _split_items_by_user(dataset.train, num_users)
    relevant_items = _split_items_by_user(dataset.split(split), num_users)
    eligible = [
        u
        for u in range(num_users)
        if len(relevant_items[u]) and len(train_items[u]) < num_items
    ]

    recalls = {n: [] for n in ks}
    ndcgs = {n: [] for n in ks}
    users_order = []
    per_user_rows = {} if per_user else None
    for lo in range(0, len(eligible), _CHUNK):
        chunk = np.asarray(eligible[lo : lo + _CHUNK], dtype=np.int64)
        scores = encoder.score_all(z, num_users, chunk)
        for row, u in enumerate(chunk):
            s = scores[row]
            s[train_items[u]] = -np.inf
            top = _top_n(s, n_max)
            rel = relevant_items[u]
            hit_ranks = np.flatnonzero(np.isin(top, rel, assume_unique=True))
            users_order.append(u)
            row_metrics = {}
            for n in ks:
                hits_n = hit_ranks[hit_ranks < n]
                rec = len(hits_n) / len(rel)
                dcg = float(np.sum(1.0 / np.log2(hits_n + 2)))
                ideal = np.sum(1.0 / np.log2(np.arange(min(n, len(rel))) + 2))
                nd = dcg / ideal
                recalls[n].append(rec)
                ndcgs[n].append(nd)
                row_metrics[f"recall@{n}"] = rec
                row_metrics[f"ndcg@{n}"] = nd
            if per_user:
                per_user_rows[int(u)] = row_metrics

    count = len(users_order)
    report = EvalReport(
        ks=ks,
        recall={n: float(np.mean(recalls[n])) if count else 0.0 for n in ks},
        ndcg={n: float(np.mean(ndcgs[n])) if count else 0.0 for n in ks},
        num_users=count,
        per_user=per_user_rows,
    )
    if grouping is not None and count:
        users_arr = np.asarray(users_order)
        group_of = grouping.groups[users_arr]
        for g in range(grouping.num_groups):
            mask = group_of == g
            label = grouping.label(g)
            report.group_counts[label] = int(mask.sum())
            report.group_recall[label] = {
                n: float(np.mean(np.asarray(recalls[n])[mask])) if mask.any() else 0.0
                for n in ks
            }
            report.group_ndcg[label] = {
                n: float(np.mean(np.asarray(ndcgs[n])[mask])) if mask.any() else 0.0
                for n in ks
            }
    report.wall_time = time.perf_counter() - start
    return report


def evaluate_with_graph(e0, graph, dataset, num_layers, split="test",
                        ks=DEFAULT_KS, grouping=None, per_user=False):
    """Evaluate a frozen embedding table through an alternate adjacency.

    Supports the train-on-original / rank-through-augmented comparison: the
    readout is recomputed with the supplied graph, nothing is retrained.
    """
    adj = getattr(graph, "norm_adj", graph)
    if adj.shape[0] != e0.shape[0]:
        raise ValueError(
            f"adjacency is {adj.shape[0]} nodes but embedding table has {e0.shape[0]} rows"
        )
    m = dataset.num_users
    if e0.shape[0] != m + dataset.num_items:
        raise ValueError("embedding table does not match dataset dimensions")
    z = encoder.forward(adj, e0, num_layers)
    return evaluate(z, m, dataset, split=split, ks=ks, grouping=grouping,
                    per_user=per_user)
