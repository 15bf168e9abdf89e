"""Release gates. One test per shipping criterion, one verdict line each.

Criteria 1-4 and 7 run anywhere. Criteria 5, 6 and 8 need the LastFM
listening data on disk (see scripts/prepare_lastfm.py) and skip with an
explanation when it is absent.
"""

import math
import shutil
import time

import numpy as np
import pytest
import scipy.sparse as sp

from scar import augmentation, data, effectiveness, encoder, evaluation, objectives, similarity, trainer
from scar.augmentation import AugmentationConfig, epoch_rng
from scar.trainer import HyperParams

from conftest import dataset_from_relation, random_relation
from test_effectiveness import dense_scores


def _report(criterion, ok, detail):
    print(f"CRITERION {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def dense_similarity(rel, side, metric):
    """All-pairs reference on dense arrays; no sparsity shortcuts."""
    rows = rel.toarray() if side == "user" else rel.toarray().T
    deg = rows.sum(axis=0)
    if metric == "cn":
        out = rows @ rows.T
    elif metric == "aa":
        w = np.where(deg > 1, 1.0 / np.log(np.maximum(deg, 2.0)), 0.0)
        out = (rows * w) @ rows.T
    else:
        inter = rows @ rows.T
        sizes = rows.sum(axis=1)
        union = sizes[:, None] + sizes[None, :] - inter
        out = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    np.fill_diagonal(out, 0.0)
    return out


def _criterion_graphs(count=50, seed=20260819):
    rng = np.random.default_rng(seed)
    graphs = []
    for _ in range(count):
        m = int(rng.integers(5, 51))
        n = int(rng.integers(5, 51))
        density = float(rng.uniform(0.03, 0.2))
        graphs.append(random_relation(rng, m, n, density=density, min_degree=1))
    return graphs


def test_criterion_1_similarity_matches_dense_brute_force():
    graphs = _criterion_graphs()
    tic = time.perf_counter()
    worst = 0.0
    for rel in graphs:
        for metric in similarity.METRICS:
            for side in similarity.SIDES:
                got = similarity.compute_similarity(rel, side, metric).matrix.toarray()
                want = dense_similarity(rel, side, metric)
                scale = np.maximum(np.abs(want), 1.0)
                worst = max(worst, float(np.max(np.abs(got - want) / scale)))
                np.testing.assert_allclose(
                    got, want, rtol=1e-12, atol=1e-12,
                    err_msg=f"{metric}/{side}",
                )
    took = time.perf_counter() - tic
    _report(
        1,
        took < 5.0,
        f"{len(graphs)} graphs x 3 metrics x 2 sides, max rel err {worst:.2e} "
        f"(tol 1e-12), {took:.2f} s (budget 5 s)",
    )


def test_criterion_2_effectiveness_matches_dense_brute_force():
    graphs = _criterion_graphs()
    worst = 0.0
    argmax_checked = 0
    for rel in graphs:
        user_sim = similarity.adamic_adar(rel, "user")
        item_sim = similarity.adamic_adar(rel, "item")
        eff_user, eff_item = effectiveness.compute_effectiveness(rel, user_sim, item_sim)
        for criterion, eff in (("user", eff_user), ("item", eff_item)):
            raw, want_add, want_rep = dense_scores(rel, criterion)
            got_add = eff.add.toarray()
            got_rep = eff.rep.toarray()
            worst = max(
                worst,
                float(np.max(np.abs(got_add - want_add))),
                float(np.max(np.abs(got_rep - want_rep))),
            )
            np.testing.assert_allclose(got_add, want_add, atol=1e-10, rtol=0)
            np.testing.assert_allclose(got_rep, want_rep, atol=1e-10, rtol=0)
            # min-max must not move each row's winner
            combined = got_add + got_rep
            for u in range(raw.shape[0]):
                row = raw[u]
                if row.max() <= row.min():
                    continue  # degenerate row normalizes to zeros
                order = np.sort(row)
                gap = order[-1] - order[-2]
                if gap <= 1e-9 * max(order[-1], 1.0):
                    continue  # near-tied winners can swap inside float noise
                assert combined[u].argmax() == row.argmax()
                argmax_checked += 1
    _report(
        2,
        True,
        f"{len(graphs)} graphs x 2 criteria, max abs err {worst:.2e} (tol 1e-10), "
        f"argmax preserved on {argmax_checked} rows",
    )


def test_criterion_3_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(31)
    h = 1e-5
    checks = 0
    worst = 0.0

    def fd_rel_err(fn, e0, grad, direction):
        up = fn(e0 + h * direction)
        dn = fn(e0 - h * direction)
        fd = (up - dn) / (2 * h)
        analytic = float((grad * direction).sum())
        return abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-10)

    for trial in range(20):
        m = int(rng.integers(3, 11))
        n = int(rng.integers(3, 11 if m + 10 <= 20 else 21 - m))
        d = int(rng.integers(2, 5))
        layers = int(rng.integers(0, 4))
        rel = random_relation(rng, m, n, density=0.3, min_degree=1)
        _, item_sim, eff_user, eff_item = effectiveness.precompute_all(rel, "aa", None)
        cfg = AugmentationConfig(rho_add=0.5, rho_rep=0.5, k=2)
        orig = augmentation.original_graph(rel)
        g_add = augmentation.col_add(rel, eff_user, cfg, epoch_rng(trial, 0, 1))
        g_rep = augmentation.col_rep(rel, eff_item, item_sim, cfg, epoch_rng(trial, 0, 2))
        e0 = rng.standard_normal((m + n, d)) * 0.5
        batch = trainer.sample_bpr_batch(rel, 16, np.random.default_rng(trial))

        def bpr_head(table):
            z = encoder.forward(orig.norm_adj, table, layers)
            return objectives.bpr_loss(z, m, batch)[0]

        z = encoder.forward(orig.norm_adj, e0, layers)
        _, grad_z = objectives.bpr_loss(z, m, batch)
        bpr_grad = encoder.backward(orig.norm_adj, layers, grad_z)

        def nce_head(table):
            za = encoder.forward(g_add.norm_adj, table, layers)
            zr = encoder.forward(g_rep.norm_adj, table, layers)
            return objectives.infonce_loss(
                za, zr, m, batch.users, batch.pos_items, tau=0.4
            )[0]

        za = encoder.forward(g_add.norm_adj, e0, layers)
        zr = encoder.forward(g_rep.norm_adj, e0, layers)
        _, g_a, g_b, _ = objectives.infonce_loss(
            za, zr, m, batch.users, batch.pos_items, tau=0.4
        )
        nce_grad = encoder.backward(g_add.norm_adj, layers, g_a)
        nce_grad += encoder.backward(g_rep.norm_adj, layers, g_b)

        def reg_head(table):
            za = encoder.forward(g_add.norm_adj, table, layers)
            zr = encoder.forward(g_rep.norm_adj, table, layers)
            return objectives.reg_bce_loss(za, zr, m, batch)[0]

        _, r_a, r_b = objectives.reg_bce_loss(za, zr, m, batch)
        reg_grad = encoder.backward(g_add.norm_adj, layers, r_a)
        reg_grad += encoder.backward(g_rep.norm_adj, layers, r_b)

        rows = batch.touched_rows(m)

        def l2_head(table):
            return objectives.l2_penalty(table, rows)[0]

        l2_grad = np.zeros_like(e0)
        l2_grad[rows] = 2.0 * e0[rows]

        for fn, grad in (
            (bpr_head, bpr_grad),
            (nce_head, nce_grad),
            (reg_head, reg_grad),
            (l2_head, l2_grad),
        ):
            err = fd_rel_err(fn, e0, grad, rng.standard_normal(e0.shape))
            worst = max(worst, err)
            assert err < 1e-5, f"trial {trial}: rel err {err:.2e}"
            checks += 1
    _report(
        3,
        True,
        f"20 instances x 4 heads = {checks} checks, worst rel err {worst:.2e} "
        f"(tol 1e-5, h = 1e-5)",
    )


def _items_at_distance_3(rel, user):
    """Layered BFS on the bipartite graph; items exactly three hops out."""
    r = rel.tocsr()
    rt = r.T.tocsr()
    first = set(r.indices[r.indptr[user]:r.indptr[user + 1]].tolist())
    second = set()
    for i in first:
        second.update(rt.indices[rt.indptr[i]:rt.indptr[i + 1]].tolist())
    second.discard(user)
    third = set()
    for v in second:
        third.update(r.indices[r.indptr[v]:r.indptr[v + 1]].tolist())
    return third - first


def test_criterion_4_augmentation_invariants_hold():
    rng = np.random.default_rng(41)
    cases = 0
    violations = []
    for trial in range(250):
        m = int(rng.integers(5, 31))
        n = int(rng.integers(5, 31))
        rel = random_relation(
            rng, m, n, density=float(rng.uniform(0.08, 0.25)), min_degree=1
        )
        _, item_sim, eff_user, eff_item = effectiveness.precompute_all(rel, "aa", None)
        cfg = AugmentationConfig(
            rho_add=float(rng.uniform(0.2, 1.0)),
            rho_rep=float(rng.uniform(0.2, 1.0)),
            k=int(rng.integers(1, 4)),
        )
        for criterion, eff in (("user", eff_user), ("item", eff_item)):
            g_add = augmentation.col_add(rel, eff, cfg, epoch_rng(trial, 0, 1))
            cases += 1
            if (g_add.norm_adj != g_add.norm_adj.T).nnz != 0:
                violations.append((trial, criterion, "add adjacency asymmetric"))
            if (g_add.relation.multiply(rel) != rel).nnz != 0:
                violations.append((trial, criterion, "add modified original edges"))
            added = (g_add.relation - rel).tocsr()
            added.eliminate_zeros()
            if (added.data < 0).any():
                violations.append((trial, criterion, "add removed an edge"))
            if np.diff(added.indptr).max(initial=0) > cfg.k:
                violations.append((trial, criterion, "add exceeded k per user"))
            if (np.diff(added.indptr) > 0).sum() > math.ceil(cfg.rho_add * m):
                violations.append((trial, criterion, "add touched too many users"))
            coo = added.tocoo()
            reach = {}
            for u, i in zip(coo.row, coo.col):
                if u not in reach:
                    reach[u] = _items_at_distance_3(rel, u)
                if i not in reach[u]:
                    violations.append((trial, criterion, f"edge ({u},{i}) not 3-hop"))

            g_rep = augmentation.col_rep(
                rel, eff, item_sim, cfg, epoch_rng(trial, 0, 2)
            )
            cases += 1
            if (g_rep.norm_adj != g_rep.norm_adj.T).nnz != 0:
                violations.append((trial, criterion, "rep adjacency asymmetric"))
            if g_rep.relation.nnz != rel.nnz:
                violations.append((trial, criterion, "rep changed edge count"))
            delta = (g_rep.relation - rel).tocsr()
            delta.eliminate_zeros()
            if np.diff(delta.indptr).max(initial=0) > 2:
                violations.append((trial, criterion, "rep moved >1 edge for a user"))
            dcoo = delta.tocoo()
            dense = rel.toarray()
            for u, i, v in zip(dcoo.row, dcoo.col, dcoo.data):
                if v < 0 and dense[u, i] != 1.0:
                    violations.append((trial, criterion, "rep removed a non-edge"))
                if v > 0 and dense[u, i] != 0.0:
                    violations.append((trial, criterion, "rep added an existing edge"))
    _report(
        4,
        cases >= 1000 and not violations,
        f"{cases} randomized cases, {len(violations)} violation(s)"
        + (f"; first: {violations[0]}" if violations else ""),
    )


def _exact_random_bipartite(rng, m, n, edges):
    idx = np.unique(rng.integers(0, m * n, size=int(edges * 1.1)))
    while idx.size < edges:
        extra = rng.integers(0, m * n, size=edges)
        idx = np.unique(np.concatenate([idx, extra]))
    idx = idx[:edges]
    rows = idx // n
    cols = idx % n
    return sp.csr_matrix(
        (np.ones(edges), (rows, cols)), shape=(m, n)
    )


def test_criterion_7_augmentation_scales_and_caches(tmp_path):
    rng = np.random.default_rng(71)
    cfg = AugmentationConfig(rho_add=0.2, rho_rep=0.2, k=5)
    times = {}
    cache_ratio = None
    for edges in (100_000, 200_000, 400_000):
        m = n = edges // 4
        rel = _exact_random_bipartite(rng, m, n, edges)
        if edges == 100_000:
            cache_dir = str(tmp_path / "cache")
            colds, warms = [], []
            for _ in range(3):
                shutil.rmtree(cache_dir, ignore_errors=True)
                tic = time.perf_counter()
                scores = effectiveness.precompute_all(rel, "aa", cache_dir)
                colds.append(time.perf_counter() - tic)
                tic = time.perf_counter()
                effectiveness.precompute_all(rel, "aa", cache_dir)
                warms.append(time.perf_counter() - tic)
            cache_ratio = float(np.median(colds) / np.median(warms))
        else:
            scores = effectiveness.precompute_all(rel, "aa", None)
        _, item_sim, eff_user, _ = scores
        reps = []
        for rep in range(3):
            tic = time.perf_counter()
            augmentation.col_add(rel, eff_user, cfg, epoch_rng(0, rep, 1))
            augmentation.col_rep(rel, eff_user, item_sim, cfg, epoch_rng(0, rep, 2))
            reps.append(time.perf_counter() - tic)
        times[edges] = float(np.median(reps))
    ratio_1 = times[200_000] / times[100_000]
    ratio_2 = times[400_000] / times[200_000]
    ok = ratio_1 <= 2.5 and ratio_2 <= 2.5 and cache_ratio >= 10.0
    _report(
        7,
        ok,
        f"per-epoch augmentation {times[100_000]:.3f}/{times[200_000]:.3f}/"
        f"{times[400_000]:.3f} s at 100k/200k/400k edges "
        f"(doubling ratios {ratio_1:.2f}, {ratio_2:.2f}, cap 2.5); "
        f"cache speedup {cache_ratio:.1f}x (floor 10x)",
    )


# ---------------------------------------------------------------------------
# LastFM-gated criteria. These train real models; they only run when the
# prepared splits exist (scripts/prepare_lastfm.py) and skip otherwise.
# ---------------------------------------------------------------------------

_VARIANTS = {
    "full": {},
    "plain": {"lambda_infonce": 0.0, "lambda_reg": 0.0},
    "no_add": {"rho_add": 0.0},
    "no_rep": {"rho_rep": 0.0},
    "no_reg": {"lambda_reg": 0.0},
}


def _lastfm_model(dataset, cache, variant, seed, tmp_path_factory):
    key = (variant, seed)
    if key in cache:
        return cache[key]
    if "cache_dir" not in cache:
        cache["cache_dir"] = str(tmp_path_factory.mktemp("lastfm-cache"))
    hyper = HyperParams(seed=seed, **_VARIANTS[variant])
    tic = time.perf_counter()
    state, history = trainer.train(dataset, hyper, cache_dir=cache["cache_dir"])
    wall = time.perf_counter() - tic
    rel = data.build_relation_matrix(dataset).matrix
    z = encoder.forward(
        augmentation.original_graph(rel).norm_adj, state.e0, hyper.num_layers
    )
    report = evaluation.evaluate(z, dataset.num_users, dataset, split="test", ks=(20,))
    cache[key] = {
        "state": state,
        "hyper": hyper,
        "recall20": report.recall[20],
        "wall": wall,
        "epochs": len(history),
    }
    return cache[key]


def test_criterion_5_lastfm_beats_plain_baseline(
    lastfm_dataset, trained_cache, tmp_path_factory
):
    full = _lastfm_model(lastfm_dataset, trained_cache, "full", 0, tmp_path_factory)
    plain = _lastfm_model(lastfm_dataset, trained_cache, "plain", 0, tmp_path_factory)
    ok = (
        full["recall20"] >= 1.4 * plain["recall20"]
        and full["recall20"] >= 0.21
        and full["wall"] <= 1800.0
    )
    _report(
        5,
        ok,
        f"test recall@20 full {full['recall20']:.4f} vs plain {plain['recall20']:.4f} "
        f"(need >= 1.4x and >= 0.21), trained in {full['wall']:.0f} s "
        f"(budget 1800 s, {full['epochs']} epochs)",
    )


def test_criterion_6_lastfm_graph_swap_stability(
    lastfm_dataset, trained_cache, tmp_path_factory
):
    model = _lastfm_model(lastfm_dataset, trained_cache, "full", 0, tmp_path_factory)
    e0 = model["state"].e0
    layers = model["hyper"].num_layers
    rel = data.build_relation_matrix(lastfm_dataset).matrix
    _, item_sim, eff_user, eff_item = effectiveness.precompute_all(
        rel, "aa", trained_cache["cache_dir"]
    )
    eff = {"user": eff_user, "item": eff_item}
    base = evaluation.evaluate_with_graph(
        e0, augmentation.original_graph(rel), lastfm_dataset, layers, ks=(20,)
    ).recall[20]
    cfg = AugmentationConfig(rho_add=0.1, rho_rep=0.1, k=5)
    max_change = 0.0
    removal_wins = 0
    for seed in range(5):
        crit_add, crit_rep = augmentation.select_criteria(seed, 0, "random")
        g_add = augmentation.col_add(rel, eff[crit_add], cfg, epoch_rng(seed, 0, 1))
        g_rep = augmentation.col_rep(
            rel, eff[crit_rep], item_sim, cfg, epoch_rng(seed, 0, 2)
        )
        r_add = evaluation.evaluate_with_graph(
            e0, g_add, lastfm_dataset, layers, ks=(20,)
        ).recall[20]
        r_rep = evaluation.evaluate_with_graph(
            e0, g_rep, lastfm_dataset, layers, ks=(20,)
        ).recall[20]
        max_change = max(
            max_change, abs(r_add - base) / base, abs(r_rep - base) / base
        )
        # control arm: delete 10 percent of train edges uniformly at random
        rng = np.random.default_rng(seed)
        coo = rel.tocoo()
        keep = np.ones(rel.nnz, dtype=bool)
        keep[rng.choice(rel.nnz, size=rel.nnz // 10, replace=False)] = False
        removed = sp.csr_matrix(
            (coo.data[keep], (coo.row[keep], coo.col[keep])), shape=rel.shape
        )
        r_removed = evaluation.evaluate_with_graph(
            e0, augmentation.original_graph(removed), lastfm_dataset, layers, ks=(20,)
        ).recall[20]
        if (base - r_removed) > abs(base - r_add) and (base - r_removed) > abs(
            base - r_rep
        ):
            removal_wins += 1
    ok = max_change < 0.05 and removal_wins >= 4
    _report(
        6,
        ok,
        f"max swap change {max_change:.3%} (cap 5%); random removal degraded more "
        f"in {removal_wins}/5 seeds (need >= 4)",
    )


def test_criterion_8_lastfm_ablations_do_not_beat_full_model(
    lastfm_dataset, trained_cache, tmp_path_factory
):
    seeds = range(5)
    full = [
        _lastfm_model(lastfm_dataset, trained_cache, "full", s, tmp_path_factory)["recall20"]
        for s in seeds
    ]
    full_mean = float(np.mean(full))
    full_std = float(np.std(full, ddof=1))
    details = [f"full {full_mean:.4f} +- {full_std:.4f}"]
    ok = True
    for variant in ("no_add", "no_rep", "no_reg"):
        vals = [
            _lastfm_model(lastfm_dataset, trained_cache, variant, s, tmp_path_factory)["recall20"]
            for s in seeds
        ]
        mean = float(np.mean(vals))
        details.append(f"{variant} {mean:.4f}")
        if mean > full_mean + full_std:
            ok = False
    _report(8, ok, ", ".join(details) + " (each ablation <= full within 1 std)")
