"""Training loop: per-epoch view regeneration, triple sampling, Adam.

Each epoch draws fresh criteria for the two augmented views, rebuilds them,
then runs ceil(NNZ/B) batches. Every batch propagates the embedding table
through the original graph for the ranking head and through both augmented
graphs for the contrastive and regularizing heads, pulls all gradients back
onto the table, and takes one dense bias-corrected Adam step. Validation
recall decides early stopping and which snapshot is kept.

The whole run is a pure function of (dataset, hyperparameters): every random
draw comes from a generator seeded by (seed, epoch, stream), so a run can be
reproduced or any single epoch regenerated in isolation.
"""

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import augmentation, data, effectiveness, encoder, evaluation, objectives
from .augmentation import AugmentationConfig, epoch_rng
from .objectives import BprBatch, LossWeights

log = logging.getLogger(__name__)

STREAM_BPR = 3  # sampling stream id, after the augmentation streams

_NEG_TRIES = 100  # rejection cap before the positive is redrawn


class TrainingDiverged(Exception):
    """Raised when a gradient or the embedding table goes non-finite."""


@dataclass
class HyperParams:
    dim: int = 32
    num_layers: int = 3
    learning_rate: float = 1e-3
    batch_size: int = 4096
    max_epochs: int = 300
    patience: int = 10
    lambda_infonce: float = 0.1
    lambda_reg: float = 1e-3
    lambda_l2: float = 1e-5
    tau: float = 0.2
    rho_add: float = 0.2
    rho_rep: float = 0.2
    k: int = 5
    metric: str = "aa"
    criterion_policy: str = "random"
    seed: int = 0
    full_softmax: bool = False
    full_l2: bool = False

    def __post_init__(self):
        if self.dim < 1 or self.num_layers < 0:
            raise ValueError("dim must be >= 1 and num_layers >= 0")
        if self.learning_rate <= 0 or self.tau <= 0:
            raise ValueError("learning_rate and tau must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be >= 1")
        # reuse the range checks on the augmentation side
        AugmentationConfig(
            rho_add=self.rho_add,
            rho_rep=self.rho_rep,
            k=self.k,
            criterion_policy=self.criterion_policy,
            seed=self.seed,
        )
        LossWeights(self.lambda_infonce, self.lambda_reg, self.lambda_l2)
        if self.metric not in ("aa", "jc", "cn"):
            raise ValueError(f"unknown similarity metric {self.metric!r}")

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown hyperparameter keys: {', '.join(unknown)}")
        return cls(**values)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def augmentation_config(self):
        return AugmentationConfig(
            rho_add=self.rho_add,
            rho_rep=self.rho_rep,
            k=self.k,
            criterion_policy=self.criterion_policy,
            seed=self.seed,
        )

    def loss_weights(self):
        return LossWeights(self.lambda_infonce, self.lambda_reg, self.lambda_l2)


@dataclass
class ModelState:
    e0: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step: int = 0
    epoch: int = 0
    best_e0: np.ndarray | None = None
    best_epoch: int = -1
    best_metric: float = -np.inf
    rng_state: dict = field(default_factory=dict)


def xavier_init(num_users, num_items, dim, seed):
    """Uniform Glorot table over the stacked user and item rows."""
    if min(num_users, num_items, dim) < 1:
        raise ValueError("all dimensions must be positive")
    rows = num_users + num_items
    bound = math.sqrt(6.0 / (rows + dim))
    rng = np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=(rows, dim))


def sample_bpr_batch(relation, batch_size, rng):
    """Uniform positive edges, each paired with a rejected-sampled negative.

    Negatives redraw up to a cap, after which the positive itself is
    resampled; users interacting with every item can never complete a triple
    and are dropped with a warning if they persist.
    """
    r = relation.tocsr()
    m, n = r.shape
    if r.nnz == 0:
        raise ValueError("cannot sample from an empty relation")
    row_of = np.repeat(np.arange(m, dtype=np.int64), np.diff(r.indptr))
    # CSR order makes u*n+i globally sorted already
    keys = row_of * n + r.indices
    if (np.diff(r.indptr) == n).all():
        log.warning("every user interacts with every item; no triples possible")
        empty = np.empty(0, dtype=np.int64)
        return BprBatch(empty, empty.copy(), empty.copy())

    pos_idx = rng.integers(0, r.nnz, size=batch_size)
    users = row_of[pos_idx]
    pos = r.indices[pos_idx].astype(np.int64)
    neg = np.full(batch_size, -1, dtype=np.int64)
    tries = np.zeros(batch_size, dtype=np.int64)
    pending = np.arange(batch_size)
    rounds = 0
    while pending.size:
        draw = rng.integers(0, n, size=pending.size)
        q = users[pending] * n + draw
        loc = np.minimum(np.searchsorted(keys, q), len(keys) - 1)
        seen = keys[loc] == q
        done = pending[~seen]
        neg[done] = draw[~seen]
        tries[pending] += 1
        pending = pending[seen]
        worn = tries[pending] >= _NEG_TRIES
        if worn.any():
            redo = pending[worn]
            fresh = rng.integers(0, r.nnz, size=redo.size)
            users[redo] = row_of[fresh]
            pos[redo] = r.indices[fresh]
            tries[redo] = 0
        rounds += 1
        if rounds > 10000:
            log.warning("dropping %d triples with no reachable negative", pending.size)
            break
    ok = neg >= 0
    return BprBatch(users[ok], pos[ok], neg[ok])


def adam_step(state, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update of the full embedding table."""
    if not np.isfinite(grad).all():
        raise TrainingDiverged(f"non-finite gradient at step {state.step}")
    state.step += 1
    state.adam_m *= beta1
    state.adam_m += (1 - beta1) * grad
    state.adam_v *= beta2
    state.adam_v += (1 - beta2) * np.square(grad)
    m_hat = state.adam_m / (1 - beta1 ** state.step)
    v_hat = state.adam_v / (1 - beta2 ** state.step)
    state.e0 -= lr * m_hat / (np.sqrt(v_hat) + eps)
    if not np.isfinite(state.e0).all():
        raise TrainingDiverged(f"non-finite embeddings after step {state.step}")


def _dump_state(state, hyper, dataset, out_dir, name):
    path = os.path.join(out_dir, name)
    encoder.save_checkpoint(
        path,
        encoder.Checkpoint(
            num_users=dataset.num_users,
            num_items=dataset.num_items,
            dim=hyper.dim,
            num_layers=hyper.num_layers,
            e0=state.e0,
            adam_m=state.adam_m,
            adam_v=state.adam_v,
            step=state.step,
            epoch=state.epoch,
            rng_state=state.rng_state,
        ),
    )
    return path


def train(dataset, hyper, out_dir=None, cache_dir=None, scores=None):
    """Fit an embedding table; returns (ModelState, per-epoch history).

    When out_dir is given, training-log.jsonl, checkpoint.bin and
    best-metrics.json are written there. scores can inject precomputed
    (user_sim, item_sim, eff_user, eff_item); otherwise they are computed
    (and cached under cache_dir when set).
    """
    m, n = dataset.num_users, dataset.num_items
    rel = data.build_relation_matrix(dataset).matrix
    weights = hyper.loss_weights()
    aug_cfg = hyper.augmentation_config()
    need_views = hyper.lambda_infonce > 0 or hyper.lambda_reg > 0
    if need_views:
        if scores is None:
            scores = effectiveness.precompute_all(rel, hyper.metric, cache_dir)
        user_sim, item_sim, eff_user, eff_item = scores
        eff = {"user": eff_user, "item": eff_item}

    orig = augmentation.original_graph(rel)
    state = ModelState(
        e0=xavier_init(m, n, hyper.dim, hyper.seed),
        adam_m=np.zeros((m + n, hyper.dim)),
        adam_v=np.zeros((m + n, hyper.dim)),
    )
    num_batches = max(1, math.ceil(rel.nnz / hyper.batch_size))
    has_val = len(dataset.val) > 0
    history = []
    log_fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "training-log.jsonl"), "w", encoding="utf-8")

    since_best = 0
    try:
        for epoch in range(hyper.max_epochs):
            tic = time.perf_counter()
            state.epoch = epoch
            crit_add, crit_rep = augmentation.select_criteria(
                hyper.seed, epoch, hyper.criterion_policy
            )
            if need_views:
                g_add = augmentation.col_add(
                    rel, eff[crit_add], aug_cfg,
                    epoch_rng(hyper.seed, epoch, augmentation.STREAM_ADD), epoch,
                )
                g_rep = augmentation.col_rep(
                    rel, eff[crit_rep], item_sim, aug_cfg,
                    epoch_rng(hyper.seed, epoch, augmentation.STREAM_REP), epoch,
                )
            sampler = epoch_rng(hyper.seed, epoch, STREAM_BPR)
            sums = {"bpr": 0.0, "infonce": 0.0, "reg": 0.0, "l2": 0.0, "total": 0.0}
            zero_rows = 0
            for _ in range(num_batches):
                batch = sample_bpr_batch(rel, hyper.batch_size, sampler)
                if not len(batch):
                    continue
                assert orig.kind == "original"  # ranking head stays on the real graph
                z = encoder.forward(orig.norm_adj, state.e0, hyper.num_layers)
                bpr, grad_z = objectives.bpr_loss(z, m, batch)
                grad_e0 = encoder.backward(orig.norm_adj, hyper.num_layers, grad_z)
                nce = reg = 0.0
                if need_views:
                    z_add = encoder.forward(g_add.norm_adj, state.e0, hyper.num_layers)
                    z_rep = encoder.forward(g_rep.norm_adj, state.e0, hyper.num_layers)
                    nce, g_a, g_b, nz = objectives.infonce_loss(
                        z_add, z_rep, m, batch.users, batch.pos_items,
                        hyper.tau, hyper.full_softmax,
                    )
                    reg, r_a, r_b = objectives.reg_bce_loss(z_add, z_rep, m, batch)
                    zero_rows += nz
                    grad_e0 += encoder.backward(
                        g_add.norm_adj, hyper.num_layers,
                        weights.lambda_infonce * g_a + weights.lambda_reg * r_a,
                    )
                    grad_e0 += encoder.backward(
                        g_rep.norm_adj, hyper.num_layers,
                        weights.lambda_infonce * g_b + weights.lambda_reg * r_b,
                    )
                rows = (
                    np.arange(m + n)
                    if hyper.full_l2
                    else batch.touched_rows(m)
                )
                l2, rows = objectives.l2_penalty(state.e0, rows)
                grad_e0[rows] += 2.0 * weights.lambda_l2 * state.e0[rows]
                total = (
                    bpr
                    + weights.lambda_infonce * nce
                    + weights.lambda_reg * reg
                    + weights.lambda_l2 * l2
                )
                adam_step(state, grad_e0, hyper.learning_rate)
                for key, val in zip(sums, (bpr, nce, reg, l2, total)):
                    sums[key] += val
            state.rng_state = sampler.bit_generator.state

            val_recall = None
            if has_val:
                z = encoder.forward(orig.norm_adj, state.e0, hyper.num_layers)
                val_recall = evaluation.evaluate(
                    z, m, dataset, split="val", ks=(10,)
                ).recall[10]
                if val_recall > state.best_metric:
                    state.best_metric = val_recall
                    state.best_epoch = epoch
                    state.best_e0 = state.e0.copy()
                    since_best = 0
                else:
                    since_best += 1

            entry = {
                "epoch": epoch,
                "bpr": sums["bpr"] / num_batches,
                "infonce": sums["infonce"] / num_batches,
                "reg": sums["reg"] / num_batches,
                "l2": sums["l2"] / num_batches,
                "total": sums["total"] / num_batches,
                "val_recall10": val_recall,
                "criterion_add": crit_add if need_views else None,
                "criterion_rep": crit_rep if need_views else None,
                "zero_norm_rows": zero_rows,
                "wall_time": time.perf_counter() - tic,
            }
            history.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            if has_val and since_best >= hyper.patience:
                break
    except TrainingDiverged:
        if out_dir:
            _dump_state(state, hyper, dataset, out_dir, "diverged-checkpoint.bin")
        raise
    finally:
        if log_fh:
            log_fh.close()

    if state.best_e0 is not None:
        state.e0 = state.best_e0
    else:
        state.best_epoch = state.epoch
    if out_dir:
        _dump_state(state, hyper, dataset, out_dir, "checkpoint.bin")
        best = {
            "best_epoch": state.best_epoch,
            "epochs_run": len(history),
            "val_recall@10": None if not has_val else state.best_metric,
        }
        with open(os.path.join(out_dir, "best-metrics.json"), "w", encoding="utf-8") as fh:
            json.dump(best, fh, indent=2)
    return state, history
