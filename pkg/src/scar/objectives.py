"""Loss heads and their exact gradients with respect to the readouts.

Three heads share each training step: pairwise ranking on the original
graph's readout, a contrastive term tying the two augmented readouts
together, and a binary cross-entropy regularizer scoring the batch edges
through both augmented views. All gradients are closed-form; finite
differences are used only in tests.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp, softmax

PROB_EPS = 1e-7  # BCE probability clamp


@dataclass
class LossWeights:
    lambda_infonce: float = 0.1
    lambda_reg: float = 1e-3
    lambda_l2: float = 1e-5

    def __post_init__(self):
        if min(self.lambda_infonce, self.lambda_reg, self.lambda_l2) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class BprBatch:
    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray

    def __len__(self):
        return len(self.users)

    def touched_rows(self, num_users):
        """Unique embedding-table rows this batch reads."""
        return np.unique(
            np.concatenate(
                [self.users, num_users + self.pos_items, num_users + self.neg_items]
            )
        )


def bpr_loss(z, num_users, batch):
    """Pairwise ranking loss -sum log sigmoid(y_ui - y_uj) and its gradient.

    Uses the softplus form log(1+exp(-gap)) so huge gaps neither overflow
    nor lose the gradient.
    """
    zu = z[batch.users]
    zi = z[num_users + batch.pos_items]
    zj = z[num_users + batch.neg_items]
    gap = np.einsum("ij,ij->i", zu, zi - zj)
    loss = float(np.logaddexp(0.0, -gap).sum())
    coef = expit(gap) - 1.0  # d loss / d gap
    grad = np.zeros_like(z)
    np.add.at(grad, batch.users, coef[:, None] * (zi - zj))
    np.add.at(grad, num_users + batch.pos_items, coef[:, None] * zu)
    np.add.at(grad, num_users + batch.neg_items, -coef[:, None] * zu)
    return loss, grad


def _normalize_rows(rows):
    norms = np.linalg.norm(rows, axis=1)
    inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    return rows * inv[:, None], inv


def _infonce_side(z_anchor, z_other, anchor_rows, all_rows, tau):
    """One side of the contrastive loss; returns (loss, grads, zero rows).

    Anchors come from the first view, candidates from the second. When
    all_rows covers more than the anchors the softmax runs over that full
    candidate set, otherwise negatives are just the rest of the batch.
    Zero-norm rows score cosine 0 everywhere and receive no gradient.
    """
    a, inv_a = _normalize_rows(z_anchor[anchor_rows])
    b, inv_b = _normalize_rows(z_other[all_rows])
    cos = a @ b.T
    logits = cos / tau
    # positives sit where the candidate row is the anchor itself
    pos_col = np.searchsorted(all_rows, anchor_rows)
    k = np.arange(len(anchor_rows))
    loss = float((logsumexp(logits, axis=1) - logits[k, pos_col]).sum())
    g = softmax(logits, axis=1)
    g[k, pos_col] -= 1.0
    g /= tau
    gc = g * cos
    grad_anchor = np.zeros_like(z_anchor)
    grad_other = np.zeros_like(z_other)
    grad_anchor[anchor_rows] = (g @ b - gc.sum(axis=1)[:, None] * a) * inv_a[:, None]
    grad_other[all_rows] = (g.T @ a - gc.sum(axis=0)[:, None] * b) * inv_b[:, None]
    zero_rows = int((inv_a == 0).sum() + (inv_b == 0).sum())
    return loss, grad_anchor, grad_other, zero_rows


def infonce_loss(z_add, z_rep, num_users, users, items, tau, full_softmax=False):
    """Contrastive loss between the two augmented readouts, user and item side.

    Negatives are the rest of the batch by default; full_softmax widens the
    denominator to every user (or item) node. Returns the summed loss, dense
    gradients for both views, and the number of zero-norm rows hit.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    users = np.unique(users)
    items = np.unique(items)
    m = num_users
    n = z_add.shape[0] - m
    user_pool = np.arange(m) if full_softmax else users
    item_pool = m + (np.arange(n) if full_softmax else items)
    loss_u, ga_u, gb_u, zero_u = _infonce_side(z_add, z_rep, users, user_pool, tau)
    loss_i, ga_i, gb_i, zero_i = _infonce_side(z_add, z_rep, m + items, item_pool, tau)
    return loss_u + loss_i, ga_u + ga_i, gb_u + gb_i, zero_u + zero_i


def _bce_view(z, num_users, users, items, labels):
    scores = np.einsum("ij,ij->i", z[users], z[num_users + items])
    prob = expit(scores)
    clamped = np.clip(prob, PROB_EPS, 1.0 - PROB_EPS)
    loss = float(-(labels * np.log(clamped) + (1 - labels) * np.log(1 - clamped)).sum())
    # the clamp is flat, so saturated predictions stop contributing gradient
    active = (prob >= PROB_EPS) & (prob <= 1.0 - PROB_EPS)
    coef = np.where(active, prob - labels, 0.0)
    grad = np.zeros_like(z)
    np.add.at(grad, users, coef[:, None] * z[num_users + items])
    np.add.at(grad, num_users + items, coef[:, None] * z[users])
    return loss, grad


def reg_bce_loss(z_add, z_rep, num_users, batch):
    """Binary cross-entropy over both augmented views.

    The batch's observed edges are the positive examples and its ranking
    negatives reprise as label-0 examples; scores pass through a logistic
    squash and probabilities are clamped away from {0, 1}.
    """
    users = np.concatenate([batch.users, batch.users])
    items = np.concatenate([batch.pos_items, batch.neg_items])
    labels = np.concatenate(
        [np.ones(len(batch.users)), np.zeros(len(batch.users))]
    )
    loss_a, grad_a = _bce_view(z_add, num_users, users, items, labels)
    loss_r, grad_r = _bce_view(z_rep, num_users, users, items, labels)
    return loss_a + loss_r, grad_a, grad_r


def l2_penalty(e0, rows):
    """Squared norm of the touched embedding rows and its gradient factor."""
    rows = np.unique(rows)
    return float(np.sum(e0[rows] ** 2)), rows


def total_loss(parts, weights, e0, rows):
    """Weighted multi-task sum: ranking + contrastive + regularizer + L2."""
    bpr, infonce, reg = parts
    l2, _ = l2_penalty(e0, rows)
    return (
        bpr
        + weights.lambda_infonce * infonce
        + weights.lambda_reg * reg
        + weights.lambda_l2 * l2
    )
