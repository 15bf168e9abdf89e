"""Linear graph-convolutional encoder over the bipartite interaction graph.

Embeddings propagate through the normalized adjacency with no weights or
nonlinearity, and the readout is the plain sum of all layer outputs
including layer zero. Because every step is linear, the exact gradient of
any loss with respect to the embedding table is the transposed propagation
applied to the readout gradient, accumulated with the same Horner recurrence
as the forward pass.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

_MAGIC = b"SCARCKPT1"


def forward(norm_adj, e0, num_layers):
    """Sum-readout propagation: Z = sum of A~^l E0 for l = 0..num_layers."""
    if num_layers < 0:
        raise ValueError(f"num_layers must be nonnegative, got {num_layers}")
    if norm_adj.shape[0] != e0.shape[0]:
        raise ValueError(
            f"adjacency rows {norm_adj.shape[0]} != embedding rows {e0.shape[0]}"
        )
    z = e0.copy()
    cur = e0
    for _ in range(num_layers):
        cur = norm_adj @ cur
        z += cur
    return z


def backward(norm_adj, num_layers, grad_z):
    """Pull a readout gradient back onto E0.

    d(Z)/d(E0) is sum_l A~^l, so grad_E0 = sum_l (A~^T)^l grad_Z; the sum is
    evaluated as acc <- grad_Z + A~^T acc repeated num_layers times, mirroring
    the forward recurrence exactly.
    """
    if norm_adj.shape[0] != grad_z.shape[0]:
        raise ValueError(
            f"adjacency rows {norm_adj.shape[0]} != gradient rows {grad_z.shape[0]}"
        )
    adj_t = norm_adj.T.tocsr()
    acc = grad_z.copy()
    for _ in range(num_layers):
        acc = grad_z + adj_t @ acc
    return acc


def predict(z, num_users, users, items):
    """Interaction scores z_u . z_i; item rows sit below the user block."""
    users = np.asarray(users)
    items = np.asarray(items)
    return np.einsum("ij,ij->i", z[users], z[num_users + items])


def score_all(z, num_users, users=None):
    """Dense score block for the given users (all users when omitted)."""
    user_block = z[:num_users] if users is None else z[np.asarray(users)]
    return user_block @ z[num_users:].T


@dataclass
class Checkpoint:
    num_users: int
    num_items: int
    dim: int
    num_layers: int
    e0: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step: int
    epoch: int
    rng_state: dict


def save_checkpoint(path, ckpt):
    rows = ckpt.num_users + ckpt.num_items
    for name in ("e0", "adam_m", "adam_v"):
        arr = getattr(ckpt, name)
        if arr.shape != (rows, ckpt.dim):
            raise ValueError(f"{name} shape {arr.shape} != ({rows}, {ckpt.dim})")
    state_blob = json.dumps(ckpt.rng_state).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(
            struct.pack(
                "<QQQQ", ckpt.num_users, ckpt.num_items, ckpt.dim, ckpt.num_layers
            )
        )
        fh.write(np.ascontiguousarray(ckpt.e0, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ckpt.adam_m, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ckpt.adam_v, dtype="<f8").tobytes())
        fh.write(struct.pack("<QQQ", ckpt.step, ckpt.epoch, len(state_blob)))
        fh.write(state_blob)


def _read_exact(fh, count):
    buf = fh.read(count)
    if len(buf) != count:
        raise ValueError("checkpoint truncated")
    return buf


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        m, n, d, num_layers = struct.unpack("<QQQQ", _read_exact(fh, 32))
        rows = m + n
        e0 = np.frombuffer(_read_exact(fh, rows * d * 8), dtype="<f8").reshape(rows, d)
        adam_m = np.frombuffer(_read_exact(fh, rows * d * 8), dtype="<f8").reshape(rows, d)
        adam_v = np.frombuffer(_read_exact(fh, rows * d * 8), dtype="<f8").reshape(rows, d)
        step, epoch, state_len = struct.unpack("<QQQ", _read_exact(fh, 24))
        rng_state = json.loads(_read_exact(fh, state_len).decode("utf-8"))
        if fh.read(1):
            raise ValueError(f"{path} has trailing bytes")
    return Checkpoint(
        num_users=m,
        num_items=n,
        dim=d,
        num_layers=num_layers,
        e0=e0.copy(),
        adam_m=adam_m.copy(),
        adam_v=adam_v.copy(),
        step=step,
        epoch=epoch,
        rng_state=rng_state,
    )
