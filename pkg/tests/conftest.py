import os

import numpy as np
import pytest
import scipy.sparse as sp

from scar import data

# canonical toy dataset: u1-{i1,i2}, u2-{i1,i3}, u3-{i2}
FIXTURE_LINES = "u1\ti1\nu1\ti2\nu2\ti1\nu2\ti3\nu3\ti2\n"


@pytest.fixture(scope="session")
def fixture_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("fixture") / "train.tsv"
    path.write_text(FIXTURE_LINES)
    return str(path)


@pytest.fixture(scope="session")
def fixture_dataset(fixture_path):
    return data.load_interactions(fixture_path)


@pytest.fixture(scope="session")
def fixture_relation(fixture_dataset):
    return data.build_relation_matrix(fixture_dataset).matrix


def random_relation(rng, num_users, num_items, density=0.15, min_degree=0):
    """Random binary CSR with optional per-user degree floor."""
    dense = rng.random((num_users, num_items)) < density
    for u in range(num_users):
        need = min_degree - dense[u].sum()
        if need > 0:
            off = np.flatnonzero(~dense[u])
            dense[u, rng.choice(off, size=min(need, len(off)), replace=False)] = True
    return sp.csr_matrix(dense.astype(np.float64))


def dataset_from_relation(rel, val=None, test=None):
    """Wrap a relation matrix (plus optional eval edges) as a dataset."""
    coo = rel.tocoo()
    train = np.column_stack([coo.row, coo.col]).astype(np.int64)
    empty = np.empty((0, 2), dtype=np.int64)
    return data.InteractionDataset(
        num_users=rel.shape[0],
        num_items=rel.shape[1],
        train=train,
        val=empty if val is None else np.asarray(val, dtype=np.int64).reshape(-1, 2),
        test=empty if test is None else np.asarray(test, dtype=np.int64).reshape(-1, 2),
        user_ids={f"u{u}": u for u in range(rel.shape[0])},
        item_ids={f"i{i}": i for i in range(rel.shape[1])},
    )


LASTFM_HINT = (
    "LastFM data not found. This environment has no network access, so the "
    "HetRec 2011 archive cannot be fetched here. To run the gated criteria: "
    "download lastfm-2k (user_artists.dat), run scripts/prepare_lastfm.py, "
    "and point SCAR_DATA_DIR at the output directory (default data/lastfm)."
)


def lastfm_dir():
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    return os.environ.get("SCAR_DATA_DIR", os.path.join(root, "data", "lastfm"))


def lastfm_paths():
    base = lastfm_dir()
    paths = {name: os.path.join(base, f"{name}.tsv") for name in ("train", "val", "test")}
    if not all(os.path.exists(p) for p in paths.values()):
        pytest.skip(LASTFM_HINT)
    return paths


@pytest.fixture(scope="session")
def lastfm_dataset():
    paths = lastfm_paths()
    return data.load_interactions(paths["train"], paths["val"], paths["test"])


@pytest.fixture(scope="session")
def trained_cache():
    """Session store so expensive trained models are shared across criteria."""
    return {}
