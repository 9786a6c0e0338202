"""User/item embedding tables, scoring, LightGCN propagation and checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ._validation import check_int

NORM_MODES = ("none", "user-only", "item-only", "both")
_MAGIC = b"ADTEMB01"
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class ZeroNormError(ValueError):
    """A zero embedding row cannot be normalised."""


@dataclass
class EmbeddingTable:
    """Raw (unnormalised) embeddings; normalisation is applied at scoring time."""

    user_emb: np.ndarray
    item_emb: np.ndarray
    norm_mode: str = "both"

    def __post_init__(self):
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"norm_mode must be one of {NORM_MODES}, got {self.norm_mode!r}")
        if self.user_emb.ndim != 2 or self.item_emb.ndim != 2 or self.user_emb.shape[1] != self.item_emb.shape[1]:
            raise ValueError("user_emb and item_emb must be 2-D with equal column count")
        if self.user_emb.shape[1] < 1:
            raise ValueError("embedding dimension must be >= 1")

    @property
    def n(self):
        return self.user_emb.shape[0]

    @property
    def m(self):
        return self.item_emb.shape[0]

    @property
    def d(self):
        return self.user_emb.shape[1]

    @property
    def normalize_users(self):
        return self.norm_mode in ("both", "user-only")

    @property
    def normalize_items(self):
        return self.norm_mode in ("both", "item-only")

    def copy(self, norm_mode=None):
        return EmbeddingTable(self.user_emb.copy(), self.item_emb.copy(), norm_mode or self.norm_mode)

    def scoring_views(self):
        """User and item matrices as seen by the score function under ``norm_mode``."""
        u = normalize_rows(self.user_emb) if self.normalize_users else self.user_emb
        i = normalize_rows(self.item_emb) if self.normalize_items else self.item_emb
        return u, i

    def score_matrix(self, users=None):
        u, i = self.scoring_views()
        if users is not None:
            u = u[users]
        return u @ i.T


def normalize_rows(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroNormError(f"cannot normalise zero rows: {np.flatnonzero(norms[:, 0] == 0)[:10].tolist()}")
    return x / norms


def xavier_init(n, m, d, seed=0, dtype=np.float64, norm_mode="both"):
    """Uniform Xavier initialisation with ``fan_in = fan_out = d``."""
    n, m, d = (check_int(v, name, minimum=1) for v, name in ((n, "n"), (m, "m"), (d, "d")))
    bound = np.sqrt(6.0 / (d + d))
    rng = np.random.default_rng(seed)
    users = rng.uniform(-bound, bound, (n, d)).astype(dtype, copy=False)
    items = rng.uniform(-bound, bound, (m, d)).astype(dtype, copy=False)
    return EmbeddingTable(users, items, norm_mode)


def cosine_score(table, u, i):
    eu, ei = table.user_emb[u], table.item_emb[i]
    nu, ni = np.linalg.norm(eu), np.linalg.norm(ei)
    if nu == 0 or ni == 0:
        raise ZeroNormError(f"zero-norm row for pair ({u}, {i})")
    return float(eu @ ei / (nu * ni))


def raw_score(table, u, i):
    return float(table.user_emb[u] @ table.item_emb[i])


def propagation_matrix(train, layers):
    """Dense-free LightGCN operator ``P = mean_{k=0..L} A^k`` on the stacked (n+m) node set.

    ``A`` is the symmetric-normalised bipartite adjacency with entries
    ``1/sqrt(|P_u||P_i|)``. A degree-0 node propagates to zero, so its output
    is its layer-0 row scaled by ``1/(L+1)``. ``P`` is symmetric, so it is its
    own adjoint for backpropagation.
    """
    layers = check_int(layers, "layers", minimum=1)
    n, m = train.n, train.m
    du = train.user_degree.astype(np.float64)
    di = train.item_degree.astype(np.float64)
    w = 1.0 / np.sqrt(du[train.users] * di[train.items])
    rows = np.concatenate([train.users, n + train.items])
    cols = np.concatenate([n + train.items, train.users])
    A = sp.csr_matrix((np.concatenate([w, w]), (rows, cols)), shape=(n + m, n + m))
    return LightGCNOperator(A, layers, n)


class LightGCNOperator:
    def __init__(self, adjacency, layers, n_users):
        self.adjacency = adjacency
        self.layers = layers
        self.n_users = n_users

    def apply(self, x):
        """``mean_k A^k x`` for a stacked (n+m, d) array."""
        acc = x.copy()
        cur = x
        for _ in range(self.layers):
            cur = self.adjacency @ cur
            acc += cur
        return acc / (self.layers + 1)

    def forward(self, table):
        out = self.apply(np.vstack([table.user_emb, table.item_emb]))
        return EmbeddingTable(out[: self.n_users], out[self.n_users:], table.norm_mode)

    def backward(self, grad_users, grad_items):
        g = self.apply(np.vstack([grad_users, grad_items]))
        return g[: self.n_users], g[self.n_users:]


def lightgcn_propagate(table, train, layers):
    return propagation_matrix(train, layers).forward(table)


def magnitude_report(table, grouping):
    """Mean item-embedding L2 norm per popularity group (NaN for empty groups)."""
    norms = np.linalg.norm(table.item_emb, axis=1)
    counts = np.bincount(grouping.group_of_item, minlength=grouping.G)
    sums = np.bincount(grouping.group_of_item, weights=norms, minlength=grouping.G)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def save_checkpoint(table, path):
    """Header ``magic, n, m, d, precision`` (little-endian) then row-major user and item matrices."""
    itemsize = table.user_emb.dtype.itemsize
    if itemsize not in _DTYPES:
        raise ValueError(f"unsupported dtype {table.user_emb.dtype}")
    dt = _DTYPES[itemsize]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<QQQI", table.n, table.m, table.d, itemsize))
        fh.write(np.ascontiguousarray(table.user_emb, dtype=dt).tobytes())
        fh.write(np.ascontiguousarray(table.item_emb, dtype=dt).tobytes())


def load_checkpoint(path, norm_mode="both"):
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not an embedding checkpoint")
        n, m, d, itemsize = struct.unpack("<QQQI", fh.read(struct.calcsize("<QQQI")))
        if itemsize not in _DTYPES:
            raise ValueError(f"{path}: unsupported precision {itemsize}")
        dt = _DTYPES[itemsize]
        users = np.frombuffer(fh.read(n * d * itemsize), dtype=dt).reshape(n, d)
        items = np.frombuffer(fh.read(m * d * itemsize), dtype=dt).reshape(m, d)
        if items.size != m * d:
            raise ValueError(f"{path}: truncated checkpoint")
    return EmbeddingTable(users.astype(dt.newbyteorder("="), copy=True), items.astype(dt.newbyteorder("="), copy=True), norm_mode)
