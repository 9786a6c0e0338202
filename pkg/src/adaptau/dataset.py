"""Implicit-feedback interaction data: parsing, k-core, splits, noise, grouping."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from ._validation import check_int, check_pairs

logger = logging.getLogger(__name__)

FORMATS = ("adjacency-list", "pair-list")


# membership tests use a dense n*m boolean table up to this many cells
_DENSE_MASK_LIMIT = 50_000_000


class ParseError(ValueError):
    """Malformed interaction file."""


class EmptyDataError(ValueError):
    """An operation would leave no interactions."""


@dataclass(frozen=True, eq=False)
class Interactions:
    """Binary user-item positive pairs with CSR adjacency in both directions.

    ``pairs`` is kept sorted by (user, item) and duplicate free. ``fake`` flags
    pairs that were injected as noise; those never count as test truth.
    """

    n: int
    m: int
    pairs: np.ndarray
    fake: np.ndarray | None = None
    user_ids: np.ndarray | None = field(default=None, repr=False)
    item_ids: np.ndarray | None = field(default=None, repr=False)
    duplicates_dropped: int = 0

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError(f"n and m must be positive, got n={self.n}, m={self.m}")
        if self.fake is not None and self.fake.shape != (len(self.pairs),):
            raise ValueError("fake mask must align with pairs")

    @classmethod
    def from_pairs(cls, pairs, n=None, m=None, fake=None, **kwargs):
        """Build from raw pairs; sorts, drops duplicates (keeping any real copy)."""
        arr = check_pairs(pairs)
        if n is None:
            n = int(arr[:, 0].max()) + 1 if len(arr) else 1
        if m is None:
            m = int(arr[:, 1].max()) + 1 if len(arr) else 1
        arr = check_pairs(arr, n, m)
        fake_arr = np.zeros(len(arr), bool) if fake is None else np.asarray(fake, bool)
        # real copies sort ahead of fake copies so np.unique keeps them
        order = np.lexsort((fake_arr, arr[:, 1], arr[:, 0]))
        arr, fake_arr = arr[order], fake_arr[order]
        keys = arr[:, 0] * m + arr[:, 1]
        _, first = np.unique(keys, return_index=True)
        dropped = len(arr) - len(first)
        arr, fake_arr = arr[first], fake_arr[first]
        kwargs.setdefault("duplicates_dropped", dropped)
        return cls(int(n), int(m), arr, fake_arr if fake is not None else None, **kwargs)

    def __len__(self):
        return len(self.pairs)

    @property
    def users(self):
        return self.pairs[:, 0]

    @property
    def items(self):
        return self.pairs[:, 1]

    @cached_property
    def user_indptr(self):
        return np.concatenate([[0], np.cumsum(np.bincount(self.users, minlength=self.n))])

    @cached_property
    def _item_order(self):
        return np.lexsort((self.users, self.items))

    @cached_property
    def item_indptr(self):
        return np.concatenate([[0], np.cumsum(np.bincount(self.items, minlength=self.m))])

    @property
    def user_degree(self):
        return np.diff(self.user_indptr)

    @property
    def item_degree(self):
        return np.diff(self.item_indptr)

    @cached_property
    def user_items(self):
        """Per-user sorted positive items (P_u)."""
        return np.split(self.items, self.user_indptr[1:-1])

    @cached_property
    def item_users(self):
        """Per-item sorted positive users (P_i)."""
        return np.split(self.users[self._item_order], self.item_indptr[1:-1])

    @cached_property
    def keys(self):
        """Sorted ``u * m + i`` codes, for vectorised membership tests."""
        return self.pairs[:, 0] * self.m + self.pairs[:, 1]

    @cached_property
    def _dense_mask(self):
        if self.n * self.m > _DENSE_MASK_LIMIT:
            return None
        mask = np.zeros(self.n * self.m, bool)
        mask[self.keys] = True
        return mask

    def contains(self, users, items):
        codes = np.asarray(users, np.int64) * self.m + np.asarray(items, np.int64)
        if self._dense_mask is not None:
            return self._dense_mask[codes]
        pos = np.searchsorted(self.keys, codes)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == codes if len(self.keys) else np.zeros(codes.shape, bool)

    @property
    def real(self):
        """This dataset with injected fake pairs removed."""
        if self.fake is None or not self.fake.any():
            return self
        return Interactions(self.n, self.m, self.pairs[~self.fake], None)

    def density(self):
        return len(self) / (self.n * self.m)

    def stats(self):
        return {"n": self.n, "m": self.m, "interactions": len(self), "density": self.density()}


@dataclass(frozen=True)
class SplitPair:
    train: Interactions
    test: Interactions

    def __post_init__(self):
        if (self.train.n, self.train.m) != (self.test.n, self.test.m):
            raise ValueError("train and test must share n and m")


@dataclass(frozen=True)
class PopularityGrouping:
    group_of_item: np.ndarray
    G: int

    def members(self, g):
        return np.flatnonzero(self.group_of_item == g)


# --------------------------------------------------------------------------
# file I/O
# --------------------------------------------------------------------------


def _parse_int(token, path, lineno):
    try:
        value = int(token)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: not an integer: {token!r}") from None
    if value < 0:
        raise ParseError(f"{path}:{lineno}: negative id {value}")
    return value


def parse_interactions(path, format="adjacency-list"):
    """Read an interaction file and densely remap ids in first-appearance order.

    ``adjacency-list`` lines are ``<user> <item> <item> ...``; ``pair-list``
    lines are ``<user><TAB><item>`` (extra trailing columns such as ratings
    are ignored). Blank lines are skipped. Duplicate pairs are dropped and
    counted in ``duplicates_dropped``.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    path = Path(path)
    user_map: dict[int, int] = {}
    item_map: dict[int, int] = {}
    rows, cols = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens:
                continue
            if format == "pair-list" and len(tokens) < 2:
                raise ParseError(f"{path}:{lineno}: expected '<user> <item>', got {line.strip()!r}")
            ids = [_parse_int(t, path, lineno) for t in (tokens if format == "adjacency-list" else tokens[:2])]
            u = user_map.setdefault(ids[0], len(user_map))
            for raw in ids[1:]:
                rows.append(u)
                cols.append(item_map.setdefault(raw, len(item_map)))
    if not rows:
        raise EmptyDataError(f"{path}: no interactions found")
    data = Interactions.from_pairs(
        np.column_stack([rows, cols]),
        n=len(user_map),
        m=len(item_map),
        user_ids=np.fromiter(user_map, np.int64, len(user_map)),
        item_ids=np.fromiter(item_map, np.int64, len(item_map)),
    )
    if data.duplicates_dropped:
        warnings.warn(f"{path}: dropped {data.duplicates_dropped} duplicate pairs", stacklevel=2)
    return data


def write_adjacency_list(data, path, *, include_fake=True):
    """Write one line per user (users without items are written bare)."""
    pairs = data.pairs if include_fake or data.fake is None else data.pairs[~data.fake]
    ptr = np.concatenate([[0], np.cumsum(np.bincount(pairs[:, 0], minlength=data.n))])
    with open(path, "w", encoding="utf-8") as fh:
        for u in range(data.n):
            items = pairs[ptr[u]:ptr[u + 1], 1]
            fh.write(" ".join(map(str, [u, *items.tolist()])) + "\n")


def write_pair_list(pairs, path):
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in np.asarray(pairs).tolist():
            fh.write(f"{u}\t{i}\n")


def load_split(train_path, test_path, format="adjacency-list"):
    """Load already-indexed train/test files (ids used as-is, not remapped)."""

    def raw_pairs(path):
        out = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                tokens = line.split()
                if not tokens:
                    continue
                ids = [_parse_int(t, path, lineno) for t in tokens]
                if format == "pair-list":
                    if len(ids) < 2:
                        raise ParseError(f"{path}:{lineno}: expected '<user> <item>'")
                    out.append(ids[:2])
                else:
                    out.extend([ids[0], i] for i in ids[1:])
        return np.asarray(out, np.int64).reshape(-1, 2)

    tr, te = raw_pairs(train_path), raw_pairs(test_path)
    if not len(tr):
        raise EmptyDataError(f"{train_path}: no interactions found")
    both = np.vstack([tr, te])
    n, m = int(both[:, 0].max()) + 1, int(both[:, 1].max()) + 1
    return SplitPair(Interactions.from_pairs(tr, n, m), Interactions.from_pairs(te, n, m))


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------


def _reindex(data, keep_pairs):
    """Re-densify indices of the surviving pairs, preserving relative order."""
    pairs = data.pairs[keep_pairs]
    users, u_inv = np.unique(pairs[:, 0], return_inverse=True)
    items, i_inv = np.unique(pairs[:, 1], return_inverse=True)
    fake = None if data.fake is None else data.fake[keep_pairs]
    return Interactions.from_pairs(
        np.column_stack([u_inv, i_inv]),
        n=len(users),
        m=len(items),
        fake=fake,
        user_ids=users if data.user_ids is None else data.user_ids[users],
        item_ids=items if data.item_ids is None else data.item_ids[items],
    )


def k_core_filter(data, k):
    """Iteratively drop users and items with fewer than ``k`` interactions."""
    k = check_int(k, "k", minimum=1)
    keep = np.ones(len(data), bool)
    rounds = 0
    while True:
        u_deg = np.bincount(data.users[keep], minlength=data.n)
        i_deg = np.bincount(data.items[keep], minlength=data.m)
        bad = keep & ((u_deg[data.users] < k) | (i_deg[data.items] < k))
        if not bad.any():
            break
        keep &= ~bad
        rounds += 1
    if not keep.any():
        raise EmptyDataError("k-core eliminated all data")
    logger.debug("k-core k=%d converged after %d rounds", k, rounds)
    if keep.all() and data.user_degree.min() >= k and data.item_degree.min() >= k:
        return data
    return _reindex(data, keep)


def train_test_split(data, train_fraction=0.8, seed=0):
    """Per-user random split.

    Each user with ``c >= 2`` items keeps ``round(train_fraction * c)`` of them
    in train, clipped to ``[1, c - 1]``; single-interaction users go entirely
    to train (with a warning).
    """
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    in_train = np.zeros(len(data), bool)
    ptr = data.user_indptr
    singles = 0
    for u in range(data.n):
        lo, hi = ptr[u], ptr[u + 1]
        c = hi - lo
        if c == 0:
            continue
        if c == 1:
            singles += 1
            in_train[lo] = True
            continue
        n_train = min(c - 1, max(1, math.floor(train_fraction * c + 0.5)))
        in_train[lo + rng.permutation(c)[:n_train]] = True
    if singles:
        warnings.warn(f"{singles} users with a single interaction kept entirely in train", stacklevel=2)
    fake = data.fake

    def part(mask):
        return Interactions(data.n, data.m, data.pairs[mask], None if fake is None else fake[mask])

    return SplitPair(part(in_train), part(~in_train))


def noise_count(ratio, degree):
    # epsilon guards against 0.3 * 10 = 3.0000000000000004 rounding up to 4
    return int(math.ceil(ratio * degree - 1e-9)) if ratio > 0 else 0


def _inject(data, ratio_of_user, rng):
    new_pairs = []
    for u in range(data.n):
        pos = data.user_items[u]
        c = noise_count(ratio_of_user[u], len(pos))
        if c == 0:
            continue
        available = data.m - len(pos)
        if c > available:
            raise ValueError(f"user {u}: needs {c} fake items but only {available} non-interacted items exist")
        candidates = np.setdiff1d(np.arange(data.m), pos, assume_unique=True)
        chosen = rng.choice(candidates, size=c, replace=False)
        new_pairs.append(np.column_stack([np.full(c, u), chosen]))
    if not new_pairs:
        return data
    added = np.vstack(new_pairs)
    old_fake = np.zeros(len(data), bool) if data.fake is None else data.fake
    return Interactions.from_pairs(
        np.vstack([data.pairs, added]),
        data.n,
        data.m,
        fake=np.concatenate([old_fake, np.ones(len(added), bool)]),
        user_ids=data.user_ids,
        item_ids=data.item_ids,
    )


def inject_noise_uniform(data, ratio, seed=0):
    """Add ``ceil(ratio * |P_u|)`` random non-interacted items per user, flagged fake."""
    if ratio < 0:
        raise ValueError(f"noise ratio must be >= 0, got {ratio}")
    rng = np.random.default_rng(seed)
    return _inject(data, np.full(data.n, float(ratio)), rng)


def inject_noise_grouped(data, ratios, seed=0):
    """Randomly split users into ``len(ratios)`` equal groups with per-group noise.

    Returns the noisy dataset and the user -> group array. Remainder users go
    to the last groups.
    """
    ratios = [float(r) for r in ratios]
    if not ratios:
        raise ValueError("ratios must be non-empty")
    if any(r < 0 for r in ratios):
        raise ValueError(f"noise ratios must be >= 0, got {ratios}")
    G = len(ratios)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(data.n)
    base, rem = divmod(data.n, G)
    sizes = [base + (1 if g >= G - rem else 0) for g in range(G)]
    group = np.empty(data.n, np.int64)
    group[perm] = np.repeat(np.arange(G), sizes)
    return _inject(data, np.asarray(ratios)[group], rng), group


def popularity_grouping(train, G=10):
    """Cut items, sorted by training frequency (ties by index), into ``G`` groups."""
    G = check_int(G, "G", minimum=1)
    if G > train.m:
        raise ValueError(f"G={G} exceeds item count m={train.m}")
    freq = train.item_degree
    order = np.lexsort((np.arange(train.m), freq))
    group = np.empty(train.m, np.int64)
    for g, chunk in enumerate(np.array_split(order, G)):
        group[chunk] = g
    return PopularityGrouping(group, G)


# --------------------------------------------------------------------------
# synthetic generators
# --------------------------------------------------------------------------


def zipf_interactions(n=500, m=1000, mean_degree=20, exponent=1.0, seed=0):
    """Users draw items without replacement with probability proportional to a Zipf weight.

    Item popularity rank is shuffled so the popular items are not simply the
    low indices.
    """
    rng = np.random.default_rng(seed)
    weights = 1.0 / np.arange(1, m + 1) ** exponent
    weights = weights[rng.permutation(m)]
    weights /= weights.sum()
    degrees = np.clip(rng.poisson(mean_degree, n), 2, m // 2)
    pairs = [np.column_stack([np.full(c, u), rng.choice(m, c, replace=False, p=weights)]) for u, c in enumerate(degrees)]
    return Interactions.from_pairs(np.vstack(pairs), n, m)


def latent_interactions(
    n=943,
    m=1682,
    n_interactions=100_000,
    n_factors=8,
    popularity_exponent=0.8,
    affinity=3.0,
    seed=0,
):
    """MovieLens-100k-shaped synthetic implicit feedback.

    Each user has a heavy-tailed activity level and picks items with
    probability proportional to ``pop_i * exp(affinity * <z_u, z_i>)`` where
    ``z`` are unit latent taste vectors and ``pop`` follows a Zipf law. The
    latent term gives the data learnable structure; the Zipf term gives it the
    long tail that magnitude-based scoring over-rewards.
    """
    rng = np.random.default_rng(seed)
    zu = rng.standard_normal((n, n_factors))
    zi = rng.standard_normal((m, n_factors))
    zu /= np.linalg.norm(zu, axis=1, keepdims=True)
    zi /= np.linalg.norm(zi, axis=1, keepdims=True)
    pop = 1.0 / np.arange(1, m + 1) ** popularity_exponent
    pop = pop[rng.permutation(m)]
    activity = rng.lognormal(0.0, 0.9, n)
    degrees = np.maximum(20, np.round(activity / activity.sum() * n_interactions)).astype(int)
    degrees = np.minimum(degrees, m // 2)
    logits = affinity * zu @ zi.T + np.log(pop)
    pairs = []
    for u in range(n):
        # Gumbel top-k == sampling without replacement proportional to exp(logits)
        g = logits[u] + rng.gumbel(size=m)
        chosen = np.argpartition(-g, degrees[u])[: degrees[u]]
        pairs.append(np.column_stack([np.full(len(chosen), u), chosen]))
    return Interactions.from_pairs(np.vstack(pairs), n, m)
