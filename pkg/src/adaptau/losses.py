"""Softmax losses over cosine (or raw) scores and their analytic gradients."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ._validation import check_positive, check_tau_vector
from .embedding import ZeroNormError

# above this many (batch x touched item) cells scores are gathered per entry
_DENSE_SCORE_LIMIT = 20_000_000


@dataclass
class BatchTriples:
    """``users[b]`` with positive ``pos[b]`` and negatives ``negatives[b, :]``."""

    users: np.ndarray
    pos: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        self.users = np.asarray(self.users, np.int64)
        self.pos = np.asarray(self.pos, np.int64)
        self.negatives = np.asarray(self.negatives, np.int64)
        if self.negatives.ndim != 2 or self.negatives.shape[1] < 1:
            raise ValueError("negatives must have shape (B, M) with M >= 1")
        if not (len(self.users) == len(self.pos) == len(self.negatives)):
            raise ValueError("users, pos and negatives must have the same length")
        if np.any(self.negatives == self.pos[:, None]):
            raise ValueError("a negative coincides with its positive item")

    def __len__(self):
        return len(self.users)

    @property
    def candidates(self):
        return np.concatenate([self.pos[:, None], self.negatives], axis=1)


@dataclass
class GradientRecord:
    """Loss and per-row gradients for the rows touched by one batch."""

    loss: float
    user_rows: np.ndarray
    user_grad: np.ndarray
    item_rows: np.ndarray
    item_grad: np.ndarray
    entry_users: np.ndarray
    entry_loss: np.ndarray
    entry_loss_common: np.ndarray

    def dense(self, n, m):
        gu = np.zeros((n, self.user_grad.shape[1]), self.user_grad.dtype)
        gi = np.zeros((m, self.item_grad.shape[1]), self.item_grad.dtype)
        gu[self.user_rows] = self.user_grad
        gi[self.item_rows] = self.item_grad
        return gu, gi


def logsumexp_rows(s):
    mx = s.max(axis=-1, keepdims=True)
    return (mx + np.log(np.exp(s - mx).sum(axis=-1, keepdims=True)))[..., 0]


def logits(scores, tau):
    """Softmax of ``scores / tau`` along the last axis (max-subtracted)."""
    tau = check_positive(tau, "tau")
    s = np.asarray(scores, dtype=np.float64) / tau
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _normalise_jacobian(grad_hat, raw, unit, norms):
    # d(e/|e|)/de = (I - e_hat e_hat^T) / |e|
    return (grad_hat - np.sum(grad_hat * unit, axis=1, keepdims=True) * unit) / norms


def _unit(rows, normalize):
    if not normalize:
        return rows, None
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroNormError("zero-norm embedding row in batch")
    return rows / norms, norms


def _compact(idx, size):
    """Sorted distinct values of ``idx`` and the position of each entry among them."""
    idx = np.asarray(idx, np.int64)
    seen = np.zeros(size, bool)
    seen[idx] = True
    rows = np.flatnonzero(seen)
    lookup = np.cumsum(seen) - 1
    return rows, lookup[idx]


def _pair_scores(u_view, i_view, inv):
    B, C = inv.shape
    if B * i_view.shape[0] <= _DENSE_SCORE_LIMIT:
        return np.take_along_axis(u_view @ i_view.T, inv, axis=1)
    out = np.empty((B, C), u_view.dtype)
    step = max(1, _DENSE_SCORE_LIMIT // (C * u_view.shape[1]))
    for lo in range(0, B, step):
        out[lo:lo + step] = np.einsum("bd,bcd->bc", u_view[lo:lo + step], i_view[inv[lo:lo + step]])
    return out


def softmax_record(table, batch, tau, *, l2=0.0, common_tau=None, normalize_users=None, normalize_items=None):
    """Sampled softmax loss over ``{pos} + negatives`` with gradients w.r.t. raw rows.

    ``tau`` is either a scalar or a per-entry vector. Per-entry losses are also
    evaluated at ``common_tau`` (defaults to the per-entry tau) for the
    user-loss statistics. L2 adds ``l2 * |e|^2`` for every distinct touched row.
    """
    nu = table.normalize_users if normalize_users is None else normalize_users
    ni = table.normalize_items if normalize_items is None else normalize_items
    B = len(batch)
    tau_b = check_tau_vector(tau, B)
    cand = batch.candidates
    C = cand.shape[1]

    urows, uinv = _compact(batch.users, table.n)
    irows, iinv = _compact(cand, table.m)
    u_raw = table.user_emb[urows]
    i_raw = table.item_emb[irows]
    u_view, u_norm = _unit(u_raw, nu)
    i_view, i_norm = _unit(i_raw, ni)
    ub_view = u_view[uinv]

    f = _pair_scores(ub_view, i_view, iinv).astype(np.float64)
    s = f / tau_b[:, None]
    lse = logsumexp_rows(s)
    entry_loss = lse - s[:, 0]
    q = np.exp(s - lse[:, None])
    if common_tau is None:
        entry_common = entry_loss
    else:
        s0 = f / check_tau_vector(common_tau, B, "common_tau")[:, None]
        entry_common = logsumexp_rows(s0) - s0[:, 0]

    g = q
    g[:, 0] -= 1.0
    g /= tau_b[:, None] * B
    g = g.astype(u_view.dtype, copy=False)

    K = len(irows)
    if B * K <= _DENSE_SCORE_LIMIT:
        flat = (np.arange(B)[:, None] * K + iinv).ravel()
        coef = np.bincount(flat, weights=g.ravel(), minlength=B * K).reshape(B, K).astype(g.dtype, copy=False)
    else:
        coef = sp.csr_matrix((g.ravel(), (np.repeat(np.arange(B), C), iinv.ravel())), shape=(B, K))
    grad_ub = np.asarray(coef @ i_view)
    grad_u = np.zeros((len(urows), grad_ub.shape[1]), grad_ub.dtype)
    np.add.at(grad_u, uinv, grad_ub)
    grad_i = np.asarray(coef.T @ ub_view)
    if nu:
        grad_u = _normalise_jacobian(grad_u, u_raw, u_view, u_norm)
    if ni:
        grad_i = _normalise_jacobian(grad_i, i_raw, i_view, i_norm)

    loss = float(entry_loss.mean())
    if l2:
        loss += l2 * float(np.sum(u_raw.astype(np.float64) ** 2) + np.sum(i_raw.astype(np.float64) ** 2))
        grad_u = grad_u + 2 * l2 * u_raw
        grad_i = grad_i + 2 * l2 * i_raw
    return GradientRecord(loss, urows, np.asarray(grad_u), irows, np.asarray(grad_i), batch.users, entry_loss, entry_common)


def _tau_for_batch(tau_of_user, users):
    t = np.asarray(tau_of_user, dtype=np.float64)
    return t if t.ndim == 0 else t[users]


def sampled_softmax_loss(table, batch, tau_of_user, *, l2=0.0, common_tau=None):
    """Batch-mean sampled softmax loss on normalised scores, per the table's norm mode.

    ``tau_of_user`` is a scalar or an array indexed by user.
    """
    return softmax_record(table, batch, _tau_for_batch(tau_of_user, batch.users), l2=l2, common_tau=common_tau)


def no_norm_gradients(table, batch, l2=0.0, tau_of_user=1.0, *, common_tau=None):
    """Same loss with raw inner-product scores ``e_u . e_i`` and an L2 term."""
    return softmax_record(
        table,
        batch,
        _tau_for_batch(tau_of_user, batch.users),
        l2=l2,
        common_tau=common_tau,
        normalize_users=False,
        normalize_items=False,
    )


# --------------------------------------------------------------------------
# full-catalogue quantities (desk scale)
# --------------------------------------------------------------------------


def _user_taus(tau_of_user, n):
    t = np.asarray(tau_of_user, dtype=np.float64)
    t = np.full(n, float(t)) if t.ndim == 0 else t
    if t.shape != (n,) or np.any(t <= 0):
        raise ValueError("tau_of_user must be positive, scalar or length n")
    return t


def full_softmax_loss(table, train, tau_of_user):
    """``-(1/|D|) sum log p_ui(tau_u)`` with the softmax over all ``m`` items."""
    F = table.score_matrix().astype(np.float64)
    t = _user_taus(tau_of_user, table.n)
    S = F / t[:, None]
    lse = logsumexp_rows(S)
    return float(np.mean(lse[train.users] - S[train.users, train.items]))


def _positive_mask(train):
    return sp.csr_matrix((np.ones(len(train)), (train.users, train.items)), shape=(train.n, train.m))


def gradient_wrt_f_full(table, train, u, tau):
    """Per-item gradient of user ``u``'s objective w.r.t. ``f(u, .)`` (positives +, negatives -).

    Positives get ``p_ui (1 - S) / tau`` and negatives ``-p_ui S / tau`` where
    ``S`` is the positive probability mass.
    """
    tau = check_positive(tau, "tau")
    f = table.score_matrix(users=[u])[0].astype(np.float64)
    p = logits(f, tau)
    pos = train.user_items[u]
    S = p[pos].sum()
    grad = -p * S / tau
    grad[pos] = p[pos] * (1 - S) / tau
    return grad


def positive_mass(table, train, tau, users=None):
    """``sum_{i in P_u} p_ui(tau)`` for each user (all users by default)."""
    tau = check_positive(tau, "tau")
    users = np.arange(table.n) if users is None else np.asarray(users)
    F = table.score_matrix(users).astype(np.float64)
    P = logits(F, tau)
    mask = _positive_mask(train)[users]
    return np.asarray(mask.multiply(P).sum(axis=1)).ravel()


def expected_grad_magnitude(table, train, u, tau):
    """``(2 / (m tau)) * S (1 - S)`` with ``S`` the positive mass of user ``u``."""
    tau = check_positive(tau, "tau")
    S = positive_mass(table, train, tau, users=[u])[0]
    return 2.0 / (table.m * tau) * S * (1.0 - S)


def grad_sweep(table, train, tau_grid):
    """Mean (over users with positives) expected gradient magnitude at each tau."""
    active = np.flatnonzero(train.user_degree > 0)
    F = table.score_matrix(active).astype(np.float64)
    mask = _positive_mask(train)[active]
    rows = []
    for tau in tau_grid:
        tau = check_positive(float(tau), "tau")
        S = np.asarray(mask.multiply(logits(F, tau)).sum(axis=1)).ravel()
        rows.append((tau, float(np.mean(2.0 / (table.m * tau) * S * (1 - S)))))
    return rows


def write_grad_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "mean_expected_grad_magnitude"])
        w.writerows(rows)

