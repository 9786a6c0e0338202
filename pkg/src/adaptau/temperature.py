"""Global and per-user softmax temperatures.

The global temperature ``tau0`` is the (approximate) temperature at which the
mean positive probability mass per user crosses 1/2, which maximises an upper
bound on the expected gradient magnitude. It has a cheap closed form in terms
of cosine statistics of the embeddings (``tau0_simplified``) and a variance
corrected form (``tau0_full``); ``tau0_oracle_bisect`` solves the crossing
condition exactly for verification.

Per-user temperatures follow ``tau_u = tau0 * exp(W(max(-1/e, (L(u) - m_u) / (2 beta))))``
with ``W`` the principal branch of the Lambert W function.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_positive
from .embedding import normalize_rows
from .losses import positive_mass

logger = logging.getLogger(__name__)

INV_E = math.exp(-1.0)
DEFAULT_TAU_MIN = 0.02
DEFAULT_TAU_MAX = 1.0


class BracketError(RuntimeError):
    """The crossing condition does not change sign on the bracket."""


# --------------------------------------------------------------------------
# Lambert W
# --------------------------------------------------------------------------


def _lambert_w_array(x):
    w = np.empty_like(x)
    p2 = 2.0 * (math.e * x + 1.0)
    branch = x < -0.25
    mid = (~branch) & (x < 3.0)
    large = x >= 3.0

    p = np.sqrt(np.maximum(p2[branch], 0.0))
    w[branch] = -1.0 + p - p**2 / 3.0 + 11.0 / 72.0 * p**3 - 43.0 / 540.0 * p**4
    w[mid] = np.log1p(x[mid]) * np.where(x[mid] > 0, 0.75, 1.0)
    l1 = np.log(x[large])
    l2 = np.log(l1)
    w[large] = l1 - l2 + l2 / l1

    at_branch = p2 <= 0.0
    w[at_branch] = -1.0
    active = ~at_branch & (x != 0.0)
    w[x == 0.0] = 0.0
    for _ in range(50):
        if not active.any():
            break
        wa, xa = w[active], x[active]
        ew = np.exp(wa)
        f = wa * ew - xa
        wp1 = wa + 1.0
        denom = ew * wp1 - (wa + 2.0) * f / (2.0 * wp1)
        step = np.where(wp1 == 0.0, 0.0, f / np.where(denom == 0.0, 1.0, denom))
        w[active] = wa - step
        done = np.abs(step) <= 1e-15 * (1.0 + np.abs(wa))
        idx = np.flatnonzero(active)
        active[idx[done]] = False
    return w


def lambert_w(x):
    """Principal-branch Lambert W for real ``x >= -1/e`` (scalar or array).

    Arguments within 1e-12 below ``-1/e`` are treated as the branch point.
    """
    arr = np.asarray(x, dtype=np.float64)
    if np.any(np.isnan(arr)):
        raise ValueError("lambert_w of NaN")
    if np.any(arr < -INV_E - 1e-12):
        raise ValueError(f"lambert_w domain is x >= -1/e, got min {arr.min()!r}")
    out = _lambert_w_array(np.atleast_1d(np.maximum(arr, -INV_E)).copy())
    return float(out[0]) if arr.ndim == 0 else out.reshape(arr.shape)


# --------------------------------------------------------------------------
# statistics of the cosine distribution
# --------------------------------------------------------------------------


def _positive_cosines(table, train):
    u = normalize_rows(table.user_emb)
    i = normalize_rows(table.item_emb)
    return np.einsum("kd,kd->k", u[train.users], i[train.items], dtype=np.float64)


def estimate_mu_plus(table, train):
    """Mean cosine over the training positives. O(|D| d)."""
    return float(_positive_cosines(table, train).mean())


def estimate_mu(table):
    """Mean cosine over all ``n * m`` pairs via the (unnormalised) item centroid. O(n d)."""
    u = normalize_rows(table.user_emb)
    centroid = normalize_rows(table.item_emb).mean(axis=0, dtype=np.float64)
    return float((u @ centroid).mean())


def estimate_sigmas(table, train, sample_size=None, seed=0):
    """Variances ``(sigma2, sigma2_plus)`` of the all-pairs and positive-pair cosines.

    The all-pairs variance is exact by default, using
    ``E[f^2] = tr(U^T U I^T I) / (n m)`` on the unit rows (O((n + m) d^2));
    pass ``sample_size`` to estimate it from that many uniform pairs instead.
    """
    sigma2_plus = float(np.var(_positive_cosines(table, train)))
    u = normalize_rows(table.user_emb).astype(np.float64)
    i = normalize_rows(table.item_emb).astype(np.float64)
    if sample_size is None:
        mean = float((u @ i.mean(axis=0)).mean())
        second = float(np.sum((u.T @ u) * (i.T @ i))) / (table.n * table.m)
        sigma2 = max(second - mean**2, 0.0)
    else:
        if sample_size < 2:
            raise ValueError("sample_size must be >= 2")
        rng = np.random.default_rng(seed)
        uu = rng.integers(0, table.n, sample_size)
        ii = rng.integers(0, table.m, sample_size)
        sigma2 = float(np.var(np.einsum("kd,kd->k", u[uu], i[ii])))
    return sigma2, sigma2_plus


def _log_ratio(n, m, D_size):
    ratio = n * m / (2.0 * D_size)
    if ratio <= 1.0:
        raise ValueError(f"closed-form tau0 needs n*m > 2|D| (got n={n}, m={m}, |D|={D_size})")
    return math.log(ratio)


def _clamp(x, lo, hi):
    return min(max(x, lo), hi)


def tau0_simplified(mu_plus, mu, n, m, D_size, tau_min=DEFAULT_TAU_MIN, tau_max=DEFAULT_TAU_MAX, *, clamp=True):
    """``(mu_plus - mu) / log(n m / (2 |D|))``, clamped to ``[tau_min, tau_max]``."""
    log_term = _log_ratio(n, m, D_size)
    gap = mu_plus - mu
    if gap <= 0:
        warnings.warn(f"mu_plus <= mu ({mu_plus:.4g} <= {mu:.4g}); positives not yet separated, using tau_min", stacklevel=2)
        return tau_min
    value = gap / log_term
    return _clamp(value, tau_min, tau_max) if clamp else value


def tau0_full(mu_plus, mu, sigma2_plus, sigma2, n, m, D_size, tau_min=DEFAULT_TAU_MIN, tau_max=DEFAULT_TAU_MAX, *, clamp=True):
    """Variance-corrected closed form.

    Root of ``(s/2) x^2 + gap x - log(nm/2|D|) = 0`` in ``x = 1/tau`` with
    ``s = sigma2_plus - sigma2``, evaluated as ``(gap + sqrt(disc)) / (2 log)``,
    which equals ``s / (-gap + sqrt(disc))`` but has no 0/0 at ``s = 0``.
    """
    log_term = _log_ratio(n, m, D_size)
    gap = mu_plus - mu
    if gap <= 0:
        warnings.warn(f"mu_plus <= mu ({mu_plus:.4g} <= {mu:.4g}); positives not yet separated, using tau_min", stacklevel=2)
        return tau_min
    s = sigma2_plus - sigma2
    disc = gap * gap + 2.0 * s * log_term
    if disc < 0:
        warnings.warn("negative discriminant in variance-corrected tau0; falling back to simplified form", stacklevel=2)
        return tau0_simplified(mu_plus, mu, n, m, D_size, tau_min, tau_max, clamp=clamp)
    value = (gap + math.sqrt(disc)) / (2.0 * log_term)
    return _clamp(value, tau_min, tau_max) if clamp else value


def mean_positive_mass(table, train, tau):
    """``E_u[sum_{i in P_u} p_ui(tau)]`` over users with at least one positive."""
    active = np.flatnonzero(train.user_degree > 0)
    return float(positive_mass(table, train, tau, users=active).mean())


def tau0_oracle_bisect(table, train, tol=1e-8, tau_min=DEFAULT_TAU_MIN, tau_max=DEFAULT_TAU_MAX, max_iter=200):
    """Solve ``E_u[sum_{P_u} p_ui(tau)] = 1/2`` by bisection on ``log tau`` (full softmax)."""
    lo, hi = float(tau_min), float(tau_max)
    g_lo = mean_positive_mass(table, train, lo) - 0.5
    g_hi = mean_positive_mass(table, train, hi) - 0.5
    if abs(g_lo) < tol:
        return lo
    if abs(g_hi) < tol:
        return hi
    if g_lo * g_hi > 0:
        raise BracketError(f"condition not bracketed on [{lo}, {hi}]: values {g_lo + 0.5:.4g}, {g_hi + 0.5:.4g}")
    for _ in range(max_iter):
        mid = math.sqrt(lo * hi)
        g_mid = mean_positive_mass(table, train, mid) - 0.5
        if abs(g_mid) < tol:
            return mid
        if (g_mid > 0) == (g_lo > 0):
            lo, g_lo = mid, g_mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    return math.sqrt(lo * hi)


# --------------------------------------------------------------------------
# per-user temperatures
# --------------------------------------------------------------------------


@dataclass
class TemperatureState:
    """Temperatures and the statistics they were derived from, frozen per epoch."""

    n: int
    tau0: float = DEFAULT_TAU_MIN
    beta: float = 1.0
    tau_min: float = DEFAULT_TAU_MIN
    tau_max: float = DEFAULT_TAU_MAX
    loss_mode: str = "mean"
    tau_user: np.ndarray = field(default=None)
    user_loss: np.ndarray = field(default=None)
    m_u: float = float("nan")
    mu_plus: float = float("nan")
    mu: float = float("nan")
    sigma2_plus: float = float("nan")
    sigma2: float = float("nan")

    def __post_init__(self):
        check_positive(self.beta, "beta")
        if not 0 < self.tau_min <= self.tau_max:
            raise ValueError(f"need 0 < tau_min <= tau_max, got {self.tau_min}, {self.tau_max}")
        if self.loss_mode not in ("mean", "sum"):
            raise ValueError("loss_mode must be 'mean' or 'sum'")
        if self.user_loss is None:
            self.user_loss = np.full(self.n, np.nan)
        if self.tau_user is None:
            self.tau_user = np.full(self.n, self.tau0)

    def refresh(self):
        """Recompute every ``tau_user`` from ``tau0``, ``user_loss`` and ``m_u``."""
        self.tau_user = user_temperatures(self.tau0, self.user_loss, self.m_u, self.beta, self.tau_min, self.tau_max)
        return self


def user_temperatures(tau0, losses, m_u, beta=1.0, tau_min=DEFAULT_TAU_MIN, tau_max=DEFAULT_TAU_MAX):
    """Vectorised ``tau0 * exp(W(max(-1/e, (L - m_u) / (2 beta))))``; NaN losses map to ``tau0``."""
    losses = np.asarray(losses, dtype=np.float64)
    out = np.full(losses.shape, float(tau0))
    known = ~np.isnan(losses)
    if known.any() and np.isfinite(m_u):
        z = np.maximum(-INV_E, (losses[known] - m_u) / (2.0 * beta))
        out[known] = tau0 * np.exp(lambert_w(z))
    return np.clip(out, tau_min, tau_max)


def tau_user(state, u):
    return float(user_temperatures(state.tau0, state.user_loss[u], state.m_u, state.beta, state.tau_min, state.tau_max))


def update_user_loss_stats(state, users, losses):
    """Fold one epoch of per-entry common-temperature losses into ``state``.

    ``user_loss[u]`` becomes the mean (or sum, per ``state.loss_mode``) of the
    entries of ``u``; ``m_u`` the unweighted mean over users seen this epoch.
    Users not seen keep their previous value. Returns ``state``.
    """
    users = np.asarray(users, np.int64)
    losses = np.asarray(losses, np.float64)
    counts = np.bincount(users, minlength=state.n)
    sums = np.bincount(users, weights=losses, minlength=state.n)
    seen = counts > 0
    if not seen.any():
        return state
    vals = sums[seen] if state.loss_mode == "sum" else sums[seen] / counts[seen]
    state.user_loss = state.user_loss.copy()
    state.user_loss[seen] = vals
    state.m_u = float(vals.mean())
    state.refresh()
    return state
