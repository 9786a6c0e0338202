"""Brute-force references for the closed forms and analytic gradients.

Everything here recomputes its quantity from first principles (explicit
loops, full enumeration, scalar minimisation) rather than reusing the code
path it checks.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import spearmanr

from .dataset import Interactions, popularity_grouping, zipf_interactions
from .embedding import EmbeddingTable, magnitude_report, xavier_init
from .losses import BatchTriples, softmax_record
from .temperature import INV_E, TemperatureState, lambert_w, user_temperatures

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class OracleReport:
    name: str
    max_abs_error: float
    max_rel_error: float
    n_cases: int
    passed: bool

    def row(self):
        return [self.name, self.max_abs_error, self.max_rel_error, self.n_cases, "pass" if self.passed else "FAIL"]


def write_oracle_reports(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["oracle", "max_abs_err", "max_rel_err", "cases", "pass"])
        for r in reports:
            w.writerow(r.row())


# --------------------------------------------------------------------------
# gradients
# --------------------------------------------------------------------------


def reference_batch_loss(user_emb, item_emb, users, candidates, tau, normalized=True, l2=0.0):
    """Batch-mean softmax loss, entry by entry; candidate column 0 is the positive."""
    total = 0.0
    for b in range(len(users)):
        eu = user_emb[users[b]]
        s = []
        for j in candidates[b]:
            ej = item_emb[j]
            f = float(eu @ ej)
            if normalized:
                f /= math.sqrt(float(eu @ eu)) * math.sqrt(float(ej @ ej))
            s.append(f / tau[b])
        top = max(s)
        total += top + math.log(sum(math.exp(x - top) for x in s)) - s[0]
    loss = total / len(users)
    if l2:
        loss += l2 * (sum(float(user_emb[u] @ user_emb[u]) for u in set(users.tolist())))
        loss += l2 * (sum(float(item_emb[i] @ item_emb[i]) for i in set(candidates.ravel().tolist())))
    return loss


def _rel(a, b, floor):
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_difference_check(table, batch, tau_of_user, step=1e-5, *, l2=0.0, normalized=True, tol=1e-5, abs_floor=1e-4):
    """Central differences of the batch loss against the analytic gradient, per touched coordinate.

    The relative error is taken against ``max(|numeric|, |analytic|, abs_floor)``,
    so near-zero coordinates are held to an absolute ``tol * abs_floor``.
    """
    tau = np.asarray(tau_of_user, dtype=np.float64)
    tau_b = np.full(len(batch), float(tau)) if tau.ndim == 0 else tau[batch.users]
    record = softmax_record(table, batch, tau_b, l2=l2, normalize_users=normalized, normalize_items=normalized)
    U = table.user_emb.astype(np.float64).copy()
    I = table.item_emb.astype(np.float64).copy()
    cand = batch.candidates

    def loss():
        return reference_batch_loss(U, I, batch.users, cand, tau_b, normalized, l2)

    max_abs = max_rel = 0.0
    cases = 0
    for mat, rows, grad in ((U, record.user_rows, record.user_grad), (I, record.item_rows, record.item_grad)):
        for r_idx, r in enumerate(rows):
            for c in range(mat.shape[1]):
                keep = mat[r, c]
                mat[r, c] = keep + step
                up = loss()
                mat[r, c] = keep - step
                down = loss()
                mat[r, c] = keep
                numeric = (up - down) / (2 * step)
                analytic = float(grad[r_idx, c])
                max_abs = max(max_abs, abs(numeric - analytic))
                max_rel = max(max_rel, _rel(numeric, analytic, abs_floor))
                cases += 1
    return OracleReport("finite_difference", max_abs, max_rel, cases, max_rel < tol)


def finite_difference_suite(seed=0, n_instances=20, d=8, M=5, n=6, m=12, batch=4):
    """Worst ``finite_difference_check`` over random instances with per-user temperatures."""
    rng = np.random.default_rng(seed)
    worst = None
    total = 0
    for _ in range(n_instances):
        table = xavier_init(n, m, d, seed=int(rng.integers(1 << 31)))
        users = rng.integers(0, n, batch)
        pos = rng.integers(0, m, batch)
        negs = np.stack([rng.choice(np.setdiff1d(np.arange(m), [p]), M, replace=False) for p in pos])
        rep = finite_difference_check(table, BatchTriples(users, pos, negs), rng.uniform(0.05, 1.0, n))
        total += rep.n_cases
        if worst is None or rep.max_rel_error > worst.max_rel_error:
            worst = rep
    return replace(worst, n_cases=total, passed=worst.passed)


# --------------------------------------------------------------------------
# the crossing condition and its bound
# --------------------------------------------------------------------------


def _enumerated_positive_mass(table, train, tau):
    """Mean over users (with positives) of the positive softmax mass, by explicit per-user loops."""
    U = table.user_emb.astype(np.float64)
    I = table.item_emb.astype(np.float64)
    Un = U / np.linalg.norm(U, axis=1, keepdims=True)
    In = I / np.linalg.norm(I, axis=1, keepdims=True)
    masses = []
    for u, pos in enumerate(train.user_items):
        if len(pos) == 0:
            continue
        s = In @ Un[u] / tau
        s -= s.max()
        e = np.exp(s)
        masses.append(e[pos].sum() / e.sum())
    return float(np.mean(masses))


def gaussian_cosine_model(alpha=1.0, n=50, m=200, d=1024, degree=8, seed=0):
    """Random items and users shifted toward the mean of their positives' unit vectors.

    In high ``d`` the resulting cosines are close to Gaussian, separately for
    positive and negative pairs.
    """
    rng = np.random.default_rng(seed)
    items = rng.standard_normal((m, d))
    unit = items / np.linalg.norm(items, axis=1, keepdims=True)
    pairs = [(u, i) for u in range(n) for i in rng.choice(m, degree, replace=False)]
    data = Interactions.from_pairs(pairs, n, m)
    users = rng.standard_normal((n, d)) / math.sqrt(d)
    for u in range(n):
        users[u] += alpha * unit[data.user_items[u]].mean(axis=0)
    return EmbeddingTable(users, items), data


def condition_scan(table, train, tau_grid, T=0.02):
    """Rows ``(tau, mean positive mass, bound)`` with bound ``2/(m T) (S - S^2)``."""
    rows = []
    for tau in tau_grid:
        S = _enumerated_positive_mass(table, train, float(tau))
        rows.append((float(tau), S, 2.0 / (table.m * T) * (S - S * S)))
    return rows


def condition_scan_report(table, train, tau_grid, tau_star, T=0.02, tol=1e-6):
    """Check the mass at ``tau_star`` is 1/2, decreases over the grid, and the bound peaks at ``tau_star``."""
    rows = condition_scan(table, train, tau_grid, T)
    S = np.array([r[1] for r in rows])
    monotone = bool(np.all(np.diff(S) <= 1e-12))
    s_star = _enumerated_positive_mass(table, train, tau_star)
    bound_star = 2.0 / (table.m * T) * (s_star - s_star**2)
    dominated = all(bound_star >= r[2] - 1e-15 for r in rows)
    err = abs(s_star - 0.5)
    return OracleReport("condition_scan", err, err / 0.5, len(rows), bool(err < tol and monotone and dominated))


# --------------------------------------------------------------------------
# SuperLoss
# --------------------------------------------------------------------------


def golden_section_minimize(fn, lower, upper, tol=1e-10, max_iter=500):
    a, b = float(lower), float(upper)
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = fn(d)
    return (a + b) / 2.0


def superloss_objective(tau, L, m_u, beta, tau0, scaled=False):
    """``(L - m_u) / tau + beta (log tau - log tau0)^2``.

    With ``scaled=True`` the loss-aware term is ``(L - m_u) tau0 / tau``, i.e.
    the temperature measured in units of ``tau0``.
    """
    gap = (L - m_u) * (tau0 if scaled else 1.0)
    return gap / tau + beta * (math.log(tau) - math.log(tau0)) ** 2


def superloss_minimizer(L, m_u, beta, tau0, lower=1e-4, upper=None, tol=1e-10, scaled=False):
    """Golden-section minimiser of the SuperLoss objective over ``[lower, upper]``.

    ``upper`` defaults to ``10 e tau0``.
    """
    if tau0 <= 0 or beta <= 0:
        raise ValueError("tau0 and beta must be > 0")
    upper = 10.0 * math.e * tau0 if upper is None else upper
    return golden_section_minimize(lambda t: superloss_objective(t, L, m_u, beta, tau0, scaled), lower, upper, tol)


def random_superloss_draws(n_cases=100, seed=0):
    """``(L, m_u, beta, tau0)`` draws with ``(L - m_u) / (2 beta) > -1/e`` (clamp inactive)."""
    rng = np.random.default_rng(seed)
    draws = []
    while len(draws) < n_cases:
        L, m_u = rng.uniform(0.0, 6.0, 2)
        beta = rng.uniform(0.5, 2.0)
        tau0 = rng.uniform(0.05, 0.5)
        if (L - m_u) / (2 * beta) > -INV_E + 1e-3:
            draws.append((float(L), float(m_u), float(beta), float(tau0)))
    return draws


def superloss_report(draws, scaled=False, tol=1e-6, lower=None, upper=None):
    """Closed-form per-user temperature vs the numeric minimiser on each draw.

    ``lower``/``upper`` default to the minimiser's own bracket.
    """
    max_abs = max_rel = 0.0
    for L, m_u, beta, tau0 in draws:
        closed = float(user_temperatures(tau0, np.array([L]), m_u, beta, 1e-12, 1e12)[0])
        kw = {}
        if lower is not None:
            kw["lower"] = lower(tau0) if callable(lower) else lower
        if upper is not None:
            kw["upper"] = upper(tau0) if callable(upper) else upper
        numeric = superloss_minimizer(L, m_u, beta, tau0, scaled=scaled, **kw)
        max_abs = max(max_abs, abs(closed - numeric))
        max_rel = max(max_rel, abs(closed - numeric) / numeric)
    name = "superloss_closed_form_scaled" if scaled else "superloss_closed_form"
    return OracleReport(name, max_abs, max_rel, len(draws), max_rel < tol)


def lambert_w_report(n_points=1000, tol=1e-12):
    x = np.linspace(-INV_E, 10.0, n_points)
    w = lambert_w(x)
    res = np.abs(w * np.exp(w) - x)
    anchors = [(0.0, 0.0), (math.e, 1.0), (-INV_E, -1.0)]
    anchor_err = max(abs(lambert_w(a) - b) for a, b in anchors)
    err = max(float(res.max()), anchor_err)
    return OracleReport("lambert_w", err, err, n_points + len(anchors), err < tol)


# --------------------------------------------------------------------------
# magnitude growth without normalisation
# --------------------------------------------------------------------------


@dataclass
class Lemma1Report:
    spearman: float
    skipped: bool
    n_items: int
    delta_sq_norm: np.ndarray
    item_degree: np.ndarray
    group_means_before: np.ndarray
    group_means_after: np.ndarray

    @property
    def max_group_change(self):
        return float(np.max(np.abs(self.group_means_after / self.group_means_before - 1.0)))


def lemma1_config():
    from .trainer import TrainConfig

    return TrainConfig(
        strategy="no-norm", optimizer="sgd", lr=0.3, batch_size=1, negatives=64, epochs=1,
        d=64, l2=0.0, eval_interval=0, log_sigmas=False,
    )


def lemma1_experiment(config=None, n=500, m=1000, mean_degree=20, seed=0):
    """One epoch on Zipf data; Spearman correlation of the per-item change in ``|e_i|^2`` with ``|P_i|``."""
    from .trainer import init_table, make_optimizer, train_epoch

    config = lemma1_config() if config is None else config
    config = replace(config, epochs=1)
    data = zipf_interactions(n, m, mean_degree=mean_degree, seed=seed)
    table = init_table(data, config)
    before = np.sum(table.item_emb.astype(np.float64) ** 2, axis=1)
    grouping = popularity_grouping(data, 10)
    mags_before = magnitude_report(table, grouping)
    state = TemperatureState(n, tau0=config.tau, tau_min=min(config.tau_min, config.no_norm_tau), tau_max=max(config.tau_max, config.no_norm_tau, config.tau))
    train_epoch(table, data, config, state, make_optimizer(config, table), np.random.default_rng(seed + 1))
    delta = np.sum(table.item_emb.astype(np.float64) ** 2, axis=1) - before
    mags_after = magnitude_report(table, grouping)
    degree = data.item_degree
    if np.allclose(delta, 0.0):
        return Lemma1Report(float("nan"), True, m, delta, degree, mags_before, mags_after)
    rho = float(spearmanr(delta, degree).statistic)
    return Lemma1Report(rho, False, m, delta, degree, mags_before, mags_after)
