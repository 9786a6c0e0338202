"""All-ranking top-K evaluation, popularity-group breakdown and the tau sweep."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, replace

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class EvalReport:
    recall_at_k: float
    ndcg_at_k: float
    k: int
    n_evaluated_users: int
    per_group_recall: list | None = None

    def write(self, directory):
        with open(os.path.join(directory, "metrics.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            w.writerow([f"recall@{self.k}", self.recall_at_k])
            w.writerow([f"ndcg@{self.k}", self.ndcg_at_k])
            w.writerow(["n_evaluated_users", self.n_evaluated_users])
        if self.per_group_recall is not None:
            with open(os.path.join(directory, "group_recall.csv"), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["group", "recall"])
                w.writerows(enumerate(self.per_group_recall))
        with open(os.path.join(directory, "summary.json"), "w") as fh:
            json.dump(asdict(self), fh, indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def _masked_scores(table, train, users):
    S = table.score_matrix(users).astype(np.float64)
    ptr = train.user_indptr
    rows = np.repeat(np.arange(len(users)), ptr[users + 1] - ptr[users])
    cols = np.concatenate([train.user_items[u] for u in users]) if len(users) else np.empty(0, np.int64)
    S[rows, cols] = -np.inf
    return S


def rank_items(table, train, u):
    """All items not in the user's training positives, best first; ties by item index."""
    S = _masked_scores(table, train, np.array([u]))[0]
    order = np.argsort(-S, kind="stable")
    return order[: table.m - train.user_degree[u]]


def topk_items(table, train, users, k, chunk=512):
    """``(len(users), k)`` top-k rankings with the same masking and tie rule as ``rank_items``."""
    users = np.asarray(users, np.int64)
    k = min(k, table.m)
    out = np.empty((len(users), k), np.int64)
    for lo in range(0, len(users), chunk):
        S = _masked_scores(table, train, users[lo:lo + chunk])
        out[lo:lo + chunk] = np.argsort(-S, axis=1, kind="stable")[:, :k]
    return out


def _as_mapping(rankings):
    if isinstance(rankings, dict):
        return rankings
    arr = np.asarray(rankings)
    return {u: arr[u] for u in range(len(arr))}


def _per_user_hits(rankings, test, k, item_filter=None):
    """Yield ``(user, hits, n_relevant, dcg, idcg)`` for users with relevant test items."""
    rankings = _as_mapping(rankings)
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    for u, truth in enumerate(test.user_items):
        if item_filter is not None:
            truth = truth[item_filter[truth]]
        if len(truth) == 0:
            continue
        top = np.asarray(rankings[u])[:k]
        hit = np.isin(top, truth)
        dcg = float(discounts[: len(top)][hit].sum())
        idcg = float(discounts[: min(k, len(truth))].sum())
        yield u, int(hit.sum()), len(truth), dcg, idcg


def recall_ndcg_at_k(rankings, test, k=20):
    """Mean recall@k and NDCG@k over users with a non-empty test set.

    ``rankings`` maps user -> ranked items (a dict, or a 2-D array indexed by
    user). Injected fake pairs in ``test`` never count as truth.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rec, ndcg = [], []
    for _, hits, rel, dcg, idcg in _per_user_hits(rankings, test.real, k):
        rec.append(hits / rel)
        ndcg.append(dcg / idcg)
    if not rec:
        return EvalReport(float("nan"), float("nan"), k, 0)
    return EvalReport(float(np.mean(rec)), float(np.mean(ndcg)), k, len(rec))


def groupwise_recall(rankings, test, grouping, k=20):
    """Recall@k restricted to each popularity group's test items; NaN where no user has any."""
    test = test.real
    out = np.full(grouping.G, np.nan)
    for g in range(grouping.G):
        in_group = grouping.group_of_item == g
        vals = [hits / rel for _, hits, rel, _, _ in _per_user_hits(rankings, test, k, in_group)]
        if vals:
            out[g] = float(np.mean(vals))
    return out


def evaluate(table, train, test, k=20, grouping=None):
    test = test.real
    users = np.flatnonzero(test.user_degree > 0)
    top = dict(zip(users.tolist(), topk_items(table, train, users, k)))
    report = recall_ndcg_at_k(top, test, k)
    if grouping is not None:
        report.per_group_recall = groupwise_recall(top, test, grouping, k).tolist()
    return report


# --------------------------------------------------------------------------
# tau sensitivity
# --------------------------------------------------------------------------


@dataclass
class SweepResult:
    rows: list  # (tau, recall, ndcg)
    best_tau: float
    best_recall: float

    @property
    def relative_spread(self):
        rec = np.array([r[1] for r in self.rows])
        return float((rec.max() - rec.min()) / rec.max())

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "recall", "ndcg", "relative_recall"])
            for tau, rec, nd in self.rows:
                w.writerow([tau, rec, nd, rec / self.best_recall if self.best_recall else float("nan")])


def default_tau_grid(step=0.05):
    """``{step, 2 step, ..., 1.0}``; the coarse desk-scale default is step 0.05."""
    count = int(round(1.0 / step))
    return [round(step * j, 10) for j in range(1, count + 1)]


def _run_fixed(split, config, tau):
    from .trainer import train

    result = train(split, replace(config, strategy="fixed-tau", tau=float(tau)))
    rep = result.report
    return float(tau), rep.recall_at_k, rep.ndcg_at_k


def threads_from_env(default=1):
    try:
        return max(1, int(os.environ.get("ADAPTAU_THREADS", default)))
    except ValueError:
        return default


def tau_sensitivity_sweep(split, config, tau_grid, n_jobs=None):
    """Train one fixed-tau model per grid point (same seed and init) and report the argmax."""
    grid = [float(t) for t in tau_grid]
    if not grid:
        raise ValueError("tau_grid must be non-empty")
    n_jobs = threads_from_env() if n_jobs is None else n_jobs
    if n_jobs > 1:
        from joblib import Parallel, delayed

        rows = Parallel(n_jobs=n_jobs)(delayed(_run_fixed)(split, config, t) for t in grid)
    else:
        rows = [_run_fixed(split, config, t) for t in grid]
    for tau, rec, nd in rows:
        logger.info("tau=%.3f recall=%.4f ndcg=%.4f", tau, rec, nd)
    best = max(rows, key=lambda r: (r[1], -r[0]))
    return SweepResult(rows, best[0], best[1])
