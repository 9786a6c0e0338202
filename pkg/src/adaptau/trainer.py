"""Epoch loop: tau0 refresh, per-user temperatures, sampled softmax, optimiser."""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from ._validation import check_int, check_positive
from .embedding import EmbeddingTable, propagation_matrix, xavier_init
from .evaluation import evaluate
from .losses import BatchTriples, softmax_record
from .temperature import (
    DEFAULT_TAU_MAX,
    DEFAULT_TAU_MIN,
    TemperatureState,
    estimate_mu,
    estimate_mu_plus,
    estimate_sigmas,
    tau0_simplified,
    update_user_loss_stats,
)

logger = logging.getLogger(__name__)

STRATEGIES = ("no-norm", "fixed-tau", "adap-tau0", "adap-tau")
HISTORY_FIELDS = ("epoch", "mean_loss", "tau0", "recall@20", "ndcg@20", "seconds")
TEMPERATURE_FIELDS = (
    "epoch", "tau0", "mu_plus", "mu", "sigma2_plus", "sigma2", "m_u", "min_tau_u", "mean_tau_u", "max_tau_u", "tau0_seconds"
)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    strategy: str = "adap-tau"
    tau: float = 0.1
    d: int = 64
    lr: float = 1e-3
    l2: float = 0.0
    batch_size: int = 1024
    negatives: int = 256
    epochs: int = 50
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    backbone: str = "MF"
    layers: int = 2
    beta: float = 1.0
    tau_min: float = DEFAULT_TAU_MIN
    tau_max: float = DEFAULT_TAU_MAX
    loss_mode: str = "mean"
    loss_smoothing: float = 0.0
    no_norm_tau: float = 1.0
    norm_mode: str | None = None
    dtype: str = "float64"
    seed: int = 0
    eval_interval: int = 5
    k: int = 20
    patience: int | None = None
    restore_best: bool = False
    log_sigmas: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        check_positive(self.lr, "lr", strict=False)
        check_positive(self.l2, "l2", strict=False)
        check_positive(self.tau, "tau")
        check_int(self.batch_size, "batch_size", minimum=1)
        check_int(self.negatives, "negatives", minimum=1)
        check_int(self.epochs, "epochs", minimum=0)
        check_int(self.d, "d", minimum=1)
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.backbone not in ("MF", "LightGCN"):
            raise ValueError(f"backbone must be 'MF' or 'LightGCN', got {self.backbone!r}")
        if self.backbone == "LightGCN" and not 1 <= self.layers <= 3:
            raise ValueError("LightGCN layers must be in [1, 3]")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be 'float64' or 'float32'")
        if not 0 <= self.loss_smoothing < 1:
            raise ValueError("loss_smoothing must be in [0, 1)")

    @property
    def resolved_norm_mode(self):
        if self.norm_mode is not None:
            return self.norm_mode
        return "none" if self.strategy == "no-norm" else "both"

    @property
    def adaptive(self):
        return self.strategy in ("adap-tau0", "adap-tau")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


# --------------------------------------------------------------------------
# optimisers
# --------------------------------------------------------------------------


class SGD:
    def __init__(self, lr):
        self.lr = lr
        self.t = 0

    def step(self, table, record):
        self.t += 1
        if self.lr == 0:
            return
        # gradient rows are distinct, so fancy-index updates do not collide
        table.user_emb[record.user_rows] -= self.lr * record.user_grad.astype(table.user_emb.dtype)
        table.item_emb[record.item_rows] -= self.lr * record.item_grad.astype(table.item_emb.dtype)


class Adam:
    """Dense Adam: moments of every row decay each step, as with dense embedding gradients."""

    def __init__(self, lr, shapes, dtype, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s, dtype) for s in shapes]
        self.v = [np.zeros(s, dtype) for s in shapes]
        self.t = 0

    def step(self, table, record):
        self.t += 1
        if self.lr == 0:
            return
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for param, m, v, rows, grad in (
            (table.user_emb, self.m[0], self.v[0], record.user_rows, record.user_grad),
            (table.item_emb, self.m[1], self.v[1], record.item_rows, record.item_grad),
        ):
            m *= b1
            v *= b2
            m[rows] += (1 - b1) * grad
            v[rows] += (1 - b2) * grad * grad
            param -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(config, table):
    if config.optimizer == "sgd":
        return SGD(config.lr)
    return Adam(
        config.lr,
        [table.user_emb.shape, table.item_emb.shape],
        table.user_emb.dtype,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    )


# --------------------------------------------------------------------------
# negative sampling
# --------------------------------------------------------------------------


def sample_negatives_batch(train, users, M, rng):
    """``(len(users), M)`` items drawn uniformly, rejecting each user's positives."""
    users = np.asarray(users, np.int64)
    if np.any(train.user_degree[users] >= train.m):
        bad = users[train.user_degree[users] >= train.m][0]
        raise ValueError(f"user {bad} is positive on every item; cannot sample negatives")
    negs = rng.integers(0, train.m, size=(len(users), M))
    uu = np.broadcast_to(users[:, None], negs.shape)
    bad = train.contains(uu, negs)
    while bad.any():
        negs[bad] = rng.integers(0, train.m, size=int(bad.sum()))
        bad[bad] = train.contains(uu[bad], negs[bad])
    return negs


def sample_negatives(train, u, M, rng):
    return sample_negatives_batch(train, [u], M, rng)[0]


# --------------------------------------------------------------------------
# epochs
# --------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    tau0: float
    mu_plus: float = float("nan")
    mu: float = float("nan")
    sigma2_plus: float = float("nan")
    sigma2: float = float("nan")
    m_u: float = float("nan")
    min_tau_u: float = float("nan")
    mean_tau_u: float = float("nan")
    max_tau_u: float = float("nan")
    tau0_seconds: float = 0.0
    seconds: float = 0.0


def compute_tau0(table, train, config):
    """Cosine means and the closed-form tau0: O(|D| d + n d)."""
    mu_plus = estimate_mu_plus(table, train)
    mu = estimate_mu(table)
    with warnings.catch_warnings():
        if not config.adaptive:
            # tau0 is only logged for fixed/no-norm runs
            warnings.simplefilter("ignore")
        tau0 = tau0_simplified(mu_plus, mu, train.n, train.m, len(train), config.tau_min, config.tau_max)
    return tau0, mu_plus, mu


def train_epoch(table, train, config, temp_state, opt_state, rng, epoch=1, propagator=None):
    """One pass over the shuffled training positives. Mutates ``table`` in place.

    For LightGCN, ``table`` holds the layer-0 embeddings and ``propagator``
    the linear propagation operator. Propagation runs once at the start of the
    epoch and gradients are pulled back through it.
    """
    start = time.perf_counter()
    scoring = propagator.forward(table) if propagator is not None else table
    stats = EpochStats(epoch, float("nan"), float("nan"))

    t0 = time.perf_counter()
    if config.strategy != "no-norm":
        tau0, stats.mu_plus, stats.mu = compute_tau0(scoring, train, config)
    stats.tau0_seconds = time.perf_counter() - t0
    if config.log_sigmas and config.strategy != "no-norm":
        stats.sigma2, stats.sigma2_plus = estimate_sigmas(scoring, train)

    if config.strategy == "no-norm":
        tau0 = config.no_norm_tau
        temp_state.tau0 = tau0
        temp_state.tau_user = np.full(train.n, tau0)
    elif config.strategy == "fixed-tau":
        tau0 = config.tau
        temp_state.tau0 = tau0
        temp_state.tau_user = np.full(train.n, tau0)
    elif config.strategy == "adap-tau0":
        temp_state.tau0 = tau0
        temp_state.tau_user = np.full(train.n, tau0)
    else:
        temp_state.tau0 = tau0
        temp_state.refresh()
    temp_state.mu_plus, temp_state.mu = stats.mu_plus, stats.mu
    temp_state.sigma2_plus, temp_state.sigma2 = stats.sigma2_plus, stats.sigma2
    stats.tau0 = tau0
    taus = temp_state.tau_user.copy()
    stats.min_tau_u, stats.mean_tau_u, stats.max_tau_u = float(taus.min()), float(taus.mean()), float(taus.max())

    order = rng.permutation(len(train))
    losses, entry_users, entry_common = [], [], []
    normalize_users = config.resolved_norm_mode in ("both", "user-only")
    normalize_items = config.resolved_norm_mode in ("both", "item-only")
    for lo in range(0, len(order), config.batch_size):
        idx = order[lo:lo + config.batch_size]
        users, pos = train.users[idx], train.items[idx]
        batch = BatchTriples(users, pos, sample_negatives_batch(train, users, config.negatives, rng))
        record = softmax_record(
            scoring,
            batch,
            taus[users],
            l2=0.0 if propagator is not None else config.l2,
            common_tau=tau0,
            normalize_users=normalize_users,
            normalize_items=normalize_items,
        )
        if not math.isfinite(record.loss):
            raise TrainingDivergedError(
                f"non-finite loss at epoch {epoch}, batch {lo // config.batch_size}: "
                f"tau range [{taus[users].min():.4g}, {taus[users].max():.4g}], users {users[:10].tolist()}"
            )
        if propagator is not None:
            record = _pull_back(record, table, propagator, config.l2)
        opt_state.step(table, record)
        losses.append(record.loss * len(batch))
        entry_users.append(users)
        entry_common.append(record.entry_loss_common)

    stats.mean_loss = float(np.sum(losses) / max(len(train), 1))
    if entry_users:
        previous = temp_state.user_loss.copy()
        update_user_loss_stats(temp_state, np.concatenate(entry_users), np.concatenate(entry_common))
        if config.loss_smoothing:
            a = config.loss_smoothing
            known = ~np.isnan(previous)
            temp_state.user_loss[known] = a * previous[known] + (1 - a) * temp_state.user_loss[known]
        if config.strategy == "adap-tau":
            temp_state.refresh()
        else:
            temp_state.tau_user = np.full(train.n, tau0)
    stats.m_u = temp_state.m_u
    stats.seconds = time.perf_counter() - start
    return table, stats


def _pull_back(record, table, propagator, l2):
    gu, gi = record.dense(table.n, table.m)
    gu, gi = propagator.backward(gu, gi)
    if l2:
        # L2 acts on the layer-0 rows touched by the batch
        gu[record.user_rows] += 2 * l2 * table.user_emb[record.user_rows]
        gi[record.item_rows] += 2 * l2 * table.item_emb[record.item_rows]
    record.user_rows = np.arange(table.n)
    record.item_rows = np.arange(table.m)
    record.user_grad, record.item_grad = gu, gi
    return record


# --------------------------------------------------------------------------
# full training
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    table: EmbeddingTable
    history: list = field(default_factory=list)
    temperature_log: list = field(default_factory=list)
    state: TemperatureState | None = None
    report: object = None
    best_epoch: int = 0
    propagator: object = None

    def scoring_table(self):
        return self.propagator.forward(self.table) if self.propagator is not None else self.table

    def write_history(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_FIELDS)
            for row in self.history:
                w.writerow([row[k] for k in HISTORY_FIELDS])

    def write_temperature_log(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TEMPERATURE_FIELDS)
            for st in self.temperature_log:
                w.writerow([getattr(st, k) for k in TEMPERATURE_FIELDS])


def init_table(train, config):
    return xavier_init(train.n, train.m, config.d, seed=config.seed, dtype=np.dtype(config.dtype), norm_mode=config.resolved_norm_mode)


def train(split, config, table=None, callback=None):
    """Run ``config.epochs`` epochs, evaluating on ``split.test`` every ``eval_interval`` epochs.

    With ``patience`` set, stops after that many epochs without a recall
    improvement. With ``restore_best`` the best-recall table is returned.
    """
    train_data = split.train
    table = init_table(train_data, config) if table is None else table
    propagator = propagation_matrix(train_data, config.layers) if config.backbone == "LightGCN" else None
    state = TemperatureState(
        train_data.n, beta=config.beta, tau_min=config.tau_min, tau_max=config.tau_max, loss_mode=config.loss_mode
    )
    opt = make_optimizer(config, table)
    rng = np.random.default_rng(config.seed + 1)
    result = TrainResult(table, state=state, propagator=propagator)
    best_recall, best_table, since_best = -1.0, None, 0
    elapsed = 0.0
    for epoch in range(1, config.epochs + 1):
        table, stats = train_epoch(table, train_data, config, state, opt, rng, epoch, propagator)
        elapsed += stats.seconds
        row = {"epoch": epoch, "mean_loss": stats.mean_loss, "tau0": stats.tau0, "recall@20": float("nan"), "ndcg@20": float("nan"), "seconds": elapsed}
        last = epoch == config.epochs
        if config.eval_interval and (epoch % config.eval_interval == 0 or last) and len(split.test):
            rep = evaluate(result.scoring_table(), train_data, split.test, config.k)
            row["recall@20"], row["ndcg@20"] = rep.recall_at_k, rep.ndcg_at_k
            if rep.recall_at_k > best_recall:
                best_recall, since_best, result.best_epoch = rep.recall_at_k, 0, epoch
                best_table = table.copy() if config.restore_best else None
                result.report = rep
            else:
                since_best += config.eval_interval
            if not config.restore_best:
                result.report = rep
        result.history.append(row)
        result.temperature_log.append(stats)
        logger.debug("epoch %d loss %.4f tau0 %.4f recall %.4f", epoch, stats.mean_loss, stats.tau0, row["recall@20"])
        if callback is not None:
            callback(epoch, table, stats, row)
        if config.patience is not None and since_best >= config.patience:
            logger.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
            break
    if config.restore_best and best_table is not None:
        result.table = best_table
    else:
        result.table = table
    return result
