"""Adam, early stopping and the epoch loop shared by both models.

A batch is split into chunks of at most ``rows_per_chunk`` rows (records
times particles).  Each chunk builds its own graph, is back-propagated, and
its parameter gradients are summed in a fixed order, so the batch gradient
does not depend on memory limits beyond float rounding of the chunk sums.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import diffcore as dc
from ..errors import NumericalError
from . import bncde as bm
from . import tecde as tm
from .inputs import Prepared, decoder_grid, encoder_grid


class Adam:
    """Adam with one learning rate per parameter group."""

    def __init__(self, lrs: dict[str, float], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lrs = dict(lrs)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, groups: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Descend along ``grads`` (gradients of the loss), replacing arrays in ``groups``."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m.get(name, np.zeros_like(g)) * b1 + (1.0 - b1) * g
            v = self.v.get(name, np.zeros_like(g)) * b2 + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            groups[name] = groups[name] - self.lrs[name] * (m / c1) / (np.sqrt(v / c2) + self.eps)


class EarlyStopping:
    """Stops after ``patience`` consecutive epochs without a strict improvement (higher is better)."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, value: float, epoch: int) -> bool:
        if value > self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train: float
    val: float
    wall: float = 0.0


@dataclass
class TrainLog:
    metric: str
    initial_val: float
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def csv_rows(self) -> list[str]:
        rows = [f"epoch,train_{self.metric},val_{self.metric}"]
        rows += [f"{e.epoch},{e.train!r},{e.val!r}" for e in self.epochs]
        return rows

    def timing_rows(self) -> list[str]:
        return ["epoch,wall_seconds"] + [f"{e.epoch},{e.wall:.3f}" for e in self.epochs]


def _chunks(preps: Sequence[Prepared], rows_per_record: int, rows_per_chunk: int):
    per = max(1, rows_per_chunk // rows_per_record)
    for lo in range(0, len(preps), per):
        yield preps[lo:lo + per]


class BncdeObjective:
    """Training/validation objective of the BNCDE with its optional extensions."""

    metric = "elbo"

    def __init__(self, params: bm.BncdeParams):
        self.cfg = params.config
        self.J = self.cfg.mc_train
        self.rows_per_record = self.J * (self.J if self.cfg.full_grid else 1)

    def lrs(self):
        return bm.learning_rates(self.cfg)

    def chunk(self, P, preps, scale, epoch, stream, grids):
        """(node to maximize, monitored value) for one chunk; both already scaled."""
        cfg = self.cfg
        kw = dict(enc_grid=grids[0], dec_grid=grids[1])
        if cfg.intensity_weighting:
            obj, head, _, terms = bm.intensity_weighted_objective(P, cfg, preps, self.J, cfg.seed, stream, epoch,
                                                                  **kw)
            obj = dc.scale(obj, scale * len(preps))
            monitored = float(obj.value)
            obj = dc.sub(obj, dc.scale(head, scale * len(preps)))
        else:
            obj, terms = bm.elbo_objective(P, cfg, preps, self.J, cfg.seed, stream, epoch, scale=scale, **kw)
            monitored = float(obj.value)
        if cfg.balancing and cfg.alpha_bal != 0:
            bce = bm.balancing_bce(P, preps, terms)
            obj = dc.add(obj, dc.scale(bce, cfg.alpha_bal * scale * len(preps)))
        return obj, monitored


class TecdeObjective:
    """Negative MSE of the TE-CDE with dropout active, plus optional extensions."""

    metric = "neg_mse"
    rows_per_record = 1

    def __init__(self, params: tm.TecdeParams):
        self.cfg = params.config

    def lrs(self):
        return tm.tecde_learning_rates(self.cfg)

    def chunk(self, P, preps, scale, epoch, stream, grids):
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, stream, epoch, preps[0].key, len(preps)])
        terms = tm.tecde_terms(P, cfg, preps, rng, enc_grid=grids[0], dec_grid=grids[1])
        if cfg.intensity_weighting:
            w = bm.intensity_weights(P, terms, cfg.intensity_clamp)
            obj = dc.scale(dc.sum(dc.div(terms.elbo, w)), scale)
            monitored = float(obj.value)
            obj = dc.sub(obj, dc.scale(bm.intensity_loss(P, preps, terms), scale * len(preps)))
        else:
            obj = dc.scale(dc.sum(terms.elbo), scale)
            monitored = float(obj.value)
        if cfg.balancing and cfg.alpha_bal != 0:
            bce = bm.balancing_bce(P, preps, terms)
            obj = dc.add(obj, dc.scale(bce, cfg.alpha_bal * scale * len(preps)))
        return obj, monitored


def make_objective(params):
    return BncdeObjective(params) if isinstance(params, bm.BncdeParams) else TecdeObjective(params)


def batch_step(params, objective, preps: Sequence[Prepared], epoch: int, grids) -> tuple[float, dict]:
    """Objective value and loss gradients (of minus the objective) for one batch."""
    cfg = params.config
    total, grads = 0.0, {}
    scale = 1.0 / len(preps)
    for part in _chunks(preps, objective.rows_per_record, cfg.rows_per_chunk):
        P = {k: dc.leaf(v) for k, v in params.groups.items()}
        obj, monitored = objective.chunk(P, part, scale, epoch, bm.STREAM_TRAIN, grids)
        if not math.isfinite(float(obj.value)):
            raise NumericalError(f"non-finite training objective at epoch {epoch} "
                                 f"(records {part[0].key}..{part[-1].key}): {float(obj.value)}")
        g = dc.backward(obj, seed=-1.0)
        for name, node in P.items():
            gn = dc.grad_of(g, node)
            grads[name] = grads[name] + gn if name in grads else gn
        total += monitored
    for name, gn in grads.items():
        if not np.all(np.isfinite(gn)):
            raise NumericalError(f"non-finite gradient for parameter group {name!r} at epoch {epoch}")
    return total, grads


def evaluate_objective(params, objective, preps: Sequence[Prepared], grids, stream: int = bm.STREAM_VAL,
                       epoch: int = 0) -> float:
    """Mean objective over ``preps`` without gradients."""
    total = 0.0
    scale = 1.0 / len(preps)
    with dc.no_grad():
        P = {k: dc.constant(v) for k, v in params.groups.items()}
        for part in _chunks(preps, objective.rows_per_record, params.config.rows_per_chunk * 4):
            _, monitored = objective.chunk(P, part, scale, epoch, stream, grids)
            total += monitored
    if not math.isfinite(total):
        raise NumericalError(f"non-finite validation objective: {total}")
    return total


def train(params, train_preps: Sequence[Prepared], val_preps: Sequence[Prepared],
          on_epoch: Callable[[EpochRecord], None] | None = None, max_epochs: int | None = None):
    """Adam with early stopping on the validation objective; returns (best params, log)."""
    cfg = params.config
    params = params.copy()
    objective = make_objective(params)
    enc = encoder_grid(cfg.h_max)
    grids_train = (enc, decoder_grid(train_preps, cfg.h_max))
    grids_val = (enc, decoder_grid(val_preps, cfg.h_max))
    opt = Adam({k: objective.lrs()[k] for k in params.groups})
    stopper = EarlyStopping(cfg.patience)
    log = TrainLog(objective.metric, evaluate_objective(params, objective, val_preps, grids_val))
    best = params.copy()
    epochs = cfg.max_epochs if max_epochs is None else max_epochs
    n = len(train_preps)
    for epoch in range(1, epochs + 1):
        start = time.perf_counter()
        order = np.random.default_rng([cfg.seed, 7, epoch]).permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            batch = [train_preps[i] for i in order[lo:lo + cfg.batch_size]]
            value, grads = batch_step(params, objective, batch, epoch, grids_train)
            opt.step(params.groups, grads)
            total += value * len(batch)
        val = evaluate_objective(params, objective, val_preps, grids_val)
        rec = EpochRecord(epoch, total / n, val, time.perf_counter() - start)
        log.epochs.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        stop = stopper.update(val, epoch)
        if stopper.best_epoch == epoch:
            best = params.copy()
        if stop:
            log.stopped_early = True
            break
    log.best_epoch = stopper.best_epoch
    return best, log
