"""Metrics and the evaluation harness: coverage, CrI width, MSE, deferral and uncertainty-error correlation.

Report CSV layout (one row per metric point)::

    delta,metric,key,value
    1,coverage,0.95,0.9312
    1,width,0.99,403.2
    1,mse,0.0001,1523.7
    1,deferral,0.5,0.81
    1,uncertainty_corr,,0.42
    1,n,,1000
    ,config,seed,0          (config echo, values JSON-encoded)
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ArgumentError
from .models import bncde as bm
from .models import tecde as tm
from .models.inputs import encoder_grid, prepare_record

ALPHAS = (0.01, 0.02, 0.03, 0.04, 0.05)
DEFERRAL_RATES = tuple(round(0.1 * i, 1) for i in range(10))


def empirical_coverage(intervals, outcomes) -> float:
    """Fraction of outcomes inside their closed interval [lo, hi]."""
    iv = np.asarray(intervals, dtype=np.float64).reshape(-1, 2)
    y = np.asarray(outcomes, dtype=np.float64).reshape(-1)
    if iv.shape[0] != y.size:
        raise ArgumentError(f"{iv.shape[0]} intervals but {y.size} outcomes")
    if y.size == 0:
        raise ArgumentError("no outcomes")
    return float(np.mean((iv[:, 0] <= y) & (y <= iv[:, 1])))


def median_width(groups: dict) -> dict:
    """Median interval width per confidence level."""
    out = {}
    for level, intervals in groups.items():
        iv = np.asarray(intervals, dtype=np.float64).reshape(-1, 2)
        if iv.shape[0] == 0:
            raise ArgumentError(f"no intervals at level {level}")
        out[level] = float(np.median(iv[:, 1] - iv[:, 0]))
    return out


def point_mse(predicted, observed) -> float:
    p = np.asarray(predicted, dtype=np.float64).reshape(-1)
    y = np.asarray(observed, dtype=np.float64).reshape(-1)
    if p.size != y.size:
        raise ArgumentError(f"{p.size} predictions but {y.size} outcomes")
    if p.size == 0:
        raise ArgumentError("no predictions")
    return float(np.mean((p - y) ** 2))


def deferral_curve(model_uncertainty, te_errors, rates: Sequence[float] = DEFERRAL_RATES) -> np.ndarray:
    """MSE after withholding the ceil(r n) most uncertain patients, relative to r = 0.

    Ties in uncertainty are broken by patient order (stable sort).
    """
    u = np.asarray(model_uncertainty, dtype=np.float64).reshape(-1)
    e = np.asarray(te_errors, dtype=np.float64).reshape(-1)
    if u.size != e.size:
        raise ArgumentError(f"{u.size} uncertainties but {e.size} errors")
    n = u.size
    if n == 0:
        raise ArgumentError("no patients")
    base = float(np.mean(e))
    if base == 0:
        raise ArgumentError("all treatment-effect errors are zero; the curve cannot be normalized")
    order = np.argsort(-u, kind="stable")
    out = []
    for r in rates:
        if not 0 <= r < 1:
            raise ArgumentError(f"deferral rate {r} outside [0, 1)")
        drop = math.ceil(r * n - 1e-12)
        if drop >= n:
            raise ArgumentError(f"deferral rate {r} withholds every patient")
        out.append(1.0 if drop == 0 else float(np.mean(e[order[drop:]])) / base)
    return np.array(out)


def uncertainty_error_correlation(uncertainty, abs_error) -> float:
    """Pearson correlation coefficient."""
    x = np.asarray(uncertainty, dtype=np.float64).reshape(-1)
    y = np.asarray(abs_error, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ArgumentError("inputs differ in length")
    if x.size < 3:
        raise ArgumentError("need at least 3 points")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(xc @ xc)), math.sqrt(float(yc @ yc))
    if sx == 0 or sy == 0:
        raise ArgumentError("correlation undefined for zero variance")
    return float(xc @ yc) / (sx * sy)


# ---------------------------------------------------------------------------
# reports


@dataclass
class DeltaReport:
    delta: int
    n: int
    coverage_curve: dict[float, float]
    width_stats: dict[float, float]
    mse: dict[float, float]
    deferral_curve: dict[float, float] = field(default_factory=dict)
    uncertainty_corr: float | None = None


@dataclass
class EvalReport:
    model: str
    groups: list[DeltaReport]
    config: dict = field(default_factory=dict)

    def group(self, delta: int) -> DeltaReport:
        for g in self.groups:
            if g.delta == delta:
                return g
        raise KeyError(delta)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "config": self.config,
            "groups": [{
                "delta": g.delta, "n": g.n,
                "coverage_curve": {repr(k): v for k, v in g.coverage_curve.items()},
                "width_stats": {repr(k): v for k, v in g.width_stats.items()},
                "mse": {repr(k): v for k, v in g.mse.items()},
                "deferral_curve": {repr(k): v for k, v in g.deferral_curve.items()},
                "uncertainty_corr": g.uncertainty_corr,
            } for g in self.groups],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        groups = []
        for g in d["groups"]:
            conv = lambda m: {float(k): float(v) for k, v in m.items()}  # noqa: E731
            groups.append(DeltaReport(int(g["delta"]), int(g["n"]), conv(g["coverage_curve"]),
                                      conv(g["width_stats"]), conv(g["mse"]), conv(g["deferral_curve"]),
                                      g["uncertainty_corr"]))
        return cls(d["model"], groups, d.get("config", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["delta", "metric", "key", "value"])
        w.writerow(["", "model", "", self.model])
        for k in sorted(self.config):
            w.writerow(["", "config", k, json.dumps(self.config[k], sort_keys=True)])
        for g in self.groups:
            w.writerow([g.delta, "n", "", g.n])
            for name, m in (("coverage", g.coverage_curve), ("width", g.width_stats), ("mse", g.mse),
                            ("deferral", g.deferral_curve)):
                for k, v in m.items():
                    w.writerow([g.delta, name, repr(k), repr(v)])
            w.writerow([g.delta, "uncertainty_corr", "", "" if g.uncertainty_corr is None else repr(g.uncertainty_corr)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["delta", "metric", "key", "value"]:
            raise ArgumentError("not an evaluation report CSV")
        model, config, groups = "", {}, {}
        names = {"coverage": "coverage_curve", "width": "width_stats", "mse": "mse", "deferral": "deferral_curve"}
        for delta, metric, key, value in rows[1:]:
            if metric == "model":
                model = value
            elif metric == "config":
                config[key] = json.loads(value)
            else:
                g = groups.setdefault(int(delta), DeltaReport(int(delta), 0, {}, {}, {}, {}, None))
                if metric == "n":
                    g.n = int(value)
                elif metric == "uncertainty_corr":
                    g.uncertainty_corr = None if value == "" else float(value)
                else:
                    getattr(g, names[metric])[float(key)] = float(value)
        return cls(model, [groups[k] for k in groups], config)


# ---------------------------------------------------------------------------
# harness


@dataclass
class Predictions:
    """Raw-unit mixture components per patient: mu, var of shape (n, K)."""

    mu: np.ndarray
    var: np.ndarray

    def mixture(self, i: int) -> bm.PosteriorPredictive:
        return bm.PosteriorPredictive(self.mu[i], self.var[i])


def predict_preps(params, preps, standardizer, K: int, seed: int) -> Predictions:
    if isinstance(params, bm.BncdeParams):
        mu, var = bm.predict_rows(params, preps, K, seed)
    else:
        mu = tm.tecde_predict_rows(params, preps, K, seed)
        var = np.full(mu.shape, params.config.var_floor)
    return Predictions(standardizer.y_inverse(mu), standardizer.var_inverse(var))


def _predict_job(args):
    path, model, preps, std, K, seed = args
    params = (bm.BncdeParams if model == "bncde" else tm.TecdeParams).load(path)
    return predict_preps(params, preps, std, K, seed)


def predict_parallel(params, checkpoint: str | None, preps, standardizer, K: int, seed: int,
                     threads: int = 1) -> Predictions:
    """Predictions for ``preps``; with ``threads > 1`` records are split across processes.

    Every record's draws depend only on its key and the seed, so the result
    is identical to the serial computation.
    """
    if threads <= 1 or checkpoint is None or len(preps) < 2:
        return predict_preps(params, preps, standardizer, K, seed)
    model = "bncde" if isinstance(params, bm.BncdeParams) else "tecde"
    bounds = np.linspace(0, len(preps), min(threads, len(preps)) + 1).astype(int)
    jobs = [(checkpoint, model, preps[a:b], standardizer, K, seed) for a, b in zip(bounds[:-1], bounds[1:])]
    with ProcessPoolExecutor(threads) as pool:
        parts = list(pool.map(_predict_job, jobs))
    return Predictions(np.concatenate([p.mu for p in parts]), np.concatenate([p.var for p in parts]))


def intervals(pred: Predictions, alpha: float) -> np.ndarray:
    return np.array([bm.credible_interval(pred.mixture(i), alpha) for i in range(pred.mu.shape[0])])


def evaluate(params, records, standardizer, deltas=(1,), K: int = 100, seed: int = 0,
             alphas: Sequence[float] = ALPHAS, rates: Sequence[float] = DEFERRAL_RATES,
             deferral: bool = True, noise_level: float = 0.0, checkpoint: str | None = None,
             threads: int = 1, config: dict | None = None) -> EvalReport:
    """Full metric suite on test records for every prediction window in ``deltas``."""
    if not records:
        raise ArgumentError("no test records")
    if deferral and any(r.counterfactual is None for r in records):
        raise ArgumentError("deferral curves need counterfactual outcomes on every test record")
    h_max = params.config.h_max
    grid = encoder_grid(h_max)
    groups = []
    for delta in deltas:
        preps = [prepare_record(r, standardizer, delta, grid) for r in records]
        y = np.array([r.factual.targets[int(delta)] for r in records])
        pred = predict_parallel(params, checkpoint, preps, standardizer, K, seed, threads)
        means = pred.mu.mean(axis=1)
        coverage, widths = {}, {}
        for a in alphas:
            iv = intervals(pred, a)
            level = round(1.0 - a, 10)
            coverage[level] = empirical_coverage(iv, y)
            widths[level] = float(np.median(iv[:, 1] - iv[:, 0]))
        report = DeltaReport(int(delta), len(records), coverage, widths, {float(noise_level): point_mse(means, y)})
        report.uncertainty_corr = _safe_corr(pred.var.mean(axis=1), np.abs(means - y))
        if deferral:
            cf_preps = [prepare_record(r, standardizer, delta, grid, counterfactual=True) for r in records]
            cf = predict_parallel(params, checkpoint, cf_preps, standardizer, K, seed, threads)
            y_cf = np.array([r.counterfactual.targets[int(delta)] for r in records])
            effect_samples = pred.mu - cf.mu
            te_err = (effect_samples.mean(axis=1) - (y - y_cf)) ** 2
            curve = deferral_curve(effect_samples.var(axis=1), te_err, rates)
            report.deferral_curve = {float(r): float(v) for r, v in zip(rates, curve)}
        groups.append(report)
    model = "bncde" if isinstance(params, bm.BncdeParams) else "tecde"
    return EvalReport(model, groups, dict(config or {}))


def _safe_corr(x, y) -> float | None:
    try:
        return uncertainty_error_correlation(x, y)
    except ArgumentError:
        return None


def write_report(report: EvalReport, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
