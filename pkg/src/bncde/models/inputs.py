"""Per-record network inputs: embedding vector, encoder control increments and decoder plans.

Encoders of all patients share one time grid on [0, 55] that contains every
integer day; each row stops evolving at its own ``t_bar`` (the control path
is constant past the last knot, so its increments vanish there).  Decoders
share a grid on [0, delta] built from the union of the batch's future
treatment times.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..controlpath import build_decoder_control, build_encoder_control, encoder_sample_path
from ..data import TREATMENTS, PatientRecord, Standardizer, TreatmentEvent, Trajectory
from ..errors import ArgumentError
from ..solvers import TimeGrid, make_grid
from .config import OBS_HORIZON

N_DAYS = int(OBS_HORIZON) + 1


@dataclass
class Prepared:
    """Everything the networks need about one trajectory.

    Attributes:
        key: stable integer used to derive the record's noise streams.
        emb_in: embedding input [y0, counts, subgroup one-hot, time, indicators].
        enc_dX: encoder control increments on the shared encoder grid.
        t_bar: last observation time.
        future: treatment events in (0, delta], relative to t_bar.
        delta: prediction window in days.
        target: standardized outcome at t_bar + delta (nan when unknown).
        observed_days: 0/1 per integer day 1..55 (observation indicator).
        treated_days: (56, n_treatments) administration indicators per day.
    """

    key: int
    emb_in: np.ndarray
    enc_dX: np.ndarray
    t_bar: float
    future: list[TreatmentEvent]
    delta: float
    target: float
    observed_days: np.ndarray
    treated_days: np.ndarray


def encoder_grid(h_max: float) -> TimeGrid:
    return make_grid(np.arange(N_DAYS, dtype=np.float64), OBS_HORIZON, h_max)


def decoder_grid(preps: Sequence[Prepared], h_max: float) -> TimeGrid:
    delta = preps[0].delta
    if any(p.delta != delta for p in preps):
        raise ArgumentError("all records in a batch must share the prediction window")
    times = {float(t) for t in range(int(np.floor(delta)) + 1) if t <= delta}
    for p in preps:
        times.update(e.time for e in p.future)
    return make_grid(sorted(times), delta, h_max)


def prepare(traj: Trajectory, subgroup_onehot: np.ndarray, standardizer: Standardizer, delta: float,
            grid: TimeGrid, key: int = 0, future: Sequence[TreatmentEvent] | None = None) -> Prepared:
    """Build the inputs of one trajectory; ``future`` defaults to the trajectory's own plan."""
    if traj.obs_times.size < 1:
        raise ArgumentError("record has no observations")
    if traj.t_bar > OBS_HORIZON:
        raise ArgumentError(f"observations beyond day {OBS_HORIZON:g} are not supported")
    samples = encoder_sample_path(traj, standardizer, OBS_HORIZON)
    path = build_encoder_control(traj, standardizer, OBS_HORIZON)
    enc_dX = np.diff(path.evaluate(grid.points), axis=0)
    first = samples.channels[0]
    # y0, counts, then subgroup, then time and indicators
    emb_in = np.concatenate([first[1:2], first[2:2 + len(TREATMENTS)], subgroup_onehot, first[0:1],
                             first[2 + len(TREATMENTS):]])
    plan = traj.future_treatments(delta) if future is None else list(future)
    t = traj.targets.get(int(delta)) if float(delta).is_integer() else None
    target = float(standardizer.y(t)) if t is not None else float("nan")
    observed = np.zeros(N_DAYS - 1)
    days = traj.obs_times[(traj.obs_times >= 1) & (traj.obs_times == np.round(traj.obs_times))].astype(int)
    observed[days - 1] = 1.0
    treated = np.zeros((N_DAYS, len(TREATMENTS)))
    for e in traj.treatments:
        if e.time <= OBS_HORIZON and float(e.time).is_integer():
            treated[int(e.time), TREATMENTS.index(e.kind)] = 1.0
    return Prepared(int(key), emb_in, enc_dX, traj.t_bar, plan, float(delta), target, observed, treated)


def prepare_record(record: PatientRecord, standardizer: Standardizer, delta: float, grid: TimeGrid,
                   counterfactual: bool = False) -> Prepared:
    traj = record.counterfactual if counterfactual else record.factual
    if traj is None:
        raise ArgumentError(f"record {record.patient_id} has no counterfactual trajectory")
    return prepare(traj, record.subgroup_onehot, standardizer, delta, grid, key=record.patient_id)


def decoder_increments(preps: Sequence[Prepared], grid: TimeGrid) -> np.ndarray:
    """(steps, len(preps), n_channels) decoder control increments on ``grid``."""
    out = []
    for p in preps:
        path = build_decoder_control(p.future, grid.points, p.delta)
        out.append(np.diff(path.evaluate(grid.points), axis=0))
    return np.stack(out, axis=1)
