"""Continuous control paths built from irregular samples.

A :class:`HermitePath` is the per-channel cubic Hermite interpolant whose knot
slopes are backward differences ``m_i = (x_i - x_{i-1}) / (t_i - t_{i-1})``
with ``m_0 = m_1``.  On ``[t_i, t_{i+1}]`` the slopes used are ``m_i`` and
``m_{i+1}``, so the path is C1 and reproduces affine data exactly.  Queries
outside the knot range return the boundary value.

Encoder control channels: ``[t / horizon, y, n_chemo, n_radio, a_chemo, a_radio]``
(outcome and counts standardized; ``a_*`` are 0/1 indicators that are one at
an administration time).  Static covariates are constant in time and have
zero increments, so they only enter through the embedding network.

Decoder control channels: ``[tau / delta, n_chemo, n_radio, a_chemo, a_radio]``
with counts starting from zero at the start of the prediction window.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import TREATMENTS, PatientRecord, Standardizer, TreatmentEvent, Trajectory, treatment_counts
from .errors import ArgumentError

ENCODER_CHANNELS = ("time", "y") + tuple(f"n_{k}" for k in TREATMENTS) + tuple(f"a_{k}" for k in TREATMENTS)
DECODER_CHANNELS = ("time",) + tuple(f"n_{k}" for k in TREATMENTS) + tuple(f"a_{k}" for k in TREATMENTS)


@dataclass(frozen=True)
class SamplePath:
    timestamps: np.ndarray
    channels: np.ndarray
    channel_names: tuple[str, ...] = ()

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=np.float64)
        x = np.asarray(self.channels, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if t.ndim != 1 or t.size < 2:
            raise ArgumentError("a sample path needs at least 2 timestamps")
        if np.any(np.diff(t) <= 0):
            raise ArgumentError("timestamps must be strictly increasing")
        if x.shape[0] != t.size:
            raise ArgumentError(f"{t.size} timestamps but {x.shape[0]} rows of channel data")
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "channels", x)
        if not self.channel_names:
            object.__setattr__(self, "channel_names", tuple(f"c{i}" for i in range(x.shape[1])))


@dataclass(frozen=True)
class HermitePath:
    knots: np.ndarray
    values: np.ndarray
    slopes: np.ndarray
    channel_names: tuple[str, ...] = ()

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def t_first(self) -> float:
        return float(self.knots[0])

    @property
    def t_last(self) -> float:
        return float(self.knots[-1])

    def evaluate(self, t) -> np.ndarray:
        """Path values at time(s) ``t``: shape (n_channels,) or (len(t), n_channels)."""
        scalar = np.ndim(t) == 0
        tq = np.clip(np.atleast_1d(np.asarray(t, dtype=np.float64)), self.knots[0], self.knots[-1])
        k = self.knots
        i = np.clip(np.searchsorted(k, tq, side="right") - 1, 0, k.size - 2)
        h = (k[i + 1] - k[i])[:, None]
        s = ((tq - k[i])[:, None]) / h
        s2, s3 = s * s, s * s * s
        h00 = 2 * s3 - 3 * s2 + 1
        h10 = s3 - 2 * s2 + s
        h01 = -2 * s3 + 3 * s2
        h11 = s3 - s2
        out = (h00 * self.values[i] + h10 * h * self.slopes[i]
               + h01 * self.values[i + 1] + h11 * h * self.slopes[i + 1])
        # exact at knots, whatever rounding the basis introduces
        exact = tq == k[np.minimum(i + 1, k.size - 1)]
        out[exact] = self.values[i + 1][exact]
        at_left = tq == k[i]
        out[at_left] = self.values[i][at_left]
        return out[0] if scalar else out


def build_hermite(samples: SamplePath) -> HermitePath:
    t, x = samples.timestamps, samples.channels
    slopes = np.empty_like(x)
    slopes[1:] = np.diff(x, axis=0) / np.diff(t)[:, None]
    slopes[0] = slopes[1]
    return HermitePath(t.copy(), x.copy(), slopes, samples.channel_names)


def path_increment(path: HermitePath, t0: float, t1: float) -> np.ndarray:
    """X(t1) - X(t0) per channel."""
    if t0 > t1:
        raise ArgumentError(f"increment needs t0 <= t1, got {t0} > {t1}")
    if t0 == t1:
        return np.zeros(path.n_channels)
    return path.evaluate(t1) - path.evaluate(t0)


def grid_increments(path: HermitePath, grid: np.ndarray) -> np.ndarray:
    """Increments over consecutive grid points, shape (len(grid) - 1, n_channels)."""
    return np.diff(path.evaluate(np.asarray(grid, dtype=np.float64)), axis=0)


def _indicators(events: Sequence[TreatmentEvent], times: np.ndarray) -> np.ndarray:
    out = np.zeros((times.size, len(TREATMENTS)))
    for e in events:
        hit = np.isclose(times, e.time, rtol=0.0, atol=1e-9)
        out[hit, TREATMENTS.index(e.kind)] = 1.0
    return out


def build_decoder_control(future_treatments: Sequence[TreatmentEvent], step_grid, delta: float | None = None,
                          time_scale: float | None = None) -> HermitePath:
    """Control path over the prediction window from a future treatment plan.

    ``future_treatments`` carry times relative to the window start, in
    ``(0, delta]``; ``delta`` defaults to the last grid point.  Event times are
    merged into the sample grid so counts and indicators are exact there.
    """
    grid = np.asarray(step_grid, dtype=np.float64)
    delta = float(grid[-1]) if delta is None else float(delta)
    for e in future_treatments:
        if not 0.0 < e.time <= delta:
            raise ArgumentError(f"treatment at {e.time} lies outside the window (0, {delta}]")
    times = np.union1d(np.union1d(grid, [e.time for e in future_treatments]), [0.0, delta])
    scale = delta if time_scale is None else time_scale
    channels = np.column_stack([
        times / scale,
        treatment_counts(future_treatments, times),
        _indicators(future_treatments, times),
    ])
    return build_hermite(SamplePath(times, channels, DECODER_CHANNELS))


def encoder_sample_path(record: PatientRecord | Trajectory, standardizer: Standardizer,
                        horizon: float = 55.0) -> SamplePath:
    """Samples of the encoder control on observation and treatment times up to t_bar.

    The outcome is forward-filled at treatment times without an observation.
    """
    traj = record.factual if isinstance(record, PatientRecord) else record
    tb = traj.t_bar
    events = [e for e in traj.treatments if e.time <= tb]
    times = np.union1d(traj.obs_times, [e.time for e in events])
    if times.size < 2:
        # a single observation at t=0: a flat path on [0, t_bar] with one extra knot
        times = np.array([0.0, max(tb, 1e-6) if tb > 0 else 1e-6])
    idx = np.searchsorted(traj.obs_times, times, side="right") - 1
    y = standardizer.y(traj.y[np.clip(idx, 0, None)])
    counts = standardizer.counts(treatment_counts(events, times))
    channels = np.column_stack([times / horizon, y, counts, _indicators(events, times)])
    return SamplePath(times, channels, ENCODER_CHANNELS)


def build_encoder_control(record: PatientRecord | Trajectory, standardizer: Standardizer,
                          horizon: float = 55.0) -> HermitePath:
    return build_hermite(encoder_sample_path(record, standardizer, horizon))
