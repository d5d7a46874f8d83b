"""Pharmacokinetic-pharmacodynamic tumour growth simulator.

Volume dynamics (days)::

    dY = [g0 + rho log(K / Y) - alpha_c c_t - (alpha_r d_t + beta_r d_t^2) + eps_t] Y dt

integrated by explicit Euler on a fine grid.  ``g0`` is ``growth_offset``;
``c_t`` is the chemotherapy concentration (unit dose per administration,
exponential decay with a one-day half-life) and ``d_t`` the radiotherapy dose
(a unit pulse lasting the day of administration).  ``eps_t`` is redrawn every
Euler step.  Volumes are floored at ``volume_floor`` and, when
``volume_cap`` is set, capped from above.

Observations are thinned from the integer days 0..55: day ``t`` is kept with
probability ``sigmoid(gamma (Dbar_t / D - 1/2))`` where ``Dbar_t`` is the mean
tumour diameter over the trailing 15 days and ``D = 13`` cm.  Day 0 is always
kept.

Every patient owns three random streams (parameters, dynamics noise,
observation thinning) derived from ``(seed, split, index)``.  A test
patient's counterfactual twin reuses the parameters and both noise streams
under the other treatment arm.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .data import ARMS, Dataset, PatientRecord, Standardizer, TreatmentEvent, Trajectory
from .errors import ArgumentError

# (mean, variance) pairs
RHO = (7.00e-5, 7.23e-3)
ALPHA_R = (0.0398, 0.168)
ALPHA_C = (0.028, 7.00e-4)
CARRYING_CAPACITY = 30.0
BETA_R_RATIO = 10.0
SUBGROUP_INFLATION = 0.10

OBS_WINDOW = 55
MAX_DELTA = 5
DIAMETER_REF = 13.0
DIAMETER_WINDOW = 15

SPLIT_CODES = {"train": 0, "val": 1, "test": 2}

# initial diameter per cancer stage: log-normal (mu, sigma) truncated to [lo, hi] cm, and stage counts
STAGE_DIAMETERS = {
    "I": (1.72, 4.70, 0.3, 5.0),
    "II": (1.96, 1.63, 0.3, 13.0),
    "IIIA": (1.91, 9.40, 0.3, 13.0),
    "IIIB": (2.76, 6.87, 0.3, 13.0),
    "IV": (3.86, 8.82, 0.3, 13.0),
}
STAGE_COUNTS = {"I": 1432, "II": 128, "IIIA": 1306, "IIIB": 7248, "IV": 12840}


def sphere_volume(diameter):
    return math.pi / 6.0 * np.asarray(diameter) ** 3


def sphere_diameter(volume):
    return np.cbrt(6.0 * np.asarray(volume) / math.pi)


@dataclass(frozen=True)
class TumorParams:
    rho: float
    K: float
    alpha_c: float
    alpha_r: float
    beta_r: float
    subgroup: int
    y0: float = 1.0


def sample_params(rng: np.random.Generator, subgroup: int, *, reject_negative_kill: bool = False,
                  y0: float | None = None) -> TumorParams:
    """Draw patient dynamics parameters.

    Subgroup 1 raises the mean radio kill by 10 %, subgroup 2 the mean chemo
    kill.  With ``reject_negative_kill`` negative kill draws are redrawn
    (this shifts the sample means away from the nominal values).
    """
    if subgroup not in (0, 1, 2):
        raise ArgumentError(f"subgroup must be 0, 1 or 2, got {subgroup}")
    mu_r = ALPHA_R[0] * (1.0 + SUBGROUP_INFLATION * (subgroup == 1))
    mu_c = ALPHA_C[0] * (1.0 + SUBGROUP_INFLATION * (subgroup == 2))
    rho = rng.normal(RHO[0], math.sqrt(RHO[1]))
    alpha_r = rng.normal(mu_r, math.sqrt(ALPHA_R[1]))
    alpha_c = rng.normal(mu_c, math.sqrt(ALPHA_C[1]))
    if reject_negative_kill:
        while alpha_r < 0:
            alpha_r = rng.normal(mu_r, math.sqrt(ALPHA_R[1]))
        while alpha_c < 0:
            alpha_c = rng.normal(mu_c, math.sqrt(ALPHA_C[1]))
    if y0 is None:
        y0 = sample_initial_volume(rng)
    return TumorParams(float(rho), CARRYING_CAPACITY, float(alpha_c), float(alpha_r),
                       float(BETA_R_RATIO * alpha_r), subgroup, float(y0))


def sample_initial_volume(rng: np.random.Generator) -> float:
    """Initial volume from a stage mixture of truncated log-normal diameters."""
    stages = list(STAGE_COUNTS)
    p = np.array([STAGE_COUNTS[s] for s in stages], dtype=np.float64)
    stage = stages[rng.choice(len(stages), p=p / p.sum())]
    mu, sigma, lo, hi = STAGE_DIAMETERS[stage]
    a, b = ndtr((math.log(lo) - mu) / sigma), ndtr((math.log(hi) - mu) / sigma)
    z = ndtri(a + (b - a) * rng.random())
    return float(sphere_volume(math.exp(mu + sigma * z)))


def treatment_schedule(arm: str, rng: np.random.Generator | None = None,
                       window: float = OBS_WINDOW) -> list[TreatmentEvent]:
    """Deterministic arm schedules clipped to [0, window].

    sequential: weekly chemo on days 0..28, then weekly radio from day 35.
    concurrent: chemo and radio together every two weeks from day 0.
    """
    if arm == "sequential":
        events = [TreatmentEvent(float(d), "chemo") for d in range(0, 35, 7)]
        events += [TreatmentEvent(float(d), "radio") for d in range(35, 70, 7)]
    elif arm == "concurrent":
        events = [TreatmentEvent(float(d), k) for d in range(0, 70, 14) for k in ("chemo", "radio")]
    else:
        raise ArgumentError(f"unknown arm {arm!r}")
    return sorted(e for e in events if e.time <= window)


@dataclass(frozen=True)
class OutcomePath:
    times: np.ndarray
    volume: np.ndarray
    steps_per_day: int

    def daily(self) -> np.ndarray:
        """Volume at integer days 0, 1, ..."""
        return self.volume[:: self.steps_per_day]

    def at_day(self, day: int) -> float:
        return float(self.volume[int(day) * self.steps_per_day])


def simulate_outcome(params: TumorParams, schedule, noise_seed, h_sim: float = 0.05, *,
                     horizon: float = OBS_WINDOW + MAX_DELTA, noise_var: float = 0.01**2,
                     growth_offset: float = 1.0, volume_floor: float = 1e-3,
                     volume_cap: float | None = None, chemo_dose: float = 1.0, radio_dose: float = 1.0,
                     chemo_half_life: float = 1.0, y0: float | None = None) -> OutcomePath:
    """Euler path of the tumour volume on a grid of step ``h_sim`` (1/h_sim must be an integer)."""
    y = params.y0 if y0 is None else y0
    if not y > 0:
        raise ArgumentError(f"initial volume must be positive, got {y}")
    per_day = int(round(1.0 / h_sim))
    if abs(per_day * h_sim - 1.0) > 1e-9:
        raise ArgumentError("1 / h_sim must be an integer")
    n = int(round(horizon * per_day))
    rng = np.random.default_rng(noise_seed)
    eps = rng.standard_normal(n) * math.sqrt(noise_var)

    chemo_at = np.zeros(n + 1)
    radio_at = np.zeros(n + 1, dtype=bool)
    for e in schedule:
        k = int(round(e.time * per_day))
        if k > n:
            continue
        if e.kind == "chemo":
            chemo_at[k] += chemo_dose
        else:
            radio_at[k: k + per_day] = True
    decay = 0.5 ** (h_sim / chemo_half_life)

    rho, K, a_c, a_r, b_r = params.rho, params.K, params.alpha_c, params.alpha_r, params.beta_r
    d, d2 = radio_dose, radio_dose * radio_dose
    log, floor = math.log, volume_floor
    cap = math.inf if volume_cap is None else volume_cap
    vol = [0.0] * (n + 1)
    vol[0] = y
    c = 0.0
    for k in range(n):
        c = c * decay + chemo_at[k]
        rate = growth_offset + rho * log(K / y) - a_c * c + eps[k]
        if radio_at[k]:
            rate -= a_r * d + b_r * d2
        y = y + rate * y * h_sim
        if y < floor:
            y = floor
        elif y > cap:
            y = cap
        vol[k + 1] = y
    times = np.arange(n + 1) / per_day
    return OutcomePath(times, np.array(vol), per_day)


def observation_probability(diameter_mean, gamma: float, diameter_ref: float = DIAMETER_REF):
    x = gamma * (np.asarray(diameter_mean, dtype=np.float64) / diameter_ref - 0.5)
    return 1.0 / (1.0 + np.exp(-x))


def observation_times(daily_volume, gamma: float, rng: np.random.Generator | None = None,
                      window: int = OBS_WINDOW, uniforms: np.ndarray | None = None) -> np.ndarray:
    """Thin the integer days 1..window; day 0 is always observed.

    ``uniforms`` (length ``window``) may be supplied instead of ``rng`` so that
    twins share the thinning draws.
    """
    if gamma < 0:
        raise ArgumentError(f"gamma must be non-negative, got {gamma}")
    diam = sphere_diameter(np.asarray(daily_volume, dtype=np.float64)[: window + 1])
    csum = np.concatenate([[0.0], np.cumsum(diam)])
    days = np.arange(1, window + 1)
    lo = np.maximum(days - DIAMETER_WINDOW + 1, 0)
    dbar = (csum[days + 1] - csum[lo]) / (days + 1 - lo)
    prob = observation_probability(dbar, gamma)
    u = rng.random(window) if uniforms is None else np.asarray(uniforms)
    keep = u < prob
    return np.concatenate([[0.0], days[keep].astype(np.float64)])


@dataclass
class SimConfig:
    n_train: int = 10000
    n_val: int = 1000
    n_test: int = 10000
    gamma: float = 1.0
    noise_var: float = 0.01**2
    seed: int = 0
    h_sim: float = 0.05
    growth_offset: float = 0.0
    volume_cap: float | None = field(default_factory=lambda: float(sphere_volume(DIAMETER_REF)))
    volume_floor: float = 1e-3
    reject_negative_kill: bool = False
    threads: int = 1

    def __post_init__(self):
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"{name} must be >= 1")
        if self.gamma < 0:
            raise ArgumentError("gamma must be non-negative")
        if self.noise_var < 0:
            raise ArgumentError("noise_var must be non-negative")


def patient_streams(seed: int, split: str, index: int) -> tuple[np.random.Generator, int, np.random.Generator]:
    """(parameter rng, dynamics noise seed, observation rng) for one patient."""
    ss = np.random.SeedSequence([int(seed), SPLIT_CODES[split], int(index)])
    p, noise, obs = ss.spawn(3)
    return np.random.default_rng(p), int(noise.generate_state(1, np.uint64)[0]), np.random.default_rng(obs)


def _trajectory(params: TumorParams, arm: str, noise_seed: int, uniforms: np.ndarray, cfg: SimConfig) -> Trajectory:
    schedule = treatment_schedule(arm)
    path = simulate_outcome(params, schedule, noise_seed, cfg.h_sim, noise_var=cfg.noise_var,
                            growth_offset=cfg.growth_offset, volume_floor=cfg.volume_floor,
                            volume_cap=cfg.volume_cap)
    daily = path.daily()
    obs = observation_times(daily, cfg.gamma, uniforms=uniforms)
    idx = obs.astype(int)
    t_bar = int(idx[-1])
    targets = {delta: float(daily[t_bar + delta]) for delta in range(1, MAX_DELTA + 1)}
    return Trajectory(arm, obs, daily[idx], schedule, targets)


def simulate_patient(cfg: SimConfig, split: str, index: int) -> PatientRecord:
    prng, noise_seed, orng = patient_streams(cfg.seed, split, index)
    subgroup = int(prng.integers(3))
    params = sample_params(prng, subgroup, reject_negative_kill=cfg.reject_negative_kill)
    arm = ARMS[int(prng.integers(2))]
    uniforms = orng.random(OBS_WINDOW)
    factual = _trajectory(params, arm, noise_seed, uniforms, cfg)
    twin = None
    if split == "test":
        other = ARMS[1 - ARMS.index(arm)]
        twin = _trajectory(params, other, noise_seed, uniforms, cfg)
    return PatientRecord(index, split, subgroup, factual, twin, asdict(params))


def _simulate_chunk(args):
    cfg, split, lo, hi = args
    return [simulate_patient(cfg, split, i) for i in range(lo, hi)]


def generate_dataset(cfg: SimConfig) -> Dataset:
    """Simulate train/val/test splits and fit standardization on the training split."""
    splits = {}
    for split, n in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        if cfg.threads > 1 and n > 1:
            bounds = np.linspace(0, n, min(cfg.threads * 4, n) + 1).astype(int)
            jobs = [(cfg, split, lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]
            with ProcessPoolExecutor(cfg.threads) as pool:
                splits[split] = [r for chunk in pool.map(_simulate_chunk, jobs) for r in chunk]
        else:
            splits[split] = [simulate_patient(cfg, split, i) for i in range(n)]
    std = Standardizer.fit(splits["train"])
    return Dataset(splits["train"], splits["val"], splits["test"], std)
