"""Fixed-grid explicit solvers for the coupled weight-SDE / latent-CDE system.

All states carry a leading particle axis R: the weight state is (R, d_w) and
the latent CDE state is (R, d_z).  Each step of :func:`coupled_integrate`
uses the pre-step weights for the CDE update and then advances the weights
by Euler-Maruyama, so running the two halves separately with the same noise
gives bitwise identical results.

The path-space KL integrand ``||(g - h) / sigma||^2`` is accumulated per
particle along the way (no 1/2 factor unless ``kl_half_factor`` is set).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .controlpath import HermitePath
from .errors import ArgumentError, ContractError, DomainError

Drift = Callable[[dc.Node, float], dc.Node]
PriorDrift = Callable[[dc.Node], dc.Node]
Field = Callable[[dc.Node, float, dc.Node], dc.Node]


@dataclass(frozen=True)
class TimeGrid:
    points: np.ndarray
    is_knot: np.ndarray = field(repr=False)

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.points)

    @property
    def horizon(self) -> float:
        return float(self.points[-1])

    def __len__(self) -> int:
        return self.points.size

    def same_as(self, other: "TimeGrid") -> bool:
        return self.points.shape == other.points.shape and bool(np.all(self.points == other.points))


def make_grid(obs_times: Sequence[float], horizon: float, h_max: float) -> TimeGrid:
    """Union of the observation times, 0 and ``horizon``, refined uniformly so no gap exceeds ``h_max``."""
    if not horizon > 0:
        raise ArgumentError(f"horizon must be positive, got {horizon}")
    if not h_max > 0:
        raise ArgumentError(f"h_max must be positive, got {h_max}")
    obs = np.asarray(obs_times, dtype=np.float64)
    if obs.size and (obs.min() < 0 or obs.max() > horizon):
        raise ArgumentError("observation times must lie in [0, horizon]")
    knots = np.union1d(obs, [0.0, float(horizon)])
    points = [knots[:1]]
    flags = [np.array([True])]
    for a, b in zip(knots[:-1], knots[1:]):
        n = max(1, math.ceil((b - a) / h_max - 1e-9))
        inner = a + (b - a) * np.arange(1, n) / n
        points += [inner, [b]]
        flags += [np.zeros(inner.size, dtype=bool), [True]]
    return TimeGrid(np.concatenate(points).astype(np.float64), np.concatenate(flags))


def grid_from_points(points: Sequence[float]) -> TimeGrid:
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 1 or p.size < 1 or np.any(np.diff(p) <= 0):
        raise ArgumentError("grid points must be strictly increasing")
    return TimeGrid(p, np.ones(p.size, dtype=bool))


@dataclass
class SdePathSample:
    """Weight path of R particles on a grid.

    ``weights`` holds the graph nodes of the states at every grid point
    (R, d_w); ``kl`` is the per-particle accumulated KL integrand (R,).
    """

    weights: list[dc.Node]
    kl: dc.Node
    grid: TimeGrid
    noise_seed: object = None

    @property
    def weights_at_grid(self) -> np.ndarray:
        """(grid points, R, d_w) array of values."""
        return np.stack([w.value for w in self.weights])

    @property
    def kl_accumulator(self) -> np.ndarray:
        return self.kl.value


class NoiseSource:
    """Standard normal increments, one independent stream per particle row.

    Row r draws from ``np.random.default_rng(seeds[r])``; the same seed always
    yields the same path regardless of how rows are batched together.  Draws
    are taken in blocks of ``block`` steps, which yields the same sequence as
    drawing step by step.
    """

    def __init__(self, seeds: Sequence, dim: int, block: int = 16):
        self.seeds = list(seeds)
        self.dim = dim
        self.block = block
        self._gens = [np.random.default_rng(s) for s in self.seeds]
        self._buf = None
        self._pos = 0

    def initial(self) -> np.ndarray:
        return self._next()

    def step(self) -> np.ndarray:
        return self._next()

    def _next(self) -> np.ndarray:
        if self._buf is None or self._pos == self.block:
            self._buf = np.empty((self.block, len(self._gens), self.dim))
            for r, g in enumerate(self._gens):
                self._buf[:, r, :] = g.standard_normal((self.block, self.dim))
            self._pos = 0
        out = self._buf[self._pos]
        self._pos += 1
        return out


def em_update(w: dc.Node, g: dc.Node, dt: float, noise: np.ndarray, mask: np.ndarray | None = None) -> dc.Node:
    """w + g dt + noise, fused so only the result is stored.

    ``mask`` (R,) freezes rows whose integration horizon has been reached.
    """
    if mask is None:
        out = w.value + g.value * dt + noise

        def bw(G):
            dc.accumulate(w, G)
            if g.requires_grad:
                dc.accumulate(g, G * dt)
    else:
        m = mask[:, None]
        out = w.value + m * (g.value * dt + noise)

        def bw(G):
            dc.accumulate(w, G)
            if g.requires_grad:
                dc.accumulate(g, G * (m * dt))

    return dc.Node.from_op(out, (w, g), bw, "em_update")


def kl_increment(g: dc.Node, h: dc.Node, dt: float, sigma: float, half: bool = False,
                 mask: np.ndarray | None = None) -> dc.Node:
    """Per-row ``sum((g - h)^2) / sigma^2 * dt`` (times 1/2 if ``half``)."""
    c = dt / sigma**2 * (0.5 if half else 1.0)
    diff = g.value - h.value
    out = np.einsum("rd,rd->r", diff, diff) * c
    if mask is not None:
        out = out * mask

    def bw(G):
        d = g.value - h.value
        coef = 2.0 * c * (G if mask is None else G * mask)
        gd = coef[:, None] * d
        dc.accumulate(g, gd)
        if h.requires_grad:
            dc.accumulate(h, -gd)

    return dc.Node.from_op(out, (g, h), bw, "kl_increment")


def ou_prior_drift(w: dc.Node) -> dc.Node:
    return dc.neg(w)


class OuResidualDrift:
    """Posterior drift written as the OU prior drift plus a residual, g(w, t) = -w + u(w, t).

    Paired with :func:`ou_prior_drift`, the solvers use the residual directly
    (g - h = u), which saves several full-size passes per step.
    """

    def __init__(self, residual: Drift):
        self.residual = residual

    def __call__(self, w: dc.Node, t: float) -> dc.Node:
        return dc.sub(self.residual(w, t), w)


def em_residual_update(w: dc.Node, u: dc.Node, dt: float, noise: np.ndarray,
                       mask: np.ndarray | None = None) -> dc.Node:
    """w + (u - w) dt + noise (masked rows stay put), fused."""
    m = 1.0 if mask is None else mask[:, None]
    out = w.value * (1.0 - m * dt) + m * (u.value * dt + noise)

    def bw(G):
        dc.accumulate(w, G * (1.0 - m * dt))
        if u.requires_grad:
            dc.accumulate(u, G * (m * dt))

    return dc.Node.from_op(out, (w, u), bw, "em_residual")


def residual_kl_increment(u: dc.Node, dt: float, sigma: float, half: bool = False,
                          mask: np.ndarray | None = None) -> dc.Node:
    """Per-row ``sum(u^2) / sigma^2 * dt`` (times 1/2 if ``half``)."""
    c = dt / sigma**2 * (0.5 if half else 1.0)
    uv = u.value
    out = np.einsum("rd,rd->r", uv, uv) * c
    if mask is not None:
        out = out * mask

    def bw(G):
        coef = 2.0 * c * (G if mask is None else G * mask)
        dc.accumulate(u, coef[:, None] * uv)

    return dc.Node.from_op(out, (u,), bw, "kl_residual")


def euler_maruyama(drift: Drift, sigma: float, prior_drift: PriorDrift, init_mean, grid: TimeGrid,
                   noise: NoiseSource, *, kl_half_factor: bool = False, init_std: float | None = None,
                   horizons: np.ndarray | None = None) -> SdePathSample:
    """Simulate R weight particles with drift ``drift(w, t)`` and constant diffusion ``sigma``.

    Initial state ``w_0 = init_mean + init_std * xi`` (``init_std`` defaults to
    ``sigma``), reparameterized so gradients reach ``init_mean``.  Optional
    ``horizons`` (R,) stop each row's evolution and KL accumulation at its own
    end time on the grid.
    """
    _check_sigma(sigma)
    path = None
    for state in _em_steps(drift, sigma, prior_drift, init_mean, grid, noise,
                           kl_half_factor=kl_half_factor, init_std=init_std, horizons=horizons):
        path = state
    if path is None:
        w = _initial_state(init_mean, sigma, init_std, noise)
        path = SdePathSample([w], dc.constant(np.zeros(w.shape[0])), grid, noise.seeds)
    return path


def _initial_state(init_mean, sigma: float, init_std: float | None, noise: NoiseSource) -> dc.Node:
    std = sigma if init_std is None else init_std
    xi = noise.initial()
    nu = dc.as_node(init_mean)
    return dc.add(nu, xi * std)


def _check_sigma(sigma: float) -> None:
    if not sigma > 0:
        raise DomainError(f"diffusion coefficient must be positive, got {sigma}")


def _em_steps(drift, sigma, prior_drift, init_mean, grid, noise, *, kl_half_factor=False, init_std=None,
              horizons=None):
    w = _initial_state(init_mean, sigma, init_std, noise)
    n_rows = w.shape[0]
    kl = dc.constant(np.zeros(n_rows))
    weights = [w]
    pts = grid.points
    residual = isinstance(drift, OuResidualDrift) and prior_drift is ou_prior_drift
    for k in range(len(pts) - 1):
        t, dt = float(pts[k]), float(pts[k + 1] - pts[k])
        mask = None if horizons is None else (pts[k] < horizons - 1e-12).astype(np.float64)
        if residual:
            u = drift.residual(w, t)
            kl = dc.add(kl, residual_kl_increment(u, dt, sigma, kl_half_factor, mask))
            w = em_residual_update(w, u, dt, sigma * math.sqrt(dt) * noise.step(), mask)
        else:
            g = drift(w, t)
            kl = dc.add(kl, kl_increment(g, prior_drift(w), dt, sigma, kl_half_factor, mask))
            w = em_update(w, g, dt, sigma * math.sqrt(dt) * noise.step(), mask)
        weights.append(w)
        yield SdePathSample(weights, kl, grid, noise.seeds)


def integrate_cde(field: Field, control: HermitePath | np.ndarray, z0, weight_path: SdePathSample | None,
                  grid: TimeGrid, shared_weights=None) -> list[dc.Node]:
    """Explicit Euler for dz = f(z, t | w_t) dX using exact control increments.

    ``control`` is a path (shared by all rows) or a precomputed array of
    increments of shape (steps, R, d_control).  The field receives the weights
    at the start of each step; with ``weight_path=None`` it receives
    ``shared_weights`` at every step.
    """
    if weight_path is not None and not weight_path.grid.same_as(grid):
        raise ContractError("weight path and CDE grid differ")
    dX = _increments(control, grid)
    z = dc.as_node(z0)
    traj = [z]
    pts = grid.points
    for k in range(len(pts) - 1):
        w = shared_weights if weight_path is None else weight_path.weights[k]
        z = cde_step(field, z, float(pts[k]), w, dX[k])
        traj.append(z)
    return traj


def cde_step(field: Field, z: dc.Node, t: float, w, dX: np.ndarray) -> dc.Node:
    F = field(z, t, w)  # (R, d_z, d_control)
    dXr = np.broadcast_to(dX, (F.shape[0], F.shape[2])) if dX.ndim == 1 else dX
    return dc.add(z, dc.batched_matvec(F, dc.constant(np.ascontiguousarray(dXr))))


def _increments(control, grid: TimeGrid) -> np.ndarray:
    if isinstance(control, HermitePath):
        return np.diff(control.evaluate(grid.points), axis=0)
    dX = np.asarray(control, dtype=np.float64)
    if dX.shape[0] != len(grid) - 1:
        raise ContractError(f"{dX.shape[0]} control increments for a grid with {len(grid) - 1} steps")
    return dX


def coupled_integrate(field: Field, control, z0, drift: Drift, sigma: float, prior_drift: PriorDrift,
                      init_mean, grid: TimeGrid, noise: NoiseSource, *, kl_half_factor: bool = False,
                      init_std: float | None = None,
                      horizons: np.ndarray | None = None) -> tuple[list[dc.Node], SdePathSample]:
    """Lock-step integration of weights and latent state.

    Per step k: z_{k+1} = z_k + f(z_k, t_k | w_k) dX_k, then w_{k+1} by
    Euler-Maruyama.  Returns the latent trajectory and the weight path.
    """
    _check_sigma(sigma)
    dX = _increments(control, grid)
    z = dc.as_node(z0)
    traj = [z]
    path = None
    pts = grid.points
    steps = _em_steps(drift, sigma, prior_drift, init_mean, grid, noise,
                      kl_half_factor=kl_half_factor, init_std=init_std, horizons=horizons)
    for k, path in enumerate(steps):
        z = cde_step(field, z, float(pts[k]), path.weights[k], dX[k])
        traj.append(z)
    if path is None:  # single-point grid
        w = _initial_state(init_mean, sigma, init_std, noise)
        path = SdePathSample([w], dc.constant(np.zeros(w.shape[0])), grid, noise.seeds)
    return traj, path
