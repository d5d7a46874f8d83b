"""Bayesian neural CDE: weight-SDE encoder and decoder, ELBO and posterior predictive.

Rows are (record, particle) pairs laid out record-major: row ``i * J + j``
is particle ``j`` of record ``i``.  Particle ``j`` of the encoder is paired
with particle ``j`` of the decoder.  Every row draws its weight-path noise
from its own stream keyed by ``(seed, stream, record key, particle, part)``,
so a row's result does not depend on which other rows share its batch.

Parameter groups (flat float64 arrays):

    embed       affine map from the embedding input to z_0
    head        affine map z -> (mu, raw variance); variance = softplus(raw) + var_floor
    enc_drift   drift network of the encoder weight SDE, g(w, t) = net([w, t/55]) - w
    dec_drift   drift network of the decoder weight SDE, g(w, t) = net([w, t/delta]) - w
    enc_nu      mean of the encoder initial weights
    dec_nu      mean of the decoder initial weights
    intensity   (optional) affine z -> observation intensity logit
    treat       (optional) affine z -> treatment logits
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import diffcore as dc
from ..errors import ArgumentError, ConfigError, DomainError
from ..nets import MlpSpec, init_weights, load_checkpoint, mlp_apply, save_checkpoint
from ..solvers import NoiseSource, OuResidualDrift, TimeGrid, coupled_integrate, ou_prior_drift
from .config import EMBED_IN, OBS_HORIZON, BncdeConfig
from .inputs import Prepared, decoder_grid, decoder_increments, encoder_grid

STREAM_TRAIN, STREAM_VAL, STREAM_PREDICT = 0, 1, 2
PART_ENC, PART_DEC = 0, 1


def row_seed(seed: int, stream: int, epoch: int, key: int, particle: int, part: int) -> list[int]:
    return [int(seed), int(stream), int(epoch), int(key), int(particle), int(part)]


@dataclass
class BncdeParams:
    config: BncdeConfig
    groups: dict[str, np.ndarray]
    specs: dict[str, MlpSpec | None] = field(default_factory=dict)

    def copy(self) -> "BncdeParams":
        return BncdeParams(self.config, {k: v.copy() for k, v in self.groups.items()}, dict(self.specs))

    def save(self, path, extra: dict | None = None) -> None:
        payload = {"model": "bncde", "config": self.config.to_dict()}
        payload.update(extra or {})
        save_checkpoint(path, {k: (self.specs.get(k), v) for k, v in self.groups.items()}, payload)

    @classmethod
    def load(cls, path) -> "BncdeParams":
        groups, extra = load_checkpoint(path)
        if extra.get("model") != "bncde":
            raise ConfigError(f"{path} is not a BNCDE checkpoint")
        cfg = BncdeConfig.from_dict(extra["config"])
        return cls(cfg, {k: v for k, (_, v) in groups.items()}, {k: s for k, (s, _) in groups.items()})


def init_params(cfg: BncdeConfig, rng: np.random.Generator) -> BncdeParams:
    """Random embedding/head/initial means; drift nets start at the prior (zero last layer)."""
    specs: dict[str, MlpSpec | None] = {
        "embed": MlpSpec((EMBED_IN, cfg.d_z), None, None),
        "head": MlpSpec((cfg.d_z, 2), None, None),
        "enc_drift": cfg.drift_spec(cfg.d_omega_encoder),
        "dec_drift": cfg.drift_spec(cfg.d_omega_decoder),
        "enc_nu": cfg.encoder_cde_spec,
        "dec_nu": cfg.decoder_cde_spec,
    }
    if cfg.intensity_weighting:
        specs["intensity"] = MlpSpec((cfg.d_z, 1), None, "sigmoid")
    if cfg.balancing:
        specs["treat"] = MlpSpec((cfg.d_z, 2), None, "sigmoid")
    groups = {name: init_weights(spec, rng) for name, spec in specs.items()}
    for name in ("enc_drift", "dec_drift"):
        wsl, _, bsl = specs[name].slices()[-1]
        groups[name][wsl] = 0.0
        groups[name][bsl] = 0.0
    return BncdeParams(cfg, groups, specs)


def learning_rates(cfg: BncdeConfig) -> dict[str, float]:
    return {"embed": cfg.lr_embed, "head": cfg.lr_head, "enc_drift": cfg.lr_drift, "dec_drift": cfg.lr_drift,
            "enc_nu": cfg.lr_nu, "dec_nu": cfg.lr_nu, "intensity": cfg.lr_head, "treat": cfg.lr_head}


# ---------------------------------------------------------------------------
# building blocks


def make_field(spec: MlpSpec, d_z: int, d_control: int, time_scale: float):
    """CDE vector field f(z, t | w) -> (R, d_z, d_control); ``w`` per-row (R, P) or shared (P,)."""

    def field_fn(z, t, w):
        rows = z.shape[0]
        out = mlp_apply(spec, w, z, extra=np.array([t / time_scale]))
        return dc.reshape(out, (rows, d_z, d_control))

    return field_fn


def make_drift(spec: MlpSpec, params, time_scale: float, output_scale: float = 1.0) -> OuResidualDrift:
    """Posterior drift g(w, t) = output_scale * net([w, t / time_scale]) - w."""

    def residual(w, t):
        out = mlp_apply(spec, params, w, extra=np.array([t / time_scale]))
        return out if output_scale == 1.0 else dc.scale(out, output_scale)

    return OuResidualDrift(residual)


def head_outputs(P: dict, z, var_floor: float):
    """(mu, variance) from the affine prediction head."""
    out = dc.affine(z, *_affine_parts(P["head"], z.shape[-1], 2))
    mu = dc.take(out, (slice(None), 0))
    var = dc.add(dc.softplus(dc.take(out, (slice(None), 1))), var_floor)
    return mu, var


def _affine_parts(flat: dc.Node, n_in: int, n_out: int):
    W = dc.reshape(dc.take(flat, slice(0, n_in * n_out)), (n_out, n_in))
    b = dc.take(flat, slice(n_in * n_out, n_in * n_out + n_out))
    return W, b


def affine_sigmoid(flat: dc.Node, z, n_out: int):
    return dc.sigmoid(dc.affine(z, *_affine_parts(flat, z.shape[-1], n_out)))


@dataclass
class RowOutputs:
    """Per-row results of a forward pass over (record, particle) rows."""

    mu: dc.Node
    var: dc.Node
    kl_enc: dc.Node
    kl_dec: dc.Node
    z_enc: list
    z_final: dc.Node
    enc_grid: TimeGrid
    n_particles: int
    dec_per_enc: int = 1


def forward_rows(P: dict, cfg: BncdeConfig, preps: Sequence[Prepared], J: int, seed: int, stream: int,
                 epoch: int = 0, enc_grid: TimeGrid | None = None, dec_grid: TimeGrid | None = None,
                 full_grid: bool = False, sigma: float | None = None) -> RowOutputs:
    """Run encoder and decoder for J particles of every prepared record.

    With ``full_grid`` each encoder particle feeds J decoder particles (J*J
    rows per record), otherwise encoder and decoder particles are paired.
    """
    if not preps:
        raise ArgumentError("empty batch")
    sigma = cfg.sigma if sigma is None else sigma
    drift_scale = cfg.sigma if cfg.whitened_drift else 1.0
    enc_grid = encoder_grid(cfg.h_max) if enc_grid is None else enc_grid
    dec_grid = decoder_grid(preps, cfg.h_max) if dec_grid is None else dec_grid
    enc_spec, dec_spec = cfg.encoder_cde_spec, cfg.decoder_cde_spec
    d_enc, d_dec = enc_spec.n_out // cfg.d_z, dec_spec.n_out // cfg.d_z

    n = len(preps)
    emb = np.repeat(np.stack([p.emb_in for p in preps]), J, axis=0)
    dX = np.repeat(np.stack([p.enc_dX for p in preps], axis=1), J, axis=1)
    horizons = np.repeat([p.t_bar for p in preps], J)
    seeds = [row_seed(seed, stream, epoch, p.key, j, PART_ENC) for p in preps for j in range(J)]

    z0 = dc.affine(emb, *_affine_parts(P["embed"], EMBED_IN, cfg.d_z))
    z_enc, enc_path = coupled_integrate(
        make_field(enc_spec, cfg.d_z, d_enc, OBS_HORIZON), dX, z0,
        make_drift(cfg.drift_spec(enc_spec.param_count), P["enc_drift"], OBS_HORIZON, drift_scale), sigma,
        ou_prior_drift,
        P["enc_nu"], enc_grid, NoiseSource(seeds, enc_spec.param_count),
        kl_half_factor=cfg.kl_half_factor, horizons=horizons)
    z_tbar = z_enc[-1]

    K_dec = J if full_grid else 1
    dec_dX = np.repeat(decoder_increments(preps, dec_grid), J * K_dec, axis=1)
    if full_grid:
        z_start = dc.take(z_tbar, np.repeat(np.arange(n * J), K_dec))
        dseeds = [row_seed(seed, stream, epoch, p.key, j * J + k, PART_DEC)
                  for p in preps for j in range(J) for k in range(K_dec)]
    else:
        z_start = z_tbar
        dseeds = [row_seed(seed, stream, epoch, p.key, j, PART_DEC) for p in preps for j in range(J)]
    delta = preps[0].delta
    z_dec, dec_path = coupled_integrate(
        make_field(dec_spec, cfg.d_z, d_dec, delta), dec_dX, z_start,
        make_drift(cfg.drift_spec(dec_spec.param_count), P["dec_drift"], delta, drift_scale), sigma,
        ou_prior_drift,
        P["dec_nu"], dec_grid, NoiseSource(dseeds, dec_spec.param_count),
        kl_half_factor=cfg.kl_half_factor)
    mu, var = head_outputs(P, z_dec[-1], cfg.var_floor)
    return RowOutputs(mu, var, enc_path.kl, dec_path.kl, z_enc, z_dec[-1], enc_grid, J, K_dec)


# ---------------------------------------------------------------------------
# objectives


@dataclass(frozen=True)
class ElboBreakdown:
    """Batch-averaged ELBO parts; ``elbo`` is always ell - kl_encoder - kl_decoder."""

    expected_loglik: float
    kl_encoder: float
    kl_decoder: float

    @property
    def elbo(self) -> float:
        return self.expected_loglik - self.kl_encoder - self.kl_decoder

    def to_dict(self) -> dict:
        return {"expected_loglik": self.expected_loglik, "kl_encoder": self.kl_encoder,
                "kl_decoder": self.kl_decoder, "elbo": self.elbo}


@dataclass
class RecordTerms:
    """Per-record ELBO parts as graph nodes of shape (n_records,)."""

    loglik: dc.Node
    kl_enc: dc.Node
    kl_dec: dc.Node
    out: RowOutputs

    @property
    def elbo(self) -> dc.Node:
        return dc.sub(dc.sub(self.loglik, self.kl_enc), self.kl_dec)


def _per_record(x: dc.Node, n: int) -> dc.Node:
    return dc.mean(dc.reshape(x, (n, -1)), axis=1)


def record_terms(P: dict, cfg: BncdeConfig, preps: Sequence[Prepared], J: int, seed: int, stream: int,
                 epoch: int = 0, **kw) -> RecordTerms:
    targets = np.array([p.target for p in preps])
    if np.any(np.isnan(targets)):
        raise ArgumentError("every record needs a target for the ELBO")
    full = kw.pop("full_grid", cfg.full_grid)
    out = forward_rows(P, cfg, preps, J, seed, stream, epoch, full_grid=full, **kw)
    n = len(preps)
    rows_per_record = J * out.dec_per_enc
    ll = dc.gaussian_log_density(np.repeat(targets, rows_per_record), out.mu, out.var)
    return RecordTerms(_per_record(ll, n), _per_record(out.kl_enc, n), _per_record(out.kl_dec, n), out)


def _breakdown(terms: RecordTerms, weights=None) -> ElboBreakdown:
    w = 1.0 if weights is None else weights
    return ElboBreakdown(float(np.mean(terms.loglik.value / w)), float(np.mean(terms.kl_enc.value / w)),
                         float(np.mean(terms.kl_dec.value / w)))


def to_nodes(params: BncdeParams, trainable: bool = True) -> dict[str, dc.Node]:
    make = dc.leaf if trainable else dc.constant
    return {k: make(v) for k, v in params.groups.items()}


def elbo_batch(params: BncdeParams, preps: Sequence[Prepared], J: int | None = None, seed: int = 0,
               stream: int = STREAM_TRAIN, epoch: int = 0, **kw) -> ElboBreakdown:
    """ELBO breakdown of a batch (no gradients)."""
    with dc.no_grad():
        terms = record_terms(to_nodes(params, False), params.config, preps,
                             params.config.mc_train if J is None else J, seed, stream, epoch, **kw)
    return _breakdown(terms)


def elbo_objective(P: dict, cfg: BncdeConfig, preps: Sequence[Prepared], J: int, seed: int, stream: int,
                   epoch: int = 0, scale: float | None = None, **kw) -> tuple[dc.Node, RecordTerms]:
    """Scalar graph node sum_i ELBO_i * scale (scale defaults to 1/n)."""
    terms = record_terms(P, cfg, preps, J, seed, stream, epoch, **kw)
    s = 1.0 / len(preps) if scale is None else scale
    return dc.scale(dc.sum(terms.elbo), s), terms


def intensity_weights(P: dict, terms: RecordTerms, clamp: float, override=None) -> np.ndarray:
    """Per-record 1/zeta weights' denominators: clamped intensity estimates from the final decoder state.

    The estimate is treated as a constant inside the weighted ELBO.
    """
    n = terms.loglik.shape[0]
    if override is not None:
        z = np.broadcast_to(np.asarray(override, dtype=np.float64), (n,)).copy()
    else:
        zr = affine_sigmoid(P["intensity"], dc.stop_gradient(terms.out.z_final), 1).value[:, 0]
        z = zr.reshape(n, -1).mean(axis=1)
    return np.maximum(z, clamp)


def intensity_loss(P: dict, preps: Sequence[Prepared], terms: RecordTerms) -> dc.Node:
    """Mean BCE of the intensity head against observation indicators on days 1..t_bar.

    The head sees encoder states with gradients stopped, so this loss only
    trains the head.
    """
    out = terms.out
    grid = out.enc_grid.points
    day_idx = np.flatnonzero(np.isin(grid, np.arange(1, int(OBS_HORIZON) + 1)))
    J = out.n_particles
    losses = []
    for k in day_idx:
        day = int(round(grid[k]))
        rows = [i * J + j for i, p in enumerate(preps) if day <= p.t_bar for j in range(J)]
        if not rows:
            continue
        labels = np.repeat([p.observed_days[day - 1] for p in preps if day <= p.t_bar], J)
        z = dc.stop_gradient(dc.take(out.z_enc[k], np.array(rows)))
        p_hat = dc.take(affine_sigmoid(P["intensity"], z, 1), (slice(None), 0))
        losses.append(dc.sum(dc.binary_cross_entropy(p_hat, labels)))
    if not losses:
        return dc.constant(0.0)
    total = losses[0]
    for l in losses[1:]:
        total = dc.add(total, l)
    count = sum(int(sum(day <= p.t_bar for p in preps)) * J for day in range(1, int(OBS_HORIZON) + 1))
    return dc.scale(total, 1.0 / max(count, 1))


def intensity_weighted_objective(P: dict, cfg: BncdeConfig, preps: Sequence[Prepared], J: int, seed: int,
                                 stream: int, epoch: int = 0, zeta_override=None, **kw):
    """(weighted ELBO node, intensity BCE node, weights, terms): ELBO_i / max(zeta_i, clamp), averaged."""
    terms = record_terms(P, cfg, preps, J, seed, stream, epoch, **kw)
    w = intensity_weights(P, terms, cfg.intensity_clamp, zeta_override)
    weighted = dc.scale(dc.sum(dc.div(terms.elbo, w)), 1.0 / len(preps))
    head = intensity_loss(P, preps, terms) if zeta_override is None else dc.constant(0.0)
    return weighted, head, w, terms


def intensity_weighted_elbo(params: BncdeParams, preps: Sequence[Prepared], J: int | None = None, seed: int = 0,
                            stream: int = STREAM_TRAIN, epoch: int = 0, zeta_override=None):
    """Weighted ELBO breakdown and intensity-head BCE (no gradients)."""
    with dc.no_grad():
        P = to_nodes(params, False)
        _, head, w, terms = intensity_weighted_objective(P, params.config, preps,
                                                         params.config.mc_train if J is None else J, seed, stream,
                                                         epoch, zeta_override)
    return _breakdown(terms, w), float(head.value)


def balancing_bce(P: dict, preps: Sequence[Prepared], terms: RecordTerms) -> dc.Node:
    """Mean Bernoulli log-likelihood (<= 0) of the treatment head over integer days 0..t_bar."""
    out = terms.out
    grid = out.enc_grid.points
    J = out.n_particles
    parts, m = [], 0
    for k in np.flatnonzero(np.isin(grid, np.arange(0, int(OBS_HORIZON) + 1))):
        day = int(round(grid[k]))
        rows = [i * J + j for i, p in enumerate(preps) if day <= p.t_bar for j in range(J)]
        if not rows:
            continue
        labels = np.repeat(np.stack([p.treated_days[day] for p in preps if day <= p.t_bar]), J, axis=0)
        p_hat = affine_sigmoid(P["treat"], dc.take(out.z_enc[k], np.array(rows)), labels.shape[1])
        parts.append(dc.sum(dc.neg(dc.binary_cross_entropy(p_hat, labels))))
        m += labels.size
    total = parts[0]
    for p in parts[1:]:
        total = dc.add(total, p)
    return dc.scale(total, 1.0 / m)


def balancing_objective_nodes(P: dict, cfg: BncdeConfig, preps, J, seed, stream, epoch=0, alpha_bal=None, **kw):
    elbo, terms = elbo_objective(P, cfg, preps, J, seed, stream, epoch, **kw)
    a = cfg.alpha_bal if alpha_bal is None else alpha_bal
    if a == 0:
        return elbo, terms, 0.0
    bce = balancing_bce(P, preps, terms)
    return dc.add(elbo, dc.scale(bce, a)), terms, float(bce.value)


def balancing_objective(params: BncdeParams, preps: Sequence[Prepared], alpha_bal: float | None = None,
                        J: int | None = None, seed: int = 0, stream: int = STREAM_TRAIN, epoch: int = 0) -> float:
    """ELBO + alpha_bal * BCE for a batch (no gradients)."""
    with dc.no_grad():
        obj, _, _ = balancing_objective_nodes(to_nodes(params, False), params.config, preps,
                                              params.config.mc_train if J is None else J, seed, stream, epoch,
                                              alpha_bal)
    return float(obj.value)


# ---------------------------------------------------------------------------
# prediction


@dataclass
class PosteriorPredictive:
    """Uniform Gaussian mixture with components (mu_k, var_k)."""

    mu: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        self.var = np.atleast_1d(np.asarray(self.var, dtype=np.float64))
        if self.mu.size < 1 or self.mu.shape != self.var.shape:
            raise ArgumentError("need K >= 1 components with matching mu and var")
        if np.any(self.var <= 0):
            raise DomainError("mixture variances must be positive")

    @property
    def K(self) -> int:
        return self.mu.size

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.K, 1.0 / self.K)

    @property
    def mean(self) -> float:
        return float(self.mu.mean())

    @property
    def variance(self) -> float:
        return float(self.var.mean() + self.mu.var())

    @property
    def model_uncertainty(self) -> float:
        """Spread of the component means."""
        return float(self.mu.var())

    @property
    def outcome_uncertainty(self) -> float:
        return float(self.var.mean())

    def cdf(self, y):
        from scipy.special import ndtr

        y = np.asarray(y, dtype=np.float64)
        return ndtr((y[..., None] - self.mu) / np.sqrt(self.var)).mean(axis=-1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        k = rng.integers(self.K, size=n)
        return self.mu[k] + np.sqrt(self.var[k]) * rng.standard_normal(n)

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "var": self.var.tolist()}


def credible_interval(pp: PosteriorPredictive, alpha: float, tol: float = 1e-8) -> tuple[float, float]:
    """Equal-tailed (1 - alpha) interval of the mixture by bisection on its CDF."""
    if not 0 < alpha < 1:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    return mixture_quantile(pp, alpha / 2, tol), mixture_quantile(pp, 1 - alpha / 2, tol)


def mixture_quantile(pp: PosteriorPredictive, q: float, tol: float = 1e-8) -> float:
    sd = np.sqrt(pp.var)
    lo, hi = float(np.min(pp.mu - 10 * sd)), float(np.max(pp.mu + 10 * sd))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f = float(pp.cdf(mid))
        if abs(f - q) <= tol * 0.5 or hi - lo <= 1e-15 * max(1.0, abs(mid)):
            return mid
        if f < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def predict_rows(params: BncdeParams, preps: Sequence[Prepared], K: int | None = None, seed: int = 0,
                 chunk_rows: int | None = None, sigma: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Standardized (mu, var) of shape (len(preps), K) without building a graph."""
    cfg = params.config
    K = cfg.mc_predict if K is None else K
    per = max(1, (chunk_rows or cfg.rows_per_chunk * 4) // K)
    enc = encoder_grid(cfg.h_max)
    dec = decoder_grid(preps, cfg.h_max)
    mus, vs = [], []
    with dc.no_grad():
        P = to_nodes(params, False)
        for lo in range(0, len(preps), per):
            out = forward_rows(P, cfg, preps[lo:lo + per], K, seed, STREAM_PREDICT, 0, enc, dec, sigma=sigma)
            mus.append(out.mu.value.reshape(-1, K))
            vs.append(out.var.value.reshape(-1, K))
    return np.concatenate(mus), np.concatenate(vs)


def posterior_predictive(params: BncdeParams, prep: Prepared, standardizer, K: int | None = None,
                         seed: int = 0) -> PosteriorPredictive:
    """Mixture over K paired weight-path draws, in raw outcome units."""
    mu, var = predict_rows(params, [prep], K, seed)
    return PosteriorPredictive(standardizer.y_inverse(mu[0]), standardizer.var_inverse(var[0]))


def bncde_forward(params: BncdeParams, prep: Prepared, J: int, seed: int = 0):
    """J samples of (mu, var) in standardized units and the particle-averaged KL parts."""
    with dc.no_grad():
        out = forward_rows(to_nodes(params, False), params.config, [prep], J, seed, STREAM_PREDICT)
    return (out.mu.value.copy(), out.var.value.copy(),
            float(out.kl_enc.value.mean()), float(out.kl_dec.value.mean()))
