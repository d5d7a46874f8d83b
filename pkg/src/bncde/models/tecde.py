"""TE-CDE baseline: deterministic neural CDE encoder/decoder with an MC-dropout prediction head.

Parameter groups: ``embed`` and ``head`` (affine), ``enc_cde`` and
``dec_cde`` (flat CDE vector-field weights), plus the optional ``intensity``
and ``treat`` heads shared with the BNCDE extensions.  Training minimizes the
mean squared error of the head output; dropout on the head input stays active
at prediction time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Sequence

import numpy as np

from .. import diffcore as dc
from ..errors import ArgumentError, ConfigError
from ..nets import MlpSpec, init_weights, load_checkpoint, mc_dropout, save_checkpoint
from ..solvers import integrate_cde
from .bncde import STREAM_PREDICT, PosteriorPredictive, _affine_parts, make_field
from .config import EMBED_IN, OBS_HORIZON, TecdeConfig
from .inputs import Prepared, decoder_grid, decoder_increments, encoder_grid


@dataclass
class TecdeParams:
    config: TecdeConfig
    groups: dict[str, np.ndarray]
    specs: dict[str, MlpSpec | None] = field(default_factory=dict)

    def copy(self) -> "TecdeParams":
        return TecdeParams(self.config, {k: v.copy() for k, v in self.groups.items()}, dict(self.specs))

    def save(self, path, extra: dict | None = None) -> None:
        payload = {"model": "tecde", "config": self.config.to_dict()}
        payload.update(extra or {})
        save_checkpoint(path, {k: (self.specs.get(k), v) for k, v in self.groups.items()}, payload)

    @classmethod
    def load(cls, path) -> "TecdeParams":
        groups, extra = load_checkpoint(path)
        if extra.get("model") != "tecde":
            raise ConfigError(f"{path} is not a TE-CDE checkpoint")
        cfg = TecdeConfig.from_dict(extra["config"])
        return cls(cfg, {k: v for k, (_, v) in groups.items()}, {k: s for k, (s, _) in groups.items()})


def init_tecde(cfg: TecdeConfig, rng: np.random.Generator) -> TecdeParams:
    from ..controlpath import DECODER_CHANNELS, ENCODER_CHANNELS

    specs: dict[str, MlpSpec | None] = {
        "embed": MlpSpec((EMBED_IN, cfg.d_z), None, None),
        "head": MlpSpec((cfg.d_z, 1), None, None),
        "enc_cde": cfg.cde_spec(len(ENCODER_CHANNELS)),
        "dec_cde": cfg.cde_spec(len(DECODER_CHANNELS)),
    }
    if cfg.intensity_weighting:
        specs["intensity"] = MlpSpec((cfg.d_z, 1), None, "sigmoid")
    if cfg.balancing:
        specs["treat"] = MlpSpec((cfg.d_z, 2), None, "sigmoid")
    return TecdeParams(cfg, {k: init_weights(s, rng) for k, s in specs.items()}, specs)


def tecde_learning_rates(cfg: TecdeConfig) -> dict[str, float]:
    return {"embed": cfg.lr_embed, "head": cfg.lr_head, "enc_cde": cfg.lr_cde, "dec_cde": cfg.lr_cde,
            "intensity": cfg.lr_head, "treat": cfg.lr_head}


def encode_decode(P: dict, cfg: TecdeConfig, preps: Sequence[Prepared], enc_grid=None, dec_grid=None):
    """Deterministic latent path: (encoder states at grid points, final decoder state)."""
    if not preps:
        raise ArgumentError("empty batch")
    from ..controlpath import DECODER_CHANNELS, ENCODER_CHANNELS

    enc_grid = encoder_grid(cfg.h_max) if enc_grid is None else enc_grid
    dec_grid = decoder_grid(preps, cfg.h_max) if dec_grid is None else dec_grid
    enc_spec = cfg.cde_spec(len(ENCODER_CHANNELS))
    dec_spec = cfg.cde_spec(len(DECODER_CHANNELS))
    emb = np.stack([p.emb_in for p in preps])
    z0 = dc.affine(emb, *_affine_parts(P["embed"], EMBED_IN, cfg.d_z))
    dX = np.stack([p.enc_dX for p in preps], axis=1)
    z_enc = integrate_cde(make_field(enc_spec, cfg.d_z, len(ENCODER_CHANNELS), OBS_HORIZON), dX, z0, None,
                          enc_grid, shared_weights=P["enc_cde"])
    z_dec = integrate_cde(make_field(dec_spec, cfg.d_z, len(DECODER_CHANNELS), preps[0].delta),
                          decoder_increments(preps, dec_grid), z_enc[-1], None, dec_grid,
                          shared_weights=P["dec_cde"])
    return z_enc, z_dec[-1], enc_grid


def head_mean(P: dict, z, p: float, rng: np.random.Generator) -> dc.Node:
    zd = mc_dropout(z, p, rng)
    out = dc.affine(zd, *_affine_parts(P["head"], z.shape[-1], 1))
    return dc.take(out, (slice(None), 0))


def tecde_terms(P: dict, cfg: TecdeConfig, preps: Sequence[Prepared], rng: np.random.Generator, **kw):
    """Per-record negative squared error (an objective to maximize) plus latent states."""
    targets = np.array([p.target for p in preps])
    if np.any(np.isnan(targets)):
        raise ArgumentError("every record needs a target")
    z_enc, z_final, grid = encode_decode(P, cfg, preps, **kw)
    mu = head_mean(P, z_final, cfg.dropout, rng)
    neg_se = dc.neg(dc.square(dc.sub(mu, targets)))
    out = SimpleNamespace(z_enc=z_enc, z_final=z_final, enc_grid=grid, n_particles=1)
    return SimpleNamespace(elbo=neg_se, loglik=neg_se, out=out, mu=mu)


def tecde_forward(params: TecdeParams, prep: Prepared, M: int | None = None, seed: int = 0,
                  dropout_p: float | None = None) -> np.ndarray:
    """M point predictions (standardized units) with dropout active."""
    return tecde_predict_rows(params, [prep], M, seed, dropout_p)[0]


def _record_rng(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAM_PREDICT, int(key)])


def tecde_predict_rows(params: TecdeParams, preps: Sequence[Prepared], M: int | None = None, seed: int = 0,
                       dropout_p: float | None = None, chunk: int = 256) -> np.ndarray:
    cfg = params.config
    M = cfg.mc_predict if M is None else M
    p = cfg.dropout if dropout_p is None else dropout_p
    out = []
    enc, dec = encoder_grid(cfg.h_max), decoder_grid(preps, cfg.h_max)
    with dc.no_grad():
        P = {k: dc.constant(v) for k, v in params.groups.items()}
        for lo in range(0, len(preps), chunk):
            part = preps[lo:lo + chunk]
            _, z, _ = encode_decode(P, cfg, part, enc, dec)
            for i, pr in enumerate(part):
                zi = np.repeat(z.value[i:i + 1], M, axis=0)
                out.append(head_mean(P, zi, p, _record_rng(seed, pr.key)).value)
    return np.stack(out)


def tecde_predictive(samples: np.ndarray, var_floor: float) -> PosteriorPredictive:
    """Dropout samples as mixture components of variance ``var_floor``."""
    s = np.asarray(samples, dtype=np.float64)
    return PosteriorPredictive(s, np.full(s.shape, var_floor))
