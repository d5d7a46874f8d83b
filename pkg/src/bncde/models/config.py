"""Model and training configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from ..controlpath import DECODER_CHANNELS, ENCODER_CHANNELS
from ..data import N_SUBGROUPS, TREATMENTS
from ..errors import ConfigError
from ..nets import MlpSpec, param_count

# y0, counts, subgroup one-hot, time, treatment indicators
EMBED_IN = 1 + (len(TREATMENTS) + N_SUBGROUPS + 1) + len(TREATMENTS)
OBS_HORIZON = 55.0


@dataclass
class BncdeConfig:
    """Hyperparameters of the BNCDE and of its training loop.

    Defaults are the full-scale values; ``desk()`` returns the reduced
    configuration used for the scaled-down experiments.
    """

    d_z: int = 8
    cde_hidden: tuple[int, ...] = (128, 128)
    drift_hidden: tuple[int, ...] = (16, 64, 64, 64, 16)
    sigma: float = 1e-3
    mc_train: int = 10
    mc_predict: int = 100
    full_grid: bool = False
    kl_half_factor: bool = False
    # drift residual measured in units of sigma: u = sigma * net(w, t)
    whitened_drift: bool = True
    var_floor: float = 1e-6
    h_max: float = 0.5
    lr_embed: float = 1e-3
    lr_head: float = 1e-3
    lr_drift: float = 1e-4
    lr_nu: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 500
    patience: int = 10
    delta: int = 1
    intensity_weighting: bool = False
    intensity_clamp: float = 0.05
    balancing: bool = False
    alpha_bal: float = 0.01
    rows_per_chunk: int = 40
    seed: int = 0

    def __post_init__(self):
        self.cde_hidden = tuple(int(h) for h in self.cde_hidden)
        self.drift_hidden = tuple(int(h) for h in self.drift_hidden)
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if not self.var_floor > 0:
            raise ConfigError("var_floor must be positive")
        if self.d_z < 1 or self.mc_train < 1 or self.mc_predict < 1 or self.batch_size < 1:
            raise ConfigError("d_z, mc_train, mc_predict and batch_size must be >= 1")
        if not 1 <= self.delta <= 5:
            raise ConfigError("delta must lie in 1..5")
        if not self.h_max > 0:
            raise ConfigError("h_max must be positive")
        if not 0 < self.intensity_clamp <= 1:
            raise ConfigError("intensity_clamp must lie in (0, 1]")

    def cde_spec(self, d_control: int) -> MlpSpec:
        sizes = (self.d_z + 1,) + self.cde_hidden + (self.d_z * d_control,)
        return MlpSpec(sizes, "relu", "tanh")

    @property
    def encoder_cde_spec(self) -> MlpSpec:
        return self.cde_spec(len(ENCODER_CHANNELS))

    @property
    def decoder_cde_spec(self) -> MlpSpec:
        return self.cde_spec(len(DECODER_CHANNELS))

    def drift_spec(self, d_omega: int) -> MlpSpec:
        return MlpSpec((d_omega + 1,) + self.drift_hidden + (d_omega,), "relu", None)

    @property
    def d_omega_encoder(self) -> int:
        return param_count(self.encoder_cde_spec)

    @property
    def d_omega_decoder(self) -> int:
        return param_count(self.decoder_cde_spec)

    @classmethod
    def desk(cls, **overrides) -> "BncdeConfig":
        base = dict(cde_hidden=(32, 32), drift_hidden=(8, 16, 8), mc_train=5, mc_predict=100, max_epochs=50)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BncdeConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown BNCDE config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TecdeConfig:
    """TE-CDE baseline: deterministic CDE encoder/decoder, MC dropout head, MSE loss."""

    d_z: int = 8
    cde_hidden: tuple[int, ...] = (128, 128)
    dropout: float = 0.1
    mc_predict: int = 100
    var_floor: float = 1e-6
    h_max: float = 0.5
    lr_embed: float = 1e-3
    lr_head: float = 1e-3
    lr_cde: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 500
    patience: int = 10
    delta: int = 1
    intensity_weighting: bool = False
    intensity_clamp: float = 0.05
    balancing: bool = False
    alpha_bal: float = 0.01
    rows_per_chunk: int = 256
    seed: int = 0

    def __post_init__(self):
        self.cde_hidden = tuple(int(h) for h in self.cde_hidden)
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if not 1 <= self.delta <= 5:
            raise ConfigError("delta must lie in 1..5")
        if self.d_z < 1 or self.mc_predict < 1 or self.batch_size < 1:
            raise ConfigError("d_z, mc_predict and batch_size must be >= 1")

    def cde_spec(self, d_control: int) -> MlpSpec:
        return MlpSpec((self.d_z + 1,) + self.cde_hidden + (self.d_z * d_control,), "relu", "tanh")

    @classmethod
    def desk(cls, **overrides) -> "TecdeConfig":
        base = dict(cde_hidden=(32, 32), max_epochs=50)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TecdeConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown TE-CDE config keys: {sorted(unknown)}")
        return cls(**d)
