"""Patient records, dataset files and standardization.

Dataset layout on disk (one directory)::

    train.jsonl  val.jsonl  test.jsonl   one JSON object per patient per line
    standardization.json                  training-set means / standard deviations
    config.txt                            key=value echo of the generating run

Each JSON line::

    {"id": 17, "split": "train", "subgroup": 1,
     "params": {"rho": ..., "K": 30.0, "alpha_c": ..., "alpha_r": ..., "beta_r": ..., "y0": ...},
     "factual": TRAJECTORY,
     "counterfactual": TRAJECTORY or null}      # non-null on the test split only

    TRAJECTORY = {"arm": "sequential" | "concurrent",
                  "obs_times": [0.0, 1.0, ...],          # days, strictly increasing, starts at 0
                  "y": [...],                            # raw tumour volume at obs_times
                  "counts": [[n_chemo, n_radio], ...],   # treatments given up to each obs time
                  "treatments": [{"time": 0.0, "kind": "chemo"}, ...],
                  "targets": {"1": y(t_bar + 1), ..., "5": y(t_bar + 5)}}

Values in the files are raw.  :class:`Standardizer` maps outcomes and count
covariates to z-scores using constants fitted on the training split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ArgumentError, BncdeError

TREATMENTS = ("chemo", "radio")
ARMS = ("sequential", "concurrent")
N_SUBGROUPS = 3


class SchemaError(BncdeError, ValueError):
    """A record does not conform to the dataset schema."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True, order=True)
class TreatmentEvent:
    time: float
    kind: str

    def __post_init__(self):
        if self.kind not in TREATMENTS:
            raise ArgumentError(f"unknown treatment kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"time": self.time, "kind": self.kind}


@dataclass
class Trajectory:
    arm: str
    obs_times: np.ndarray
    y: np.ndarray
    treatments: list[TreatmentEvent]
    targets: dict[int, float] = field(default_factory=dict)
    counts: np.ndarray | None = None

    def __post_init__(self):
        self.obs_times = np.asarray(self.obs_times, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.treatments = sorted(self.treatments)
        if self.counts is None:
            self.counts = treatment_counts(self.treatments, self.obs_times)
        self.counts = np.asarray(self.counts, dtype=np.float64).reshape(len(self.obs_times), len(TREATMENTS))

    @property
    def t_bar(self) -> float:
        return float(self.obs_times[-1])

    def future_treatments(self, delta: float) -> list[TreatmentEvent]:
        """Events in (t_bar, t_bar + delta], with times relative to t_bar."""
        tb = self.t_bar
        return [TreatmentEvent(e.time - tb, e.kind) for e in self.treatments if tb < e.time <= tb + delta]

    def to_dict(self) -> dict:
        return {
            "arm": self.arm,
            "obs_times": self.obs_times.tolist(),
            "y": self.y.tolist(),
            "counts": self.counts.tolist(),
            "treatments": [e.to_dict() for e in self.treatments],
            "targets": {str(k): v for k, v in sorted(self.targets.items())},
        }

    @classmethod
    def from_dict(cls, d: dict, where: str = "trajectory") -> "Trajectory":
        for key in ("arm", "obs_times", "y", "treatments"):
            if key not in d:
                raise SchemaError(f"{where}.{key}", "missing")
        if d["arm"] not in ARMS:
            raise SchemaError(f"{where}.arm", f"must be one of {ARMS}")
        times = np.asarray(d["obs_times"], dtype=np.float64)
        y = np.asarray(d["y"], dtype=np.float64)
        if times.ndim != 1 or times.size < 1:
            raise SchemaError(f"{where}.obs_times", "must be a non-empty list")
        if times[0] != 0.0:
            raise SchemaError(f"{where}.obs_times", "must start at 0")
        if np.any(np.diff(times) <= 0):
            raise SchemaError(f"{where}.obs_times", "must be strictly increasing")
        if y.shape != times.shape:
            raise SchemaError(f"{where}.y", "must have one value per observation time")
        if not np.all(np.isfinite(y)):
            raise SchemaError(f"{where}.y", "must be finite")
        events = []
        for i, e in enumerate(d["treatments"]):
            try:
                events.append(TreatmentEvent(float(e["time"]), e["kind"]))
            except (KeyError, TypeError, ArgumentError) as exc:
                raise SchemaError(f"{where}.treatments[{i}]", str(exc)) from None
        targets = {int(k): float(v) for k, v in d.get("targets", {}).items()}
        counts = d.get("counts")
        if counts is not None and np.asarray(counts).shape != (times.size, len(TREATMENTS)):
            raise SchemaError(f"{where}.counts", "must be one [n_chemo, n_radio] pair per observation time")
        return cls(d["arm"], times, y, events, targets, counts)


def treatment_counts(events: Iterable[TreatmentEvent], times: np.ndarray) -> np.ndarray:
    """Number of events of each kind with event.time <= t, for each t in ``times``."""
    times = np.asarray(times, dtype=np.float64)
    out = np.zeros((times.size, len(TREATMENTS)))
    for j, kind in enumerate(TREATMENTS):
        etimes = np.sort([e.time for e in events if e.kind == kind])
        out[:, j] = np.searchsorted(etimes, times, side="right")
    return out


@dataclass
class PatientRecord:
    patient_id: int
    split: str
    subgroup: int
    factual: Trajectory
    counterfactual: Trajectory | None = None
    params: dict = field(default_factory=dict)

    @property
    def subgroup_onehot(self) -> np.ndarray:
        v = np.zeros(N_SUBGROUPS)
        v[self.subgroup] = 1.0
        return v

    def to_dict(self) -> dict:
        return {
            "id": self.patient_id,
            "split": self.split,
            "subgroup": self.subgroup,
            "params": self.params,
            "factual": self.factual.to_dict(),
            "counterfactual": None if self.counterfactual is None else self.counterfactual.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PatientRecord":
        for key in ("factual", "subgroup"):
            if key not in d:
                raise SchemaError(key, "missing")
        sub = d["subgroup"]
        if not isinstance(sub, int) or not 0 <= sub < N_SUBGROUPS:
            raise SchemaError("subgroup", f"must be an integer in [0, {N_SUBGROUPS})")
        cf = d.get("counterfactual")
        return cls(
            patient_id=int(d.get("id", 0)),
            split=d.get("split", "test"),
            subgroup=sub,
            factual=Trajectory.from_dict(d["factual"], "factual"),
            counterfactual=None if cf is None else Trajectory.from_dict(cf, "counterfactual"),
            params=d.get("params", {}),
        )


@dataclass(frozen=True)
class Standardizer:
    """Training-set z-scoring constants for outcomes and treatment-count covariates."""

    y_mean: float
    y_std: float
    count_mean: tuple[float, ...]
    count_std: tuple[float, ...]

    @classmethod
    def fit(cls, records: Iterable[PatientRecord]) -> "Standardizer":
        ys, counts = [], []
        for r in records:
            ys.append(r.factual.y)
            counts.append(r.factual.counts)
        y = np.concatenate(ys)
        c = np.concatenate(counts)
        c_std = np.where(c.std(axis=0) > 0, c.std(axis=0), 1.0)
        y_std = float(y.std()) if y.std() > 0 else 1.0
        return cls(float(y.mean()), y_std, tuple(c.mean(axis=0).tolist()), tuple(c_std.tolist()))

    def y(self, values):
        return (np.asarray(values, dtype=np.float64) - self.y_mean) / self.y_std

    def y_inverse(self, values):
        return np.asarray(values, dtype=np.float64) * self.y_std + self.y_mean

    def var_inverse(self, var):
        return np.asarray(var, dtype=np.float64) * self.y_std**2

    def counts(self, values):
        return (np.asarray(values, dtype=np.float64) - np.asarray(self.count_mean)) / np.asarray(self.count_std)

    def to_dict(self) -> dict:
        return {
            "y_mean": self.y_mean,
            "y_std": self.y_std,
            "count_mean": list(self.count_mean),
            "count_std": list(self.count_std),
            "count_channels": list(TREATMENTS),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(float(d["y_mean"]), float(d["y_std"]), tuple(d["count_mean"]), tuple(d["count_std"]))


def dumps_record(record: PatientRecord) -> str:
    return json.dumps(record.to_dict(), sort_keys=True, separators=(",", ":"))


def write_jsonl(path: str | Path, records: Iterable[PatientRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(dumps_record(r))
            fh.write("\n")


def iter_jsonl(path: str | Path) -> Iterator[PatientRecord]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield PatientRecord.from_dict(json.loads(line))
            except SchemaError as exc:
                raise SchemaError(exc.field, f"{path}:{lineno}: {exc}") from None


@dataclass
class Dataset:
    train: list[PatientRecord]
    val: list[PatientRecord]
    test: list[PatientRecord]
    standardizer: Standardizer
    root: Path | None = None

    @classmethod
    def load(cls, root: str | Path) -> "Dataset":
        root = Path(root)
        try:
            std = Standardizer.from_dict(json.loads((root / "standardization.json").read_text()))
            splits = {}
            for name in ("train", "val", "test"):
                path = root / f"{name}.jsonl"
                splits[name] = list(iter_jsonl(path)) if path.exists() else []
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"dataset file missing: {exc.filename}") from None
        return cls(splits["train"], splits["val"], splits["test"], std, root)

    def save(self, root: str | Path) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        for name in ("train", "val", "test"):
            write_jsonl(root / f"{name}.jsonl", getattr(self, name))
        (root / "standardization.json").write_text(json.dumps(self.standardizer.to_dict(), indent=2, sort_keys=True) + "\n")
