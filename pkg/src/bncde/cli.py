"""Command-line interface: simulate, train, evaluate, predict, benchmark.

Every parameter can come from a flat ``key=value`` file given with
``--config``; explicit flags override the file. Each run writes the fully
resolved parameters to ``config.txt`` in its output directory, and
``bncde <command> --config <dir>/config.txt`` repeats the run.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import Dataset, PatientRecord, SchemaError, TreatmentEvent
from .errors import ArgumentError, BncdeError, ConfigError, NumericalError
from .evaluation import ALPHAS, DEFERRAL_RATES, evaluate, write_report
from .models import bncde as bm
from .models import tecde as tm
from .models.config import BncdeConfig, TecdeConfig
from .models.inputs import encoder_grid, prepare, prepare_record
from .models.training import make_objective, batch_step, train
from .simulator import SimConfig, generate_dataset

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "BNCDE_OUTPUT_ROOT"
CONFIG_ECHO = "config.txt"


# ---------------------------------------------------------------------------
# parameters


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_list(conv):
    def parse(text):
        if isinstance(text, (list, tuple)):
            return tuple(conv(t) for t in text)
        parts = [p for p in str(text).replace(" ", "").split(",") if p]
        return tuple(conv(p) for p in parts)
    return parse


PARSERS = {
    "int": int, "float": float, "str": str, "bool": _parse_bool,
    "ints": _parse_list(int), "floats": _parse_list(float),
}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


class Param:
    def __init__(self, name: str, kind: str, default=None, help: str = "", choices=None, aliases=()):
        self.name, self.kind, self.default, self.help = name, kind, default, help
        self.choices, self.aliases = choices, aliases

    def parse(self, text):
        if text is None or text == "":
            return None
        try:
            value = PARSERS[self.kind](text)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{self.name}: cannot parse {text!r} as {self.kind}") from exc
        if self.choices is not None and value not in self.choices:
            raise ConfigError(f"{self.name}: {value!r} not in {sorted(self.choices)}")
        return value


def _common() -> list[Param]:
    return [
        Param("out", "str", None, f"output directory (default ${OUTPUT_ROOT_ENV}/<command> or runs/<command>)"),
        Param("seed", "int", 0, "global seed"),
        Param("threads", "int", 1, "maximum worker processes"),
    ]


def _config_kind(default) -> str:
    if isinstance(default, bool):
        return "bool"
    if isinstance(default, int):
        return "int"
    if isinstance(default, float):
        return "float"
    if isinstance(default, tuple):
        return "ints"
    return "str"


_MODEL_CONFIGS = {"bncde": BncdeConfig, "tecde": TecdeConfig}
_RUN_KEYS = {"seed", "delta"}


def _model_params() -> list[Param]:
    seen, out = set(), []
    for cls in _MODEL_CONFIGS.values():
        inst = cls()
        for f in fields(cls):
            if f.name in seen or f.name in _RUN_KEYS:
                continue
            seen.add(f.name)
            aliases = {"max_epochs": ("epochs",), "mc_train": ("mc",)}.get(f.name, ())
            out.append(Param(f.name, _config_kind(getattr(inst, f.name)), None, "model hyperparameter", aliases=aliases))
    return out


COMMANDS: dict[str, list[Param]] = {
    "simulate": _common() + [
        Param("n_train", "int", 10000, "training patients"),
        Param("n_val", "int", 1000, "validation patients"),
        Param("n_test", "int", 10000, "test patients (with counterfactual twins)"),
        Param("gamma", "float", 1.0, "informative-sampling strength"),
        Param("noise_var", "float", 1e-4, "variance of the dynamics noise"),
        Param("h_sim", "float", 0.05, "simulator step in days"),
    ],
    "train": _common() + [
        Param("model", "str", "bncde", "model type", choices={"bncde", "tecde"}),
        Param("data", "str", None, "dataset directory"),
        Param("delta", "int", 1, "prediction window in days"),
        Param("preset", "str", "full", "hyperparameter preset", choices={"full", "desk"}),
        Param("limit_train", "int", 0, "use only the first N training records (0 = all)"),
        Param("limit_val", "int", 0, "use only the first N validation records (0 = all)"),
    ] + _model_params(),
    "evaluate": _common() + [
        Param("checkpoint", "str", None, "checkpoint JSON"),
        Param("data", "str", None, "dataset directory"),
        Param("deltas", "ints", (1,), "prediction windows"),
        Param("k", "int", 100, "Monte Carlo samples per patient", aliases=("K",)),
        Param("alphas", "floats", ALPHAS, "credible-interval levels alpha"),
        Param("rates", "floats", DEFERRAL_RATES, "deferral rates"),
        Param("deferral", "bool", True, "compute deferral curves from counterfactual twins"),
        Param("noise_level", "float", None, "noise level label for the MSE table (default: dataset echo)"),
        Param("limit_test", "int", 0, "use only the first N test records (0 = all)"),
    ],
    "predict": _common() + [
        Param("checkpoint", "str", None, "checkpoint JSON"),
        Param("record", "str", None, "patient record JSON file"),
        Param("plan", "str", "[]", "future treatments as a JSON list of {time, kind} (days after the last "
                                    "observation) or a path to such a file"),
        Param("delta", "int", 1, "prediction window in days"),
        Param("alphas", "floats", (0.05,), "credible-interval levels alpha"),
        Param("k", "int", 100, "Monte Carlo samples", aliases=("K",)),
    ],
    "benchmark": _common() + [
        Param("model", "str", "bncde", "model type", choices={"bncde", "tecde"}),
        Param("preset", "str", "desk", "hyperparameter preset", choices={"full", "desk"}),
        Param("n_patients", "int", 64, "patients per timed batch"),
        Param("mc", "int", 5, "training particles"),
        Param("k", "int", 100, "prediction samples", aliases=("K",)),
        Param("repeats", "int", 1, "timed repetitions"),
    ],
}

REQUIRED = {"train": ("data",), "evaluate": ("checkpoint", "data"), "predict": ("checkpoint", "record")}


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key=value`` lines; blank lines and ``#`` comments ignored."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def write_config_echo(out: Path, command: str, values: dict) -> None:
    lines = [f"# bncde {__version__}", f"command={command}"]
    lines += [f"{k}={_format(v)}" for k, v in sorted(values.items()) if v is not None]
    (out / CONFIG_ECHO).write_text("\n".join(lines) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bncde", description="Bayesian neural CDEs for treatment-effect estimation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, params in COMMANDS.items():
        p = sub.add_parser(name, help=f"{name} command")
        p.add_argument("--config", default=None, help="key=value file; explicit flags override it")
        for par in params:
            flags = [f"--{par.name.replace('_', '-')}"] + [f"--{a.replace('_', '-')}" for a in par.aliases]
            default = f" (default {_format(par.default)})" if par.default is not None else ""
            p.add_argument(*flags, dest=par.name, default=argparse.SUPPRESS, help=par.help + default)
    return parser


def resolve(command: str, flags: dict) -> dict:
    """Defaults, then the config file, then explicit flags."""
    params = {p.name: p for p in COMMANDS[command]}
    file_values = read_config_file(flags["config"]) if flags.get("config") else {}
    file_cmd = file_values.pop("command", command)
    if file_cmd != command:
        raise ConfigError(f"config file is for command {file_cmd!r}, not {command!r}")
    values = {k: p.default for k, p in params.items()}
    for source in (file_values, {k: v for k, v in flags.items() if k not in ("config", "command")}):
        for key, text in source.items():
            if key not in params:
                raise ConfigError(f"unknown {command} parameter {key!r}")
            values[key] = params[key].parse(text)
    for key in REQUIRED.get(command, ()):
        if values.get(key) in (None, ""):
            raise ConfigError(f"--{key.replace('_', '-')} is required")
    if values["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    return values


def output_dir(command: str, values: dict) -> Path:
    if values.get("out"):
        out = Path(values["out"])
    else:
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command
        values["out"] = str(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(v: dict, out: Path) -> dict:
    cfg = SimConfig(n_train=v["n_train"], n_val=v["n_val"], n_test=v["n_test"], gamma=v["gamma"],
                    noise_var=v["noise_var"], seed=v["seed"], h_sim=v["h_sim"], threads=v["threads"])
    generate_dataset(cfg).save(out)
    return v


def _model_config(v: dict):
    cls = _MODEL_CONFIGS[v["model"]]
    names = {f.name for f in fields(cls)}
    overrides = {}
    for key, value in v.items():
        if value is None or key not in {p.name for p in _model_params()}:
            continue
        if key not in names:
            raise ConfigError(f"{key!r} does not apply to model {v['model']!r}")
        overrides[key] = value
    overrides.update(seed=v["seed"], delta=v["delta"])
    return cls.desk(**overrides) if v["preset"] == "desk" else cls(**overrides)


def _limit(records: list, n: int) -> list:
    return records[:n] if n and n > 0 else records


def cmd_train(v: dict, out: Path) -> dict:
    cfg = _model_config(v)
    ds = Dataset.load(v["data"])
    train_records, val_records = _limit(ds.train, v["limit_train"]), _limit(ds.val, v["limit_val"])
    if not train_records or not val_records:
        raise ArgumentError("training needs non-empty train and validation splits")
    grid = encoder_grid(cfg.h_max)
    tr = [prepare_record(r, ds.standardizer, cfg.delta, grid) for r in train_records]
    va = [prepare_record(r, ds.standardizer, cfg.delta, grid) for r in val_records]
    rng = np.random.default_rng([cfg.seed, 11])
    params = bm.init_params(cfg, rng) if v["model"] == "bncde" else tm.init_tecde(cfg, rng)
    best, log = train(params, tr, va, on_epoch=lambda r: print(
        f"epoch {r.epoch}: train {r.train:.6g} val {r.val:.6g} ({r.wall:.1f}s)", file=sys.stderr))
    best.save(out / "checkpoint.json", {"standardizer": ds.standardizer.to_dict(), "delta": cfg.delta,
                                        "best_epoch": log.best_epoch, "initial_val": log.initial_val})
    (out / "train_log.csv").write_text("\n".join(log.csv_rows()) + "\n")
    (out / "timings.csv").write_text("\n".join(log.timing_rows()) + "\n")
    # echo the resolved hyperparameters so a re-run does not depend on preset defaults
    for key, value in cfg.to_dict().items():
        if key in v:
            v[key] = value
    return v


def load_model(path: str):
    """(params, standardizer) from a checkpoint written by ``train``."""
    from .data import Standardizer
    from .nets import load_checkpoint

    _, extra = load_checkpoint(path)
    model = extra.get("model")
    if model == "bncde":
        params = bm.BncdeParams.load(path)
    elif model == "tecde":
        params = tm.TecdeParams.load(path)
    else:
        raise ConfigError(f"{path}: unknown model {model!r}")
    if "standardizer" not in extra:
        raise ConfigError(f"{path}: checkpoint has no standardizer")
    return params, Standardizer.from_dict(extra["standardizer"])


def _dataset_noise(root: str) -> float:
    echo = Path(root) / CONFIG_ECHO
    if echo.exists():
        values = read_config_file(echo)
        if "noise_var" in values:
            return float(values["noise_var"])
    return 0.0


def cmd_evaluate(v: dict, out: Path) -> dict:
    params, std = load_model(v["checkpoint"])
    ds = Dataset.load(v["data"])
    records = _limit(ds.test, v["limit_test"])
    if v["noise_level"] is None:
        v["noise_level"] = _dataset_noise(v["data"])
    if v["k"] < 1:
        raise ArgumentError("k must be >= 1")
    echo = {k: _format(val) for k, val in v.items() if k not in ("out", "threads")}
    report = evaluate(params, records, std, deltas=v["deltas"], K=v["k"], seed=v["seed"], alphas=v["alphas"],
                      rates=v["rates"], deferral=v["deferral"], noise_level=v["noise_level"],
                      checkpoint=v["checkpoint"], threads=v["threads"], config=echo)
    write_report(report, out)
    return v


def parse_plan(text: str) -> list[TreatmentEvent]:
    src = text.strip()
    if src and not src.startswith("["):
        src = Path(src).read_text()
    try:
        raw = json.loads(src or "[]")
    except json.JSONDecodeError as exc:
        raise SchemaError("plan", f"invalid JSON: {exc}") from None
    if not isinstance(raw, list):
        raise SchemaError("plan", "expected a list of treatment events")
    events = []
    for i, e in enumerate(raw):
        if not isinstance(e, dict) or set(e) != {"time", "kind"}:
            raise SchemaError(f"plan[{i}]", "expected an object with keys 'time' and 'kind'")
        try:
            events.append(TreatmentEvent(float(e["time"]), str(e["kind"])))
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"plan[{i}]", str(exc)) from None
    return sorted(events)


def predict_record(params, std, record: PatientRecord, plan: list[TreatmentEvent], delta: int,
                   alphas, K: int, seed: int) -> dict:
    """Raw-unit posterior predictive summary for one record under a future treatment plan."""
    for i, e in enumerate(plan):
        if not 0 < e.time <= delta:
            raise SchemaError(f"plan[{i}].time", f"{e.time} outside (0, {delta}]")
    prep = prepare(record.factual, record.subgroup_onehot, std, delta, encoder_grid(params.config.h_max),
                   key=record.patient_id, future=plan)
    if isinstance(params, bm.BncdeParams):
        pp = bm.posterior_predictive(params, prep, std, K, seed)
    else:
        s = tm.tecde_forward(params, prep, K, seed)
        pp = tm.tecde_predictive(std.y_inverse(s), std.var_inverse(params.config.var_floor))
    out = {
        "model": "bncde" if isinstance(params, bm.BncdeParams) else "tecde",
        "id": record.patient_id, "delta": delta, "k": K, "seed": seed,
        "plan": [e.to_dict() for e in plan],
        "mu": [float(x) for x in pp.mu], "var": [float(x) for x in pp.var],
        "mean": float(pp.mean), "variance": float(pp.variance),
        "model_uncertainty": float(pp.model_uncertainty), "outcome_uncertainty": float(pp.outcome_uncertainty),
        "intervals": [],
    }
    for a in alphas:
        lo, hi = bm.credible_interval(pp, a)
        out["intervals"].append({"alpha": float(a), "lo": float(lo), "hi": float(hi)})
    return out


def cmd_predict(v: dict, out: Path) -> dict:
    params, std = load_model(v["checkpoint"])
    try:
        raw = json.loads(Path(v["record"]).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError("record", f"invalid JSON: {exc}") from None
    record = PatientRecord.from_dict(raw)
    if not 1 <= v["delta"] <= 5:
        raise ArgumentError("delta must lie in 1..5")
    if v["k"] < 1:
        raise ArgumentError("k must be >= 1")
    for a in v["alphas"]:
        if not 0 < a < 1:
            raise ArgumentError(f"alpha {a} outside (0, 1)")
    result = predict_record(params, std, record, parse_plan(v["plan"]), v["delta"], v["alphas"], v["k"], v["seed"])
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    (out / "prediction.json").write_text(text)
    sys.stdout.write(text)
    return v


def cmd_benchmark(v: dict, out: Path) -> dict:
    """Times one training step and one prediction pass on simulated patients."""
    from .models.inputs import decoder_grid

    n = v["n_patients"]
    if n < 1 or v["repeats"] < 1 or v["k"] < 1 or v["mc"] < 1:
        raise ArgumentError("n_patients, repeats, k and mc must be >= 1")
    ds = generate_dataset(SimConfig(n_train=n, n_val=1, n_test=1, seed=v["seed"]))
    if v["model"] == "bncde":
        base = dict(mc_train=v["mc"], seed=v["seed"])
        cfg = BncdeConfig.desk(**base) if v["preset"] == "desk" else BncdeConfig(**base)
        params = bm.init_params(cfg, np.random.default_rng([v["seed"], 11]))
    else:
        cfg = TecdeConfig.desk(seed=v["seed"]) if v["preset"] == "desk" else TecdeConfig(seed=v["seed"])
        params = tm.init_tecde(cfg, np.random.default_rng([v["seed"], 11]))
    grid = encoder_grid(cfg.h_max)
    preps = [prepare_record(r, ds.standardizer, cfg.delta, grid) for r in ds.train]
    grids = (grid, decoder_grid(preps, cfg.h_max))
    objective = make_objective(params)
    timings = []
    for rep in range(v["repeats"]):
        t0 = time.perf_counter()
        value, _ = batch_step(params, objective, preps, 1, grids)
        t1 = time.perf_counter()
        if isinstance(params, bm.BncdeParams):
            mu, _ = bm.predict_rows(params, preps, v["k"], v["seed"])
        else:
            mu = tm.tecde_predict_rows(params, preps, v["k"], v["seed"])
        t2 = time.perf_counter()
        timings.append((rep, t1 - t0, t2 - t1))
    result = {
        "model": v["model"], "preset": v["preset"], "n_patients": n, "k": v["k"],
        "parameters": {k: int(a.size) for k, a in sorted(params.groups.items())},
        "batch_objective": float(value), "prediction_mean": float(np.mean(mu)),
    }
    (out / "benchmark.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    rows = ["repeat,train_step_seconds,predict_seconds"] + [f"{r},{a:.4f},{b:.4f}" for r, a, b in timings]
    (out / "timings.csv").write_text("\n".join(rows) + "\n")
    return v


HANDLERS = {"simulate": cmd_simulate, "train": cmd_train, "evaluate": cmd_evaluate,
            "predict": cmd_predict, "benchmark": cmd_benchmark}


def run(argv=None) -> int:
    args = vars(build_parser().parse_args(argv))
    command = args["command"]
    try:
        values = resolve(command, args)
        out = output_dir(command, values)
        values = HANDLERS[command](values, out)
        write_config_echo(out, command, values)
    except NumericalError as exc:
        print(f"bncde {command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"bncde {command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (BncdeError, ValueError) as exc:
        print(f"bncde {command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
