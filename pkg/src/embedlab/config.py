"""Sectioned plain-text experiment config (``key = value`` under ``[section]``).

Fixed sections: dataset, model, optimizer, plan, output. Repeated sections
use a ``kind.name`` header: ``[space.campaign]``, ``[task.click]``,
``[arm.baseline]``. Unknown sections or keys are rejected. Serializing a
parsed config and parsing it again yields the same document.
"""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

from embedlab import ConfigError
from embedlab.feature import HashSpec
from embedlab.model import ToyModelConfig
from embedlab.optim import FalConfig, SparseOptimizerConfig
from embedlab.seeding import derive_seed
from embedlab.synthgen import (SignalConfig, TaskSpec, ZipfIdSpace, calibrate_zipf,
                               target_rates, task_order)
from embedlab.trainer import Arm, TrainPlan

# -- value codecs ---------------------------------------------------------


def _bool(s):
    v = s.strip().lower()
    if v in ("true", "yes", "on", "1"):
        return True
    if v in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s):
    return tuple(int(x) for x in s.replace(",", " ").split())


def _strs(s):
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _days(s):
    s = s.strip().lower()
    if s in ("", "none"):
        return ()
    if "-" in s:
        a, b = s.split("-", 1)
        a, b = int(a), int(b)
        if b < a:
            raise ValueError(f"empty day range {s!r}")
        return tuple(range(a, b + 1))
    return (int(s),)


def _opt_str(s):
    s = s.strip()
    return None if s.lower() in ("", "none") else s


def _exponent(s):
    s = s.strip().lower()
    return "auto" if s == "auto" else float(s)


def _fmt(v, kind):
    if kind is _bool:
        return "true" if v else "false"
    if kind is float:
        return repr(float(v))
    if kind is _ints:
        return ", ".join(str(x) for x in v)
    if kind is _strs:
        return ", ".join(v)
    if kind is _days:
        if not v:
            return "none"
        return f"{v[0]}-{v[-1]}" if len(v) > 1 else str(v[0])
    if kind is _opt_str:
        return "none" if v is None else v
    if kind is _exponent:
        return v if v == "auto" else repr(float(v))
    return str(v)


# section kind -> key -> (codec, default); a default of ... marks a required key
SCHEMA = {
    "dataset": {
        "seed": (int, 0),
        "days": (int, ...),
        "examples_per_day": (int, ...),
        "base_density": (float, 0.2),
        "continuous_dim": (int, 4),
        "hidden_dim": (int, 8),
        "id_scale": (float, 1.5),
        "continuous_scale": (float, 0.5),
        "logit_noise": (float, 0.5),
        "drift": (float, 0.0),
        "calibration_examples": (int, 400_000),
    },
    "space": {
        "num_ids": (int, ...),
        "exponent": (_exponent, "auto"),
        "coverage_fraction": (float, 0.0074),
        "coverage_mass": (float, 0.5),
        "seed": (int, 0),
        "hash_bits": (int, 16),
        "hash_salt": (int, 0),
    },
    "task": {
        "relative_density": (float, ...),
        "condition": (_opt_str, None),
        "condition_value": (int, 1),
        "loss_weight": (float, 1.0),
    },
    "model": {
        "dim": (int, 32),
        "trunk": (_ints, (64, 32)),
        "seed": (int, 0),
        "dtype": (str, "float32"),
        "head_bias": (str, "prior"),
    },
    "optimizer": {
        "base_lr": (float, 0.00015),
        "embedding_lr_multiplier": (float, 50.0),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "epsilon": (float, 1e-5),
        "batch_size": (int, 2000),
        "clip_norm": (float, 0.0),
        "lazy": (_bool, True),
    },
    "plan": {
        "batch_days": (_days, ...),
        "epochs": (int, 1),
        "shuffle_seed": (int, 0),
        "continual_days": (_days, ()),
        "eval_cadence": (int, 20),
        "eval_cap": (int, 100_000),
    },
    "arm": {
        "fal": (str, "off"),
        "fal_application": (str, "scale_update"),
        "fal_exclude": (_strs, ()),
        "meda": (_bool, False),
        "base_lr": (_opt_str, None),
        "embedding_lr_multiplier": (_opt_str, None),
        "reset_counters": (_bool, False),
        "reset_moments": (_bool, False),
    },
    "output": {
        "dataset_dir": (str, "data"),
        "run_dir": (str, "runs"),
    },
}
SINGLE = ("dataset", "model", "optimizer", "plan", "output")
REPEATED = ("space", "task", "arm")
DATASET_KINDS = {"dataset": None, "space": ("hash_bits", "hash_salt"), "task": ("loss_weight",)}


@dataclass
class ExperimentConfig:
    sections: dict[str, dict]
    base_dir: Path = Path(".")

    # -- parsing and serialization -----------------------------------------

    @classmethod
    def parse(cls, text: str, base_dir: Path | str = ".") -> ExperimentConfig:
        cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",), strict=True)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"malformed config: {e}") from None
        sections: dict[str, dict] = {}
        for name in cp.sections():
            kind = name.split(".", 1)[0]
            if kind in SINGLE and name != kind or kind in REPEATED and ("." not in name or not name.split(".", 1)[1]):
                raise ConfigError(f"bad section header [{name}]")
            if kind not in SCHEMA:
                raise ConfigError(f"unknown section [{name}]")
            schema = SCHEMA[kind]
            values = {}
            for key, raw in cp.items(name):
                if key not in schema:
                    raise ConfigError(f"unknown key {key!r} in [{name}]")
                codec = schema[key][0]
                try:
                    values[key] = codec(raw)
                except ValueError as e:
                    raise ConfigError(f"[{name}] {key}: {e}") from None
            for key, (_, default) in schema.items():
                if key not in values:
                    if default is ...:
                        raise ConfigError(f"missing required key {key!r} in [{name}]")
                    values[key] = default
            sections[name] = values
        for req in ("dataset", "plan"):
            if req not in sections:
                raise ConfigError(f"missing section [{req}]")
        for opt in ("model", "optimizer", "output"):
            if opt not in sections:
                sections[opt] = {k: d for k, (_, d) in SCHEMA[opt].items()}
        cfg = cls(sections, Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: Path | str) -> ExperimentConfig:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.parse(text, path.parent)

    def serialize(self, kinds=None) -> str:
        out = []
        for name, values in self.sections.items():
            kind = name.split(".", 1)[0]
            if kinds is not None and kind not in kinds:
                continue
            skip = DATASET_KINDS.get(kind) if kinds is DATASET_KINDS else None
            out.append(f"[{name}]")
            for key, (codec, _) in SCHEMA[kind].items():
                if skip and key in skip:
                    continue
                out.append(f"{key} = {_fmt(values[key], codec)}")
            out.append("")
        return "\n".join(out)

    def config_hash(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()

    def dataset_hash(self) -> str:
        """Hash of only the settings that determine the generated data."""
        return hashlib.sha256(self.serialize(DATASET_KINDS).encode()).hexdigest()

    # -- accessors -----------------------------------------------------------

    def _named(self, kind):
        return [(n.split(".", 1)[1], v) for n, v in self.sections.items() if n.split(".", 1)[0] == kind]

    @property
    def dataset(self) -> dict:
        return self.sections["dataset"]

    def validate(self) -> None:
        ds = self.dataset
        if ds["days"] < 1 or ds["examples_per_day"] < 1:
            raise ConfigError("dataset needs at least one day and one example per day")
        if not self._named("space"):
            raise ConfigError("at least one [space.*] section is required")
        if not self._named("task"):
            raise ConfigError("at least one [task.*] section is required")
        task_order(self.tasks())
        target_rates(self.tasks(), ds["base_density"])
        if self.sections["model"]["head_bias"] not in ("prior", "zero"):
            raise ConfigError("model.head_bias must be 'prior' or 'zero'")
        self.plan(require_arms=False)
        for name, a in self._named("arm"):
            self._arm(name, a)

    def spaces(self) -> list[ZipfIdSpace]:
        out = []
        for i, (name, s) in enumerate(self._named("space")):
            exp = s["exponent"]
            if exp == "auto":
                exp = calibrate_zipf(s["num_ids"], s["coverage_fraction"], s["coverage_mass"])
            seed = derive_seed(self.dataset["seed"], 1000 + i, s["seed"])
            out.append(ZipfIdSpace(name, s["num_ids"], exp, seed))
        return out

    def hash_specs(self) -> list[HashSpec]:
        return [HashSpec(name, s["hash_bits"], s["hash_salt"]) for name, s in self._named("space")]

    def tasks(self) -> list[TaskSpec]:
        return [TaskSpec(n, t["relative_density"], t["condition"], t["condition_value"])
                for n, t in self._named("task")]

    def signal(self) -> SignalConfig:
        ds = self.dataset
        return SignalConfig(ds["base_density"], ds["continuous_dim"], ds["hidden_dim"], ds["id_scale"],
                            ds["continuous_scale"], ds["logit_noise"], ds["drift"], ds["calibration_examples"])

    def model_config(self) -> ToyModelConfig:
        m = self.sections["model"]
        tasks = self.tasks()
        head_bias = None
        if m["head_bias"] == "prior":
            rates = target_rates(tasks, self.dataset["base_density"])
            head_bias = tuple(math.log(rates[t.name][1] / (1 - rates[t.name][1])) for t in tasks)
        return ToyModelConfig(
            tables=tuple(self.hash_specs()),
            tasks=tuple(t.name for t in tasks),
            dim=m["dim"],
            continuous_dim=self.dataset["continuous_dim"],
            trunk=tuple(m["trunk"]),
            loss_weights=tuple(t["loss_weight"] for _, t in self._named("task")),
            dtype=m["dtype"],
            seed=m["seed"],
            head_bias=head_bias,
        )

    def _arm(self, name, a) -> Arm:
        o = self.sections["optimizer"]
        try:
            base = float(a["base_lr"]) if a["base_lr"] is not None else o["base_lr"]
            mult = float(a["embedding_lr_multiplier"]) if a["embedding_lr_multiplier"] is not None \
                else o["embedding_lr_multiplier"]
        except ValueError as e:
            raise ConfigError(f"[arm.{name}]: {e}") from None
        return Arm(name, FalConfig(a["fal"], a["fal_application"], tuple(a["fal_exclude"])), a["meda"],
                   SparseOptimizerConfig(base, mult), a["reset_counters"], a["reset_moments"])

    def arms(self) -> list[Arm]:
        return [self._arm(n, a) for n, a in self._named("arm")]

    def plan(self, require_arms: bool = True) -> TrainPlan:
        p = self.sections["plan"]
        arms = tuple(self.arms()) if self._named("arm") else ()
        if require_arms and not arms:
            raise ConfigError("the arm list is empty; add at least one [arm.*] section")
        plan = TrainPlan(p["batch_days"], p["epochs"], p["shuffle_seed"], p["continual_days"],
                         p["eval_cadence"], p["eval_cap"], self.sections["optimizer"]["batch_size"], arms)
        last = max(plan.required_days())
        if last >= self.dataset["days"]:
            raise ConfigError(f"plan needs day {last} but the dataset has days 0..{self.dataset['days'] - 1}")
        return plan

    def optimizer_kwargs(self) -> dict:
        o = self.sections["optimizer"]
        return {"betas": (o["beta1"], o["beta2"]), "eps": o["epsilon"],
                "clip_norm": o["clip_norm"] or None, "lazy": o["lazy"]}

    def path(self, key: str) -> Path:
        p = Path(self.sections["output"][key])
        return p if p.is_absolute() else self.base_dir / p

    def with_seed(self, seed: int, *, dataset: bool) -> ExperimentConfig:
        """Copy with the dataset seed (generate) or the model/shuffle seeds (train) replaced."""
        sections = {k: dict(v) for k, v in self.sections.items()}
        if dataset:
            sections["dataset"]["seed"] = seed
        else:
            sections["model"]["seed"] = seed
            sections["plan"]["shuffle_seed"] = seed
        return ExperimentConfig(sections, self.base_dir)
