"""Flat ``key = value`` experiment configs with dotted keys and ``#`` comments."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

from ..attack import AttackConfig
from ..prune import STRUCTURED, UNSTRUCTURED, PruneSchedule
from ..train import Adversarial, MixTrainConfig, Natural, TrainConfig, VerifiedRobust

LITERAL_MOMENTUM = 0.0001


class ConfigError(ValueError):
    pass


def _floats(text):
    text = text.strip()
    return tuple(float(t) for t in text.split(",") if t.strip()) if text else ()


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _choice(*options):
    def parse(text):
        text = text.strip()
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {text!r}")
        return text
    return parse


def _str(text):
    return text.strip()


OBJECTIVES = ("natural", "adversarial", "verified")

# key -> (parser, default text). Every setting has a recorded default.
SCHEMA = {
    "seed": (int, "0"),
    "arch": (_str, "conv2d:16:4:2, relu, flatten, dense:10"),
    "data.source": (_choice("synth", "idx"), "synth"),
    "data.num_classes": (int, "10"),
    "data.samples_per_class": (int, "100"),
    "data.test_per_class": (int, "30"),
    "data.image_side": (int, "12"),
    "data.seed": (int, "0"),
    "data.jitter": (float, "0.07"),
    "data.texture": (float, "0.06"),
    "data.noise": (float, "0.05"),
    "data.train_images": (_str, ""),
    "data.train_labels": (_str, ""),
    "data.test_images": (_str, ""),
    "data.test_labels": (_str, ""),
    "data.limit": (int, "0"),
    "pretrain.objective": (_choice(*OBJECTIVES), "natural"),
    "pretrain.epochs": (int, "10"),
    "pretrain.batch_size": (int, "128"),
    "pretrain.lr": (float, "0.1"),
    "pretrain.milestones": (_floats, "0.5, 0.75, 0.9"),
    "pretrain.decay": (float, "0.1"),
    "pretrain.momentum": (float, "0.9"),
    "pretrain.weight_decay": (float, "0.0001"),
    "pretrain.eps_ramp": (float, "0.25"),
    "pretrain.eps_warmup": (float, "0.0"),
    "attack.epsilon": (float, "0.1"),
    "attack.step_size": (float, "0.025"),
    "attack.iterations": (int, "10"),
    "attack.random_start": (_bool, "true"),
    "mixtrain.k": (int, "10"),
    "mixtrain.alpha": (float, "0.7"),
    "mixtrain.epsilon": (float, "0.00784313725490196"),
    "prune.target": (float, "0.5"),
    "prune.mode": (_choice(UNSTRUCTURED, STRUCTURED), UNSTRUCTURED),
    "prune.steps": (int, "40"),
    "prune.increments": (_choice("linear", "geometric"), "linear"),
    "prune.scope": (_choice("global", "layerwise"), "global"),
    "finetune.objective": (_choice(*OBJECTIVES), "natural"),
    "finetune.epochs": (int, "5"),
    "finetune.lr": (float, "0.001"),
    "finetune.k": (int, "10"),
    "eval.epsilon": (float, "0.1"),
    "eval.step_size": (float, "0.025"),
    "eval.iterations": (int, "10"),
    "eval.seed": (int, "0"),
    "stability.grid": (_floats, "0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95"),
    "conflict.a": (_choice(*OBJECTIVES), "natural"),
    "conflict.b": (_choice(*OBJECTIVES), "verified"),
    "conflict.batch_size": (int, "256"),
    "scratch.keep_fraction": (float, "0"),  # 0 -> 1 - prune.target
    "scratch.epochs": (int, "0"),  # 0 -> pretrain.epochs
}


def parse_text(text, origin="<config>"):
    """Raw ``{key: value-text}`` from config text. Later lines override earlier ones."""
    raw = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{origin}:{n}: unknown key {key!r}")
        raw[key] = value
    return raw


@dataclass
class ExperimentConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_raw(cls, raw):
        values = {}
        for key, (parse, default) in SCHEMA.items():
            text = raw.get(key, default)
            try:
                values[key] = parse(text)
            except ValueError as e:
                raise ConfigError(f"{key}: {e}") from None
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, overrides=None):
        raw = {}
        if path is not None:
            with open(path) as f:
                raw = parse_text(f.read(), str(path))
        raw.update(overrides or {})
        return cls.from_raw(raw)

    def with_values(self, **changes):
        raw = self.raw()
        raw.update({k.replace("__", "."): str(v) for k, v in changes.items()})
        return ExperimentConfig.from_raw(raw)

    def raw(self):
        return {k: format_value(v) for k, v in self.values.items()}

    # everything below derives engine objects, surfacing bad values as field-level errors

    def validate(self):
        builders = {
            "arch": self.arch,
            "pretrain.*": self.pretrain_config,
            "attack.*": self.train_attack,
            "mixtrain.*": self.mixtrain,
            "eval.*": self.eval_attack,
            "prune.*": self.schedule,
        }
        for where, build in builders.items():
            try:
                build()
            except (ValueError, TypeError) as e:
                raise ConfigError(f"{where}: {e}") from None
        v = self.values
        if v["data.source"] == "idx" and not (v["data.train_images"] and v["data.train_labels"]):
            raise ConfigError("data.train_images / data.train_labels are required when data.source = idx")
        for key in ("data.num_classes", "data.samples_per_class", "data.test_per_class", "data.image_side"):
            if v[key] < 1:
                raise ConfigError(f"{key}: must be >= 1")
        if v["finetune.k"] < 1:
            raise ConfigError("finetune.k: must be >= 1")
        if not 0 <= v["scratch.keep_fraction"] <= 1:
            raise ConfigError("scratch.keep_fraction: must lie in [0, 1]")
        if v["conflict.batch_size"] < 1:
            raise ConfigError("conflict.batch_size: must be >= 1")
        grid = v["stability.grid"]
        if any(not 0 <= r < 1 for r in grid) or any(b < a for a, b in zip(grid, grid[1:])):
            raise ConfigError("stability.grid: ratios must be ascending within [0, 1)")

    def arch(self):
        return parse_arch(self.values["arch"])

    def pretrain_config(self, momentum=None):
        v = self.values
        return TrainConfig(
            epochs=v["pretrain.epochs"], batch_size=v["pretrain.batch_size"], lr=v["pretrain.lr"],
            milestones=v["pretrain.milestones"], decay=v["pretrain.decay"],
            momentum=v["pretrain.momentum"] if momentum is None else momentum,
            weight_decay=v["pretrain.weight_decay"], seed=v["seed"],
            eps_ramp=v["pretrain.eps_ramp"], eps_warmup=v["pretrain.eps_warmup"],
        )

    def train_attack(self):
        v = self.values
        return AttackConfig(v["attack.epsilon"], v["attack.step_size"], v["attack.iterations"],
                            v["attack.random_start"])

    def eval_attack(self):
        v = self.values
        return AttackConfig(v["eval.epsilon"], v["eval.step_size"], v["eval.iterations"], False)

    def mixtrain(self, k=None):
        v = self.values
        return MixTrainConfig(v["mixtrain.k"] if k is None else k, v["mixtrain.alpha"], v["mixtrain.epsilon"])

    def objective(self, tag, k=None):
        if tag == "natural":
            return Natural()
        if tag == "adversarial":
            return Adversarial(self.train_attack())
        return VerifiedRobust(self.mixtrain(k))

    def schedule(self):
        v = self.values
        return PruneSchedule(
            target=v["prune.target"], mode=v["prune.mode"], steps=v["prune.steps"],
            finetune_epochs=v["finetune.epochs"],
            finetune_objective=self.objective(v["finetune.objective"], v["finetune.k"]),
            finetune_lr=v["finetune.lr"], increments=v["prune.increments"], scope=v["prune.scope"],
        )

    def keep_fraction(self):
        k = self.values["scratch.keep_fraction"]
        return k if k > 0 else 1.0 - self.values["prune.target"]

    def scratch_epochs(self):
        e = self.values["scratch.epochs"]
        return e if e > 0 else self.values["pretrain.epochs"]

    def canonical_text(self):
        return "".join(f"{k} = {format_value(self.values[k])}\n" for k in sorted(self.values))

    def digest(self):
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_ARCH_FIELDS = {
    "dense": ("out",),
    "conv2d": ("out", "kernel", "stride", "padding"),
    "avgpool": ("kernel", "stride"),
    "relu": (),
    "flatten": (),
}


def parse_arch(text):
    """``conv2d:16:4:2, relu, flatten, dense:10`` -> list of layer spec dicts."""
    specs = []
    for item in text.split(","):
        parts = [p.strip() for p in item.strip().split(":")]
        kind = parts[0]
        if kind not in _ARCH_FIELDS:
            raise ValueError(f"unknown layer kind {kind!r}")
        names = _ARCH_FIELDS[kind]
        if len(parts) - 1 > len(names):
            raise ValueError(f"{kind} takes at most {len(names)} fields, got {item.strip()!r}")
        spec = {"kind": kind}
        for name, value in zip(names, parts[1:]):
            spec[name] = int(value)
        if kind in ("dense", "conv2d") and "out" not in spec:
            raise ValueError(f"{kind} needs an output size")
        if kind == "conv2d" and "kernel" not in spec:
            raise ValueError("conv2d needs a kernel size")
        if kind == "avgpool" and "kernel" not in spec:
            raise ValueError("avgpool needs a kernel size")
        specs.append(spec)
    if not specs:
        raise ValueError("empty architecture")
    return specs


def format_arch(specs):
    out = []
    for s in specs:
        fields = [str(s[n]) for n in _ARCH_FIELDS[s["kind"]] if n in s]
        out.append(":".join([s["kind"]] + fields))
    return ", ".join(out)
