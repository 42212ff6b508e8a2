"""Run configuration: INI-style sections with strict key checking.

Relative paths resolve against the config file's directory. Unknown sections
or keys are errors; the effective (fully resolved) configuration is dumped
beside every command's outputs for reproducibility.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from .data import SynthConfig
from .errors import ValidationError
from .training import TrainConfig

_PATH = "path"

#: section -> key -> (type tag, default). Paths with default None are optional.
SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "paths": {
        "dataset": (_PATH, None),
        "model_in": (_PATH, None),
        "model_out": (_PATH, None),
        "predictions": (_PATH, None),
        "latents_true": (_PATH, None),
        "output_dir": (_PATH, "."),
    },
    "model": {
        "q": ("int", 8),
        "m": ("int", 15),
        "mc_samples_discrete": ("int", 20),
        "lengthscale_init": ("float", 1.0),
        "variance_init": ("float", 1.0),
        "noise_scale_init": ("float", 0.5),
    },
    "train": {
        "max_iters": ("int", 2000),
        "learning_rate": ("float", 0.01),
        "batch_size": ("int", 0),  # 0: full batch up to 256 trials
        "seed": ("int", 0),
        "convergence_window": ("int", 100),
        "convergence_tol": ("float", 1e-3),
        "adam_beta1": ("float", 0.9),
        "adam_beta2": ("float", 0.999),
        "adam_eps": ("float", 1e-8),
    },
    "decode": {
        "iterations": ("int", 300),
        "learning_rate": ("float", 0.05),
        "n_samples": ("int", 100),
        "init": ("str", "nearest"),
        "seed": ("int", 0),
    },
    "cv": {
        "k_folds": ("int", 5),
        "seed": ("int", 0),
    },
    "features": {
        "k_features": ("int", 25),
    },
    "synth": {
        "n": ("int", 150),
        "d": ("int", 25),
        "k": ("int", 2),
        "q_true": ("int", 2),
        "noise_sd": ("float", 0.3),
        "class_separation": ("float", 3.0),
        "seed": ("int", 7),
    },
    "gradcheck": {
        "h": ("float", 1e-5),
        "tol": ("float", 1e-4),
        "seeds": ("int", 10),
    },
}

_POSITIVE_COUNTS = (
    ("model", "q"),
    ("model", "m"),
    ("model", "mc_samples_discrete"),
    ("decode", "n_samples"),
    ("cv", "k_folds"),
    ("features", "k_features"),
    ("synth", "n"),
    ("synth", "d"),
    ("synth", "k"),
    ("synth", "q_true"),
    ("gradcheck", "seeds"),
)


@dataclass
class RunConfig:
    """Fully resolved configuration values, keyed by section then key."""

    values: dict[str, dict[str, object]]

    def get(self, section: str, key: str):
        return self.values[section][key]

    def path(self, key: str) -> Path | None:
        value = self.values["paths"][key]
        return None if value is None else Path(value)

    def require_path(self, key: str) -> Path:
        p = self.path(key)
        if p is None:
            raise ValidationError(f"config is missing required path [paths] {key}")
        return p

    def output_dir(self) -> Path:
        return Path(self.values["paths"]["output_dir"])

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        return TrainConfig(
            max_iters=t["max_iters"],
            learning_rate=t["learning_rate"],
            batch_size=None if t["batch_size"] == 0 else t["batch_size"],
            mc_samples_discrete=self.values["model"]["mc_samples_discrete"],
            seed=t["seed"],
            convergence_window=t["convergence_window"],
            convergence_tol=t["convergence_tol"],
            adam_beta1=t["adam_beta1"],
            adam_beta2=t["adam_beta2"],
            adam_eps=t["adam_eps"],
        )

    def decode_config(self) -> TrainConfig:
        d = self.values["decode"]
        return TrainConfig(
            max_iters=d["iterations"],
            learning_rate=d["learning_rate"],
            mc_samples_discrete=self.values["model"]["mc_samples_discrete"],
            seed=d["seed"],
        )

    def synth_config(self) -> SynthConfig:
        s = self.values["synth"]
        return SynthConfig(
            n=s["n"],
            d=s["d"],
            k=s["k"],
            q_true=s["q_true"],
            noise_sd=s["noise_sd"],
            class_separation=s["class_separation"],
            seed=s["seed"],
        )

    def override_seed(self, seed: int) -> None:
        """The --seed flag pins every section's seed at once."""
        for section in ("train", "decode", "cv", "synth"):
            self.values[section]["seed"] = int(seed)

    def override_output_dir(self, output_dir) -> None:
        self.values["paths"]["output_dir"] = str(Path(output_dir).resolve())

    def to_ini(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in keys:
                value = self.values[section][key]
                if value is None:
                    continue
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)


def _coerce(section: str, key: str, text: str, base_dir: Path):
    kind, _ = SCHEMA[section][key]
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == _PATH:
            return str((base_dir / text).resolve()) if not Path(text).is_absolute() else text
        return text
    except ValueError:
        raise ValidationError(
            f"config [{section}] {key}: cannot parse {text!r} as {kind}"
        ) from None


def load_config(path) -> RunConfig:
    """Parse and validate a config file; unknown sections or keys are errors."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ValidationError(f"config parse error: {exc}") from None

    base_dir = path.resolve().parent
    values: dict[str, dict[str, object]] = {
        section: {key: default for key, (_, default) in keys.items()}
        for section, keys in SCHEMA.items()
    }
    for section in parser.sections():
        if section not in SCHEMA:
            raise ValidationError(f"config has unknown section [{section}]")
        for key, text in parser.items(section):
            if key not in SCHEMA[section]:
                raise ValidationError(f"config has unknown key [{section}] {key}")
            values[section][key] = _coerce(section, key, text, base_dir)

    # Resolve relative default paths (output_dir ".") against the config dir.
    for key, value in values["paths"].items():
        if value is not None and not Path(value).is_absolute():
            values["paths"][key] = str((base_dir / value).resolve())

    config = RunConfig(values=values)
    _validate(config)
    return config


def _validate(config: RunConfig) -> None:
    for section, key in _POSITIVE_COUNTS:
        if config.values[section][key] <= 0:
            raise ValidationError(f"config [{section}] {key} must be positive")
    for section, key in (("train", "max_iters"), ("decode", "iterations")):
        if config.values[section][key] < 0:
            raise ValidationError(f"config [{section}] {key} must be nonnegative")
    if config.values["train"]["batch_size"] < 0:
        raise ValidationError("config [train] batch_size must be nonnegative")
    if config.values["decode"]["init"] not in ("nearest", "random", "zero"):
        raise ValidationError(
            "config [decode] init must be one of: nearest, random, zero"
        )


def check_write_conflicts(reads: list[Path | None], writes: list[Path]) -> None:
    """Write targets must be pairwise distinct and distinct from inputs."""
    resolved_writes = [Path(w).resolve() for w in writes]
    if len(set(resolved_writes)) != len(resolved_writes):
        raise ValidationError("two output paths resolve to the same file")
    read_set = {Path(r).resolve() for r in reads if r is not None}
    clash = read_set.intersection(resolved_writes)
    if clash:
        raise ValidationError(f"output path would overwrite an input: {sorted(clash)[0]}")
