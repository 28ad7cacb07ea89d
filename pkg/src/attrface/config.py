"""Run configuration: a flat key/value text format with dotted keys.

Grammar: one ``key = value`` per line; blank lines and lines starting with
``#`` are ignored.  Keys are dotted lowercase section paths.  Values are
ints, floats, strings, comma-separated lists, or ``channels:stride`` pairs
for the backbone.  Unknown keys are rejected by name, and every key has a
default, so an empty file is a valid run.

Example::

    data.identities = 32
    network.fusion = dual
    train.epochs = 25
    eval.far_targets = 1e-5,1e-4,1e-3,1e-2,1e-1
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .datagen import SyntheticSpec
from .errors import ConfigError
from .network import AttributeSpec, NetworkConfig
from .training import TrainConfig


def _parse_int(s: str) -> int:
    return int(s)


def _parse_float(s: str) -> float:
    return float(s)


def _parse_str(s: str) -> str:
    return s


def _parse_int_list(s: str) -> tuple[int, ...]:
    return tuple(int(x.strip()) for x in s.split(",") if x.strip())


def _parse_float_list(s: str) -> tuple[float, ...]:
    return tuple(float(x.strip()) for x in s.split(",") if x.strip())


def _parse_str_list(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _parse_backbone(s: str) -> tuple[tuple[int, int], ...]:
    stages = []
    for part in s.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            channels, stride = part.split(":")
            stages.append((int(channels), int(stride)))
        except ValueError:
            raise ConfigError(
                f"backbone stage '{part}' must be 'channels:stride'"
            ) from None
    return tuple(stages)


# key -> (parser, default); defaults are the desk-scale run
SCHEMA: dict[str, tuple[Any, Any]] = {
    "data.identities": (_parse_int, 32),
    "data.samples_per_identity": (_parse_int, 20),
    "data.eval_identities": (_parse_int, 8),
    "data.channels": (_parse_int, 1),
    "data.height": (_parse_int, 32),
    "data.width": (_parse_int, 32),
    "data.attributes": (_parse_int, 5),
    "data.noise": (_parse_float, 0.05),
    "data.pose": (_parse_float, 0.75),
    "data.seed": (_parse_int, 0),
    "network.backbone": (_parse_backbone, ((8, 2), (16, 2), (32, 1))),
    "network.branch_width": (_parse_int, 32),
    "network.embedding": (_parse_int, 64),
    "network.fusion": (_parse_str, "dual"),
    "network.reduction": (_parse_int, 8),
    "network.lambda_fr": (_parse_float, 3.0),
    "network.seed": (_parse_int, 0),
    "attributes.names": (_parse_str_list,
                         ("male", "bald", "chubby", "big_nose", "narrow_eyes")),
    "attributes.weights": (_parse_float_list, (1.0, 1.0, 0.5, 0.5, 0.5)),
    "attributes.use": (_parse_int, 5),
    "train.epochs": (_parse_int, 25),
    "train.lr0": (_parse_float, 0.01),
    "train.lr_steps": (_parse_int_list, (4, 10, 17)),
    "train.lr_factor": (_parse_float, 0.1),
    "train.momentum": (_parse_float, 0.9),
    "train.batch": (_parse_int, 32),
    "train.seed": (_parse_int, 0),
    "eval.far_targets": (_parse_float_list, (1e-5, 1e-4, 1e-3, 1e-2, 1e-1)),
    "eval.pairs": (_parse_int, 2000),
    "eval.seed": (_parse_int, 0),
}

FUSION_CHOICES = ("dual", "channel", "se", "concat", "add", "baseline")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Raw key -> parsed value, with defaults filled in."""
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got '{line}'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(value)
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for '{key}': {e}") from None
    for key, (_, default) in SCHEMA.items():
        values.setdefault(key, default)
    return values


@dataclass(frozen=True)
class RunConfig:
    """Validated union of dataset, network, training and evaluation settings."""

    values: Mapping[str, Any]

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        return cls.from_text(path.read_text(), source=str(path))

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls(parse_config_text(text, source))
        cfg.validate()
        return cfg

    def derived(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Copy with parsed overrides applied (used by the ablation runner)."""
        merged = dict(self.values)
        for key, value in overrides.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown key '{key}'")
            merged[key] = SCHEMA[key][0](value) if isinstance(value, str) else value
        cfg = RunConfig(merged)
        cfg.validate()
        return cfg

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def validate(self) -> None:
        v = self.values
        if v["network.fusion"] not in FUSION_CHOICES:
            raise ConfigError(
                f"network.fusion must be one of {FUSION_CHOICES}, got "
                f"'{v['network.fusion']}'"
            )
        names, weights = v["attributes.names"], v["attributes.weights"]
        if len(names) != len(weights):
            raise ConfigError(
                f"attributes.names has {len(names)} entries, attributes.weights "
                f"has {len(weights)}"
            )
        for name, weight in zip(names, weights):
            if weight <= 0:
                raise ConfigError(f"attribute '{name}' has loss weight {weight}; "
                                  "all weights must be > 0")
        if v["network.lambda_fr"] <= 0:
            raise ConfigError(f"network.lambda_fr must be > 0, got {v['network.lambda_fr']}")
        use = v["attributes.use"]
        if not (1 <= use <= len(names)):
            raise ConfigError(f"attributes.use must be in [1, {len(names)}], got {use}")
        if use > v["data.attributes"]:
            raise ConfigError(
                f"attributes.use ({use}) exceeds data.attributes ({v['data.attributes']})"
            )
        if v["network.fusion"] in ("dual", "channel", "se", "baseline"):
            if v["network.embedding"] % v["network.reduction"]:
                raise ConfigError(
                    f"network.reduction ({v['network.reduction']}) must divide "
                    f"network.embedding ({v['network.embedding']})"
                )
        steps = v["train.lr_steps"]
        if steps and max(steps) >= v["train.epochs"]:
            raise ConfigError(
                f"train.lr_steps {steps} must all be < train.epochs ({v['train.epochs']})"
            )
        # these constructors re-check their own invariants
        self.synthetic_spec()
        self.train_config()
        self.network_config()

    # -- typed views ----------------------------------------------------
    def synthetic_spec(self) -> SyntheticSpec:
        v = self.values
        return SyntheticSpec(
            n_identities=v["data.identities"],
            samples_per_identity=v["data.samples_per_identity"],
            channels=v["data.channels"],
            height=v["data.height"],
            width=v["data.width"],
            n_attributes=v["data.attributes"],
            noise=v["data.noise"],
            pose_amplitude=v["data.pose"],
            eval_identities=v["data.eval_identities"],
            seed=v["data.seed"],
        )

    def attribute_specs(self) -> tuple[AttributeSpec, ...]:
        v = self.values
        pairs = list(zip(v["attributes.names"], v["attributes.weights"]))
        return tuple(AttributeSpec(n, w) for n, w in pairs[: v["attributes.use"]])

    def network_config(self) -> NetworkConfig:
        v = self.values
        return NetworkConfig(
            n_identities=v["data.identities"] - v["data.eval_identities"],
            in_channels=v["data.channels"],
            backbone=v["network.backbone"],
            branch_width=v["network.branch_width"],
            embedding_dim=v["network.embedding"],
            attributes=self.attribute_specs(),
            lambda_fr=v["network.lambda_fr"],
            fusion=v["network.fusion"],
            reduction=v["network.reduction"],
            seed=v["network.seed"],
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs=v["train.epochs"],
            lr0=v["train.lr0"],
            lr_steps=v["train.lr_steps"],
            lr_factor=v["train.lr_factor"],
            momentum=v["train.momentum"],
            batch_size=v["train.batch"],
            seed=v["train.seed"],
        )

    def with_master_seed(self, seed: int) -> "RunConfig":
        """Override every seed in the run from one master value."""
        return self.derived({"data.seed": seed, "network.seed": seed,
                             "train.seed": seed, "eval.seed": seed})
