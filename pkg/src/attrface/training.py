"""Three-stage training with SGD and a step learning-rate schedule.

Stage "fr" trains the recognition branch alone (backbone frozen, identity
cross entropy).  Stage "sb" trains the attribute branch (backbone and the
shared first branch conv frozen, weighted attribute loss).  Stage "joint"
trains both branches, the fusion parameters and the fused identity head
together under the combined loss; the backbone stays frozen throughout.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .datagen import Dataset
from .errors import ConfigError, DivergenceError, StagingError
from .network import MultiBranchModel, sb_loss, total_loss, attribute_bce
from .tensor import Tensor
from .weights import save_weights

STAGES = ("fr", "sb", "joint")

# prefixes of parameters updated per stage; everything else is frozen
STAGE_TRAINABLE = {
    "fr": ("fr_conv1.", "fr_conv2.", "fr_head."),
    "sb": ("sb_conv2.", "sb_head."),
    "joint": ("fr_conv1.", "fr_conv2.", "sb_conv2.", "sb_head.", "fusion.", "fused_head."),
}

STAGE_PREREQUISITES = {"fr": (), "sb": ("fr",), "joint": ("fr", "sb")}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    lr0: float = 0.01
    lr_steps: tuple[int, ...] = (4, 10, 17)
    lr_factor: float = 0.1
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if not (0 < self.lr_factor < 1):
            raise ConfigError(f"lr_factor must be in (0, 1), got {self.lr_factor}")
        if any(b <= a for a, b in zip(self.lr_steps, self.lr_steps[1:])):
            raise ConfigError(f"lr_steps must be strictly increasing, got {self.lr_steps}")
        if self.lr_steps and self.lr_steps[-1] >= self.epochs:
            raise ConfigError(
                f"lr_steps {self.lr_steps} must all be < epochs ({self.epochs})"
            )
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for an epoch: lr0 decayed once per schedule step reached."""
    decays = sum(1 for step in cfg.lr_steps if step <= epoch)
    return cfg.lr0 * cfg.lr_factor ** decays


def sgd_step(param: np.ndarray, grad: np.ndarray, lr: float, momentum: float,
             velocity: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One momentum-SGD update; returns (new param, new velocity)."""
    velocity = momentum * velocity + grad
    return param - lr * velocity, velocity


class SGD:
    """Momentum SGD over a named parameter subset; frozen params never touched."""

    def __init__(self, params: dict[str, Tensor], momentum: float):
        self.params = params
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            p.data, self.velocity[name] = sgd_step(
                p.data, p.grad, lr, self.momentum, self.velocity[name]
            )


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    lr: float
    loss_total: float
    loss_fr: float                    # nan for the attribute-only stage
    loss_attrs: tuple[float, ...]     # per-attribute mean BCE; nan outside sb/joint
    wall_seconds: float


@dataclass
class TrainLog:
    attribute_names: tuple[str, ...]
    momentum: float
    lr_factor: float
    records: list[EpochRecord] = field(default_factory=list)

    def lines(self, deterministic: bool = True) -> list[str]:
        """Line-per-epoch serialization.

        Field order: stage epoch lr loss_total loss_fr <one loss per
        attribute> wall_seconds.  In deterministic mode wall_seconds is
        written as "-" so identical runs produce identical files.
        """
        out = [
            "# fields: stage epoch lr loss_total loss_fr "
            + " ".join(f"loss_{n}" for n in self.attribute_names) + " wall_seconds",
            f"# momentum {self.momentum!r} lr_factor {self.lr_factor!r}",
        ]
        for r in self.records:
            attrs = " ".join(repr(a) for a in r.loss_attrs)
            wall = "-" if deterministic else repr(r.wall_seconds)
            out.append(f"{r.stage} {r.epoch} {r.lr!r} {r.loss_total!r} "
                       f"{r.loss_fr!r} {attrs} {wall}")
        return out

    def write(self, path, deterministic: bool = True) -> None:
        Path(path).write_text("\n".join(self.lines(deterministic)) + "\n")

    def extend(self, other: "TrainLog") -> None:
        self.records.extend(other.records)


def _stage_rng(cfg: TrainConfig, stage: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((cfg.seed, STAGES.index(stage))))


def run_stage(stage: str, model: MultiBranchModel, dataset: Dataset, cfg: TrainConfig,
              out_dir: Optional[Path] = None) -> TrainLog:
    """Train one stage to completion and return its log.

    Raises StagingError when prerequisite stages have not run on (or been
    loaded into) the model, and DivergenceError on a non-finite loss.
    """
    if stage not in STAGES:
        raise ConfigError(f"unknown stage '{stage}', expected one of {STAGES}")
    for prereq in STAGE_PREREQUISITES[stage]:
        if prereq not in model.completed_stages:
            raise StagingError(f"stage '{stage}' requires completed stage '{prereq}'")
    ncfg = model.cfg
    class_map = dataset.identity_class_map()
    if ncfg.n_identities != len(class_map):
        raise ConfigError(
            f"model has {ncfg.n_identities} identity classes but the training split "
            f"holds {len(class_map)} identities"
        )

    trainable = {k: p for k, p in model.params.items()
                 if k.startswith(STAGE_TRAINABLE[stage])}
    optimizer = SGD(trainable, cfg.momentum)
    rng = _stage_rng(cfg, stage)
    n_attr = len(ncfg.attributes)
    weights_row = ncfg.attribute_weights
    nan_attrs = tuple([float("nan")] * n_attr)

    train_idx = np.array(dataset.train_indices)
    n_batches = len(train_idx) // cfg.batch_size
    if n_batches == 0:
        raise ConfigError(
            f"batch_size {cfg.batch_size} exceeds the {len(train_idx)}-sample training split"
        )

    log = TrainLog(ncfg.attribute_names, cfg.momentum, cfg.lr_factor)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        perm = rng.permutation(train_idx)
        total_sum = fr_sum = 0.0
        attr_sum = np.zeros(n_attr)
        for b in range(n_batches):
            chunk = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = np.stack([dataset.samples[i].image for i in chunk])
            ids = np.array([class_map[dataset.samples[i].identity] for i in chunk])
            attrs = np.stack([dataset.samples[i].attributes[:n_attr] for i in chunk])
            attrs = attrs.astype(T.DTYPES[ncfg.dtype])

            if stage == "fr":
                out = model.forward(batch, branches=("fr",))
                loss = T.softmax_cross_entropy(out.fr_logits, ids)
                fr_sum += loss.item()
            elif stage == "sb":
                out = model.forward(batch, branches=("sb",))
                loss = sb_loss(out.sb_probs, attrs, weights_row)
            else:
                out = model.forward(batch, branches=("sb", "fused"))
                loss = total_loss(out.fused_logits, ids, out.sb_probs, attrs, ncfg)
                with T.no_grad():
                    fr_sum += T.softmax_cross_entropy(out.fused_logits, ids).item()
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise DivergenceError(
                    f"non-finite loss at stage {stage}, epoch {epoch}, batch {b}"
                )
            if stage in ("sb", "joint"):
                with T.no_grad():
                    attr_sum += attribute_bce(out.sb_probs, attrs).data.mean(axis=0)
            total_sum += loss_value

            T.zero_grads(trainable.values())
            loss.backward()
            optimizer.step(lr)

        record = EpochRecord(
            stage=stage,
            epoch=epoch,
            lr=lr,
            loss_total=total_sum / n_batches,
            loss_fr=(fr_sum / n_batches) if stage != "sb" else float("nan"),
            loss_attrs=tuple(attr_sum / n_batches) if stage != "fr" else nan_attrs,
            wall_seconds=time.perf_counter() - t0,
        )
        log.records.append(record)

    model.completed_stages.add(stage)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_weights(out_dir / f"stage_{stage}.weights", model.params)
    return log


def run_all(model: MultiBranchModel, dataset: Dataset, cfg: TrainConfig,
            out_dir: Optional[Path] = None) -> TrainLog:
    """fr -> sb -> joint, checkpointing each stage when out_dir is given."""
    combined = TrainLog(model.cfg.attribute_names, cfg.momentum, cfg.lr_factor)
    for stage in STAGES:
        combined.extend(run_stage(stage, model, dataset, cfg, out_dir))
    return combined
