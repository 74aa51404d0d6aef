"""Staged training driver: coarse-only warmup, then joint refinement.

Each stage owns its learning-rate groups, batch size, and dataset.  The
refinement budget is given as a fraction of full-resolution pixels so the
same schedule behaves consistently across crop sizes.  All randomness flows
through one generator held by the train state, which makes checkpointed
resumes reproduce the uninterrupted run bit-for-bit at a fixed thread count.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mattekit.augment import AugmentConfig, zip_epoch
from mattekit.basenet import BaseNetConfig
from mattekit.configio import ConfigError, nest, read_config_file
from mattekit.data import (
    DatasetError,
    DirectoryDataset,
    SyntheticDataset,
    make_batch,
)
from mattekit.losses import compute_loss_gradients
from mattekit.model import MattingModel, ModelConfig
from mattekit.params import (
    TrainingDiverged,
    load_checkpoint_into,
    read_checkpoint,
    restore_rng,
    save_checkpoint,
)
from mattekit.refiner import RefineConfig
from mattekit.synth import SynthSpec

# share of full-resolution pixels routed through refinement when a stage
# gives no absolute patch budget
DEFAULT_REFINED_FRACTION = 0.0386

BASE_LR = {"backbone": 1e-4, "aspp": 5e-4, "decoder": 5e-4}
JOINT_LR = {"backbone": 5e-5, "aspp": 5e-5, "decoder": 1e-4, "refiner": 3e-4}
BASE_BATCH = 8
JOINT_BATCH = 4

LOSS_FIELDS = ("l_alpha", "l_fgr", "l_err", "l_alpha_c", "l_fgr_c",
               "l_base", "l_refine", "total")
LOG_COLUMNS = ("step", "stage", "epoch") + LOSS_FIELDS


def effective_k(fraction: float, full_h: int, full_w: int) -> int:
    """Patch budget whose 4x4 cells cover the given fraction of pixels."""
    return max(int(round(fraction * full_h * full_w / 16.0)), 0)


@dataclass(frozen=True)
class StageConfig:
    networks: str                     # "base_only" or "joint"
    dataset: str
    epochs: int
    name: str = ""
    batch_size: int | None = None
    lr: dict | None = None            # group name -> learning rate
    c: int = 4
    k: int | None = None              # absolute patch budget; None = fraction
    k_fraction: float = DEFAULT_REFINED_FRACTION
    plateau_stop: bool = False

    def __post_init__(self):
        if self.networks not in ("base_only", "joint"):
            raise ValueError(f"unknown stage networks {self.networks!r}")
        if self.c not in (4, 8):
            raise ValueError(f"coarse scale c must be 4 or 8, got {self.c}")
        if self.k is not None and self.k < 0:
            raise ValueError("patch budget k must be >= 0")
        if not 0.0 <= self.k_fraction <= 1.0:
            raise ValueError("k_fraction must be in [0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        defaults = BASE_LR if self.networks == "base_only" else JOINT_LR
        lr = dict(defaults if self.lr is None else self.lr)
        if self.networks == "base_only":
            lr.pop("refiner", None)  # coarse-only stages never touch the refiner
        unknown = set(lr) - set(JOINT_LR)
        if unknown:
            raise ValueError(f"unknown lr groups {sorted(unknown)}")
        if any(v < 0 for v in lr.values()):
            raise ValueError("learning rates must be >= 0")
        object.__setattr__(self, "lr", lr)
        batch = self.batch_size
        if batch is None:
            batch = BASE_BATCH if self.networks == "base_only" else JOINT_BATCH
        if batch < 1:
            raise ValueError("batch_size must be >= 1")
        object.__setattr__(self, "batch_size", int(batch))
        if not self.name:
            object.__setattr__(self, "name", self.networks)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "networks": self.networks,
            "dataset": self.dataset, "epochs": self.epochs,
            "batch_size": self.batch_size, "lr": dict(self.lr),
            "c": self.c, "k": self.k, "k_fraction": self.k_fraction,
            "plateau_stop": self.plateau_stop,
        }


@dataclass
class TrainState:
    model: MattingModel
    rng: np.random.Generator
    stage_index: int = 0
    loss_history: list = field(default_factory=list)
    events: list = field(default_factory=list)

    @property
    def global_step(self) -> int:
        return self.model.store.step


def _snapshot(state: TrainState) -> dict:
    store = state.model.store
    return {
        "params": {
            name: (p.value.copy(), p.m.copy(), p.v.copy())
            for name, p in store.params.items()
        },
        "buffers": {name: b.copy() for name, b in store.buffers.items()},
        "step": store.step,
        "rng_state": state.rng.bit_generator.state,
        "history_len": len(state.loss_history),
    }


def _restore(state: TrainState, snap: dict) -> None:
    store = state.model.store
    for name, (value, m, v) in snap["params"].items():
        p = store.params[name]
        p.value[...] = value
        p.m[...] = m
        p.v[...] = v
        p.grad[...] = 0.0
    for name, buf in snap["buffers"].items():
        store.buffers[name][...] = buf
    store.step = snap["step"]
    state.rng.bit_generator.state = snap["rng_state"]
    del state.loss_history[snap["history_len"]:]


class _LossLog:
    """Appending CSV logger; writes the header only on a fresh file."""

    def __init__(self, run_dir: Path):
        run_dir.mkdir(parents=True, exist_ok=True)
        self.path = run_dir / "losses.csv"

    def write(self, row: dict) -> None:
        fresh = not self.path.exists()
        with open(self.path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            if fresh:
                writer.writeheader()
            writer.writerow({k: row[k] for k in LOG_COLUMNS})


def _train_step(model: MattingModel, stage: StageConfig, batch):
    dtype = model.dtype
    img = batch.img.astype(dtype, copy=False)
    bgr = batch.bgr.astype(dtype, copy=False)
    gt_alpha = batch.gt_alpha.astype(dtype, copy=False)
    gt_fgr = batch.gt_fgr.astype(dtype, copy=False)
    c = model.config.refine.c
    if stage.networks == "base_only":
        base_out = model.forward_coarse(img, bgr, training=True)
        values, grads = compute_loss_gradients(
            base_out, None, None, img, gt_alpha, gt_fgr, "base_only", c
        )
        if not math.isfinite(values.total):
            return values, False
        model.backward_coarse(grads.d_alpha_c, grads.d_fgr_c, grads.d_err_c)
    else:
        k = stage.k
        if k is None:
            k = effective_k(stage.k_fraction, img.shape[-2], img.shape[-1])
        out = model.forward(img, bgr, training=True, k=k)
        values, grads = compute_loss_gradients(
            out.base, out.alpha, out.fgr, img, gt_alpha, gt_fgr, "joint", c
        )
        if not math.isfinite(values.total):
            return values, False
        model.backward(
            grads.d_alpha, grads.d_fgr,
            d_alpha_c=grads.d_alpha_c, d_fgr_c=grads.d_fgr_c,
            d_err_c=grads.d_err_c,
        )
    model.store.adam_step(stage.lr)
    return values, True


def train_stage(
    state: TrainState,
    stage: StageConfig,
    dataset,
    aug_cfg: AugmentConfig | None = None,
    run_dir: str | Path | None = None,
) -> TrainState:
    """Run one stage; on a non-finite loss the stage aborts and the state
    rolls back to the last completed epoch."""
    model = state.model
    if stage.c != model.config.refine.c:
        raise ValueError(
            f"stage c={stage.c} does not match model c={model.config.refine.c}"
        )
    aug_cfg = aug_cfg or AugmentConfig()
    log = _LossLog(Path(run_dir)) if run_dir is not None else None
    stage_idx = state.stage_index
    if stage.epochs == 0:
        state.stage_index += 1
        return state

    snap = _snapshot(state)
    best = math.inf
    flat_epochs = 0
    for epoch in range(stage.epochs):
        pairs = zip_epoch(dataset.n_samples, dataset.n_backgrounds)
        order = state.rng.permutation(len(pairs))
        pairs = [pairs[i] for i in order]
        epoch_total = 0.0
        batches = 0
        diverged = False
        for lo in range(0, len(pairs), stage.batch_size):
            chunk = pairs[lo:lo + stage.batch_size]
            batch = make_batch(dataset, chunk, aug_cfg, state.rng,
                               multiple=model.granule)
            try:
                values, ok = _train_step(model, stage, batch)
            except TrainingDiverged as exc:
                state.events.append({
                    "stage": stage_idx, "epoch": epoch,
                    "event": "diverged", "detail": str(exc),
                })
                diverged = True
                break
            if not ok:
                state.events.append({
                    "stage": stage_idx, "epoch": epoch,
                    "event": "diverged", "detail": "non-finite loss",
                })
                diverged = True
                break
            row = {"step": model.store.step, "stage": stage_idx, "epoch": epoch}
            for name in LOSS_FIELDS:
                row[name] = getattr(values, name)
            state.loss_history.append(row)
            if log is not None:
                log.write(row)
            epoch_total += values.total
            batches += 1
        if diverged:
            _restore(state, snap)
            break
        snap = _snapshot(state)
        if stage.plateau_stop and batches:
            epoch_mean = epoch_total / batches
            if epoch_mean < best * 0.99:
                flat_epochs = 0
            else:
                flat_epochs += 1
            best = min(best, epoch_mean)
            if flat_epochs >= 3:
                state.events.append({
                    "stage": stage_idx, "epoch": epoch,
                    "event": "plateau_stop",
                })
                break
    state.stage_index += 1
    return state


def _stage_checkpoint(run_dir: Path, index: int) -> Path:
    return run_dir / f"stage_{index:02d}.npz"


def run_schedule(
    stages: list[StageConfig],
    datasets: dict,
    seed: int,
    model_config: ModelConfig | None = None,
    aug_cfg: AugmentConfig | None = None,
    run_dir: str | Path | None = None,
    dtype=np.float32,
    resume: bool = False,
) -> TrainState:
    """Execute stages in order, checkpointing after each one.

    With resume=True and an existing run directory, training restarts from
    the first stage that has no checkpoint, restoring parameters, optimizer
    moments, and the rng stream.
    """
    if not stages:
        raise ValueError("schedule needs at least one stage")
    missing = sorted({s.dataset for s in stages} - set(datasets))
    if missing:
        raise DatasetError(f"stages reference unknown datasets {missing}")
    cs = {s.c for s in stages}
    if len(cs) > 1:
        raise ValueError(f"all stages must share one coarse scale, got {sorted(cs)}")
    if model_config is None:
        model_config = ModelConfig(refine=RefineConfig(c=cs.pop()))
    aug_cfg = aug_cfg or AugmentConfig()

    model = MattingModel(model_config, dtype=dtype)
    state = TrainState(model=model, rng=np.random.default_rng(seed))

    start = 0
    run_path = Path(run_dir) if run_dir is not None else None
    if resume and run_path is not None:
        for i in reversed(range(len(stages))):
            ckpt = _stage_checkpoint(run_path, i)
            if ckpt.exists():
                meta = load_checkpoint_into(ckpt, model.store, model_config.to_dict())
                rng = restore_rng(meta)
                if rng is not None:
                    state.rng = rng
                state.stage_index = meta["extra"]["stage_index"]
                start = i + 1
                break
    if run_path is not None and not resume:
        run_path.mkdir(parents=True, exist_ok=True)
        snapshot = {
            "seed": seed,
            "model": model_config.to_dict(),
            "augment": aug_cfg.to_dict(),
            "stages": [s.to_dict() for s in stages],
        }
        with open(run_path / "run.json", "w") as fh:
            json.dump(snapshot, fh, indent=2)

    for i in range(start, len(stages)):
        stage = stages[i]
        train_stage(state, stage, datasets[stage.dataset], aug_cfg, run_dir=run_path)
        if run_path is not None:
            save_checkpoint(
                _stage_checkpoint(run_path, i), model.store,
                model_config.to_dict(), rng=state.rng,
                extra={"stage_index": state.stage_index, "stage_name": stage.name},
            )
    if run_path is not None:
        save_checkpoint(
            run_path / "final.npz", model.store, model_config.to_dict(),
            rng=state.rng, extra={"stage_index": state.stage_index},
        )
    return state


def resume_state(run_dir: str | Path, stages: list[StageConfig],
                 model_config: ModelConfig, dtype=np.float32) -> tuple[TrainState, int]:
    """Load the latest stage checkpoint into a fresh state for inspection."""
    run_path = Path(run_dir)
    for i in reversed(range(len(stages))):
        ckpt = _stage_checkpoint(run_path, i)
        if ckpt.exists():
            model = MattingModel(model_config, dtype=dtype)
            meta = load_checkpoint_into(ckpt, model.store, model_config.to_dict())
            rng = restore_rng(meta) or np.random.default_rng(0)
            state = TrainState(model=model, rng=rng,
                               stage_index=meta["extra"]["stage_index"])
            return state, i + 1
    raise FileNotFoundError(f"no stage checkpoints under {run_dir}")


# ---------------------------------------------------------------------------
# Config-file assembly
# ---------------------------------------------------------------------------

@dataclass
class TrainSetup:
    model_config: ModelConfig
    augment: AugmentConfig
    datasets: dict
    stages: list[StageConfig]
    seed: int
    dtype: type


def _tupled(value):
    return tuple(value) if isinstance(value, list) else value


def _build_model_config(section: dict) -> ModelConfig:
    base_kw = {}
    if "stage_channels" in section:
        base_kw["stage_channels"] = tuple(section["stage_channels"])
    if "aspp_channels" in section:
        base_kw["aspp_channels"] = section["aspp_channels"]
    refine_kw = {}
    for key in ("c", "k", "selection_mode", "tau", "kernel"):
        if key in section:
            refine_kw[key] = section[key]
    return ModelConfig(
        base=BaseNetConfig(**base_kw),
        refine=RefineConfig(**refine_kw),
        seed=section.get("seed", 0),
    )


def _build_augment(section: dict) -> AugmentConfig:
    kw = {key: _tupled(value) for key, value in section.items()}
    try:
        return AugmentConfig(**kw)
    except TypeError as exc:
        raise ConfigError(f"bad augment option: {exc}") from exc


def _build_dataset(name: str, section: dict):
    kind = section.get("kind", "synthetic")
    if kind == "directory":
        if "path" not in section:
            raise ConfigError(f"dataset {name!r}: directory kind needs a path")
        return DirectoryDataset(section["path"])
    if kind != "synthetic":
        raise ConfigError(f"dataset {name!r}: unknown kind {kind!r}")
    spec_kw = {}
    for key in ("resolution", "subject_weights", "background_weights",
                "stroke_count", "stroke_width", "stroke_opacity"):
        if key in section:
            spec_kw[key] = tuple(section[key])
    return SyntheticDataset(
        SynthSpec(**spec_kw),
        n_samples=section.get("count", 16),
        n_backgrounds=section.get("backgrounds"),
        base_seed=section.get("seed", 0),
    )


def _build_stage(name: str, section: dict) -> StageConfig:
    if "networks" not in section or "dataset" not in section:
        raise ConfigError(f"stage {name!r} needs 'networks' and 'dataset'")
    lr = section.get("lr")
    if isinstance(lr, list):
        groups = ("backbone", "aspp", "decoder", "refiner")
        if len(lr) not in (3, 4):
            raise ConfigError(f"stage {name!r}: lr list needs 3 or 4 entries")
        lr = dict(zip(groups, lr))
    kw = dict(
        networks=section["networks"],
        dataset=str(section["dataset"]),
        epochs=section.get("epochs", 1),
        name=str(section.get("name", name)),
        lr=lr,
    )
    for key in ("batch_size", "c", "k", "k_fraction", "plateau_stop"):
        if key in section:
            kw[key] = section[key]
    return StageConfig(**kw)


def build_setup(nested: dict) -> TrainSetup:
    """Assemble a runnable training setup from a nested config mapping."""
    stages_cfg = nested.get("stage", {})
    if not stages_cfg:
        raise ConfigError("config defines no stages")
    stages = [
        _build_stage(key, stages_cfg[key])
        for key in sorted(stages_cfg, key=str)
    ]
    datasets_cfg = nested.get("dataset", {})
    datasets = {
        name: _build_dataset(name, sec) for name, sec in datasets_cfg.items()
    }
    train_sec = nested.get("train", {})
    dtype = {"float32": np.float32, "float64": np.float64}.get(
        train_sec.get("dtype", "float32")
    )
    if dtype is None:
        raise ConfigError(f"unknown dtype {train_sec.get('dtype')!r}")
    return TrainSetup(
        model_config=_build_model_config(nested.get("model", {})),
        augment=_build_augment(nested.get("augment", {})),
        datasets=datasets,
        stages=stages,
        seed=train_sec.get("seed", 0),
        dtype=dtype,
    )


def load_train_setup(path: str | Path) -> TrainSetup:
    return build_setup(nest(read_config_file(path)))
