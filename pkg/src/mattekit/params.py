"""Learnable-parameter store, Adam updates, and checkpoint serialization.

Parameters are grouped (backbone, aspp, decoder, refiner) so each group can
train at its own learning rate.  Checkpoints are plain .npz archives: one
array per parameter value / Adam moment / running-stat buffer plus a JSON
metadata blob; no pickling anywhere.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GROUPS = ("backbone", "aspp", "decoder", "refiner")
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when a NaN gradient is detected; names the offending parameter."""


class CheckpointError(RuntimeError):
    """Raised on malformed, incompatible, or mismatched checkpoint files."""


@dataclass
class Param:
    name: str
    group: str
    value: np.ndarray
    grad: np.ndarray = field(repr=False, default=None)
    m: np.ndarray = field(repr=False, default=None)
    v: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"unknown parameter group {self.group!r}")
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)


class ParameterStore:
    """Flat registry of named parameters, running-stat buffers, and step count."""

    def __init__(self):
        self.params: dict[str, Param] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.step = 0

    def create(self, name: str, group: str, value: np.ndarray) -> Param:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        p = Param(name, group, np.ascontiguousarray(value))
        self.params[name] = p
        return p

    def create_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.buffers:
            raise ValueError(f"duplicate buffer {name!r}")
        arr = np.ascontiguousarray(value)
        self.buffers[name] = arr
        return arr

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0.0

    def groups_present(self) -> list[str]:
        seen = {p.group for p in self.params.values()}
        return [g for g in GROUPS if g in seen]

    def adam_step(
        self,
        lr_per_group: dict[str, float],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        """One bias-corrected Adam update over groups named in lr_per_group.

        Groups absent from lr_per_group are frozen: value, moments, and grad
        all left untouched.  Any NaN gradient in an active group aborts the
        whole step before any parameter moves.
        """
        active = [p for p in self.params.values() if p.group in lr_per_group]
        for p in active:
            if np.isnan(p.grad).any():
                raise TrainingDiverged(f"NaN gradient in parameter {p.name!r}")
        self.step += 1
        t = self.step
        bc1 = 1.0 - beta1 ** t
        bc2 = 1.0 - beta2 ** t
        for p in active:
            lr = lr_per_group[p.group]
            p.m *= beta1
            p.m += (1.0 - beta1) * p.grad
            p.v *= beta2
            p.v += (1.0 - beta2) * np.square(p.grad)
            mhat = p.m / bc1
            vhat = p.v / bc2
            p.value -= lr * mhat / (np.sqrt(vhat) + eps)
            p.grad[...] = 0.0


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def save_checkpoint(
    path: str | Path,
    store: ParameterStore,
    config: dict,
    rng: np.random.Generator | None = None,
    extra: dict | None = None,
) -> None:
    """Write parameters, optimizer state, buffers, and JSON metadata to .npz."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": config,
        "config_hash": config_hash(config),
        "step": store.step,
        "groups": {name: p.group for name, p in store.params.items()},
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "extra": extra or {},
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
    for name, p in store.params.items():
        arrays[f"param/{name}/value"] = p.value
        arrays[f"param/{name}/m"] = p.m
        arrays[f"param/{name}/v"] = p.v
    for name, buf in store.buffers.items():
        arrays[f"buffer/{name}"] = buf
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint(path: str | Path) -> tuple[dict, dict]:
    """Load a checkpoint file; returns (meta, arrays-by-key)."""
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "meta" not in arrays:
        raise CheckpointError(f"checkpoint {path} has no metadata record")
    meta = json.loads(bytes(arrays.pop("meta").tobytes()).decode("utf-8"))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {meta.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    return meta, arrays


def load_checkpoint_into(
    path: str | Path, store: ParameterStore, config: dict
) -> dict:
    """Restore a store in place, refusing configs that don't hash-match.

    The store must already hold the exact parameter and buffer names the
    checkpoint was saved from (i.e. be built from the same architecture
    config).  Returns the checkpoint metadata.
    """
    meta, arrays = read_checkpoint(path)
    if meta["config_hash"] != config_hash(config):
        raise CheckpointError(
            "checkpoint was trained with a different config "
            f"(hash {meta['config_hash'][:12]}.. vs {config_hash(config)[:12]}..)"
        )
    saved_params = {k.split("/", 2)[1] for k in arrays if k.startswith("param/")}
    if saved_params != set(store.params):
        missing = sorted(set(store.params) - saved_params)
        surplus = sorted(saved_params - set(store.params))
        raise CheckpointError(
            f"parameter name mismatch: missing {missing[:4]}, surplus {surplus[:4]}"
        )
    for name, p in store.params.items():
        for slot, attr in (("value", "value"), ("m", "m"), ("v", "v")):
            arr = arrays[f"param/{name}/{slot}"]
            if arr.shape != p.value.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: {arr.shape} vs {p.value.shape}"
                )
            getattr(p, attr)[...] = arr
        p.grad[...] = 0.0
    saved_buffers = {k.split("/", 1)[1] for k in arrays if k.startswith("buffer/")}
    if saved_buffers != set(store.buffers):
        raise CheckpointError("running-stat buffer names do not match checkpoint")
    for name, buf in store.buffers.items():
        buf[...] = arrays[f"buffer/{name}"]
    store.step = int(meta["step"])
    return meta


def restore_rng(meta: dict) -> np.random.Generator | None:
    """Rebuild the generator whose state was captured at save time."""
    state = meta.get("rng_state")
    if state is None:
        return None
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng
