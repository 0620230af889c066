"""Adam, the training loop, configuration files and checkpoints."""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import CohortArrays, SplitAssignment
from .errors import (
    BadVersion,
    ConfigError,
    ConfigMismatch,
    CorruptCheckpoint,
    DivergedLoss,
    EmptySplit,
    MissingGradient,
    NoComparablePairs,
    NonFiniteError,
    TooFewDistinctTimes,
)
from .metrics import CohortOutcome, ctd_index, harrell_c
from .model import SurvivalModel
from .survival import TimeGrid, build_grid, discretize_all, nll_loss
from .tensor import Tape, Tensor

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

MODALITIES = ("ct", "pet", "clinical")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-3
    batch_size: int = 4
    epochs: int = 50
    intervals: int = 10
    modalities: tuple = ("ct", "pet")
    widths: tuple = (8, 16, 32)
    depths: tuple = (1, 1, 1)
    embedding: int = 32
    use_cbam: bool = True
    cbam_reduction: int = 4
    cbam_kernel: int = 3
    clinical_hidden: Optional[tuple] = None
    min_input: int = 16
    input_size: Optional[tuple] = None
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("modalities", "widths", "depths", "clinical_hidden", "input_size"):
            v = getattr(self, name)
            if isinstance(v, list):
                object.__setattr__(self, name, tuple(v))
        if isinstance(self.input_size, int):
            object.__setattr__(self, "input_size", (self.input_size,) * 3)
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        for name in ("batch_size", "epochs", "intervals", "embedding", "cbam_reduction",
                     "cbam_kernel", "min_input"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.modalities or any(m not in MODALITIES for m in self.modalities):
            raise ConfigError(f"modalities must be a non-empty subset of {MODALITIES}")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigError("modalities must not repeat")
        if not self.widths or len(self.widths) != len(self.depths):
            raise ConfigError("widths and depths must be non-empty and equally long")
        if any(w < 1 for w in self.widths) or any(d < 1 for d in self.depths):
            raise ConfigError("widths and depths must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def load_config(path) -> tuple[TrainConfig, list[str]]:
    """Read a flat TOML config; returns the config and the keys left at default."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: config must be flat, found tables {nested}")
    cfg = TrainConfig.from_dict(raw)
    defaulted = [f.name for f in fields(TrainConfig) if f.name not in raw]
    return cfg, defaulted


# --------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Optional[Sequence] = None):
    """One bias-corrected Adam update. Parameter arrays are replaced, not
    written in place. ``grads`` defaults to each parameter's ``.grad``."""
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params) or any(g is None for g in grads):
        raise MissingGradient("every parameter needs a gradient before an Adam step")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        m = b1 * state.m[i] + (1 - b1) * g
        v = b2 * state.v[i] + (1 - b2) * (g * g)
        state.m[i], state.v[i] = m, v
        update = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)
    return params, state


# ----------------------------------------------------------------- training

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_ctd: float


@dataclass
class TrainResult:
    model: SurvivalModel
    history: list
    best_epoch: int
    step_losses: list


def _batches(order: np.ndarray, size: int) -> list:
    chunks = [order[i:i + size] for i in range(0, len(order), size)]
    # batch norm cannot train on a single subject
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def safe_ctd(curves, arrays: CohortArrays, grid: TimeGrid) -> float:
    try:
        return ctd_index(curves, CohortOutcome(arrays.time, arrays.event), grid)
    except NoComparablePairs:
        return float("nan")


def fit_grid(train: CohortArrays, p: int) -> TimeGrid:
    """Quantile grid over the train split's event times.

    Tied times can collapse quantile edges; the fallbacks, in order, are all
    follow-up times, then the distinct event times, then all distinct times.
    """
    ev = train.time[train.event]
    candidates = (ev, train.time, np.unique(ev), np.unique(train.time))
    err = None
    for times in candidates:
        if times.size == 0:
            continue
        try:
            return build_grid(times, p)
        except TooFewDistinctTimes as exc:
            err = exc
    raise err


def build_model(cfg: TrainConfig, train: CohortArrays, rng: np.random.Generator) -> SurvivalModel:
    grid = fit_grid(train, cfg.intervals)
    n_clin, mean, std = 0, None, None
    if "clinical" in cfg.modalities:
        n_clin = train.clinical.shape[1]
        mean = train.clinical.mean(axis=0)
        std = train.clinical.std(axis=0)
        std = np.where(std > 0, std, 1.0)
    return SurvivalModel(cfg, grid, rng, n_clin, mean, std)


def train(cfg: TrainConfig, cohort: CohortArrays, split: SplitAssignment,
          max_steps: Optional[int] = None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """Fit the model on the train split; keep the epoch with the best
    validation Ctd (the final epoch when no validation Ctd is available).

    The time grid and clinical statistics come from the train split only.
    """
    tr = cohort.subset(cohort.indices(split.ids("train")))
    va = cohort.subset(cohort.indices(split.ids("val")))
    if len(tr) == 0:
        raise EmptySplit("train split is empty")
    if len(tr) < 2:
        raise EmptySplit("train split needs at least two subjects for batch norm")
    init_seq, shuffle_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    model = build_model(cfg, tr, np.random.default_rng(init_seq))
    shuffle_rng = np.random.default_rng(shuffle_seq)
    labels = discretize_all(model.grid, tr.time, tr.event)
    params = model.parameters()
    state = AdamState(cfg.learning_rate)

    history, step_losses = [], []
    best_state, best_ctd, best_epoch = None, -np.inf, 0
    steps = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        total, seen = 0.0, 0
        for idx in _batches(shuffle_rng.permutation(len(tr)), cfg.batch_size):
            vols = {m: v[idx] for m, v in tr.volumes.items()}
            clin = None if tr.clinical is None else tr.clinical[idx]
            try:
                with Tape() as tape:
                    out = model(vols, clin)
                    loss = nll_loss(out, [labels[i] for i in idx])
                tape.backward(loss)
            except NonFiniteError as exc:
                raise DivergedLoss(f"non-finite value at epoch {epoch}, step {steps + 1}: {exc}") from exc
            value = loss.item()
            if not np.isfinite(value):
                raise DivergedLoss(f"loss is {value} at epoch {epoch}, step {steps + 1}")
            adam_step(state, params)
            steps += 1
            step_losses.append(value)
            total += value * len(idx)
            seen += len(idx)
            if max_steps is not None and steps >= max_steps:
                break
        val_ctd = safe_ctd(model.predict(va), va, model.grid) if len(va) else float("nan")
        rec = EpochRecord(epoch, total / seen, val_ctd)
        history.append(rec)
        log.debug("epoch %d loss %.6f val_ctd %.4f", epoch, rec.train_loss, val_ctd)
        if on_epoch is not None:
            on_epoch(rec)
        if np.isfinite(val_ctd) and val_ctd > best_ctd:
            best_ctd, best_epoch, best_state = val_ctd, epoch, model.state_dict()
        if max_steps is not None and steps >= max_steps:
            break
    if best_state is None:
        best_epoch = history[-1].epoch
    else:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, history, best_epoch, step_losses)


def evaluate(model: SurvivalModel, arrays: CohortArrays) -> dict:
    """Ctd of the predicted curves and Harrell's C of -mean(S) as a risk."""
    S = model.predict(arrays)
    out = CohortOutcome(arrays.time, arrays.event)
    return {
        "ctd": ctd_index(S, out, model.grid),
        "harrell_c": harrell_c(-S.mean(axis=1), out),
        "n": len(arrays),
    }


# -------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"HNSC"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct(">4sHI")


def save_checkpoint(model: SurvivalModel, path) -> None:
    """Versioned container: magic, u16 version, u32 header length, JSON
    header, big-endian parameter blobs, trailing CRC32 of all prior bytes."""
    state = model.state_dict()
    blobs, entries, offset = [], [], 0
    for name, arr in state.items():
        be = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder(">"))
        raw = be.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": be.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": model.cfg.to_dict(),
        "grid": list(model.grid.edges),
        "n_clinical": model.n_clinical,
        "clinical_mean": model.clinical_mean.tolist(),
        "clinical_std": model.clinical_std.tolist(),
        "tensors": entries,
    }
    hbytes = json.dumps(header).encode("utf-8")
    body = _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)
    Path(path).write_bytes(body + struct.pack(">I", zlib.crc32(body)))


_ARCH_KEYS = ("intervals", "modalities", "widths", "depths", "embedding", "use_cbam",
              "cbam_reduction", "cbam_kernel", "clinical_hidden")


def load_checkpoint(path, expect: Optional[TrainConfig] = None) -> SurvivalModel:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEAD.size + 4:
        raise CorruptCheckpoint(f"{path}: file too short")
    magic, version, hlen = _CKPT_HEAD.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise CorruptCheckpoint(f"{path}: not a checkpoint file")
    if version != CKPT_VERSION:
        raise BadVersion(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    body, (crc,) = raw[:-4], struct.unpack(">I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpoint(f"{path}: checksum mismatch")
    try:
        header = json.loads(body[_CKPT_HEAD.size:_CKPT_HEAD.size + hlen])
        base = _CKPT_HEAD.size + hlen
        state = {}
        for e in header["tensors"]:
            chunk = body[base + e["offset"]:base + e["offset"] + e["nbytes"]]
            arr = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
            state[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
        cfg = TrainConfig.from_dict(header["config"])
        grid = TimeGrid(tuple(header["grid"]))
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"{path}: malformed payload ({exc})") from None
    if expect is not None:
        diffs = [k for k in _ARCH_KEYS if getattr(expect, k) != getattr(cfg, k)]
        if diffs:
            detail = ", ".join(f"{k}: checkpoint={getattr(cfg, k)!r} config={getattr(expect, k)!r}"
                               for k in diffs)
            raise ConfigMismatch(f"{path}: checkpoint does not match config ({detail})")
    model = SurvivalModel(cfg, grid, np.random.default_rng(0), header["n_clinical"],
                          header["clinical_mean"], header["clinical_std"])
    model.load_state_dict(state)
    model.eval()
    return model

