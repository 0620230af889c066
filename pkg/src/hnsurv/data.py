"""Cohort I/O: SVOL volumes, manifest CSVs, splits and a synthetic generator.

SVOL layout (all big-endian)::

    0..3    b"SVOL"
    4..5    u16 version (1)
    6..17   u32 D, H, W
    18..    D*H*W float32, row-major with W fastest
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    BadDims,
    BadMagic,
    CohortTooSmall,
    DimOverflow,
    MissingVolume,
    NonPositiveTime,
    SchemaError,
    TruncatedPayload,
)
from .tensor import Tensor

SVOL_MAGIC = b"SVOL"
SVOL_VERSION = 1
SVOL_MAX_DIM = 512
_HEADER = struct.Struct(">4sH3I")

MANIFEST_COLUMNS = ("subject_id", "ct_path", "pet_path", "time", "event")
IMAGING = ("ct", "pet")


def write_volume(path, volume) -> None:
    v = np.asarray(getattr(volume, "data", volume))
    if v.ndim == 4 and v.shape[0] == 1:
        v = v[0]
    if v.ndim != 3:
        raise BadDims(f"volume must be [D,H,W] or [1,D,H,W], got {v.shape}")
    if any(d < 1 or d > SVOL_MAX_DIM for d in v.shape):
        raise DimOverflow(f"volume dims {v.shape} outside 1..{SVOL_MAX_DIM}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SVOL_MAGIC, SVOL_VERSION, *v.shape))
        fh.write(np.ascontiguousarray(v, dtype=">f4").tobytes())


def read_volume(path) -> Tensor:
    """Parse an SVOL file into a float32 tensor of shape [1, D, H, W]."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != SVOL_MAGIC:
        raise BadMagic(f"{path}: not an SVOL file")
    if len(raw) < _HEADER.size:
        raise TruncatedPayload(f"{path}: header truncated")
    _, version, d, h, w = _HEADER.unpack_from(raw)
    if version != SVOL_VERSION:
        raise BadMagic(f"{path}: unsupported SVOL version {version}")
    if any(x < 1 or x > SVOL_MAX_DIM for x in (d, h, w)):
        raise DimOverflow(f"{path}: dims {(d, h, w)} outside 1..{SVOL_MAX_DIM}")
    expected = _HEADER.size + 4 * d * h * w
    if len(raw) != expected:
        raise TruncatedPayload(f"{path}: expected {expected} bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=">f4", offset=_HEADER.size).astype(np.float32)
    return Tensor._wrap(arr.reshape(1, d, h, w))


@dataclass
class CohortRecord:
    subject_id: str
    ct_path: Path
    pet_path: Path
    time: float
    event: bool
    clinical: Optional[tuple] = None

    def volume_path(self, modality: str) -> Path:
        return {"ct": self.ct_path, "pet": self.pet_path}[modality]


def load_cohort(manifest_csv, volume_dir=None, require_clinical: bool = False) -> list[CohortRecord]:
    """Read and validate a manifest. Volume paths resolve against
    ``volume_dir`` (default: the manifest's directory)."""
    manifest_csv = Path(manifest_csv)
    base = Path(volume_dir) if volume_dir is not None else manifest_csv.parent
    with open(manifest_csv, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{manifest_csv}: empty manifest")
    header = [c.strip() for c in rows[0]]
    if tuple(header[:5]) != MANIFEST_COLUMNS:
        raise SchemaError(f"{manifest_csv}: header must start with {','.join(MANIFEST_COLUMNS)}")
    clin_cols = header[5:]
    if clin_cols != [f"clin_{k}" for k in range(1, len(clin_cols) + 1)]:
        raise SchemaError(f"{manifest_csv}: optional columns must be clin_1..clin_f, got {clin_cols}")

    records, seen = [], set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        where = f"{manifest_csv}:{lineno}"
        if len(row) != len(header):
            raise SchemaError(f"{where}: expected {len(header)} fields, got {len(row)}")
        sid, ct, pet, t_raw, e_raw = (c.strip() for c in row[:5])
        if not sid or sid in seen:
            raise SchemaError(f"{where}: missing or duplicate subject_id {sid!r}")
        seen.add(sid)
        try:
            t = float(t_raw)
        except ValueError:
            raise SchemaError(f"{where}: time {t_raw!r} is not a number") from None
        if not np.isfinite(t) or t <= 0:
            raise NonPositiveTime(f"{where}: time must be positive, got {t_raw!r}")
        if e_raw not in ("0", "1"):
            raise SchemaError(f"{where}: event must be 0 or 1, got {e_raw!r}")
        clinical = None
        if clin_cols:
            vals = []
            for c in row[5:]:
                c = c.strip()
                if c == "":
                    if require_clinical:
                        raise SchemaError(f"{where}: missing clinical value")
                    vals.append(None)
                    continue
                try:
                    vals.append(float(c))
                except ValueError:
                    raise SchemaError(f"{where}: clinical value {c!r} is not a number") from None
            clinical = tuple(vals)
        elif require_clinical:
            raise SchemaError(f"{manifest_csv}: clinical modality enabled but no clin_ columns")
        paths = []
        for p in (ct, pet):
            full = base / p
            if not full.is_file():
                raise MissingVolume(f"{where}: volume file not found: {full}")
            paths.append(full)
        records.append(CohortRecord(sid, paths[0], paths[1], t, e_raw == "1", clinical))
    return records


def write_manifest(path, records: Sequence[CohortRecord], base=None) -> None:
    base = Path(base) if base is not None else Path(path).parent
    f = max((len(r.clinical) for r in records if r.clinical), default=0)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(MANIFEST_COLUMNS) + [f"clin_{k}" for k in range(1, f + 1)])
        for r in records:
            row = [r.subject_id, Path(os.path.relpath(r.ct_path, base)).as_posix(),
                   Path(os.path.relpath(r.pet_path, base)).as_posix(), repr(r.time),
                   int(r.event)]
            if f:
                row += ["" if v is None else repr(v) for v in (r.clinical or (None,) * f)]
            w.writerow(row)


@dataclass
class SplitAssignment:
    assignment: dict

    def ids(self, part: str) -> list:
        return [k for k, v in self.assignment.items() if v == part]

    def counts(self) -> dict:
        return {p: len(self.ids(p)) for p in ("train", "val", "test")}


def split_cohort(records: Sequence, seed: int) -> SplitAssignment:
    """Seeded shuffle then 80/10/10 by count; train takes the rounding remainder."""
    ids = [getattr(r, "subject_id", r) for r in records]
    n = len(ids)
    if n < 10:
        raise CohortTooSmall(f"need at least 10 records to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_val = n_test = n // 10
    parts = {}
    for rank, i in enumerate(order):
        parts[ids[i]] = "val" if rank < n_val else "test" if rank < n_val + n_test else "train"
    return SplitAssignment({sid: parts[sid] for sid in ids})


# ---------------------------------------------------------------- arrays

def fit_to_size(v: np.ndarray, size: Sequence[int]) -> np.ndarray:
    """Center-crop or zero-pad a [D,H,W] array to ``size``."""
    out = v
    for ax, target in enumerate(size):
        cur = out.shape[ax]
        if cur > target:
            start = (cur - target) // 2
            out = np.take(out, np.arange(start, start + target), axis=ax)
        elif cur < target:
            before = (target - cur) // 2
            pad = [(0, 0)] * 3
            pad[ax] = (before, target - cur - before)
            out = np.pad(out, pad)
    return out


def zscore(v: np.ndarray) -> np.ndarray:
    sd = v.std()
    return (v - v.mean()) / sd if sd > 0 else v - v.mean()


@dataclass
class CohortArrays:
    """In-memory cohort: volumes [N,1,D,H,W] per imaging modality."""

    ids: list
    time: np.ndarray
    event: np.ndarray
    volumes: dict = field(default_factory=dict)
    clinical: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "CohortArrays":
        idx = np.asarray(idx, dtype=int)
        return CohortArrays(
            [self.ids[i] for i in idx], self.time[idx], self.event[idx],
            {k: v[idx] for k, v in self.volumes.items()},
            None if self.clinical is None else self.clinical[idx])

    def indices(self, ids: Sequence[str]) -> np.ndarray:
        pos = {s: i for i, s in enumerate(self.ids)}
        return np.array([pos[s] for s in ids], dtype=int)


def load_arrays(records: Sequence[CohortRecord], modalities=IMAGING, input_size=None,
                dtype=np.float64, normalize: bool = True) -> CohortArrays:
    vols = {}
    for m in modalities:
        if m not in IMAGING:
            continue
        stack = []
        for r in records:
            v = read_volume(r.volume_path(m)).data[0]
            if input_size is not None:
                v = fit_to_size(v, input_size)
            v = v.astype(dtype)
            stack.append(zscore(v) if normalize else v)
        shapes = {s.shape for s in stack}
        if len(shapes) != 1:
            raise SchemaError(f"{m} volumes differ in dims {sorted(shapes)}; set input_size")
        vols[m] = np.stack(stack)[:, None]
    clinical = None
    if "clinical" in modalities:
        if any(r.clinical is None or None in r.clinical for r in records):
            raise SchemaError("clinical modality enabled but some clinical values are missing")
        clinical = np.array([r.clinical for r in records], dtype=dtype)
    return CohortArrays([r.subject_id for r in records],
                        np.array([r.time for r in records], dtype=float),
                        np.array([r.event for r in records], dtype=bool), vols, clinical)


# --------------------------------------------------------------- synthetic

SYNTH_INTERVALS = 10
SYNTH_EVENT_FRACTION = 0.6


def synthetic_baseline() -> float:
    """Constant baseline logit giving P(event within 10 intervals) = 0.6 at zero signal."""
    h = 1.0 - (1.0 - SYNTH_EVENT_FRACTION) ** (1.0 / SYNTH_INTERVALS)
    return float(np.log(h / (1.0 - h)))


@dataclass
class SyntheticCohort:
    records: list
    risk: dict
    manifest: Path
    truth: Path


def _blob_volumes(rng, dims, rho):
    z, y, x = np.meshgrid(*(np.arange(d, dtype=float) for d in dims), indexing="ij")
    size = min(dims)
    centre = (np.array(dims, dtype=float) - 1) / 2 + rng.uniform(-1, 1, size=3)
    dist = np.sqrt((z - centre[0]) ** 2 + (y - centre[1]) ** 2 + (x - centre[2]) ** 2)
    radius = 0.15 * size * (1 + rho)
    ct = 0.5 * (1 + np.tanh((radius - dist) / 0.5)) + 0.3 * rng.standard_normal(dims)
    sigma = 0.12 * size
    pet = (1 + rho) * np.exp(-dist ** 2 / (2 * sigma ** 2)) + 0.3 * rng.standard_normal(dims)
    return ct.astype(np.float32), pet.astype(np.float32)


def _censor_scale(observed: np.ndarray, u: np.ndarray, k: int) -> float:
    # censored iff c*(1-u_i) < T_i  <=>  r_i > c; choose c so exactly k satisfy it
    r = np.sort(observed / (1 - u))[::-1]
    if k <= 0:
        return float(r[0])
    return float((r[k - 1] + r[k]) / 2)


def generate_synthetic(out_dir, n: int, dims=(32, 32, 32), signal: float = 0.0,
                       censor_rate: float = 0.3, seed: int = 0,
                       clinical_features: int = 0) -> SyntheticCohort:
    """Write a synthetic two-modality cohort with a hidden risk per subject.

    Risk r ~ U(-1, 1). CT carries a sphere of radius proportional to (1 + r),
    PET a Gaussian bump of peak (1 + r), both in Gaussian noise. Event times
    follow a 10-interval discrete hazard sigmoid(a + signal * r) and are
    recorded at the integer upper limit of their interval; subjects surviving
    all intervals are censored at t = 10. Independent uniform
    censoring then censors round(censor_rate * n) subjects.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 8 or max(dims) > SVOL_MAX_DIM:
        raise BadDims(f"dims must be three extents in 8..{SVOL_MAX_DIM}, got {dims}")
    if not 0 <= censor_rate < 1:
        raise ValueError("censor_rate must lie in [0, 1)")
    if n < 2 or signal < 0:
        raise ValueError("need n >= 2 and signal >= 0")
    out = Path(out_dir)
    vol_dir = out / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    rho = rng.uniform(-1, 1, size=n)
    alpha = synthetic_baseline()
    hz = 1 / (1 + np.exp(-(alpha + signal * rho)))
    draws = rng.random((n, SYNTH_INTERVALS)) < hz[:, None]
    has_event = draws.any(axis=1)
    # an event in interval j is recorded at the interval's upper limit j
    first = np.argmax(draws, axis=1) + 1
    t_event = np.where(has_event, first, SYNTH_INTERVALS).astype(float)
    u = rng.random(n)
    k = min(int(round(censor_rate * n)), n - 1)
    c = _censor_scale(t_event, u, k)
    c_time = c * (1 - u)
    censored = c_time < t_event
    time = np.where(censored, c_time, t_event)
    event = has_event & ~censored
    clinical = None
    if clinical_features:
        clinical = 0.5 * rho[:, None] + rng.standard_normal((n, clinical_features))

    records, risk = [], {}
    width = max(4, len(str(n - 1)))
    for i in range(n):
        sid = f"s{i:0{width}d}"
        ct, pet = _blob_volumes(rng, dims, rho[i])
        paths = (vol_dir / f"{sid}_ct.svol", vol_dir / f"{sid}_pet.svol")
        write_volume(paths[0], ct)
        write_volume(paths[1], pet)
        clin = None if clinical is None else tuple(float(v) for v in clinical[i])
        records.append(CohortRecord(sid, paths[0], paths[1], float(time[i]), bool(event[i]), clin))
        risk[sid] = float(rho[i])

    manifest = out / "manifest.csv"
    write_manifest(manifest, records)
    truth = out / "truth.csv"
    with open(truth, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "risk"])
        for sid, r in risk.items():
            w.writerow([sid, repr(r)])
    return SyntheticCohort(records, risk, manifest, truth)
