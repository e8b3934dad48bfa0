"""Physical systems, trajectories, normalisation, sampling and the NRMSE metric."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"MATY"
VERSION = 1
STD_FLOOR = 1e-6
_PREFIX = struct.Struct("<4sHI")  # magic, version u16, header length u32
_DTYPE_CODES = {"f4": np.dtype("<f4")}


class TrajectoryFormatError(ValueError):
    pass


class TrajectoryTooShortError(ValueError):
    pass


@dataclass(frozen=True)
class SystemSpec:
    name: str
    variables: tuple  # ((name, unit), ...)
    H: int
    W: int
    dt: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(tuple(v) for v in self.variables))
        if not self.variables:
            raise ValueError("SystemSpec needs at least one variable")
        names = [v[0] for v in self.variables]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate variable names in {names}")
        if self.H < 1 or self.W < 1:
            raise ValueError(f"bad resolution {self.H}x{self.W}")

    @property
    def n_channels(self) -> int:
        return len(self.variables)

    @property
    def variable_names(self) -> list:
        return [v[0] for v in self.variables]


@dataclass
class Trajectory:
    spec: SystemSpec
    data: np.ndarray  # [T_total, H, W, C] float32
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        expect = (self.spec.H, self.spec.W, self.spec.n_channels)
        if self.data.ndim != 4 or self.data.shape[1:] != expect:
            raise ValueError(f"trajectory data shape {self.data.shape} does not match spec {expect}")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.std).astype(np.float32)

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return (x * self.std + self.mean).astype(np.float32)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class Sample:
    window: np.ndarray  # [T, H, W, C]
    target: np.ndarray  # [H, W, C]
    lead: int
    start: int = 0

    @property
    def history(self) -> int:
        return self.window.shape[0]


# ----------------------------------------------------------------- file format

def save_trajectory(traj: Trajectory, path) -> None:
    header = {
        "system": traj.spec.name,
        "variables": [{"name": n, "unit": u} for n, u in traj.spec.variables],
        "H": traj.spec.H,
        "W": traj.spec.W,
        "T_total": traj.n_frames,
        "dtype": "f4",
        "dt": traj.spec.dt,
        "metadata": traj.metadata,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(traj.data, dtype="<f4").tobytes())


def load_trajectory(path) -> Trajectory:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise TrajectoryFormatError(f"{path}: truncated file ({len(raw)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise TrajectoryFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise TrajectoryFormatError(f"{path}: unsupported version {version}, expected {VERSION}")
    start = _PREFIX.size
    if len(raw) < start + hlen:
        raise TrajectoryFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TrajectoryFormatError(f"{path}: unreadable header ({exc})") from None
    dtype = _DTYPE_CODES.get(header.get("dtype"))
    if dtype is None:
        raise TrajectoryFormatError(f"{path}: unknown dtype code {header.get('dtype')!r}")
    variables = [(v["name"], v["unit"]) for v in header["variables"]]
    spec = SystemSpec(header["system"], tuple(variables), int(header["H"]), int(header["W"]), float(header["dt"]))
    shape = (int(header["T_total"]), spec.H, spec.W, spec.n_channels)
    nbytes = int(np.prod(shape)) * dtype.itemsize
    body = raw[start + hlen:]
    if len(body) < nbytes:
        held = len(body) // max(spec.H * spec.W * spec.n_channels * dtype.itemsize, 1)
        raise TrajectoryFormatError(
            f"{path}: truncated data, header declares T_total={shape[0]} but file holds {held} frames")
    if len(body) > nbytes:
        raise TrajectoryFormatError(f"{path}: {len(body) - nbytes} trailing bytes after frame buffer")
    data = np.frombuffer(body, dtype=dtype).reshape(shape).astype(np.float32)
    return Trajectory(spec, data, header.get("metadata", {}))


# ----------------------------------------------------------------- statistics

def compute_norm_stats(trajectories: Sequence[Trajectory], floor: float = STD_FLOOR) -> NormStats:
    if not trajectories:
        raise ValueError("compute_norm_stats: no trajectories")
    C = trajectories[0].spec.n_channels
    if any(t.spec.n_channels != C for t in trajectories):
        raise ValueError("compute_norm_stats: inconsistent channel counts")
    flat = np.concatenate([t.data.reshape(-1, C).astype(np.float64) for t in trajectories])
    mean = flat.mean(axis=0)
    std = np.sqrt(((flat - mean) ** 2).mean(axis=0))
    return NormStats(mean, np.maximum(std, floor))


def nrmse(pred: np.ndarray, truth: np.ndarray, floor: float = STD_FLOOR) -> float:
    """Channel-averaged RMSE divided by the per-channel std of ``truth``.

    Inputs are [..., C]; every axis but the last is pooled.
    """
    return float(nrmse_per_channel(pred, truth, floor).mean())


def nrmse_per_channel(pred, truth, floor: float = STD_FLOOR) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"nrmse: shape mismatch {pred.shape} vs {truth.shape}")
    C = truth.shape[-1]
    p, t = pred.reshape(-1, C), truth.reshape(-1, C)
    rmse = np.sqrt(((p - t) ** 2).mean(axis=0))
    return rmse / np.maximum(t.std(axis=0), floor)


# ----------------------------------------------------------------- sampling

def valid_pairs(n_frames: int, T: int, lead_min: int, lead_max: int, stride: int = 1) -> list:
    """Every (window start, lead) whose target frame lies inside the trajectory."""
    out = []
    for s in range(0, n_frames - T - lead_min + 1, stride):
        top = min(lead_max, n_frames - T - s)
        out.extend((s, lead) for lead in range(lead_min, top + 1))
    return out


def make_samples(traj: Trajectory, T: int, lead_min: int, lead_max: int, seed: int,
                 stride: int = 1) -> list:
    """One sample per window start with a uniformly drawn lead time.

    Starts run every ``stride`` frames up to the last one that still admits
    ``lead_min``; near the end the lead range is clipped to what fits.
    """
    if T < 1 or lead_min < 1 or lead_max < lead_min:
        raise ValueError(f"make_samples: bad T={T} or lead range [{lead_min}, {lead_max}]")
    if traj.n_frames < T + lead_max:
        raise TrajectoryTooShortError(
            f"trajectory has {traj.n_frames} frames, needs at least T + lead_max = {T + lead_max}")
    rng = np.random.default_rng(seed)
    samples = []
    for s in range(0, traj.n_frames - T - lead_min + 1, stride):
        top = min(lead_max, traj.n_frames - T - s)
        lead = int(rng.integers(lead_min, top + 1))
        samples.append(Sample(traj.data[s:s + T], traj.data[s + T - 1 + lead], lead, s))
    return samples
