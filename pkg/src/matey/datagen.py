"""Colliding-thermals trajectories.

Initial conditions and configuration sampling follow the MiniWeather
colliding-thermals setup; the time evolution is a cheap proxy (upwind
buoyant advection plus diffusion of the temperature anomaly), not the
compressible solver.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .fields import SystemSpec, Trajectory, save_trajectory

T_BASE = 300.0
AMPLITUDES = (10.0, 15.0, 20.0, 25.0)
CHANNELS = (("theta", "K"), ("u", "m/s"), ("w", "m/s"), ("T", "K"))


class StabilityError(RuntimeError):
    pass


@dataclass
class ThermalConfig:
    L: float
    nx: int
    nz: int
    Tc: tuple   # (hot, cold) amplitudes
    xc: tuple
    zc: tuple
    rx: tuple
    rz: tuple
    seed: int | None = None

    def validate(self) -> None:
        for i in range(2):
            if not (0 < self.rx[i] < self.L and 0 < self.rz[i] < self.L):
                raise ValueError(f"thermal {i}: radii out of range")
            if not (0 <= self.xc[i] <= self.L and 0 <= self.zc[i] <= self.L):
                raise ValueError(f"thermal {i}: center outside the domain")
            if self.Tc[i] <= 0:
                raise ValueError(f"thermal {i}: amplitude must be positive")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ThermalConfig":
        d = dict(d)
        for k in ("Tc", "xc", "zc", "rx", "rz"):
            d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class ProxyDynParams:
    kappa: float = 1e-4
    beta: float = 0.01
    dt: float = 0.01
    steps_per_frame: int = 5

    def check(self, dx: float, dz: float) -> None:
        if self.dt <= 0:
            raise StabilityError(f"dt must be positive, got {self.dt}")
        r = self.kappa * self.dt / min(dx, dz) ** 2
        if r > 0.25:
            raise StabilityError(f"diffusion number kappa*dt/min(dx,dz)^2 = {r:.4g} exceeds 0.25")


def sample_config(rng: np.random.Generator, L: float = 1.0, nx: int = 64, nz: int = 64,
                  seed: int | None = None) -> ThermalConfig:
    xc = tuple(float(v) for v in rng.uniform(0.2 * L, 0.8 * L, size=2))
    zc = (float(rng.uniform(0.2 * L, 0.3 * L)), float(rng.uniform(0.7 * L, 0.8 * L)))
    rx = tuple(float(v) for v in rng.uniform(0.1 * L, 0.2 * L, size=2))
    rz = tuple(float(v) for v in rng.uniform(0.1 * L, 0.2 * L, size=2))
    Tc = tuple(float(AMPLITUDES[k]) for k in rng.integers(0, len(AMPLITUDES), size=2))
    return ThermalConfig(L, nx, nz, Tc, xc, zc, rx, rz, seed)


def cell_centers(cfg: ThermalConfig):
    x = (np.arange(cfg.nx) + 0.5) * (cfg.L / cfg.nx)
    z = (np.arange(cfg.nz) + 0.5) * (cfg.L / cfg.nz)
    return x, z


def initial_temperature(cfg: ThermalConfig) -> np.ndarray:
    """T0 on cell centers, shape [nz, nx]: warm thermal 1 plus cold thermal 2."""
    x, z = cell_centers(cfg)
    X, Z = np.meshgrid(x, z)
    field = np.full_like(X, T_BASE)
    for i, sign in ((0, 1.0), (1, -1.0)):
        d = np.sqrt((X - cfg.xc[i]) ** 2 / cfg.rx[i] ** 2 + (Z - cfg.zc[i]) ** 2 / cfg.rz[i] ** 2)
        bump = np.where(d <= 1.0, cfg.Tc[i] * np.cos(0.5 * np.pi * d) ** 2, 0.0)
        field += sign * bump
    return field


def thermal_spec(nx: int, nz: int, dt: float = 1.0) -> SystemSpec:
    return SystemSpec("colliding_thermals", CHANNELS, nz, nx, dt)


def evolve_proxy(T0: np.ndarray, dyn: ProxyDynParams, n_frames: int, L: float = 1.0,
                 metadata: dict | None = None) -> Trajectory:
    """March the anomaly theta = T - 300 and emit frames (theta, u=0, w=beta*theta, T)."""
    nz, nx = T0.shape
    dx, dz = L / nx, L / nz
    dyn.check(dx, dz)
    theta = np.asarray(T0, dtype=np.float64) - T_BASE
    buf = np.empty_like(theta)
    frames = np.empty((n_frames, nz, nx, 4), dtype=np.float32)
    step = 0
    for f in range(n_frames):
        frames[f, ..., 0] = theta
        frames[f, ..., 1] = 0.0
        frames[f, ..., 2] = dyn.beta * theta
        frames[f, ..., 3] = theta + T_BASE
        if f == n_frames - 1:
            break
        for _ in range(dyn.steps_per_frame):
            cfl = dyn.dt * abs(dyn.beta) * float(np.max(np.abs(theta))) / dz
            if cfl > 1.0:
                raise StabilityError(f"advective CFL {cfl:.3g} > 1 at step {step}")
            _kernels.proxy_step(theta, dyn.beta, dyn.kappa, dyn.dt, dx, dz, buf)
            theta, buf = buf, theta
            step += 1
            if not np.isfinite(theta).all():
                raise StabilityError(f"non-finite temperature at step {step}")
    spec = thermal_spec(nx, nz, dyn.dt * dyn.steps_per_frame)
    return Trajectory(spec, frames, dict(metadata or {}))


def generate_trajectory(cfg: ThermalConfig, dyn: ProxyDynParams, n_frames: int) -> Trajectory:
    cfg.validate()
    meta = {"config": cfg.to_dict(), "dynamics": asdict(dyn), "generator": "proxy-upwind-diffusion"}
    return evolve_proxy(initial_temperature(cfg), dyn, n_frames, cfg.L, meta)


def generate_dataset(n_traj: int, grid: int, dyn: ProxyDynParams, seed: int, out_dir,
                     n_frames: int = 40, L: float = 1.0, workers: int | None = None) -> dict:
    """Write ``n_traj`` trajectory files and ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n_traj)
    traj_seeds = [int(c.generate_state(1)[0]) for c in children]
    configs = [sample_config(np.random.default_rng(s), L, grid, grid, seed=s) for s in traj_seeds]
    names = [f"traj_{i:05d}.maty" for i in range(n_traj)]

    def work(i):
        save_trajectory(generate_trajectory(configs[i], dyn, n_frames), out / names[i])

    workers = workers or int(os.environ.get("MATEY_THREADS", "1"))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(work, range(n_traj)))
    else:
        for i in range(n_traj):
            work(i)
    manifest = {
        "seed": seed,
        "grid": grid,
        "n_frames": n_frames,
        "dynamics": asdict(dyn),
        "trajectories": [
            {"file": names[i], "seed": traj_seeds[i], "config": configs[i].to_dict()} for i in range(n_traj)
        ],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
