import json
import os
import subprocess
import sys

import numpy as np
import pytest

import oracles
from matey import _kernels
from matey.datagen import (AMPLITUDES, T_BASE, ProxyDynParams, StabilityError, ThermalConfig, evolve_proxy,
                           generate_dataset, initial_temperature, sample_config)
from matey.fields import load_trajectory


def _cfg(**kw):
    base = dict(L=1.0, nx=32, nz=32, Tc=(20.0, 15.0), xc=(0.3, 0.7), zc=(0.25, 0.75), rx=(0.15, 0.12),
                rz=(0.1, 0.18))
    base.update(kw)
    return ThermalConfig(**base)


def test_sample_config_ranges_and_determinism():
    rng = np.random.default_rng(0)
    cfgs = [sample_config(rng) for _ in range(2000)]
    for c in cfgs:
        assert all(0.2 <= x <= 0.8 for x in c.xc)
        assert 0.2 <= c.zc[0] <= 0.3 and 0.7 <= c.zc[1] <= 0.8
        assert all(0.1 <= r <= 0.2 for r in c.rx + c.rz)
        assert set(c.Tc) <= set(AMPLITUDES)
        c.validate()
    a = sample_config(np.random.default_rng(42))
    b = sample_config(np.random.default_rng(42))
    assert a == b


def test_initial_temperature_oracle():
    cfg = sample_config(np.random.default_rng(3), nx=24, nz=20)
    np.testing.assert_allclose(initial_temperature(cfg), oracles.initial_temperature(cfg), atol=1e-12, rtol=0)


def test_initial_temperature_special_points():
    # 4x4 cells on L = 4: cell centres at 0.5, 1.5, 2.5, 3.5
    cfg = ThermalConfig(4.0, 4, 4, (20.0, 10.0), (0.5, 3.5), (0.5, 3.5), (1.0, 1.0), (1.0, 1.0))
    T0 = initial_temperature(cfg)
    assert T0[0, 0] == T_BASE + 20.0           # hot centre, d1 = 0
    assert T0[3, 3] == T_BASE - 10.0           # cold centre
    assert T0[0, 1] == pytest.approx(T_BASE, abs=1e-12)   # d1 = 1 exactly: cos(pi/2)^2 ~ 0
    assert T0[1, 2] == T_BASE                  # outside both bumps


def test_no_dynamics_keeps_frames():
    T0 = initial_temperature(_cfg())
    tr = evolve_proxy(T0, ProxyDynParams(kappa=0.0, beta=0.0), 4)
    for f in range(4):
        np.testing.assert_array_equal(tr.data[f, ..., 3], T0.astype(np.float32))
    np.testing.assert_array_equal(tr.data[..., 1], 0.0)


def test_diffusion_max_principle():
    T0 = initial_temperature(_cfg())
    tr = evolve_proxy(T0, ProxyDynParams(kappa=1e-3, beta=0.0, dt=0.02, steps_per_frame=20), 30)
    peak = np.abs(tr.data[..., 0]).reshape(30, -1).max(axis=1)
    assert np.all(np.diff(peak) <= 1e-6)
    assert peak[-1] < peak[0]


def test_buoyancy_moves_anomalies():
    T0 = initial_temperature(_cfg())
    tr = evolve_proxy(T0, ProxyDynParams(kappa=0.0, beta=0.02, dt=0.01, steps_per_frame=25), 5)
    z = (np.arange(32) + 0.5) / 32

    def centroid(theta, sign):
        w = np.clip(sign * theta, 0, None)
        return float((w.sum(axis=1) * z).sum() / w.sum())

    first, last = tr.data[0, ..., 0], tr.data[-1, ..., 0]
    assert centroid(last, 1) > centroid(first, 1)      # warm rises
    assert centroid(last, -1) < centroid(first, -1)    # cold sinks


def test_pure_advection_conserves_anomaly():
    T0 = initial_temperature(_cfg())
    theta0 = T0 - T_BASE
    tr = evolve_proxy(T0, ProxyDynParams(kappa=0.0, beta=0.02, dt=0.01, steps_per_frame=20), 6)
    total = tr.data[..., 0].astype(np.float64).reshape(6, -1).sum(axis=1)
    scale = np.abs(theta0).sum()
    assert np.all(np.abs(total - theta0.sum()) / scale < 1e-4)


def test_stability_errors():
    T0 = initial_temperature(_cfg())
    with pytest.raises(StabilityError, match="diffusion"):
        evolve_proxy(T0, ProxyDynParams(kappa=1.0, dt=0.01), 2)
    with pytest.raises(StabilityError, match="step 0"):
        evolve_proxy(T0, ProxyDynParams(kappa=0.0, beta=10.0, dt=0.1), 2)


def test_dataset_reproducible(tmp_path):
    dyn = ProxyDynParams()
    m1 = generate_dataset(2, 16, dyn, seed=7, out_dir=tmp_path / "a", n_frames=4)
    generate_dataset(2, 16, dyn, seed=7, out_dir=tmp_path / "b", n_frames=4)
    assert len(m1["trajectories"]) == 2
    for name in ["manifest.json"] + [t["file"] for t in m1["trajectories"]]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    for entry in manifest["trajectories"]:
        tr = load_trajectory(tmp_path / "a" / entry["file"])
        ic = initial_temperature(ThermalConfig.from_dict(entry["config"]))
        np.testing.assert_array_equal(tr.data[0, ..., 3], ic.astype(np.float32))


def test_dataset_threads_match_serial(tmp_path, monkeypatch):
    dyn = ProxyDynParams()
    generate_dataset(3, 16, dyn, seed=1, out_dir=tmp_path / "s", n_frames=3, workers=1)
    generate_dataset(3, 16, dyn, seed=1, out_dir=tmp_path / "p", n_frames=3, workers=3)
    for f in sorted((tmp_path / "s").iterdir()):
        assert f.read_bytes() == (tmp_path / "p" / f.name).read_bytes()


def test_kernel_paths_agree():
    rng = np.random.default_rng(0)
    theta = rng.standard_normal((16, 12))
    a = _kernels._proxy_step_loop(theta, 0.3, 1e-3, 0.01, 1 / 12, 1 / 16, np.empty_like(theta))
    b = _kernels._proxy_step_numpy(theta, 0.3, 1e-3, 0.01, 1 / 12, 1 / 16, np.empty_like(theta))
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)
    u = rng.standard_normal((8, 12, 3))
    np.testing.assert_allclose(_kernels._patch_variance_loop(u, 4, 3), _kernels._patch_variance_numpy(u, 4, 3),
                               atol=1e-14)
    if _kernels._proxy_step_jit is not None:
        c = _kernels._proxy_step_jit(theta, 0.3, 1e-3, 0.01, 1 / 12, 1 / 16, np.empty_like(theta))
        np.testing.assert_array_equal(a, c)
        np.testing.assert_allclose(_kernels._patch_variance_jit(u, 4, 3), oracles.patch_variance(u, 4, 3),
                                   atol=1e-14)


def test_numba_flag_selects_backend_and_matches(tmp_path):
    script = ("import sys, numpy as np\n"
              "from matey import _kernels\n"
              "from matey.datagen import ProxyDynParams, generate_trajectory, sample_config\n"
              "tr = generate_trajectory(sample_config(np.random.default_rng(2), nx=24, nz=24), ProxyDynParams(), 6)\n"
              "np.save(sys.argv[1], tr.data)\n"
              "print(_kernels.backend())\n")
    outs = {}
    for flag in ("0", "1"):
        env = dict(os.environ, MATEY_USE_NUMBA=flag)
        path = tmp_path / f"traj_{flag}.npy"
        res = subprocess.run([sys.executable, "-c", script, str(path)], env=env, capture_output=True, text=True,
                             check=True)
        outs[flag] = (res.stdout.strip(), np.load(path))
    assert outs["0"][0] == "numpy" and outs["1"][0] == "numba"
    np.testing.assert_allclose(outs["0"][1], outs["1"][1], rtol=0, atol=1e-12)
