"""Hot loops: numba-compiled when available, pure numpy otherwise.

Set ``MATEY_USE_NUMBA=0`` before import to force the numpy path. Both paths
evaluate the same expressions in the same order so results agree to
round-off (bit-identical in practice for the stencil update).
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and os.environ.get("MATEY_USE_NUMBA", "1").lower() not in ("0", "false", "no")


def _jit(fn):
    if USE_NUMBA:
        return numba.njit(cache=True, fastmath=False, nogil=True)(fn)
    return None


# --------------------------------------------------------------------- variance

def _patch_variance_loop(u, px, py):
    H, W, C = u.shape
    nx, ny = H // px, W // py
    out = np.zeros((nx, ny))
    inv_n = 1.0 / (px * py)
    for i in range(nx):
        for j in range(ny):
            acc = 0.0
            for c in range(C):
                m = 0.0
                for k in range(px):
                    for l in range(py):
                        m += u[i * px + k, j * py + l, c]
                m *= inv_n
                for k in range(px):
                    for l in range(py):
                        d = u[i * px + k, j * py + l, c] - m
                        acc += d * d
            out[i, j] = acc / (C * px * py)
    return out


def _patch_variance_numpy(u, px, py):
    H, W, C = u.shape
    t = u.reshape(H // px, px, W // py, py, C)
    m = t.mean(axis=(1, 3), keepdims=True)
    d = t - m
    return (d * d).mean(axis=(1, 3, 4))


_patch_variance_jit = _jit(_patch_variance_loop)


def patch_variance(u: np.ndarray, px: int, py: int) -> np.ndarray:
    u = np.ascontiguousarray(u, dtype=np.float64)
    if _patch_variance_jit is not None:
        return _patch_variance_jit(u, px, py)
    return _patch_variance_numpy(u, px, py)


# --------------------------------------------------------------------- proxy stencil

def _proxy_step_loop(theta, beta, kappa, dt, dx, dz, out):
    # theta[k, i]: k runs upward in z (reflective walls), i is periodic in x
    nz, nx = theta.shape
    inv_dz = 1.0 / dz
    ax = kappa / (dx * dx)
    az = kappa / (dz * dz)
    for k in range(nz):
        for i in range(nx):
            c = theta[k, i]
            # upwind flux of w*theta through the top face of cell k
            if k < nz - 1:
                up = theta[k + 1, i]
                wf = beta * 0.5 * (c + up)
                f_top = wf * c if wf > 0.0 else wf * up
                t_up = up
            else:
                f_top = 0.0
                t_up = c
            if k > 0:
                dn = theta[k - 1, i]
                wf = beta * 0.5 * (dn + c)
                f_bot = wf * dn if wf > 0.0 else wf * c
                t_dn = dn
            else:
                f_bot = 0.0
                t_dn = c
            left = theta[k, i - 1] if i > 0 else theta[k, nx - 1]
            right = theta[k, i + 1] if i < nx - 1 else theta[k, 0]
            lap = ax * (left - 2.0 * c + right) + az * (t_dn - 2.0 * c + t_up)
            out[k, i] = c + dt * (-(f_top - f_bot) * inv_dz + lap)
    return out


def _proxy_step_numpy(theta, beta, kappa, dt, dx, dz, out):
    nz, nx = theta.shape
    inv_dz = 1.0 / dz
    ax = kappa / (dx * dx)
    az = kappa / (dz * dz)
    lo, hi = theta[:-1], theta[1:]
    wf = beta * 0.5 * (lo + hi)
    face = np.where(wf > 0.0, wf * lo, wf * hi)
    flux = np.zeros((nz + 1, nx))
    flux[1:-1] = face
    t_up = np.concatenate([theta[1:], theta[-1:]], axis=0)
    t_dn = np.concatenate([theta[:1], theta[:-1]], axis=0)
    left = np.roll(theta, 1, axis=1)
    right = np.roll(theta, -1, axis=1)
    lap = ax * (left - 2.0 * theta + right) + az * (t_dn - 2.0 * theta + t_up)
    out[...] = theta + dt * (-(flux[1:] - flux[:-1]) * inv_dz + lap)
    return out


_proxy_step_jit = _jit(_proxy_step_loop)


def proxy_step(theta: np.ndarray, beta: float, kappa: float, dt: float, dx: float, dz: float,
               out: np.ndarray | None = None) -> np.ndarray:
    """One explicit Euler step of upwind vertical advection plus diffusion."""
    if out is None:
        out = np.empty_like(theta)
    if _proxy_step_jit is not None:
        return _proxy_step_jit(theta, beta, kappa, dt, dx, dz, out)
    return _proxy_step_numpy(theta, beta, kappa, dt, dx, dz, out)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
