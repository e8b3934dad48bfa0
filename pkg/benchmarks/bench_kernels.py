"""Time the numba and numpy paths of the hot kernels.

    python3 benchmarks/bench_kernels.py [--grid 256] [--repeat 20]

Each path runs in its own subprocess because the backend is fixed at import
time by MATEY_USE_NUMBA.
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = """
import json, sys, timeit
import numpy as np
from matey import _kernels

grid, repeat = int(sys.argv[1]), int(sys.argv[2])
rng = np.random.default_rng(0)
u = rng.standard_normal((grid, grid, 4))
theta = 300.0 + rng.standard_normal((grid, grid))
buf = np.empty_like(theta)
dx = 1.0 / grid

# warm up (jit compile or cache load)
_kernels.patch_variance(u, 16, 16)
_kernels.proxy_step(theta, 0.01, 1e-4, 0.01, dx, dx, buf)

res = {
    "backend": _kernels.backend(),
    "patch_variance_ms": 1e3 * min(timeit.repeat(lambda: _kernels.patch_variance(u, 16, 16), number=1, repeat=repeat)),
    "proxy_step_ms": 1e3 * min(timeit.repeat(lambda: _kernels.proxy_step(theta, 0.01, 1e-4, 0.01, dx, dx, buf),
                                             number=1, repeat=repeat)),
}
print(json.dumps(res))
"""


def run(flag, grid, repeat):
    env = dict(os.environ, MATEY_USE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", WORKER, str(grid), str(repeat)], env=env, check=True,
                         capture_output=True, text=True)
    return json.loads(out.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rows = [run("1", args.grid, args.repeat), run("0", args.grid, args.repeat)]
    print(f"grid {args.grid}x{args.grid}, best of {args.repeat}")
    print(f"{'backend':<8} {'patch_variance ms':>18} {'proxy_step ms':>14}")
    for r in rows:
        print(f"{r['backend']:<8} {r['patch_variance_ms']:>18.3f} {r['proxy_step_ms']:>14.3f}")
    nb, npy = rows
    print(f"speedup  {npy['patch_variance_ms'] / nb['patch_variance_ms']:>18.2f} "
          f"{npy['proxy_step_ms'] / nb['proxy_step_ms']:>14.2f}")


if __name__ == "__main__":
    main()
