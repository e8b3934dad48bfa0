"""Central-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter, Tensor

REL_FLOOR = 1e-12


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class GradCheckReport:
    epsilon: float
    dtype: str
    per_param: dict = field(default_factory=dict)  # name -> max rel. error
    coords_checked: dict = field(default_factory=dict)
    below_noise: dict = field(default_factory=dict)  # name -> (count, max abs err)
    noise_floor: float = 0.0

    @property
    def worst(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def worst_param(self) -> str | None:
        if not self.per_param:
            return None
        return max(self.per_param, key=self.per_param.get)

    def passed(self, tol: float) -> bool:
        return self.worst < tol

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "dtype": self.dtype,
            "worst_rel_error": self.worst,
            "worst_param": self.worst_param,
            "per_param": self.per_param,
            "coords_checked": self.coords_checked,
            "noise_floor": self.noise_floor,
            "below_noise": {k: {"count": c, "max_abs_err": e} for k, (c, e) in self.below_noise.items()},
        }


def rel_error(analytic, numeric, floor: float = REL_FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(fn, params, epsilon: float = 1e-5, max_coords: int | None = 64,
               seed: int = 0, noise_factor: float = 1e5) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn()`` against central differences.

    ``fn`` takes no arguments and returns a scalar Tensor built from
    ``params`` (a list of Parameters or a name -> Parameter mapping). When a
    parameter has more than ``max_coords`` entries a seeded random subset of
    that size is checked (``max_coords`` must be at least 32).

    The relative error of each coordinate is
    ``|a - n| / max(|a|, |n|, floor)`` with
    ``floor = noise_factor * eps_mach * |f| / epsilon``. The difference
    quotient of a function built from many rounded terms carries a few
    ``eps_mach * |f| / epsilon`` of noise, so near-zero gradients are judged
    on an absolute scale of a few round-off units at a 1e-4 tolerance. Coordinates
    below the floor (e.g. a bias removed by a later normalisation) are also
    tallied under ``below_noise``.
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(p.name or f"param{i}", p) for i, p in enumerate(params)]
    if max_coords is not None and max_coords < 32:
        raise ValueError("max_coords must be >= 32")
    rng = np.random.default_rng(seed)

    for _, p in named:
        p.grad = None
    out = fn()
    f0 = _scalar(out, "unperturbed", None)
    out.backward()
    dtype = named[0][1].dtype if named else np.dtype(np.float64)
    noise = noise_factor * np.finfo(dtype).eps * max(abs(f0), 1.0) / epsilon
    report = GradCheckReport(epsilon=epsilon, dtype=str(dtype), noise_floor=float(noise))

    for name, p in named:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
        flat = p.data.reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        quiet, quiet_err = 0, 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            fp = _scalar(fn(), name, c)
            flat[c] = orig - epsilon
            fm = _scalar(fn(), name, c)
            flat[c] = orig
            num = (fp - fm) / (2.0 * epsilon)
            ana = analytic.reshape(-1)[c]
            if max(abs(ana), abs(num)) < noise:
                quiet += 1
                quiet_err = max(quiet_err, abs(ana - num))
            worst = max(worst, float(rel_error(ana, num, floor=max(noise, REL_FLOOR))))
        report.per_param[name] = worst
        report.coords_checked[name] = int(len(coords))
        if quiet:
            report.below_noise[name] = (quiet, float(quiet_err))
    for _, p in named:
        p.grad = None
    return report


def _scalar(out, name, coord) -> float:
    val = out.data if isinstance(out, Tensor) else np.asarray(out)
    if val.size != 1:
        raise ValueError(f"grad_check: function must return a scalar, got shape {val.shape}")
    val = float(val.reshape(()))
    if not np.isfinite(val):
        where = "at the unperturbed point" if coord is None else f"perturbing {name}[{coord}]"
        raise NonFiniteError(f"grad_check: non-finite function value {where}")
    return val


__all__ = ["GradCheckReport", "NonFiniteError", "grad_check", "rel_error", "Parameter"]
