"""Sequence-length and attention-cost indices, parameter counts, counter checks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .model import MateyModel, count_params


def _check(npx1, npy1, n_sts):
    n_sts = [int(n) for n in np.atleast_1d(n_sts)]
    if not n_sts:
        raise ValueError("need at least one frame")
    bad = [n for n in n_sts if n < 0 or n > npx1 * npy1]
    if bad:
        raise ValueError(f"N_sts values {bad} outside [0, {npx1 * npy1}]")
    return n_sts


def l_avg_mix(npx1: int, npy1: int, ratios, n_sts) -> float:
    """Mean over frames of (npx1*npy1 - N_t) + N_t * rx * ry."""
    rx, ry = ratios
    n_sts = _check(npx1, npy1, n_sts)
    return float(np.mean([(npx1 * npy1 - n) + n * rx * ry for n in n_sts]))


def l_lin_quad(npx1: int, npy1: int, ratios, n_sts) -> tuple:
    rx, ry = ratios
    r = rx * ry
    n_sts = _check(npx1, npy1, n_sts)
    n1 = npx1 * npy1
    lin = float(np.mean([n1 + n * r for n in n_sts]))
    quad = float(np.mean([n1 ** 2 + n * r ** 2 for n in n_sts]))
    return lin, quad


def l_quad_avit(npx1: int, npy1: int, ratios, n_sts) -> float:
    rx, ry = ratios
    n_sts = _check(npx1, npy1, n_sts)
    coarse = npx1 ** 2 * npy1 + npx1 * npy1 ** 2
    sts = rx ** 2 * ry + rx * ry ** 2
    return float(np.mean([coarse + n * sts for n in n_sts]))


# ------------------------------------------------------------------ analytic score counts

def analytic_scores(variant: str, nt: int, grid=None, seq_len: int | None = None) -> int:
    """Per-head, per-block attention score elements for one token stream.

    ``grid`` is (npx, npy) for grid-shaped tokens; ``seq_len`` is the
    per-frame length of a non-grid (mixed) sequence.
    """
    if grid is not None:
        npx, npy = grid
        S = npx * npy
    elif seq_len is not None:
        S = seq_len
    else:
        raise ValueError("need a grid or a sequence length")
    if variant == "vit":
        return (nt * S) ** 2
    if variant == "svit":
        return S * nt ** 2 + nt * S ** 2
    if variant == "avit":
        if grid is None:
            raise ValueError("AViT needs a grid")
        return S * nt ** 2 + nt * npy * npx ** 2 + nt * npx * npy ** 2
    raise ValueError(f"unknown variant {variant!r}")


@dataclass
class CounterReport:
    variant: str
    heads: int
    measured: list
    expected: list
    mismatches: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.mismatches

    def to_dict(self):
        return asdict(self) | {"ok": self.ok}


def expected_scores(model: MateyModel, token_set, batch: int) -> int:
    """Score elements per block (all heads) for the streams of one forward pass."""
    cfg = model.cfg.attention
    nt = token_set.tokens.shape[1]
    if token_set.mode == "mix":
        per = analytic_scores(cfg.variant, nt, seq_len=token_set.layout.S) * batch
    else:
        per = analytic_scores(cfg.variant, nt, grid=token_set.grid) * batch
        if token_set.mode == "mul" and token_set.sts_tokens is not None:
            G = token_set.sts_tokens.shape[0]
            per += analytic_scores(cfg.variant, nt, grid=token_set.sts_grid) * G
    return per * cfg.heads


def verify_counters(model: MateyModel, U, t_lead, system: str) -> CounterReport:
    """Run an instrumented forward pass and compare counters with the formulas."""
    from .diffmath import no_grad
    with no_grad():
        _, ts = model.forward(U, t_lead, system)
    B = np.asarray(U).shape[0] if np.asarray(U).ndim == 5 else 1
    measured = list(model.attention.counters.scores)
    exp = expected_scores(model, ts, B)
    expected = [exp] * len(measured)
    mism = [{"block": l, "measured": m, "expected": e} for l, (m, e) in enumerate(zip(measured, expected)) if m != e]
    return CounterReport(model.cfg.attention.variant, model.cfg.attention.heads, measured, expected, mism)


@dataclass
class CostReport:
    gamma: float
    p1: int
    psts: int
    variant: str
    L_avg_mix: float
    L_lin: float
    L_quad: float
    n_params: int | None = None
    measured_counters: int | None = None
    nrmse: float | None = None

    def to_dict(self):
        return asdict(self)


def cost_report(selections, p1: int, psts: int, gamma: float, variant: str,
                model: MateyModel | None = None, measured: int | None = None,
                nrmse: float | None = None) -> CostReport:
    """Indices averaged over every frame of every selection (per-frame N_sts)."""
    r = p1 // psts
    grid = selections[0].grid
    n_sts = [n for s in selections for n in s.n_sts_per_frame]
    lmix = l_avg_mix(grid[0], grid[1], (r, r), n_sts)
    lin, quad = l_lin_quad(grid[0], grid[1], (r, r), n_sts)
    if variant == "avit":
        quad = l_quad_avit(grid[0], grid[1], (r, r), n_sts)
    return CostReport(gamma, p1, psts, variant, lmix, lin, quad,
                      count_params(model) if model is not None else None, measured, nrmse)
