"""Preprocessing, uniform patch embedding and variance-driven adaptive tokenization.

Layout conventions (used again by ``decode``):

* coarse grid index (i, j) is flattened row-major: ``i * npy1 + j``;
* an Adap_Mix sequence holds the kept coarse tokens in row-major order,
  followed by one group of ``rx * ry`` STS tokens per selected patch, groups
  in row-major order of (i, j) and tokens row-major inside the patch;
* the selection is the union over the input frames, so every frame of a
  sample shares one layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .diffmath import Parameter, Tensor, ops, trunc_normal


@dataclass(frozen=True)
class PatchSpec:
    px: int
    py: int
    pt: int = 1

    def grid(self, H: int, W: int) -> tuple:
        if H % self.px or W % self.py:
            raise ValueError(f"field {H}x{W} not divisible by patch {self.px}x{self.py}")
        return H // self.px, W // self.py


@dataclass(frozen=True)
class AdaptiveSpec:
    p1: tuple       # coarse patch (px1, py1)
    psts: tuple     # STS patch (px_sts, py_sts)
    gamma: float
    mode: str = "mix"

    def __post_init__(self):
        object.__setattr__(self, "p1", _pair(self.p1))
        object.__setattr__(self, "psts", _pair(self.psts))
        if self.p1[0] % self.psts[0] or self.p1[1] % self.psts[1]:
            raise ValueError(f"coarse patch {self.p1} not divisible by STS patch {self.psts}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma_sts must lie in [0, 1], got {self.gamma}")
        if self.mode not in ("mul", "mix"):
            raise ValueError(f"adaptive mode must be 'mul' or 'mix', got {self.mode!r}")

    @property
    def ratios(self) -> tuple:
        return self.p1[0] // self.psts[0], self.p1[1] // self.psts[1]

    @property
    def r(self) -> int:
        rx, ry = self.ratios
        return rx * ry


def _pair(p) -> tuple:
    if isinstance(p, (int, np.integer)):
        return int(p), int(p)
    return int(p[0]), int(p[1])


# ------------------------------------------------------------------ learnable maps

class Preprocessor:
    """Per-system pointwise linear map C_k -> C_uni."""

    def __init__(self, c_uni: int, dtype=np.float32):
        self.c_uni = c_uni
        self.dtype = dtype
        self.maps: dict = {}

    def register(self, system: str, c_k: int, rng: np.random.Generator) -> None:
        self.maps[system] = (
            Parameter(trunc_normal(rng, (c_k, self.c_uni), dtype=self.dtype), f"pre.{system}.weight"),
            Parameter(np.zeros(self.c_uni, dtype=self.dtype), f"pre.{system}.bias"),
        )

    def parameters(self) -> list:
        return [p for pair in self.maps.values() for p in pair]

    def __call__(self, U, system: str) -> Tensor:
        if system not in self.maps:
            raise KeyError(f"system {system!r} is not registered with the preprocessor")
        w, b = self.maps[system]
        if U.shape[-1] != w.shape[0]:
            raise ValueError(f"system {system!r} expects {w.shape[0]} channels, got {U.shape[-1]}")
        return ops.linear(U, w, b)


class PatchEmbed:
    """Strided convolution with kernel = stride = patch size."""

    def __init__(self, patch, c_in: int, c_emb: int, rng, name: str, dtype=np.float32):
        self.px, self.py = _pair(patch)
        self.weight = Parameter(trunc_normal(rng, (self.px, self.py, c_in, c_emb), dtype=dtype), f"{name}.weight")
        self.bias = Parameter(np.zeros(c_emb, dtype=dtype), f"{name}.bias")

    def parameters(self) -> list:
        return [self.weight, self.bias]

    def __call__(self, U) -> Tensor:
        return ops.conv2d_patch(U, self.weight, self.bias)


class PosAreaEmbed:
    """Fixed sin/cos features of the token centre plus a learnable log-area term.

    The first half of the channels encodes x, the second half y; each half is
    ``[sin(w_k x), cos(w_k x)]`` for K = C/4 frequencies ``w_k = pi *
    128**(k/(K-1))``.
    """

    def __init__(self, c_emb: int, rng, dtype=np.float32):
        if c_emb % 4:
            raise ValueError("C_emb must be divisible by 4")
        self.c_emb = c_emb
        self.dtype = dtype
        self.area_weight = Parameter(trunc_normal(rng, (c_emb,), dtype=dtype), "pos.area_weight")

    def parameters(self) -> list:
        return [self.area_weight]

    def sincos(self, centers: np.ndarray) -> np.ndarray:
        return sincos_features(centers, self.c_emb).astype(self.dtype)

    def __call__(self, centers: np.ndarray, log_area: np.ndarray) -> Tensor:
        fixed = Tensor(self.sincos(centers))
        area = Tensor(np.asarray(log_area, dtype=self.dtype)[..., None])
        return ops.add(fixed, ops.mul(area, self.area_weight))


def sincos_features(centers: np.ndarray, c_emb: int) -> np.ndarray:
    centers = np.asarray(centers, dtype=np.float64)
    K = c_emb // 4
    omega = np.pi * 128.0 ** (np.arange(K) / max(K - 1, 1))
    parts = []
    for axis in range(2):
        ang = centers[..., axis:axis + 1] * omega
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=-1)


def grid_layout(H: int, W: int, px: int, py: int):
    """Centres (normalised to [0, 1]^2) and log-area of a uniform patch grid, row-major."""
    nx, ny = H // px, W // py
    ci = (np.arange(nx) + 0.5) * px / H
    cj = (np.arange(ny) + 0.5) * py / W
    centers = np.stack(np.meshgrid(ci, cj, indexing="ij"), axis=-1).reshape(-1, 2)
    log_area = np.full(nx * ny, np.log(px * py / (H * W)))
    return centers, log_area


# ------------------------------------------------------------------ selection

@dataclass
class STSSelection:
    variance: np.ndarray         # [T, npx1, npy1]
    sts_ids: tuple               # ((i, j), ...) row-major, union over frames
    kep_ids: tuple
    n_sts_per_frame: tuple       # per-frame |STS-IDs_t|, used by the cost indices

    @property
    def n_sts(self) -> int:
        return len(self.sts_ids)

    @property
    def grid(self) -> tuple:
        return self.variance.shape[-2:]


def patch_variance(u: np.ndarray, p1) -> np.ndarray:
    """Per-patch variance of a [H, W, C] field, pooled over pixels and channels.

    Each pixel is compared with its own channel's patch mean.
    """
    px, py = _pair(p1)
    H, W, _ = u.shape
    if H % px or W % py:
        raise ValueError(f"field {H}x{W} not divisible by patch {px}x{py}")
    return _kernels.patch_variance(u, px, py)


def _threshold(v: np.ndarray, gamma: float) -> np.ndarray:
    if gamma == 0.0:
        return np.ones(v.shape, dtype=bool)
    return v > gamma * v.max()


def select_sts(v: np.ndarray, gamma: float) -> STSSelection:
    """Refine patches with v > gamma * max(v); gamma = 0 refines everything."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma_sts must lie in [0, 1], got {gamma}")
    v = np.asarray(v, dtype=np.float64)
    frames = v[None] if v.ndim == 2 else v
    picks = np.stack([_threshold(f, gamma) for f in frames])
    union = picks.any(axis=0)
    sts = tuple((int(i), int(j)) for i, j in zip(*np.nonzero(union)))
    kep = tuple((int(i), int(j)) for i, j in zip(*np.nonzero(~union)))
    return STSSelection(frames, sts, kep, tuple(int(p.sum()) for p in picks))


def select_frames(field: np.ndarray, p1, gamma: float) -> STSSelection:
    """Variance of every frame of a [T, H, W, C] window, then the union selection."""
    v = np.stack([patch_variance(f, p1) for f in field])
    return select_sts(v, gamma)


# ------------------------------------------------------------------ token sets

@dataclass
class MixLayout:
    seq_len: np.ndarray          # [B] unpadded lengths
    S: int                       # padded length
    mask: np.ndarray             # [B, S] True = real token
    src: np.ndarray              # [B, S] index into concat(coarse, fine) tokens of a frame
    centers: np.ndarray          # [B, S, 2]
    log_area: np.ndarray         # [B, S]
    group_rows: np.ndarray       # [G, r] rows of the flattened [B*S] last-frame sequence
    coarse_src: np.ndarray       # [B*n1] rows into concat(flat sequence, group means)
    fine_src: np.ndarray         # [B*nf] rows into the flat sequence
    sts_pixels: np.ndarray       # [B, H, W] True where the fine reconstruction is used


@dataclass
class MulLayout:
    owner: np.ndarray            # [G] flat coarse row b*n1 + i*npy1 + j of each STS group
    fine_rows: np.ndarray        # [G, r] rows into the flattened [B*nf] fine grid
    centers: np.ndarray          # [G, r, 2]
    log_area: np.ndarray         # [G, r]


@dataclass
class TokenSet:
    mode: str                    # uniform | mul | mix
    tokens: Tensor               # [B, T, S, C]
    pos: Tensor                  # broadcastable to tokens
    grid: tuple | None           # (npx, npy) when tokens form a grid
    mask: np.ndarray | None = None
    sts_tokens: Tensor | None = None   # mul: [G, T, r, C]
    sts_pos: Tensor | None = None
    sts_grid: tuple | None = None
    selections: list = field(default_factory=list)
    layout: object = None
    coarse_grid: tuple | None = None
    fine_grid: tuple | None = None
    patch: tuple | None = None
    psts: tuple | None = None
    field_shape: tuple | None = None


def embed_uniform(U_latent, embed: PatchEmbed) -> Tensor:
    """[..., T, H, W, C_uni] -> [..., T, npx, npy, C_emb]; frames are independent."""
    return embed(U_latent)


def tokenize_uniform(U_latent, embed: PatchEmbed, pos_embed: PosAreaEmbed) -> TokenSet:
    B, T, H, W, _ = U_latent.shape
    Z = embed_uniform(U_latent, embed)
    npx, npy, C = Z.shape[-3:]
    centers, log_area = grid_layout(H, W, embed.px, embed.py)
    pos = ops.reshape(pos_embed(centers, log_area), (1, 1, npx * npy, C))
    return TokenSet("uniform", ops.reshape(Z, (B, T, npx * npy, C)), pos, (npx, npy),
                    patch=(embed.px, embed.py), field_shape=(H, W))


def tokenize_adaptive(U_latent, spec: AdaptiveSpec, coarse: PatchEmbed, fine: PatchEmbed,
                      pos_embed: PosAreaEmbed, selection_field: np.ndarray | None = None) -> TokenSet:
    """Adap_Mul / Adap_Mix tokenization of a [B, T, H, W, C_uni] batch.

    ``selection_field`` ([B, T, H, W, C], any channel count) is the field the
    patch variance is measured on; it defaults to the latent values.
    """
    B, T, H, W, _ = U_latent.shape
    (px1, py1), (pxs, pys) = spec.p1, spec.psts
    if (coarse.px, coarse.py) != (px1, py1) or (fine.px, fine.py) != (pxs, pys):
        raise ValueError("patch embed kernels do not match the adaptive spec")
    npx1, npy1 = PatchSpec(px1, py1).grid(H, W)
    npxs, npys = PatchSpec(pxs, pys).grid(H, W)
    rx, ry = spec.ratios
    field_np = U_latent.data if selection_field is None else np.asarray(selection_field)
    selections = [select_frames(field_np[b], spec.p1, spec.gamma) for b in range(B)]

    Zc = coarse(U_latent)   # [B, T, npx1, npy1, C]
    Zf = fine(U_latent)     # [B, T, npxs, npys, C]
    C = Zc.shape[-1]
    n1, nf = npx1 * npy1, npxs * npys
    Zc = ops.reshape(Zc, (B, T, n1, C))
    Zf = ops.reshape(Zf, (B, T, nf, C))
    common = dict(coarse_grid=(npx1, npy1), fine_grid=(npxs, npys), patch=(px1, py1), psts=(pxs, pys),
                  field_shape=(H, W), selections=selections)
    c_centers, c_logarea = grid_layout(H, W, px1, py1)
    f_centers, f_logarea = grid_layout(H, W, pxs, pys)

    if spec.mode == "mul":
        layout = mul_layout(selections, (npx1, npy1), (npxs, npys), spec.ratios)
        layout.centers = f_centers[layout.fine_rows % nf]
        layout.log_area = f_logarea[layout.fine_rows % nf]
        G = len(layout.owner)
        pos = ops.reshape(pos_embed(c_centers, c_logarea), (1, 1, n1, C))
        sts = ops.gather(ops.reshape(ops.transpose(Zf, (1, 0, 2, 3)), (T, B * nf, C)), layout.fine_rows, axis=1)
        sts = ops.transpose(sts, (1, 0, 2, 3))   # [G, T, r, C]
        sts_pos = ops.reshape(pos_embed(layout.centers, layout.log_area), (G, 1, rx * ry, C))
        return TokenSet("mul", Zc, pos, (npx1, npy1), sts_tokens=sts, sts_pos=sts_pos, sts_grid=(rx, ry),
                        layout=layout, **common)

    layout = mix_layout(selections, (npx1, npy1), (npxs, npys), spec.ratios, (H, W))
    centers_all = np.concatenate([c_centers, f_centers])
    logarea_all = np.concatenate([c_logarea, f_logarea])
    layout.centers = centers_all[layout.src]
    layout.log_area = logarea_all[layout.src]
    both = ops.concat([Zc, Zf], axis=2)                       # [B, T, n1+nf, C]
    flat = ops.reshape(ops.transpose(both, (1, 0, 2, 3)), (T, B * (n1 + nf), C))
    rows = layout.src + (np.arange(B) * (n1 + nf))[:, None]
    seq = ops.transpose(ops.gather(flat, rows, axis=1), (1, 0, 2, 3))   # [B, T, S, C]
    pos = ops.reshape(pos_embed(layout.centers, layout.log_area), (B, 1, layout.S, C))
    return TokenSet("mix", seq, pos, None, mask=layout.mask, layout=layout, **common)


def _fine_slots(i, j, rx, ry, npys):
    return [(i * rx + a) * npys + (j * ry + b) for a in range(rx) for b in range(ry)]


def mul_layout(selections, coarse_grid, fine_grid, ratios) -> MulLayout:
    (npx1, npy1), (_, npys), (rx, ry) = coarse_grid, fine_grid, ratios
    n1, nf = npx1 * npy1, fine_grid[0] * fine_grid[1]
    owner, rows = [], []
    for b, sel in enumerate(selections):
        for i, j in sel.sts_ids:
            owner.append(b * n1 + i * npy1 + j)
            rows.append([b * nf + s for s in _fine_slots(i, j, rx, ry, npys)])
    owner = np.asarray(owner, dtype=np.intp)
    rows = np.asarray(rows, dtype=np.intp).reshape(len(owner), rx * ry)
    return MulLayout(owner, rows, np.zeros((len(owner), rx * ry, 2)), np.zeros((len(owner), rx * ry)))


def mix_layout(selections, coarse_grid, fine_grid, ratios, field_shape) -> MixLayout:
    """Index maps for assembling and disassembling Adap_Mix sequences."""
    (npx1, npy1), (npxs, npys), (rx, ry) = coarse_grid, fine_grid, ratios
    H, W = field_shape
    px1, py1 = H // npx1, W // npy1
    n1, nf, r = npx1 * npy1, npxs * npys, rx * ry
    B = len(selections)
    lengths = np.array([(n1 - s.n_sts) + s.n_sts * r for s in selections], dtype=np.intp)
    S = int(lengths.max())
    src = np.zeros((B, S), dtype=np.intp)
    mask = np.zeros((B, S), dtype=bool)
    group_rows, coarse_src, fine_src = [], [], []
    sts_pixels = np.zeros((B, H, W), dtype=bool)
    G_before = 0
    for b, sel in enumerate(selections):
        order = [n1 + s for (i, j) in sel.sts_ids for s in _fine_slots(i, j, rx, ry, npys)]
        order = [i * npy1 + j for (i, j) in sel.kep_ids] + order
        src[b, :len(order)] = order
        mask[b, :len(order)] = True
        base = b * S
        K = len(sel.kep_ids)
        kept_pos = {ij: base + k for k, ij in enumerate(sel.kep_ids)}
        group_of = {}
        for g, ij in enumerate(sel.sts_ids):
            start = base + K + g * r
            group_rows.append(list(range(start, start + r)))
            group_of[ij] = g
        fine_row = np.zeros(nf, dtype=np.intp)
        for i in range(npx1):
            for j in range(npy1):
                ij = (i, j)
                slots = _fine_slots(i, j, rx, ry, npys)
                if ij in group_of:
                    g = group_of[ij]
                    coarse_src.append(("group", G_before + g))
                    start = base + K + g * r
                    for k, s in enumerate(slots):
                        fine_row[s] = start + k
                    sts_pixels[b, i * px1:(i + 1) * px1, j * py1:(j + 1) * py1] = True
                else:
                    coarse_src.append(("seq", kept_pos[ij]))
                    fine_row[slots] = kept_pos[ij]
        fine_src.append(fine_row)
        G_before += len(sel.sts_ids)
    n_rows = B * S
    coarse_idx = np.array([v if kind == "seq" else n_rows + v for kind, v in coarse_src], dtype=np.intp)
    return MixLayout(
        seq_len=lengths, S=S, mask=mask, src=src,
        centers=np.zeros((B, S, 2)), log_area=np.zeros((B, S)),
        group_rows=np.asarray(group_rows, dtype=np.intp).reshape(-1, r),
        coarse_src=coarse_idx, fine_src=np.concatenate(fine_src), sts_pixels=sts_pixels,
    )


def mix_lengths_per_frame(sel: STSSelection, r: int) -> list:
    """Per-frame Adap_Mix sequence lengths implied by the per-frame selections."""
    n1 = int(np.prod(sel.grid))
    return [(n1 - n) + n * r for n in sel.n_sts_per_frame]
