"""Multihead self-attention and the ViT / SViT / AViT block stacks.

Tokens travel as ``[B, T, S, C]``: T frames, S spatial tokens per frame
(a row-major grid, or an Adap_Mix sequence with a key-padding mask [B, S]).

Every MHSA and MLP output is instance-normalised before it joins the
residual stream (``z = Norm(F(x)) + x``). For ViT the norm runs over the whole
spatiotemporal sequence; for SViT and AViT over the spatial tokens of each
frame, so a single-frame time axis does not collapse. Normalising the sum
instead would subtract the token-constant lead-time vector right away.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffmath import Parameter, Tensor, ops, trunc_normal

VARIANTS = ("vit", "svit", "avit")


@dataclass
class AttentionConfig:
    variant: str = "svit"
    depth: int = 2
    heads: int = 2
    c_emb: int = 64
    mlp_ratio: int = 4
    share_axial: bool = True
    norm_affine: bool = True

    def __post_init__(self):
        self.variant = self.variant.lower()
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attention variant {self.variant!r}")
        if self.c_emb % self.heads:
            raise ValueError(f"C_emb={self.c_emb} not divisible by heads={self.heads}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")


@dataclass
class OpCounters:
    """Score elements (summed over heads) and MLP multiply-accumulates per block."""

    scores: list = field(default_factory=list)
    mlp_macs: list = field(default_factory=list)

    def reset(self, depth: int) -> None:
        self.scores = [0] * depth
        self.mlp_macs = [0] * depth

    @property
    def total_scores(self) -> int:
        return int(sum(self.scores))


class _Counting:
    __slots__ = ("counters", "block")

    def __init__(self, counters, block):
        self.counters, self.block = counters, block

    def scores(self, n):
        if self.counters is not None:
            self.counters.scores[self.block] += int(n)

    def macs(self, n):
        if self.counters is not None:
            self.counters.mlp_macs[self.block] += int(n)


def _affine(rng, c_in, c_out, name, dtype):
    return (Parameter(trunc_normal(rng, (c_in, c_out), dtype=dtype), f"{name}.weight"),
            Parameter(np.zeros(c_out, dtype=dtype), f"{name}.bias"))


class MHSA:
    def __init__(self, c_emb, heads, rng, name, dtype=np.float32):
        self.c_emb, self.heads = c_emb, heads
        self.q = _affine(rng, c_emb, c_emb, f"{name}.q", dtype)
        self.k = _affine(rng, c_emb, c_emb, f"{name}.k", dtype)
        self.v = _affine(rng, c_emb, c_emb, f"{name}.v", dtype)
        self.o = _affine(rng, c_emb, c_emb, f"{name}.o", dtype)

    def parameters(self):
        return [*self.q, *self.k, *self.v, *self.o]

    def __call__(self, x, mask=None, count: _Counting | None = None) -> Tensor:
        """Attend along axis -2 of ``x`` [..., n, C].

        ``mask`` (True = real key) broadcasts against ``x.shape[:-1]``.
        """
        *lead, n, C = x.shape
        if C != self.c_emb:
            raise ValueError(f"mhsa: expected C_emb={self.c_emb}, got shape {tuple(x.shape)}")
        h, d = self.heads, C // self.heads
        lead = tuple(lead)

        def split(t):
            return ops.swapaxes(ops.reshape(t, lead + (n, h, d)), -2, -3)   # [..., h, n, d]

        q = split(ops.linear(x, *self.q))
        k = split(ops.linear(x, *self.k))
        v = split(ops.linear(x, *self.v))
        scores = ops.scale(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / np.sqrt(d))
        key_mask = None
        if mask is not None:
            key_mask = np.broadcast_to(np.asarray(mask, dtype=bool), lead + (n,))[..., None, None, :]
        att = ops.softmax(scores, axis=-1, mask=key_mask)
        out = ops.reshape(ops.swapaxes(ops.matmul(att, v), -2, -3), lead + (n, C))
        if count is not None:
            count.scores(int(np.prod(lead, dtype=np.int64)) * h * n * n)
        return ops.linear(out, *self.o)


class MLP:
    def __init__(self, c_in, hidden, c_out, rng, name, dtype=np.float32):
        self.fc1 = _affine(rng, c_in, hidden, f"{name}.fc1", dtype)
        self.fc2 = _affine(rng, hidden, c_out, f"{name}.fc2", dtype)

    def parameters(self):
        return [*self.fc1, *self.fc2]

    def __call__(self, x, count: _Counting | None = None) -> Tensor:
        if count is not None:
            tokens = int(np.prod(x.shape[:-1], dtype=np.int64))
            count.macs(tokens * (self.fc1[0].size + self.fc2[0].size))
        return ops.linear(ops.gelu(ops.linear(x, *self.fc1)), *self.fc2)


class InstanceNorm:
    def __init__(self, c_emb, name, affine=True, dtype=np.float32):
        self.affine = affine
        self.weight = Parameter(np.ones(c_emb, dtype=dtype), f"{name}.weight") if affine else None
        self.bias = Parameter(np.zeros(c_emb, dtype=dtype), f"{name}.bias") if affine else None

    def parameters(self):
        return [self.weight, self.bias] if self.affine else []

    def __call__(self, x, axis, mask=None) -> Tensor:
        y = ops.instance_norm(x, axis=axis, mask=mask)
        if self.affine:
            y = ops.add(ops.mul(y, self.weight), self.bias)
        return y


class LeadTimeEncoder:
    """Two-layer GELU MLP on t_lead / lead_max."""

    def __init__(self, c_emb, rng, dtype=np.float32):
        self.mlp = MLP(1, c_emb, c_emb, rng, "lead", dtype)
        self.dtype = dtype

    def parameters(self):
        return self.mlp.parameters()

    def __call__(self, t_lead, lead_max: int) -> Tensor:
        t = np.atleast_1d(np.asarray(t_lead))
        if (t < 1).any() or (t > lead_max).any():
            raise ValueError(f"lead time {t.tolist()} outside [1, {lead_max}]")
        return self.mlp(Tensor((t / lead_max).astype(self.dtype)[:, None]))


# ------------------------------------------------------------------ blocks

def _lead(lead, ndim):
    # [B, C] -> broadcastable to [B, 1, ..., 1, C]
    return ops.reshape(lead, (lead.shape[0],) + (1,) * (ndim - 2) + (lead.shape[1],))


class ViTBlock:
    def __init__(self, cfg: AttentionConfig, rng, name, dtype=np.float32):
        C = cfg.c_emb
        self.attn = MHSA(C, cfg.heads, rng, f"{name}.attn", dtype)
        self.norm1 = InstanceNorm(C, f"{name}.norm1", cfg.norm_affine, dtype)
        self.mlp = MLP(C, cfg.mlp_ratio * C, C, rng, f"{name}.mlp", dtype)
        self.norm2 = InstanceNorm(C, f"{name}.norm2", cfg.norm_affine, dtype)

    def parameters(self):
        return [*self.attn.parameters(), *self.norm1.parameters(), *self.mlp.parameters(), *self.norm2.parameters()]

    def __call__(self, x, mask=None, grid=None, lead=None, count=None) -> Tensor:
        B, T, S, C = x.shape
        h = ops.reshape(x, (B, T * S, C))
        m = None if mask is None else np.repeat(np.asarray(mask)[:, None, :], T, axis=1).reshape(B, T * S)
        z = ops.add(self.norm1(self.attn(h, m, count), axis=1, mask=m), h)
        if lead is not None:
            z = ops.add(z, _lead(lead, 3))
        z = ops.add(self.norm2(self.mlp(z, count), axis=1, mask=m), z)
        return ops.reshape(z, (B, T, S, C))


class SViTBlock:
    def __init__(self, cfg: AttentionConfig, rng, name, dtype=np.float32):
        C = cfg.c_emb
        self.time = MHSA(C, cfg.heads, rng, f"{name}.time", dtype)
        self.norm_t = InstanceNorm(C, f"{name}.norm_t", cfg.norm_affine, dtype)
        self.space = MHSA(C, cfg.heads, rng, f"{name}.space", dtype)
        self.norm_s = InstanceNorm(C, f"{name}.norm_s", cfg.norm_affine, dtype)
        self.mlp = MLP(C, cfg.mlp_ratio * C, C, rng, f"{name}.mlp", dtype)
        self.norm_m = InstanceNorm(C, f"{name}.norm_m", cfg.norm_affine, dtype)

    def parameters(self):
        mods = (self.time, self.norm_t, self.space, self.norm_s, self.mlp, self.norm_m)
        return [p for m in mods for p in m.parameters()]

    def _time(self, x, mask, lead, count):
        fmask = None if mask is None else np.asarray(mask)[:, None, :]   # [B, 1, S]
        xt = ops.transpose(x, (0, 2, 1, 3))                               # [B, S, T, C]
        tmask = None if mask is None else np.asarray(mask)[:, :, None]
        att = ops.transpose(self.time(xt, tmask, count), (0, 2, 1, 3))
        z = ops.add(self.norm_t(att, axis=2, mask=fmask), x)
        if lead is not None:
            z = ops.add(z, _lead(lead, 4))
        return z, fmask

    def _mlp(self, z, fmask, count):
        return ops.add(self.norm_m(self.mlp(z, count), axis=2, mask=fmask), z)

    def __call__(self, x, mask=None, grid=None, lead=None, count=None) -> Tensor:
        z, fmask = self._time(x, mask, lead, count)
        z = ops.add(self.norm_s(self.space(z, fmask, count), axis=2, mask=fmask), z)
        return self._mlp(z, fmask, count)


class AViTBlock(SViTBlock):
    def __init__(self, cfg: AttentionConfig, rng, name, dtype=np.float32):
        C = cfg.c_emb
        self.time = MHSA(C, cfg.heads, rng, f"{name}.time", dtype)
        self.norm_t = InstanceNorm(C, f"{name}.norm_t", cfg.norm_affine, dtype)
        self.ax = MHSA(C, cfg.heads, rng, f"{name}.axial_x", dtype)
        self.norm_x = InstanceNorm(C, f"{name}.norm_x", cfg.norm_affine, dtype)
        if cfg.share_axial:
            self.ay, self.norm_y = self.ax, self.norm_x
        else:
            self.ay = MHSA(C, cfg.heads, rng, f"{name}.axial_y", dtype)
            self.norm_y = InstanceNorm(C, f"{name}.norm_y", cfg.norm_affine, dtype)
        self.mlp = MLP(C, cfg.mlp_ratio * C, C, rng, f"{name}.mlp", dtype)
        self.norm_m = InstanceNorm(C, f"{name}.norm_m", cfg.norm_affine, dtype)
        self.shared = cfg.share_axial

    def parameters(self):
        mods = [self.time, self.norm_t, self.ax, self.norm_x]
        if not self.shared:
            mods += [self.ay, self.norm_y]
        mods += [self.mlp, self.norm_m]
        return [p for m in mods for p in m.parameters()]

    def __call__(self, x, mask=None, grid=None, lead=None, count=None) -> Tensor:
        if mask is not None or grid is None:
            raise ValueError("AViT needs grid-shaped tokens; mixed-resolution (Adap_Mix) sequences are not supported")
        B, T, S, C = x.shape
        npx, npy = grid
        z, _ = self._time(x, None, lead, count)
        g = ops.reshape(z, (B, T, npx, npy, C))
        # x-axis: sequences of length npx, one per (frame, column)
        gx = ops.transpose(g, (0, 1, 3, 2, 4))
        ax = ops.transpose(self.ax(gx, None, count), (0, 1, 3, 2, 4))
        z = ops.add(self.norm_x(ops.reshape(ax, (B, T, S, C)), axis=2), z)
        g = ops.reshape(z, (B, T, npx, npy, C))
        ay = ops.reshape(self.ay(g, None, count), (B, T, S, C))
        z = ops.add(self.norm_y(ay, axis=2), z)
        return self._mlp(z, None, count)


_BLOCKS = {"vit": ViTBlock, "svit": SViTBlock, "avit": AViTBlock}


class AttentionStack:
    """L cascaded blocks of one variant; E_pos and MLP(t_lead) enter block 1."""

    def __init__(self, cfg: AttentionConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.blocks = [_BLOCKS[cfg.variant](cfg, rng, f"blocks.{l}", dtype) for l in range(cfg.depth)]
        self.counters = OpCounters()
        self.counters.reset(cfg.depth)

    def parameters(self):
        return [p for b in self.blocks for p in b.parameters()]

    def reset_counters(self):
        self.counters.reset(self.cfg.depth)

    def __call__(self, tokens, pos=None, mask=None, grid=None, lead=None) -> Tensor:
        if self.cfg.variant == "avit" and (mask is not None or grid is None):
            raise ValueError("AViT needs grid-shaped tokens; mixed-resolution (Adap_Mix) sequences are not supported")
        z = tokens if pos is None else ops.add(tokens, pos)
        for l, block in enumerate(self.blocks):
            z = block(z, mask, grid, lead if l == 0 else None, _Counting(self.counters, l))
        return z


# ------------------------------------------------------------------ functional entry points

def mhsa(seq, mask, attn: MHSA, counters: OpCounters | None = None) -> Tensor:
    """Self-attention over a [n, C] (or batched [..., n, C]) sequence."""
    if counters is not None and not counters.scores:
        counters.reset(1)
    return attn(seq, mask, _Counting(counters, 0) if counters is not None else None)


def lead_time_embed(t_lead, lead_max: int, encoder: LeadTimeEncoder) -> Tensor:
    return encoder(t_lead, lead_max)


def _forward(stack, tokens, mask, lead, pos, grid):
    if stack.cfg.variant not in ("vit", "svit", "avit"):
        raise ValueError(stack.cfg.variant)
    stack.reset_counters()
    return stack(tokens, pos=pos, mask=mask, grid=grid, lead=lead)


def vit_forward(tokens, mask, lead, stack: AttentionStack, pos=None, grid=None) -> Tensor:
    assert stack.cfg.variant == "vit"
    return _forward(stack, tokens, mask, lead, pos, grid)


def svit_forward(tokens, mask, lead, stack: AttentionStack, pos=None, grid=None) -> Tensor:
    assert stack.cfg.variant == "svit"
    return _forward(stack, tokens, mask, lead, pos, grid)


def avit_forward(tokens, mask, lead, stack: AttentionStack, pos=None, grid=None) -> Tensor:
    assert stack.cfg.variant == "avit"
    return _forward(stack, tokens, mask, lead, pos, grid)
