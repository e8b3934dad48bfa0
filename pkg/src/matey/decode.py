"""Postprocessor: tokens of the last frame back to a [H, W, C_k] field."""

from __future__ import annotations

import numpy as np

from .diffmath import Parameter, Tensor, ops, trunc_normal
from .tokenize import MixLayout, MulLayout


class DecodeHead:
    """Transposed convolution C_emb -> C_k with kernel = stride = patch."""

    def __init__(self, patch, c_emb: int, c_k: int, rng, name: str, dtype=np.float32):
        px, py = (patch, patch) if np.isscalar(patch) else patch
        self.px, self.py = int(px), int(py)
        self.weight = Parameter(trunc_normal(rng, (c_emb, self.px, self.py, c_k), dtype=dtype), f"{name}.weight")
        self.bias = Parameter(np.zeros(c_k, dtype=dtype), f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, z) -> Tensor:
        return ops.conv_transpose2d_patch(z, self.weight, self.bias)


def decode_uniform(z_last, head: DecodeHead) -> Tensor:
    """[..., npx, npy, C_emb] -> [..., npx*p_x, npy*p_y, C_k]."""
    if z_last.ndim < 3:
        raise ValueError(f"decode_uniform: expected grid tokens, got shape {tuple(z_last.shape)}")
    return head(z_last)


def decode_adap_mul(z_coarse, z_sts, layout: MulLayout, head1: DecodeHead, head2: DecodeHead) -> Tensor:
    """Coarse reconstruction plus an additive STS correction on refined patches.

    z_coarse: [B, npx1, npy1, C]; z_sts: [G, rx, ry, C] ordered like
    ``layout.owner``.
    """
    if z_sts.shape[0] != len(layout.owner):
        raise ValueError(f"decode_adap_mul: {z_sts.shape[0]} STS groups for {len(layout.owner)} selected patches")
    u = head1(z_coarse)                                   # [B, H, W, Ck]
    if len(layout.owner) == 0:
        return u
    B, npx1, npy1, _ = z_coarse.shape
    H, W, Ck = u.shape[1:]
    px1, py1 = H // npx1, W // npy1
    patches = ops.reshape(u, (B, npx1, px1, npy1, py1, Ck))
    patches = ops.reshape(ops.transpose(patches, (0, 1, 3, 2, 4, 5)), (B * npx1 * npy1, px1, py1, Ck))
    correction = head2(z_sts)                              # [G, px1, py1, Ck]
    patches = ops.scatter_add(patches, layout.owner, correction, axis=0)
    patches = ops.transpose(ops.reshape(patches, (B, npx1, npy1, px1, py1, Ck)), (0, 1, 3, 2, 4, 5))
    return ops.reshape(patches, (B, H, W, Ck))


def assemble_mix_grids(z_seq, layout: MixLayout, coarse_grid, fine_grid):
    """Steps 1-2 of the Adap_Mix reconstruction.

    Returns the full coarse grid (refined slots = mean of their STS group)
    and the full fine grid (kept slots = their coarse token repeated).
    """
    B, S, C = z_seq.shape
    flat = ops.reshape(z_seq, (B * S, C))
    parts = [flat]
    if len(layout.group_rows):
        groups = ops.gather(flat, layout.group_rows, axis=0)          # [G, r, C]
        parts.append(ops.mean(groups, axis=1))
    src = ops.concat(parts, axis=0) if len(parts) > 1 else flat
    coarse = ops.reshape(ops.gather(src, layout.coarse_src, axis=0), (B,) + tuple(coarse_grid) + (C,))
    fine = ops.reshape(ops.gather(flat, layout.fine_src, axis=0), (B,) + tuple(fine_grid) + (C,))
    return coarse, fine


def decode_adap_mix(z_seq, layout: MixLayout, coarse_grid, fine_grid,
                    head1: DecodeHead, head2: DecodeHead) -> Tensor:
    """Four-step Adap_Mix reconstruction of a padded mixed sequence [B, S, C]."""
    coarse, fine = assemble_mix_grids(z_seq, layout, coarse_grid, fine_grid)
    u_coarse = head1(coarse)
    u_fine = head2(fine)
    if u_coarse.shape != u_fine.shape:
        raise ValueError(f"decode_adap_mix: coarse {u_coarse.shape} vs fine {u_fine.shape} reconstructions")
    return ops.where(layout.sts_pixels[..., None], u_fine, u_coarse)
