"""The full surrogate: preprocess -> tokenize -> attention -> decode."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import AttentionConfig, AttentionStack, LeadTimeEncoder
from .decode import DecodeHead, decode_adap_mix, decode_adap_mul, decode_uniform
from .diffmath import DTYPES, Tensor, ops
from .tokenize import (AdaptiveSpec, PatchEmbed, PosAreaEmbed, Preprocessor, _pair,
                       tokenize_adaptive, tokenize_uniform)

MODES = ("uniform", "mul", "mix")


@dataclass
class ModelConfig:
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    mode: str = "uniform"
    patch: int = 16          # uniform patch size
    p1: int = 32             # adaptive coarse patch
    psts: int = 16           # adaptive STS patch
    gamma: float = 0.2
    lead_max: int = 1
    systems: dict = field(default_factory=lambda: {"colliding_thermals": 4})
    seed: int = 0
    dtype: str = "fp32"

    def __post_init__(self):
        if isinstance(self.attention, dict):
            self.attention = AttentionConfig(**self.attention)
        self.mode = self.mode.lower()
        if self.mode not in MODES:
            raise ValueError(f"unknown tokenization mode {self.mode!r}")
        if self.attention.c_emb % 4:
            raise ValueError("C_emb must be divisible by 4 (C_uni = C_emb / 4)")
        if self.mode == "mix" and self.attention.variant == "avit":
            raise ValueError("Adap_Mix is not supported with AViT")
        if self.mode != "uniform":
            self.adaptive  # validates divisibility and gamma

    @property
    def adaptive(self) -> AdaptiveSpec:
        return AdaptiveSpec(_pair(self.p1), _pair(self.psts), self.gamma, self.mode)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class MateyModel:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.dtype = DTYPES[cfg.dtype]
        rng = np.random.default_rng(cfg.seed)
        C = cfg.attention.c_emb
        self.c_uni = C // 4
        self.pre = Preprocessor(self.c_uni, self.dtype)
        if cfg.mode == "uniform":
            self.embeds = {"patch": PatchEmbed(cfg.patch, self.c_uni, C, rng, "tok.patch", self.dtype)}
        else:
            self.embeds = {
                "coarse": PatchEmbed(cfg.p1, self.c_uni, C, rng, "tok.coarse", self.dtype),
                "fine": PatchEmbed(cfg.psts, self.c_uni, C, rng, "tok.fine", self.dtype),
            }
        self.pos = PosAreaEmbed(C, rng, self.dtype)
        self.lead = LeadTimeEncoder(C, rng, self.dtype)
        self.attention = AttentionStack(cfg.attention, rng, self.dtype)
        self.heads: dict = {}
        for name, c_k in cfg.systems.items():
            self._register(name, c_k, rng)

    # ------------------------------------------------------------- structure

    def _register(self, system: str, c_k: int, rng) -> None:
        self.pre.register(system, c_k, rng)
        C = self.cfg.attention.c_emb
        if self.cfg.mode == "uniform":
            self.heads[system] = {"patch": DecodeHead(self.cfg.patch, C, c_k, rng, f"post.{system}.patch", self.dtype)}
        else:
            self.heads[system] = {
                "coarse": DecodeHead(self.cfg.p1, C, c_k, rng, f"post.{system}.coarse", self.dtype),
                "fine": DecodeHead(self.cfg.psts, C, c_k, rng, f"post.{system}.fine", self.dtype),
            }

    def add_system(self, system: str, c_k: int, seed: int | None = None) -> None:
        """Fresh preprocessor map and decode heads for an unseen system."""
        if system in self.heads:
            raise ValueError(f"system {system!r} already registered")
        rng = np.random.default_rng([self.cfg.seed if seed is None else seed, len(self.heads)])
        self.cfg.systems[system] = c_k
        self._register(system, c_k, rng)

    def named_parameters(self) -> dict:
        params = list(self.pre.parameters())
        for e in self.embeds.values():
            params += e.parameters()
        params += self.pos.parameters() + self.lead.parameters() + self.attention.parameters()
        for heads in self.heads.values():
            for h in heads.values():
                params += h.parameters()
        out, seen = {}, set()
        for p in params:
            if id(p) not in seen:
                seen.add(id(p))
                out[p.name] = p
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def attention_parameter_names(self) -> list:
        return [n for n in self.named_parameters() if n.startswith("blocks.")]

    def astype(self, dtype: str) -> "MateyModel":
        """Cast parameters in place (fp32 <-> fp64)."""
        target = DTYPES[dtype]
        for p in self.parameters():
            p.data = p.data.astype(target)
            p.grad = None
        self.dtype = target
        self.cfg.dtype = dtype
        self.pos.dtype = self.lead.dtype = self.pre.dtype = target
        return self

    def uniform_view(self, which: str) -> "MateyModel":
        """A uniform-patch model sharing this adaptive model's parameters.

        ``which`` is "coarse" (patch p1, ConvT_1) or "fine" (patch p_sts, ConvT_2).
        """
        if self.cfg.mode == "uniform":
            raise ValueError("already a uniform model")
        view = copy.copy(self)
        view.cfg = copy.copy(self.cfg)
        view.cfg.mode = "uniform"
        view.cfg.patch = self.cfg.p1 if which == "coarse" else self.cfg.psts
        view.embeds = {"patch": self.embeds[which]}
        view.heads = {s: {"patch": h[which]} for s, h in self.heads.items()}
        return view

    # ------------------------------------------------------------- forward

    def forward(self, U: np.ndarray, t_lead, system: str):
        """Predict [B, H, W, C_k] from a normalised window [B, T, H, W, C_k].

        Returns (prediction Tensor, TokenSet of the first stream).
        """
        U = np.asarray(U)
        if U.ndim == 4:
            U = U[None]
        if system not in self.heads:
            raise KeyError(f"unknown system {system!r}")
        B, T = U.shape[:2]
        self.attention.reset_counters()
        lat = self.pre(Tensor(U.astype(self.dtype, copy=False)), system)
        lead = self.lead(np.broadcast_to(np.asarray(t_lead), (B,)), self.cfg.lead_max)
        heads = self.heads[system]
        if self.cfg.mode == "uniform":
            ts = tokenize_uniform(lat, self.embeds["patch"], self.pos)
            z = self.attention(ts.tokens, ts.pos, None, ts.grid, lead)
            last = _last_frame(z, (B,) + ts.grid + (z.shape[-1],))
            return decode_uniform(last, heads["patch"]), ts

        ts = tokenize_adaptive(lat, self.cfg.adaptive, self.embeds["coarse"], self.embeds["fine"], self.pos,
                               selection_field=U)
        C = self.cfg.attention.c_emb
        if self.cfg.mode == "mix":
            z = self.attention(ts.tokens, ts.pos, ts.mask, None, lead)
            last = _last_frame(z, (B, ts.layout.S, C))
            pred = decode_adap_mix(last, ts.layout, ts.coarse_grid, ts.fine_grid, heads["coarse"], heads["fine"])
            return pred, ts

        zc = self.attention(ts.tokens, ts.pos, None, ts.grid, lead)
        last_c = _last_frame(zc, (B,) + ts.grid + (C,))
        G = len(ts.layout.owner)
        if G:
            n1 = ts.grid[0] * ts.grid[1]
            glead = ops.gather(lead, ts.layout.owner // n1, axis=0)
            zs = self.attention(ts.sts_tokens, ts.sts_pos, None, ts.sts_grid, glead)
            last_s = _last_frame(zs, (G,) + ts.sts_grid + (C,))
        else:
            last_s = Tensor(np.zeros((0,) + ts.sts_grid + (C,), dtype=self.dtype))
        return decode_adap_mul(last_c, last_s, ts.layout, heads["coarse"], heads["fine"]), ts

    __call__ = forward

    def predict(self, U, t_lead, system: str) -> np.ndarray:
        from .diffmath import no_grad
        with no_grad():
            return self.forward(U, t_lead, system)[0].data


def _last_frame(z, shape) -> Tensor:
    T = z.shape[1]
    return ops.reshape(ops.gather(z, np.array([T - 1]), axis=1), shape)


def count_params(model: MateyModel) -> int:
    return int(sum(p.size for p in model.parameters()))
