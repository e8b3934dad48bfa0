"""Training, fine-tuning, evaluation and checkpoint I/O."""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .diffmath import Parameter, Tensor, ops
from .fields import NormStats, Trajectory, compute_norm_stats, nrmse, valid_pairs
from .model import MateyModel, ModelConfig

CKPT_MAGIC = b"MTCK"
CKPT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")
FREEZE_MODES = ("all", "prepost")


class DivergenceError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    steps: int = 200
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    history: int = 10
    lead_min: int = 1
    lead_max: int = 1
    freeze: str = "all"
    log_every: int = 50
    eval_every: int = 0
    stride: int = 1

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.betas = tuple(self.betas)
        self.freeze = self.freeze.lower()
        if self.freeze not in FREEZE_MODES:
            raise ValueError(f"unknown freeze mode {self.freeze!r}; expected one of {FREEZE_MODES}")
        if not 1 <= self.lead_min <= self.lead_max:
            raise ValueError(f"bad lead range [{self.lead_min}, {self.lead_max}]")
        if self.model.lead_max < self.lead_max:
            self.model.lead_max = self.lead_max

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ------------------------------------------------------------------ optimiser

class AdamW:
    """Adam with decoupled weight decay (``p -= lr * wd * p`` before the Adam step)."""

    def __init__(self, params: dict, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.lr, self.betas, self.eps, self.wd = lr, tuple(betas), eps, weight_decay
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if not p.trainable or p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data *= 1.0 - self.lr * self.wd
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def apply_freeze(model: MateyModel, mode: str) -> list:
    """Set trainable flags; returns the frozen parameter names."""
    mode = mode.lower()
    if mode not in FREEZE_MODES:
        raise ValueError(f"unknown freeze mode {mode!r}")
    frozen = set(model.attention_parameter_names()) if mode == "prepost" else set()
    for name, p in model.named_parameters().items():
        p.trainable = name not in frozen
    return sorted(frozen)


# ------------------------------------------------------------------ data

@dataclass
class SystemData:
    name: str
    trajectories: list
    norm: NormStats
    pairs: list       # (traj index, start, lead)

    @classmethod
    def build(cls, name, trajectories, T, lead_min, lead_max, stride=1, norm=None):
        if not trajectories:
            raise ValueError(f"system {name!r}: no trajectories")
        pairs = [(k, s, l) for k, tr in enumerate(trajectories)
                 for s, l in valid_pairs(tr.n_frames, T, lead_min, lead_max, stride)]
        if not pairs:
            raise ValueError(f"system {name!r}: trajectories too short for T={T}, lead_min={lead_min}")
        return cls(name, list(trajectories), norm or compute_norm_stats(trajectories), pairs)

    def batch(self, picks, T):
        wins, tgts, leads = [], [], []
        for k, s, l in picks:
            d = self.trajectories[k].data
            wins.append(d[s:s + T])
            tgts.append(d[s + T - 1 + l])
            leads.append(l)
        return (self.norm.normalize(np.stack(wins)), self.norm.normalize(np.stack(tgts)), np.array(leads))


def _as_system_map(datasets) -> dict:
    if isinstance(datasets, dict):
        return {k: list(v) for k, v in datasets.items()}
    trajs = list(datasets)
    if not trajs:
        raise ValueError("empty dataset")
    out: dict = {}
    for tr in trajs:
        out.setdefault(tr.spec.name, []).append(tr)
    return out


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = ops.sub(pred, Tensor(target.astype(pred.dtype, copy=False)))
    return ops.mean(ops.mul(diff, diff))


# ------------------------------------------------------------------ training loop

@dataclass
class TrainState:
    model: MateyModel
    optimizer: AdamW
    norms: dict
    config: TrainConfig
    step: int = 0


def _check_systems(model: MateyModel, data: dict) -> None:
    for name, sd in data.items():
        if name not in model.heads:
            raise ValueError(f"dataset system {name!r} is not registered in the model")
        c_k = sd.trajectories[0].spec.n_channels
        if model.cfg.systems[name] != c_k:
            raise ValueError(f"system {name!r}: model expects {model.cfg.systems[name]} channels, data has {c_k}")


def run_training(state: TrainState, datasets, test_sets=None, on_metrics: Callable | None = None) -> list:
    cfg = state.config
    sysmap = _as_system_map(datasets)
    data = {n: SystemData.build(n, t, cfg.history, cfg.lead_min, cfg.lead_max, cfg.stride, state.norms.get(n))
            for n, t in sysmap.items()}
    _check_systems(state.model, data)
    for n, sd in data.items():
        state.norms[n] = sd.norm
    tests = _as_system_map(test_sets) if test_sets else {}
    names = sorted(data)
    rng = np.random.default_rng([cfg.seed, state.step])
    params = state.model.named_parameters()
    state.optimizer.params = params
    records = []
    t0 = time.perf_counter()
    for _ in range(cfg.steps):
        sysname = names[state.step % len(names)]   # round-robin over systems
        sd = data[sysname]
        picks = [sd.pairs[i] for i in rng.integers(0, len(sd.pairs), size=cfg.batch_size)]
        U, Y, leads = sd.batch(picks, cfg.history)
        state.optimizer.zero_grad()
        pred, ts = state.model.forward(U, leads, sysname)
        loss = mse_loss(pred, Y)
        lval = float(loss.data)
        if not np.isfinite(lval):
            raise DivergenceError(f"non-finite loss at step {state.step}")
        loss.backward()
        state.optimizer.step()
        state.step += 1
        if cfg.log_every and (state.step % cfg.log_every == 0 or state.step == 1):
            rec = {"step": state.step, "system": sysname, "train_loss": lval,
                   "train_nrmse": batch_nrmse(sd.norm, pred.data, Y),
                   "wall_time": time.perf_counter() - t0}
            rec.update(sequence_stats(ts, state.model))
            if cfg.eval_every and tests and state.step % cfg.eval_every == 0:
                rec["test_nrmse"] = {n: evaluate(state.model, state.norms[n], tr, cfg.history,
                                                 cfg.lead_min, cfg.lead_max, seed=cfg.seed)["mean"]
                                     for n, tr in tests.items() if n in state.norms}
            records.append(rec)
            if on_metrics:
                on_metrics(rec)
    return records


def batch_nrmse(norm: NormStats, pred_n, target_n) -> float:
    """Mean per-sample NRMSE in physical units (normalised constant channels would hit the std floor)."""
    pred, tgt = norm.denormalize(pred_n), norm.denormalize(target_n)
    return float(np.mean([nrmse(p, y) for p, y in zip(pred, tgt)]))


def sequence_stats(ts, model: MateyModel) -> dict:
    from .costmodel import cost_report
    out = {"mode": model.cfg.mode}
    if model.cfg.mode == "uniform":
        out["seq_len"] = int(ts.tokens.shape[2])
        out["patch"] = model.cfg.patch
        return out
    rep = cost_report(ts.selections, model.cfg.p1, model.cfg.psts, model.cfg.gamma, model.cfg.attention.variant)
    out.update(gamma=model.cfg.gamma, p1=model.cfg.p1, psts=model.cfg.psts,
               L_avg_mix=rep.L_avg_mix, L_lin=rep.L_lin, L_quad=rep.L_quad)
    return out


def train(config: TrainConfig, datasets, test_sets=None, on_metrics=None, model: MateyModel | None = None):
    """Train from scratch; returns (TrainState, metrics records)."""
    model = model or MateyModel(config.model)
    apply_freeze(model, config.freeze)
    opt = AdamW(model.named_parameters(), config.lr, config.betas, config.eps, config.weight_decay)
    state = TrainState(model, opt, {}, config)
    records = run_training(state, datasets, test_sets, on_metrics)
    return state, records


def finetune(checkpoint, config: TrainConfig, datasets, test_sets=None, on_metrics=None):
    """Continue from a checkpoint with ``config.freeze`` in {"all", "prepost"}.

    Systems in ``datasets`` unknown to the checkpoint get fresh
    preprocessor/decode heads; normalisation stats come from the new data.
    """
    state = load_checkpoint(checkpoint) if not isinstance(checkpoint, TrainState) else checkpoint
    model = state.model
    sysmap = _as_system_map(datasets)
    for name, trajs in sysmap.items():
        if name not in model.heads:
            model.add_system(name, trajs[0].spec.n_channels, seed=config.seed)
    if config.lead_max > model.cfg.lead_max:
        raise ValueError(f"lead_max {config.lead_max} exceeds the checkpoint's encoder range {model.cfg.lead_max}")
    config.model = model.cfg
    apply_freeze(model, config.freeze)
    opt = AdamW(model.named_parameters(), config.lr, config.betas, config.eps, config.weight_decay)
    new_state = TrainState(model, opt, {n: v for n, v in state.norms.items() if n not in sysmap}, config, 0)
    records = run_training(new_state, sysmap, test_sets, on_metrics)
    return new_state, records


# ------------------------------------------------------------------ evaluation

def evaluate(model, norm: NormStats, trajectories: Iterable[Trajectory], T: int, lead_min: int, lead_max: int,
             seed: int = 0, stride: int = 1, max_samples: int | None = None, batch_size: int = 8) -> dict:
    """NRMSE (physical units) over sampled (window, lead) pairs of held-out trajectories."""
    trajs = list(trajectories)
    if not trajs:
        raise ValueError("evaluate: empty dataset")
    system = trajs[0].spec.name
    sd = SystemData.build(system, trajs, T, lead_min, lead_max, stride, norm)
    rng = np.random.default_rng(seed)
    # one lead per window, drawn uniformly from the compatible range
    by_window: dict = {}
    for k, s, l in sd.pairs:
        by_window.setdefault((k, s), []).append(l)
    picks = [(k, s, int(rng.choice(ls))) for (k, s), ls in sorted(by_window.items())]
    if max_samples is not None and len(picks) > max_samples:
        idx = np.sort(rng.choice(len(picks), size=max_samples, replace=False))
        picks = [picks[i] for i in idx]
    scores = []
    for i in range(0, len(picks), batch_size):
        chunk = picks[i:i + batch_size]
        U, _, leads = sd.batch(chunk, T)
        pred = norm.denormalize(model.predict(U, leads, system))
        for p, (k, s, l) in zip(pred, chunk):
            scores.append(nrmse(p, sd.trajectories[k].data[s + T - 1 + l]))
    return {"mean": float(np.mean(scores)), "std": float(np.std(scores)), "n": len(scores)}


class ZeroPredictor:
    """Baseline that predicts zero in normalised space (the training mean)."""

    def predict(self, U, t_lead, system):
        U = np.asarray(U)
        return np.zeros((U.shape[0],) + U.shape[2:], dtype=np.float32)


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(state: TrainState, path) -> None:
    params = state.model.named_parameters()
    manifest, blobs, offset = [], [], 0
    sections = [("param", params)]
    sections += [("adam_m", state.optimizer.m), ("adam_v", state.optimizer.v)]
    for kind, arrays in sections:
        for name, arr in arrays.items():
            data = arr.data if isinstance(arr, Parameter) else arr
            raw = np.ascontiguousarray(data, dtype="<f4").tobytes()
            entry = {"kind": kind, "name": name, "shape": list(data.shape), "offset": offset, "nbytes": len(raw)}
            if kind == "param":
                entry["trainable"] = bool(arr.trainable)
            manifest.append(entry)
            blobs.append(raw)
            offset += len(raw)
    header = {
        "format_version": CKPT_VERSION,
        "config": state.config.to_dict(),
        "norm_stats": {n: s.to_dict() for n, s in state.norms.items()},
        "step": state.step,
        "optimizer_t": state.optimizer.t,
        "tensors": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)))
        fh.write(blob)
        for raw in blobs:
            fh.write(raw)


def read_checkpoint_header(path) -> tuple:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} is not supported (expected {CKPT_VERSION})")
    header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    return header, raw[_PREFIX.size + hlen:]


def load_checkpoint(path) -> TrainState:
    header, body = read_checkpoint_header(path)
    cfg = TrainConfig.from_dict(header["config"])
    model = MateyModel(cfg.model)
    params = model.named_parameters()
    opt = AdamW(params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    opt.t = int(header["optimizer_t"])
    stored = {e["name"] for e in header["tensors"] if e["kind"] == "param"}
    if stored != set(params):
        missing, extra = sorted(set(params) - stored), sorted(stored - set(params))
        raise CheckpointError(f"{path}: topology mismatch (missing {missing[:5]}, unexpected {extra[:5]})")
    for e in header["tensors"]:
        arr = np.frombuffer(body, dtype="<f4", count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"])
        if e["kind"] == "param":
            p = params[e["name"]]
            if tuple(p.shape) != tuple(e["shape"]):
                raise CheckpointError(f"{path}: shape mismatch for {e['name']}: {p.shape} vs {e['shape']}")
            p.data = arr.astype(model.dtype)
            p.trainable = e.get("trainable", True)
        else:
            (opt.m if e["kind"] == "adam_m" else opt.v)[e["name"]] = arr.astype(model.dtype)
    norms = {n: NormStats.from_dict(d) for n, d in header["norm_stats"].items()}
    return TrainState(model, opt, norms, cfg, int(header["step"]))


def checkpoint_param_bytes(path, names) -> dict:
    """Raw on-disk bytes of the named parameter sections."""
    header, body = read_checkpoint_header(path)
    out = {}
    for e in header["tensors"]:
        if e["kind"] == "param" and e["name"] in names:
            out[e["name"]] = body[e["offset"]:e["offset"] + e["nbytes"]]
    return out
