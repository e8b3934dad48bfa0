"""Command-line entry point: ``matey <command> [flags]``.

Commands read an optional TOML/JSON config (``--config``); flags override
file values; every run writes ``resolved_config.json`` into ``--out`` and
can be replayed with ``--config <out>/resolved_config.json``.

Exit codes: 0 success, 1 failed invariant, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .attention import AttentionConfig
from .datagen import ProxyDynParams, generate_dataset, generate_trajectory, sample_config
from .fields import load_trajectory
from .model import MateyModel, ModelConfig

log = logging.getLogger("matey")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


class InvariantFailure(RuntimeError):
    pass


# ------------------------------------------------------------------ config schema

def _keys(cls, drop=()):
    return {f.name for f in fields(cls)} - set(drop)


SCHEMA = {
    "": {"seed", "checkpoint"},
    "datagen": {"n", "grid", "frames", "L", "kappa", "beta", "dt", "steps_per_frame"},
    "data": {"train", "test", "split"},
    "model": _keys(ModelConfig, ("attention", "systems", "seed")),
    "attention": _keys(AttentionConfig),
    "train": {"steps", "batch_size", "lr", "weight_decay", "betas", "eps", "history", "lead_min",
              "lead_max", "freeze", "log_every", "eval_every", "stride"},
    "eval": {"split", "lead_min", "lead_max", "max_samples", "batch_size"},
    "cost": {"gammas", "variants", "frames", "n_fields"},
    "gradcheck": {"grid", "frames", "epsilon", "tol", "max_coords", "param_scale"},
}

DEFAULTS = {
    "seed": 0,
    "checkpoint": None,
    "datagen": {"n": 4, "grid": 64, "frames": 40, "L": 1.0, "kappa": 1e-4, "beta": 0.01, "dt": 0.01,
                "steps_per_frame": 5},
    "data": {"train": None, "test": None, "split": [0.8, 0.2]},
    "model": {"mode": "uniform", "patch": 16, "p1": 32, "psts": 16, "gamma": 0.2, "lead_max": 1,
              "dtype": "fp32"},
    "attention": {"variant": "svit", "depth": 2, "heads": 2, "c_emb": 64, "mlp_ratio": 4,
                  "share_axial": True, "norm_affine": True},
    "train": {"steps": 200, "batch_size": 4, "lr": 1e-4, "weight_decay": 0.01, "betas": [0.9, 0.999],
              "eps": 1e-8, "history": 10, "lead_min": 1, "lead_max": 1, "freeze": "all", "log_every": 10,
              "eval_every": 0, "stride": 1},
    "eval": {"split": "test", "lead_min": 1, "lead_max": 1, "max_samples": None, "batch_size": 8},
    "cost": {"gammas": [0.0, 0.1, 0.2, 0.5, 1.0], "variants": None, "frames": 4, "n_fields": 4},
    "gradcheck": {"grid": 16, "frames": 2, "epsilon": 1e-5, "tol": 1e-4, "max_coords": 32, "param_scale": 0.3},
}


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    if path.suffix.lower() == ".json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from None
    try:
        import tomllib
    except ModuleNotFoundError:   # python < 3.11
        import tomli as tomllib
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None


def validate_keys(cfg: dict) -> None:
    for key, val in cfg.items():
        if key in SCHEMA and key:
            if not isinstance(val, dict):
                raise ConfigError(f"config key '{key}' must be a table/object")
            unknown = sorted(set(val) - SCHEMA[key])
            if unknown:
                raise ConfigError(f"unknown key(s) in [{key}]: {', '.join(unknown)}; "
                                  f"allowed: {', '.join(sorted(SCHEMA[key]))}")
        elif key not in SCHEMA[""]:
            raise ConfigError(f"unknown top-level key '{key}'")


def merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        file_cfg = load_config_file(args.config)
        validate_keys(file_cfg)
        cfg = merge(cfg, file_cfg)
    over = {
        ("", "seed"): args.seed,
        ("", "checkpoint"): getattr(args, "checkpoint", None),
        ("model", "dtype"): getattr(args, "dtype", None),
        ("attention", "variant"): getattr(args, "variant", None),
        ("model", "mode"): getattr(args, "mode", None),
        ("model", "gamma"): getattr(args, "gamma", None) if args.command != "cost-report" else None,
        ("cost", "gammas"): getattr(args, "gamma", None) if args.command == "cost-report" else None,
        ("model", "p1"): getattr(args, "p1", None),
        ("model", "psts"): getattr(args, "psts", None),
        ("train", "freeze"): getattr(args, "freeze", None),
        ("train", "steps"): getattr(args, "steps", None),
        ("data", "train"): getattr(args, "data", None),
        ("data", "test"): getattr(args, "test_data", None),
        ("datagen", "n"): getattr(args, "n", None),
        ("datagen", "grid"): getattr(args, "grid", None),
        ("datagen", "frames"): getattr(args, "frames", None),
    }
    for (section, key), val in over.items():
        if val is None:
            continue
        if section:
            cfg[section][key] = val
        else:
            cfg[key] = val
    split = cfg["data"]["split"]
    if len(split) != 2 or abs(sum(split) - 1.0) > 1e-9 or min(split) < 0:
        raise ConfigError(f"data.split must be two non-negative fractions summing to 1, got {split}")
    return cfg


def build_train_config(cfg: dict, systems: dict):
    from .trainer import TrainConfig
    try:
        att = AttentionConfig(**cfg["attention"])
        mc = ModelConfig(attention=att, systems=dict(systems), seed=cfg["seed"], **cfg["model"])
        tr = dict(cfg["train"])
        return TrainConfig(model=mc, seed=cfg["seed"], **tr)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def write_resolved(cfg: dict, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    log.info("%s: resolved config written to %s", command, out / "resolved_config.json")


# ------------------------------------------------------------------ data helpers

def list_trajectories(path) -> list:
    p = Path(path)
    if p.is_file():
        return [p]
    files = sorted(p.glob("*.maty"))
    if not files:
        raise ConfigError(f"no .maty trajectory files in {p}")
    return files


def load_split(cfg: dict) -> tuple:
    """(train trajectories, test trajectories) grouped by system name."""
    if not cfg["data"]["train"]:
        raise ConfigError("data.train (or --data) is required")
    files = list_trajectories(cfg["data"]["train"])
    if cfg["data"]["test"]:
        train_f, test_f = files, list_trajectories(cfg["data"]["test"])
    else:
        n_train = max(1, int(round(cfg["data"]["split"][0] * len(files))))
        train_f, test_f = files[:n_train], files[n_train:]
    return _group([load_trajectory(f) for f in train_f]), _group([load_trajectory(f) for f in test_f])


def _group(trajs) -> dict:
    out: dict = {}
    for t in trajs:
        out.setdefault(t.spec.name, []).append(t)
    return out


def _write_metrics(path: Path):
    fh = open(path, "w")

    def emit(rec):
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()
        log.info("step %d loss %.4e nrmse %.4f", rec["step"], rec["train_loss"], rec["train_nrmse"])
    return fh, emit


# ------------------------------------------------------------------ commands

def cmd_gen_data(cfg: dict, out: Path) -> int:
    g = cfg["datagen"]
    dyn = ProxyDynParams(kappa=g["kappa"], beta=g["beta"], dt=g["dt"], steps_per_frame=g["steps_per_frame"])
    write_resolved(cfg, out, "gen-data")
    manifest = generate_dataset(g["n"], g["grid"], dyn, cfg["seed"], out, n_frames=g["frames"], L=g["L"])
    log.info("wrote %d trajectories to %s", len(manifest["trajectories"]), out)
    return EXIT_OK


def cmd_train(cfg: dict, out: Path) -> int:
    from .trainer import save_checkpoint, train
    train_sets, test_sets = load_split(cfg)
    systems = {n: t[0].spec.n_channels for n, t in train_sets.items()}
    tc = build_train_config(cfg, systems)
    write_resolved(cfg, out, "train")
    fh, emit = _write_metrics(out / "metrics.jsonl")
    with fh:
        state, _ = train(tc, train_sets, test_sets or None, on_metrics=emit)
    save_checkpoint(state, out / "checkpoint.mtck")
    return EXIT_OK


def cmd_finetune(cfg: dict, out: Path) -> int:
    from .trainer import TrainConfig, finetune, load_checkpoint, save_checkpoint
    if not cfg["checkpoint"]:
        raise ConfigError("finetune needs --checkpoint")
    state = load_checkpoint(cfg["checkpoint"])
    train_sets, test_sets = load_split(cfg)
    try:
        tc = TrainConfig(model=state.model.cfg, seed=cfg["seed"], **cfg["train"])
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    write_resolved(cfg, out, "finetune")
    fh, emit = _write_metrics(out / "metrics.jsonl")
    with fh:
        new_state, _ = finetune(state, tc, train_sets, test_sets or None, on_metrics=emit)
    save_checkpoint(new_state, out / "checkpoint.mtck")
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path) -> int:
    from .trainer import evaluate, load_checkpoint
    if not cfg["checkpoint"]:
        raise ConfigError("eval needs --checkpoint")
    state = load_checkpoint(cfg["checkpoint"])
    train_sets, test_sets = load_split(cfg)
    e = cfg["eval"]
    sets = {"train": train_sets, "test": test_sets}.get(e["split"])
    if sets is None:
        raise ConfigError(f"eval.split must be 'train' or 'test', got {e['split']!r}")
    write_resolved(cfg, out, "eval")
    summary = {}
    for name, trajs in sets.items():
        if name not in state.norms:
            raise ConfigError(f"checkpoint has no normalisation stats for system {name!r}")
        summary[name] = evaluate(state.model, state.norms[name], trajs, state.config.history, e["lead_min"],
                                 e["lead_max"], seed=cfg["seed"], max_samples=e["max_samples"],
                                 batch_size=e["batch_size"])
    if not summary:
        raise ConfigError(f"no trajectories in the {e['split']} split")
    (out / "eval.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


COST_COLUMNS = ["gamma_sts", "p1", "p_sts", "variant", "L_avg_mix", "L_lin", "L_quad", "measured_counters", "nrmse"]


def _cost_fields(cfg: dict, min_frames: int = 0) -> list:
    """Normalised [T, H, W, C] windows used for selection statistics.

    Generated trajectories get at least ``min_frames`` frames so a checkpoint
    can also be evaluated on them.
    """
    c = cfg["cost"]
    if cfg["data"]["train"]:
        trajs = [load_trajectory(f) for f in list_trajectories(cfg["data"]["train"])][: c["n_fields"]]
    else:
        g = cfg["datagen"]
        dyn = ProxyDynParams(kappa=g["kappa"], beta=g["beta"], dt=g["dt"], steps_per_frame=g["steps_per_frame"])
        seeds = np.random.SeedSequence(cfg["seed"]).spawn(c["n_fields"])
        trajs = [generate_trajectory(sample_config(np.random.default_rng(s), g["L"], g["grid"], g["grid"]),
                                     dyn, max(c["frames"], min_frames)) for s in seeds]
    from .fields import compute_norm_stats
    norm = compute_norm_stats(trajs)
    return [(t.spec.name, norm.normalize(t.data[: c["frames"]])) for t in trajs], trajs, norm


def cmd_cost_report(cfg: dict, out: Path) -> int:
    from .costmodel import cost_report, verify_counters
    from .tokenize import select_frames
    from .trainer import evaluate, load_checkpoint
    c = cfg["cost"]
    state = load_checkpoint(cfg["checkpoint"]) if cfg["checkpoint"] else None
    need = state.config.history + state.config.lead_max if state is not None else 0
    windows, trajs, norm = _cost_fields(cfg, need)
    if state is not None:
        if windows[0][0] not in state.norms:
            raise ConfigError(f"checkpoint has no normalisation stats for system {windows[0][0]!r}")
        short = [t.n_frames for t in trajs if t.n_frames < need]
        if short:
            raise ConfigError(f"trajectories with {min(short)} frames are too short for the checkpoint "
                              f"(history {state.config.history} + lead_max {state.config.lead_max})")
    variants = c["variants"] or [cfg["attention"]["variant"]]
    write_resolved(cfg, out, "cost-report")
    rows, failures = [], []
    for variant in variants:
        for gamma in c["gammas"]:
            m = dict(cfg["model"], gamma=gamma)
            if m["mode"] == "uniform" or (variant == "avit" and m["mode"] == "mix"):
                m["mode"] = "mul" if variant == "avit" else "mix"
            sels = [select_frames(w, (m["p1"], m["p1"]), gamma) for _, w in windows]
            measured = 0
            try:
                model = MateyModel(ModelConfig(attention=AttentionConfig(**dict(cfg["attention"], variant=variant)),
                                               systems={windows[0][0]: windows[0][1].shape[-1]},
                                               seed=cfg["seed"], **m))
            except (TypeError, ValueError) as e:
                raise ConfigError(str(e)) from None
            for name, w in windows:
                rep = verify_counters(model, w[None], 1, name)
                if not rep.ok:
                    failures.append({"variant": variant, "gamma": gamma, "mismatches": rep.mismatches})
                measured += sum(rep.measured)
            err = None
            if state is not None and variant == state.model.cfg.attention.variant:
                state.model.cfg.gamma = gamma
                name = windows[0][0]
                err = evaluate(state.model, state.norms[name], trajs, state.config.history,
                               state.config.lead_min, state.config.lead_max, seed=cfg["seed"])["mean"]
            report = cost_report(sels, m["p1"], m["psts"], gamma, variant, model, measured, err)
            rows.append({"gamma_sts": gamma, "p1": m["p1"], "p_sts": m["psts"], "variant": variant,
                         "L_avg_mix": report.L_avg_mix, "L_lin": report.L_lin, "L_quad": report.L_quad,
                         "measured_counters": measured, "nrmse": "" if err is None else err})
    with open(out / "cost_report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COST_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    if failures:
        (out / "counter_mismatches.json").write_text(json.dumps(failures, indent=2))
        raise InvariantFailure(f"{len(failures)} counter/formula mismatches; see counter_mismatches.json")
    return EXIT_OK


def gradcheck_model(cfg: dict):
    """Small fp64 model, fixed input and a random linear functional of its output."""
    from .diffmath import Tensor, ops
    g = cfg["gradcheck"]
    m = dict(cfg["model"], dtype="fp64")
    att = dict(cfg["attention"])
    att.update(c_emb=min(att["c_emb"], 16), depth=1, heads=2)
    if m["mode"] == "uniform":
        m["patch"] = min(m["patch"], g["grid"] // 4)
    else:
        m["p1"] = min(m["p1"], g["grid"] // 2)
        m["psts"] = min(m["psts"], m["p1"] // 2)
    model = MateyModel(ModelConfig(attention=AttentionConfig(**att), systems={"probe": 3}, seed=cfg["seed"], **m))
    rng = np.random.default_rng(cfg["seed"])
    # check at a generic point: with the 0.02-std init most gradients sit
    # close to the round-off level of the difference quotient
    for p in model.parameters():
        p.data = rng.normal(0.0, g["param_scale"], p.shape)
    U = rng.standard_normal((1, g["frames"], g["grid"], g["grid"], 3))
    U[..., : g["grid"] // 2, : g["grid"] // 2, :] *= 4.0   # a high-variance corner to trigger refinement
    R = Tensor(rng.standard_normal((1, g["grid"], g["grid"], 3)))

    def fn():
        pred, _ = model.forward(U, 1, "probe")
        d = ops.sub(pred, R)
        return ops.scale(ops.sum(ops.mul(d, d)), 0.5)
    return model, fn


def cmd_gradcheck(cfg: dict, out: Path) -> int:
    from .diffmath import grad_check
    g = cfg["gradcheck"]
    if cfg["model"]["dtype"] != "fp64":
        log.warning("gradcheck always runs in fp64")
    try:
        model, fn = gradcheck_model(cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    write_resolved(cfg, out, "gradcheck")
    report = grad_check(fn, model.named_parameters(), epsilon=g["epsilon"], max_coords=g["max_coords"],
                        seed=cfg["seed"])
    payload = report.to_dict() | {"tol": g["tol"], "passed": report.passed(g["tol"]),
                                  "variant": model.cfg.attention.variant, "mode": model.cfg.mode}
    (out / "gradcheck.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    print(json.dumps({k: payload[k] for k in ("variant", "mode", "worst_rel_error", "worst_param", "passed")}))
    if not payload["passed"]:
        raise InvariantFailure(f"worst relative error {report.worst:.3e} >= {g['tol']}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "cost-report": cmd_cost_report,
    "gradcheck": cmd_gradcheck,
}


# ------------------------------------------------------------------ argument parsing

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="matey", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, model_flags=True):
        p.add_argument("--config", help="TOML or JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if model_flags:
            p.add_argument("--dtype", choices=["fp32", "fp64"])
            p.add_argument("--variant", choices=["vit", "svit", "avit"])
            p.add_argument("--mode", choices=["uniform", "mul", "mix"])
            p.add_argument("--p1", type=int)
            p.add_argument("--psts", type=int)
        return p

    p = common(sub.add_parser("gen-data", help="generate proxy colliding-thermals trajectories"), False)
    p.add_argument("--n", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--frames", type=int)

    for name in ("train", "finetune", "eval"):
        p = common(sub.add_parser(name))
        p.add_argument("--data", help="directory of .maty files")
        p.add_argument("--test-data", help="held-out directory (default: split of --data)")
        p.add_argument("--gamma", type=float)
        if name != "train":
            p.add_argument("--checkpoint")
        if name != "eval":
            p.add_argument("--freeze", choices=["all", "prepost"])
            p.add_argument("--steps", type=int)

    p = common(sub.add_parser("cost-report", help="sequence-length and cost indices per gamma (CSV)"))
    p.add_argument("--gamma", type=float, nargs="+")
    p.add_argument("--data", help="directory of .maty files (default: generate fields)")
    p.add_argument("--grid", type=int)
    p.add_argument("--checkpoint", help="evaluate NRMSE at each gamma with this checkpoint")

    p = common(sub.add_parser("gradcheck", help="finite-difference check through a small fp64 model"))
    p.add_argument("--gamma", type=float)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .datagen import StabilityError
    from .fields import TrajectoryFormatError
    from .trainer import CheckpointError, DivergenceError
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, Path(args.out))
    except (ConfigError, CheckpointError, TrajectoryFormatError, OSError) as e:
        print(f"matey {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (InvariantFailure, DivergenceError, StabilityError) as e:
        print(f"matey {args.command}: failed: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
