"""Command line: ``carnet <command> [--config FILE] [--seed N] [--out DIR] [--key value ...]``.

Exit status is 0 on success, 2 for configuration problems (unknown or missing
keys, bad values, missing input files) and 1 for failures while running.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .checkpoint import CheckpointError, load_checkpoint, load_into, load_model, save_model
from .config import ConfigError
from .data import SPLITS, generate_dataset, load_dataset, save_dataset
from .driving import EnvConfig, RewardConfig
from .metrics import MetricsLog, read_metrics, write_metrics
from .model import CARNet, CarnetConfig
from .rl import DqnConfig, greedy, random_policy, run_episodes, train_dqn
from .training import (ImitationConfig, TrainConfig, TrainingDiverged, accuracy, imitation_report,
                       majority_baseline, predict_actions, pretrain_autoencoder, train_ensemble)

COMMANDS = tuple(cfgmod.SCHEMAS)


class UsageError(ConfigError):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="carnet", description="Train and evaluate CARNet on synthetic driving data.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--device", default="cpu", help="only 'cpu' is supported")
    return p


def _overrides(extra: list[str]) -> dict[str, str]:
    """``--some-key value`` / ``--some-key=value`` pairs -> {"some_key": "value"}."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        if "=" in tok:
            k, v = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"flag {tok} needs a value")
            k, v = tok[2:], extra[i + 1]
            i += 2
        out[k.replace("-", "_")] = v
    return out


def _model_config(c: dict, sensors: bool = False, actions: bool = False) -> CarnetConfig:
    presets = {"desk": CarnetConfig.desk, "full": CarnetConfig.full, "tiny": CarnetConfig.tiny}
    if c["preset"] not in presets:
        raise ConfigError(f"unknown preset {c['preset']!r}; choose from {', '.join(presets)}")
    return presets[c["preset"]](window=c["window"], use_attention=c["use_attention"], attention_k=c["attention_k"],
                                sensor_dim=3 if sensors else 0, action_dim=9 if actions else 0)


def _train_config(c: dict) -> TrainConfig:
    return TrainConfig(epochs=c["epochs"], batch_size=c["batch_size"], lr=c["lr"], lr_patience=c["lr_patience"],
                       early_stop=c["early_stop"], seed=c["seed"])


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _checkpoint_path(path: str, what: str) -> Path:
    p = Path(path)
    base = p.with_suffix("") if p.suffix in (".manifest", ".bin") else p
    if not base.with_name(base.name + ".manifest").exists():
        raise ConfigError(f"{what} not found: {base}.manifest")
    return base


def _log(c: dict, out: Path, run_id: str) -> MetricsLog:
    return MetricsLog(run_id, out / "metrics.csv", clock=time.perf_counter if c["log_wallclock"] else None)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate_data(c: dict, out: Path) -> str:
    ds = generate_dataset(c["steps"], c["seed"], window=c["window"], episode_steps=c["episode_steps"])
    save_dataset(ds, out)
    counts = ds.label_counts()
    return (f"wrote {ds.n_steps} steps, {len(ds.windows)} windows to {out}; "
            f"label counts {' '.join(str(int(x)) for x in counts)}")


def cmd_pretrain_ae(c: dict, out: Path) -> str:
    ds = load_dataset(_existing(c["dataset"], "dataset"))
    model = CARNet(_model_config(c), seed=c["seed"])
    log = _log(c, out, "pretrain-ae")
    hist = pretrain_autoencoder(model, ds, _train_config(c), log)
    save_model(out / "autoencoder", model, extra={"command": "pretrain-ae"}, kind="autoencoder")
    best = hist.val[hist.best_epoch]["loss_recon"] if hist.val else float("nan")
    return f"validation reconstruction loss {best:.4f} (epoch {hist.best_epoch})"


def cmd_train_carnet(c: dict, out: Path) -> str:
    ds = load_dataset(_existing(c["dataset"], "dataset"))
    model = CARNet(_model_config(c, c["sensors"], c["actions"]), seed=c["seed"])
    if c["pretrained"]:
        ck = load_checkpoint(_checkpoint_path(c["pretrained"], "pretrained checkpoint"))
        load_into(model.encoder, ck.arrays, "model.encoder.")
        load_into(model.decoder, ck.arrays, "model.decoder.")
    log = _log(c, out, "train-carnet")
    hist = train_ensemble(model, ds, _train_config(c), log=log)
    save_model(out / "carnet", model, extra={"command": "train-carnet"})
    last = hist.val[hist.best_epoch] if hist.val and hist.best_epoch >= 0 else hist.train[-1]
    return "validation loss " + ", ".join(f"{k} {v:.4f}" for k, v in last.items() if k not in ("epoch", "lr"))


def cmd_train_il(c: dict, out: Path) -> str:
    ds = load_dataset(_existing(c["dataset"], "dataset"))
    backbone, _, _ = load_model(_checkpoint_path(c["backbone"], "backbone checkpoint"))
    if backbone.cfg.action_dim:
        raise ConfigError("imitation expects a backbone without action conditioning")
    icfg = ImitationConfig(epochs=c["epochs"], batch_size=c["batch_size"], lr=c["lr"], lr_patience=c["lr_patience"],
                           early_stop=c["early_stop"], joint=c["joint"], backbone_lr=c["backbone_lr"], mirror=c["mirror"])
    log = _log(c, out, "train-il")
    seeds = [c["seed"] + s for s in c["seeds"]]
    report, trained = imitation_report(backbone, ds, icfg, seeds=seeds, log=log)
    for s, (model, controller) in zip(seeds, trained):
        save_model(out / f"il_seed{s}", model, controller, extra={"command": "train-il", "seed": s}, kind="imitation")
    (out / "report.txt").write_text(report.summary() + "\n")
    return report.summary()


def _env_config(c: dict) -> EnvConfig:
    return EnvConfig(reward=RewardConfig(negate_lateral=c.get("negate_lateral", False)))


def cmd_train_rl(c: dict, out: Path) -> str:
    backbone, _, _ = load_model(_checkpoint_path(c["backbone"], "backbone checkpoint"))
    if not (backbone.cfg.sensor_dim and backbone.cfg.action_dim):
        raise ConfigError("reinforcement learning expects a sensor- and action-conditioned backbone "
                          "(train-carnet with sensors = true and actions = true)")
    keys = {f.name for f in dataclasses.fields(DqnConfig)} & set(c)
    dcfg = DqnConfig(**{k: c[k] for k in keys}, env=_env_config(c))
    log = _log(c, out, "train-rl")
    res = train_dqn(backbone, dcfg, log)
    save_model(out / "dqn", backbone, res.q, extra={"command": "train-rl", "negate_lateral": c["negate_lateral"]},
               kind="dqn")
    ratio = res.eval_rewards.mean() / res.random_rewards.mean() if res.random_rewards.mean() else float("inf")
    return (f"greedy reward {res.eval_rewards.mean():.2f} ± {res.eval_rewards.std():.2f}, random "
            f"{res.random_rewards.mean():.2f} ± {res.random_rewards.std():.2f} (ratio {ratio:.2f}) "
            f"over {dcfg.eval_episodes} episodes")


def _checkpoints_in(path: Path) -> list[Path]:
    if path.is_dir():
        found = sorted(p.with_suffix("") for p in path.glob("*.manifest"))
        found = [p for p in found if load_checkpoint(p).kind in ("imitation", "dqn")]
        if not found:
            raise ConfigError(f"no imitation or reinforcement-learning checkpoints in {path}")
        return found
    return [_checkpoint_path(str(path), "checkpoint")]


def cmd_eval(c: dict, out: Path) -> str:
    if c["split"] not in SPLITS:
        raise ConfigError(f"split must be one of {', '.join(SPLITS)}, got {c['split']!r}")
    paths = _checkpoints_in(Path(c["checkpoint"]))
    log = _log(c, out, "eval")
    kinds = {load_checkpoint(p).kind for p in paths}
    if len(kinds) != 1:
        raise ConfigError(f"checkpoints mix kinds {sorted(kinds)}")
    kind = kinds.pop()
    if kind == "imitation":
        if not c["dataset"]:
            raise ConfigError("eval: missing required key(s): dataset (imitation checkpoints)")
        ds = load_dataset(_existing(c["dataset"], "dataset"))
        starts, accs = ds.window_indices(c["split"]), []
        for i, p in enumerate(paths):
            model, controller, _ = load_model(p)
            accs.append(accuracy(predict_actions(model, controller, ds, starts), ds.window_labels(starts)))
            log.log(f"eval/{c['split']}", i, accuracy=accs[-1])
        cls, maj = majority_baseline(ds, c["split"])
        return (f"{c['split']} accuracy {100 * np.mean(accs):.2f} ± {100 * np.std(accs):.2f} % over "
                f"{len(accs)} runs (majority class {cls}: {100 * maj:.2f} %)")
    if kind == "dqn":
        rewards = []
        for i, p in enumerate(paths):
            backbone, q, ck = load_model(p)
            env_cfg = EnvConfig(reward=RewardConfig(negate_lateral=bool(ck.extra.get("negate_lateral", False))))
            r = run_episodes(backbone, lambda f, g: greedy(q, f), c["episodes"], c["seed"], env_cfg)
            rand = run_episodes(backbone, random_policy, c["episodes"], c["seed"], env_cfg)
            log.log("eval/greedy", i, reward_mean=float(r.mean()), reward_std=float(r.std()))
            log.log("eval/random", i, reward_mean=float(rand.mean()), reward_std=float(rand.std()))
            rewards.append((r, rand))
        r = np.concatenate([x[0] for x in rewards])
        rand = np.concatenate([x[1] for x in rewards])
        return (f"greedy reward {r.mean():.2f} ± {r.std():.2f}, random {rand.mean():.2f} ± {rand.std():.2f} "
                f"over {len(r)} episodes")
    raise ConfigError(f"cannot evaluate a {kind!r} checkpoint")


def cmd_export_metrics(c: dict, out: Path) -> str:
    rows = []
    for item in (s.strip() for s in c["inputs"].split(",") if s.strip()):
        p = Path(item)
        p = p / "metrics.csv" if p.is_dir() else p
        rows += read_metrics(_existing(str(p), "metrics file"))
    rows = [r for r in rows if r.phase.startswith(c["phase"])]
    write_metrics(out / "metrics.csv", rows)
    return f"wrote {len(rows)} rows to {out / 'metrics.csv'}"


HANDLERS = {
    "generate-data": cmd_generate_data,
    "pretrain-ae": cmd_pretrain_ae,
    "train-carnet": cmd_train_carnet,
    "train-il": cmd_train_il,
    "train-rl": cmd_train_rl,
    "eval": cmd_eval,
    "export-metrics": cmd_export_metrics,
}


def run(argv: list[str]) -> int:
    parser = _parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 2
    try:
        if args.device != "cpu":
            raise ConfigError(f"unsupported device {args.device!r}; only cpu is available")
        overrides = _overrides(extra)
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        c = cfgmod.load(args.command, args.config, overrides)
        out = Path(args.out or f"carnet_runs/{args.command}")
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfgmod.format_config(args.command, c))
        message = HANDLERS[args.command](c, out)
    except ConfigError as e:
        print(f"carnet {args.command}: configuration error: {e}", file=sys.stderr)
        return 2
    except (TrainingDiverged, CheckpointError, OSError, ValueError, RuntimeError) as e:
        print(f"carnet {args.command}: failed: {e}", file=sys.stderr)
        return 1
    print(message)
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
