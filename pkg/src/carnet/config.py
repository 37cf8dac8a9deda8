"""Plain-text ``key = value`` run configuration with per-command schemas."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


_PARSERS = {"int": int, "float": float, "bool": _bool, "str": str, "ints": _ints}


@dataclass(frozen=True)
class Key:
    name: str
    kind: str
    default: object = None
    help: str = ""
    required: bool = False

    def parse(self, text: str):
        try:
            return _PARSERS[self.kind](text)
        except ValueError as e:
            raise ConfigError(f"bad value for {self.name!r} ({self.kind}): {e}") from None


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


_COMMON = [
    Key("seed", "int", 0, "master seed for every random stream"),
    Key("log_wallclock", "bool", False, "fill the wallclock_s metrics column (makes metrics run-dependent)"),
]
_MODEL = [
    Key("preset", "str", "desk", "architecture preset: desk (64x64), full (256x256) or tiny (8x8)"),
    Key("window", "int", 4, "frames per training window"),
    Key("use_attention", "bool", False, "local self-attention block before the encoder"),
    Key("attention_k", "int", 3, "attention neighbourhood extent"),
]
_TRAIN = [
    Key("epochs", "int", 10, "passes over the training split"),
    Key("batch_size", "int", 64, "minibatch size"),
    Key("lr", "float", 1e-3, "initial learning rate"),
    Key("lr_patience", "int", 5, "epochs without improvement before halving the learning rate"),
    Key("early_stop", "int", 0, "epochs without improvement before stopping (0 disables)"),
]

SCHEMAS: dict[str, list[Key]] = {
    "generate-data": _COMMON + [
        Key("steps", "int", 20000, "total time steps to record"),
        Key("window", "int", 4, "window length used for the index"),
        Key("episode_steps", "int", 200, "maximum steps per recorded episode"),
    ],
    "pretrain-ae": _COMMON + _MODEL + _TRAIN + [
        Key("dataset", "str", None, "dataset directory from generate-data", required=True),
    ],
    "train-carnet": _COMMON + _MODEL + _TRAIN + [
        Key("dataset", "str", None, "dataset directory from generate-data", required=True),
        Key("pretrained", "str", None, "autoencoder checkpoint to start from"),
        Key("sensors", "bool", False, "fuse sensor readings into the recurrent state"),
        Key("actions", "bool", False, "condition the recurrent state on the previous action"),
    ],
    "train-il": _COMMON + [Key("epochs", "int", 12, "passes over the training split"), _TRAIN[1],
        Key("lr", "float", 3e-3, "controller learning rate"), *_TRAIN[3:],
        Key("dataset", "str", None, "dataset directory from generate-data", required=True),
        Key("backbone", "str", None, "trained CARNet checkpoint", required=True),
        Key("joint", "bool", True, "fine-tune encoder and GRU together with the controller"),
        Key("backbone_lr", "float", 1e-3, "learning rate for the backbone when joint"),
        Key("mirror", "bool", True, "add left-right mirrored windows with mirrored steering labels"),
        Key("seeds", "ints", (0, 1, 2, 3, 4), "controller seeds; accuracy is reported as mean and std"),
    ],
    "train-rl": _COMMON + [
        Key("backbone", "str", None, "action-conditioned CARNet checkpoint", required=True),
        Key("steps", "int", 50000, "environment steps"),
        Key("buffer_size", "int", 5000, "replay capacity"),
        Key("lr", "float", 5e-3, "Q-network learning rate"),
        Key("batch_size", "int", 64, "replay minibatch"),
        Key("gamma", "float", 0.99, "discount"),
        Key("alpha", "float", 0.6, "priority exponent"),
        Key("beta0", "float", 0.4, "initial importance-sampling exponent (annealed to 1)"),
        Key("eps_start", "float", 1.0, "initial exploration rate"),
        Key("eps_end", "float", 0.05, "final exploration rate"),
        Key("eps_fraction", "float", 0.2, "fraction of steps over which exploration decays"),
        Key("target_sync", "int", 1000, "steps between target-network copies"),
        Key("learning_starts", "int", 1000, "steps collected before updates begin"),
        Key("train_every", "int", 1, "environment steps per gradient update"),
        Key("eval_episodes", "int", 20, "greedy evaluation episodes"),
        Key("eval_every", "int", 5000, "steps between evaluations (0 disables)"),
        Key("negate_lateral", "bool", False, "flip the sign of the lateral-acceleration reward term"),
    ],
    "eval": _COMMON + [
        Key("checkpoint", "str", None, "checkpoint file or a train-il/train-rl output directory", required=True),
        Key("dataset", "str", None, "dataset directory (imitation checkpoints)"),
        Key("split", "str", "test", "train, val or test"),
        Key("episodes", "int", 20, "greedy episodes (reinforcement-learning checkpoints)"),
    ],
    "export-metrics": _COMMON + [
        Key("inputs", "str", None, "comma-separated run directories or metrics files", required=True),
        Key("phase", "str", "", "keep only rows whose phase starts with this prefix"),
    ],
}


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"{source}:{n}: empty key")
        out[k] = v
    return out


def resolve(command: str, file_values: dict[str, str] | None = None,
            overrides: dict[str, str] | None = None) -> dict[str, object]:
    """Defaults, then file values, then overrides; unknown keys and missing required keys fail fast."""
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command {command!r}")
    schema = {k.name: k for k in SCHEMAS[command]}
    merged = dict(file_values or {})
    merged.update(overrides or {})
    unknown = sorted(set(merged) - set(schema))
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(unknown)} for {command}; valid keys: "
                          f"{', '.join(sorted(schema))}")
    out = {name: key.default for name, key in schema.items()}
    for k, v in merged.items():
        out[k] = schema[k].parse(v)
    missing = [k for k, key in schema.items() if key.required and out[k] in (None, "")]
    if missing:
        raise ConfigError(f"{command}: missing required key(s): {', '.join(missing)}")
    return out


def load(command: str, path: str | Path | None, overrides: dict[str, str] | None = None) -> dict[str, object]:
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        values = parse_text(p.read_text(), str(p))
    return resolve(command, values, overrides)


def format_config(command: str, values: dict[str, object]) -> str:
    lines = [f"# effective configuration for {command}"]
    lines += [f"{k} = {format_value(values[k])}" for k in sorted(values)]
    return "\n".join(lines) + "\n"


def describe(command: str) -> str:
    return "\n".join(f"  {k.name} ({k.kind}, default {format_value(k.default) or '-'})"
                     f"{' [required]' if k.required else ''}: {k.help}" for k in SCHEMAS[command])
