"""Experiment configuration: flat `key = value` files with dotted section
prefixes, command-line overrides, validation, and a canonical echo.

Every run writes the fully-resolved config back to its output directory
as config.echo; re-parsing the echo reproduces the config exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from fedlora.errors import ConfigError

# Heterogeneous rank pattern cycled to the client count when
# clients.ranks is left on auto.
DEFAULT_RANK_PATTERN = (4, 4, 8, 8, 8, 8, 16, 16)

SWEEP_AXES = {
    "sigma": "dp.noise_multiplier",
    "rank_budget": "agg.rank_budget",
    "num_clients": "partition.num_clients",
    "dirichlet_alpha": "partition.alpha",
    "strategy": "agg.strategy",
}


@dataclass
class ExperimentConfig:
    num_classes: int = 8
    d_in: int = 32
    samples: int = 2048
    client_shift: float = 1.0
    num_clients: int = 8
    dirichlet_alpha: float = 0.5
    feature_shift: float = 2.0
    hidden_dim: int = 16
    model_layers: int = 2
    total_rounds: int = 30
    local_steps: int = 10
    batch_size: int = 32
    learning_rate: float = 0.01
    optimizer: str = "adam"
    participation: float = 1.0
    strategy: str = "selective_stacking"
    rank_budget: int = 0  # 0 = auto (max client rank), resolved at parse
    weights: list[float] | None = None
    ranks: list[int] = field(default_factory=list)
    private_ranks: list[int] = field(default_factory=list)
    dp_enabled: bool = False
    dp_clip_norm: float = 1.0
    dp_noise_multiplier: float = 0.0
    dp_delta: float = 1e-5
    dp_scope: str = "shared"
    seed: int = 0
    output_dir: str = "runs/default"
    trace: bool = False


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_list(raw: str) -> list[int]:
    return [int(tok) for tok in raw.replace(" ", "").split(",") if tok]


def _parse_float_list(raw: str) -> list[float]:
    return [float(tok) for tok in raw.replace(" ", "").split(",") if tok]


# key -> (attribute, parser). "auto" is accepted where noted and resolved
# during validation.
_SCHEMA = {
    "task.num_classes": ("num_classes", int),
    "task.d_in": ("d_in", int),
    "task.samples": ("samples", int),
    "task.client_shift": ("client_shift", float),
    "partition.num_clients": ("num_clients", int),
    "partition.alpha": ("dirichlet_alpha", float),
    "partition.feature_shift": ("feature_shift", float),
    "model.hidden_dim": ("hidden_dim", int),
    "model.layers": ("model_layers", int),
    "rounds.total": ("total_rounds", int),
    "rounds.local_steps": ("local_steps", int),
    "rounds.batch_size": ("batch_size", int),
    "rounds.learning_rate": ("learning_rate", float),
    "rounds.optimizer": ("optimizer", str),
    "rounds.participation": ("participation", float),
    "agg.strategy": ("strategy", str),
    "agg.rank_budget": ("rank_budget", int),
    "agg.weights": ("weights", _parse_float_list),
    "clients.ranks": ("ranks", _parse_int_list),
    "clients.private_ranks": ("private_ranks", _parse_int_list),
    "dp.enabled": ("dp_enabled", _parse_bool),
    "dp.clip_norm": ("dp_clip_norm", float),
    "dp.noise_multiplier": ("dp_noise_multiplier", float),
    "dp.delta": ("dp_delta", float),
    "dp.scope": ("dp_scope", str),
    "seed": ("seed", int),
    "output_dir": ("output_dir", str),
    "trace": ("trace", _parse_bool),
}

_AUTO_KEYS = {"agg.rank_budget", "agg.weights", "clients.ranks", "clients.private_ranks"}

_ATTR_TO_KEY = {attr: key for key, (attr, _) in _SCHEMA.items()}


def parse_pairs(text: str, source: str = "<config>") -> list[tuple[str, str, str]]:
    """Split config text into (location, key, raw value) triples."""
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        pairs.append((f"{source}:{lineno}", key.strip(), raw.strip()))
    return pairs


def parse_override(item: str) -> tuple[str, str, str]:
    if "=" not in item:
        raise ConfigError(f"override {item!r}: expected key=value")
    key, _, raw = item.partition("=")
    return (f"override {item!r}", key.strip(), raw.strip())


def build_config(pairs: list[tuple[str, str, str]]) -> ExperimentConfig:
    """Apply key/value pairs over the defaults, then validate."""
    cfg = ExperimentConfig()
    for location, key, raw in pairs:
        if key not in _SCHEMA:
            raise ConfigError(f"{location}: unknown key {key!r}")
        attr, parser = _SCHEMA[key]
        if raw.lower() == "auto" and key in _AUTO_KEYS:
            setattr(cfg, attr, [] if attr in ("ranks", "private_ranks") else (None if attr == "weights" else 0))
            continue
        try:
            setattr(cfg, attr, parser(raw))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{location}: bad value for {key!r}: {exc}") from None
    _validate(cfg)
    return cfg


def _fail(key: str, message: str) -> None:
    raise ConfigError(f"config key {key!r}: {message}")


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.num_classes < 2:
        _fail("task.num_classes", "need at least two classes")
    if cfg.d_in < 1 or cfg.samples < 1:
        _fail("task.d_in", "dimensions and sample count must be >= 1")
    if cfg.num_clients < 1:
        _fail("partition.num_clients", "need at least one client")
    if cfg.num_clients > cfg.samples:
        _fail("partition.num_clients", "more clients than samples")
    if cfg.dirichlet_alpha <= 0.0:
        _fail("partition.alpha", "alpha must be > 0")
    if cfg.model_layers not in (1, 2):
        _fail("model.layers", "model supports 1 or 2 layers")
    if cfg.hidden_dim < 1:
        _fail("model.hidden_dim", "hidden dim must be >= 1")
    if cfg.total_rounds < 0 or cfg.local_steps < 0:
        _fail("rounds.total", "round and step counts must be >= 0")
    if cfg.batch_size < 1:
        _fail("rounds.batch_size", "batch size must be >= 1")
    if cfg.learning_rate < 0.0:
        _fail("rounds.learning_rate", "learning rate must be >= 0")
    if cfg.optimizer not in ("sgd", "adam"):
        _fail("rounds.optimizer", f"unknown optimizer {cfg.optimizer!r}")
    if not 0.0 < cfg.participation <= 1.0:
        _fail("rounds.participation", "participation must be in (0, 1]")
    from fedlora.aggregation import STRATEGIES

    if cfg.strategy not in STRATEGIES:
        _fail("agg.strategy", f"unknown strategy {cfg.strategy!r}")

    if not cfg.ranks:
        cfg.ranks = [DEFAULT_RANK_PATTERN[i % len(DEFAULT_RANK_PATTERN)] for i in range(cfg.num_clients)]
    if len(cfg.ranks) != cfg.num_clients:
        _fail("clients.ranks", f"got {len(cfg.ranks)} ranks for {cfg.num_clients} clients")
    if any(r < 1 for r in cfg.ranks):
        _fail("clients.ranks", "ranks must be >= 1")
    if not cfg.private_ranks:
        cfg.private_ranks = list(cfg.ranks)
    if len(cfg.private_ranks) != cfg.num_clients:
        _fail("clients.private_ranks", f"got {len(cfg.private_ranks)} ranks for {cfg.num_clients} clients")
    if any(r < 1 for r in cfg.private_ranks):
        _fail("clients.private_ranks", "ranks must be >= 1")
    if cfg.strategy == "fedavg":
        totals = {g + p for g, p in zip(cfg.ranks, cfg.private_ranks)}
        if len(set(cfg.ranks)) > 1 or len(totals) > 1:
            _fail("agg.strategy", "fedavg requires homogeneous client ranks")
    if cfg.rank_budget == 0:
        cfg.rank_budget = max(cfg.ranks)
    if cfg.rank_budget < 1:
        _fail("agg.rank_budget", "rank budget must be >= 1")
    if cfg.weights is not None:
        if len(cfg.weights) != cfg.num_clients:
            _fail("agg.weights", f"got {len(cfg.weights)} weights for {cfg.num_clients} clients")
        if any(w < 0 for w in cfg.weights) or sum(cfg.weights) <= 0:
            _fail("agg.weights", "weights must be non-negative with positive sum")
    if cfg.dp_clip_norm <= 0.0:
        _fail("dp.clip_norm", "clip norm must be > 0")
    if cfg.dp_noise_multiplier < 0.0:
        _fail("dp.noise_multiplier", "noise multiplier must be >= 0")
    if not 0.0 < cfg.dp_delta < 1.0:
        _fail("dp.delta", "delta must be in (0, 1)")
    if cfg.dp_scope not in ("shared", "all"):
        _fail("dp.scope", "scope must be 'shared' or 'all'")


def parse_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    """Parse a config file plus --set overrides into a validated config."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    pairs = parse_pairs(path.read_text(), source=str(path))
    for item in overrides or []:
        pairs.append(parse_override(item))
    return build_config(pairs)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def echo_config(cfg: ExperimentConfig) -> str:
    """Canonical rendering; parsing it back yields an equal config."""
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if value is None:
            continue  # auto weights stay implicit
        lines.append(f"{_ATTR_TO_KEY[f.name]} = {_format_value(value)}")
    return "\n".join(sorted(lines)) + "\n"
