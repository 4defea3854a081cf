"""Darknet-style key=value config parsing and the burn-in + step LR policy.

Grammar notes: '#' starts a comment, keys may contain spaces (normalized to
underscores), several pairs may share one line, spaces around '=' are
tolerated, and '[section]' headers pass through untouched. Unknown keys are
collected as warnings so real backbone .cfg files stay loadable.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .errors import ConfigurationError
from .loss import LossWeights

__all__ = ["TrainConfig", "parse_key_values", "parse_config", "serialize_config", "lr_at"]

BURN_IN_EXPONENT = 4


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 8
    width: int = 512
    height: int = 512
    channels: int = 3
    momentum: float = 0.9
    decay: float = 0.0005
    angle: float = 0.0
    saturation: float = 1.5
    exposure: float = 1.5
    hue: float = 0.1
    learning_rate: float = 0.001
    burn_in: int = 100
    max_batches: int = 5000
    policy: str = "steps"
    steps: tuple[int, ...] = (4000, 4500)
    scales: tuple[float, ...] = (0.1, 0.1)
    alpha: float = 1.25
    beta: float = 1.0
    warnings: tuple[str, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigurationError(f"width/height must be positive, got {self.width}x{self.height}")
        if any(s2 <= s1 for s1, s2 in zip(self.steps, self.steps[1:])):
            raise ConfigurationError(f"steps must be strictly increasing, got {self.steps}")
        if len(self.scales) != len(self.steps):
            raise ConfigurationError(
                f"{len(self.scales)} scales for {len(self.steps)} steps"
            )
        if self.burn_in > self.max_batches:
            raise ConfigurationError(
                f"burn_in {self.burn_in} exceeds max_batches {self.max_batches}"
            )
        self.loss_weights()  # validates alpha/beta

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)


def parse_key_values(text: str) -> tuple[list[tuple[str, str, int]], list[str]]:
    """Tokenize key=value text into (key, value, line) triples plus warnings.

    Handles multiple pairs per line: between two '=' signs the first
    whitespace token is the previous key's value and the rest is the next
    key, so "burn in=100 max batches = 5000" parses as two pairs.
    """
    pairs: list[tuple[str, str, int]] = []
    warnings: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            continue  # section headers are opaque pass-through
        if "=" not in line:
            warnings.append(f"line {lineno}: ignored text {line!r}")
            continue
        chunks = line.split("=")
        key = chunks[0].strip()
        for i, chunk in enumerate(chunks[1:], start=1):
            tokens = chunk.split()
            last = i == len(chunks) - 1
            if not last and len(tokens) < 2:
                raise ConfigurationError(f"line {lineno}: malformed key=value text {raw!r}")
            if not key:
                raise ConfigurationError(f"line {lineno}: empty key in {raw!r}")
            value = tokens[0] if tokens else ""  # bare "key=" means an empty value
            pairs.append(("_".join(key.lower().split()), value, lineno))
            if last:
                if len(tokens) > 1:
                    warnings.append(f"line {lineno}: trailing text {' '.join(tokens[1:])!r}")
            else:
                key = " ".join(tokens[1:])
    return pairs, warnings


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v)


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v)


_PARSERS = {
    "batch": int, "width": int, "height": int, "channels": int,
    "burn_in": int, "max_batches": int,
    "momentum": float, "decay": float, "angle": float, "saturation": float,
    "exposure": float, "hue": float, "learning_rate": float,
    "alpha": float, "beta": float,
    "policy": str, "steps": _int_list, "scales": _float_list,
}


def parse_config(text: str) -> TrainConfig:
    """Parse a training config; unknown keys become warnings, not errors."""
    pairs, warnings = parse_key_values(text)
    values: dict = {}
    for key, value, lineno in pairs:
        parser = _PARSERS.get(key)
        if parser is None:
            warnings.append(f"line {lineno}: unknown key {key!r}")
            continue
        try:
            values[key] = parser(value)
        except ValueError:
            raise ConfigurationError(
                f"line {lineno}: cannot parse {value!r} as a value for {key!r}"
            ) from None
    return TrainConfig(warnings=tuple(warnings), **values)


def serialize_config(cfg: TrainConfig) -> str:
    """Canonical one-pair-per-line rendering; parse_config inverts it exactly."""
    lines = []
    for f in fields(cfg):
        if f.name == "warnings":
            continue
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            lines.append(f"{f.name}={','.join(repr(v) for v in value)}")
        elif isinstance(value, float):
            lines.append(f"{f.name}={value!r}")
        else:
            lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    """Learning rate at an iteration under the burn-in + step policy.

    During burn-in the rate ramps as (iteration / burn_in) ** 4; afterwards
    every step at or below the iteration multiplies in its scale.
    """
    if cfg.burn_in > 0 and iteration < cfg.burn_in:
        return cfg.learning_rate * (iteration / cfg.burn_in) ** BURN_IN_EXPONENT
    rate = cfg.learning_rate
    for step, scale in zip(cfg.steps, cfg.scales):
        if step <= iteration:
            rate *= scale
    return rate
