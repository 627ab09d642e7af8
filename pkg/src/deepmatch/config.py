"""``key = value`` run configuration files."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .geometry import Discretization, GeometryError
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _attach(text: str) -> tuple[str, int]:
    text = text.strip()
    if len(text) < 2 or text[0].upper() not in "QS":
        raise ValueError(f"attachment must look like Q0 or S2, got {text!r}")
    return text[0].upper(), int(text[1:])


@dataclass
class RunConfig:
    levels: int = 6
    R0: int = 80
    alpha0: int = 8
    beta0: int = 4
    gamma0: int = 1
    delta0: int = 8
    eta0: int = 1
    nu: tuple[float, ...] = (1.4,)
    descriptor: str = "fixed"
    radius: int = 8
    confidence_first: bool = True
    max_magnitude: float = 0.0  # 0 -> use the largest flow magnitude in view
    lr_exponents: float = 1e-3
    lr_descriptors: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 1
    attach: tuple[str, int] = ("Q", 0)
    sigma: float = 8.0
    seed: int = 0
    train_exponents: bool = True
    train_descriptors: bool = True
    checkpoint_every: int = 1
    gen_count: int = 10
    gen_width: int = 128
    gen_height: int = 128
    gen_texture: str = "noise"
    gen_motion: str = "translation"
    gen_magnitude: float = 4.0
    dataset: str = ""
    checkpoint: str = ""
    extra: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        try:
            self.discretization()
        except GeometryError as exc:
            raise ConfigError(f"geometry invariant violated: {exc}") from None
        if self.descriptor not in ("fixed", "trainable"):
            raise ConfigError(f"descriptor must be 'fixed' or 'trainable', got {self.descriptor!r}")
        if len(self.nu) not in (1, self.levels) and self.levels > 0:
            raise ConfigError(f"nu needs 1 or {self.levels} values, got {len(self.nu)}")
        if any(v <= 0 for v in self.nu):
            raise ConfigError("exponents must be positive")
        if not 0 <= self.attach[1] <= self.levels:
            raise ConfigError(f"attachment level {self.attach[1]} outside 0..{self.levels}")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def discretization(self) -> Discretization:
        return Discretization(
            levels=self.levels, R0=self.R0, alpha0=self.alpha0, beta0=self.beta0,
            gamma0=self.gamma0, delta0=self.delta0, eta0=self.eta0,
        )

    def exponents(self) -> list[float]:
        return list(self.nu) * self.levels if len(self.nu) == 1 else list(self.nu)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr_exponents=self.lr_exponents, lr_descriptors=self.lr_descriptors, momentum=self.momentum,
            weight_decay=self.weight_decay, epochs=self.epochs, attach=self.attach, sigma=self.sigma,
            seed=self.seed, train_exponents=self.train_exponents,
            train_descriptors=self.train_descriptors, checkpoint_every=self.checkpoint_every,
        )


_PARSERS = {
    bool: _bool,
    int: int,
    float: float,
    str: str,
    "nu": _floats,
    "attach": _attach,
}


def _field_types() -> dict[str, type]:
    hints = {"int": int, "float": float, "bool": bool, "str": str}
    out = {}
    for f in dataclasses.fields(RunConfig):
        if f.name == "extra":
            continue
        out[f.name] = hints.get(str(f.type), str(f.type))
    return out


def parse_config(text: str, **overrides) -> RunConfig:
    types = _field_types()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        parser = _PARSERS.get(key) or _PARSERS.get(types[key], str)
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def load_config(path: str | None, **overrides) -> RunConfig:
    if path is None:
        return parse_config("", **overrides)
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, **overrides)
