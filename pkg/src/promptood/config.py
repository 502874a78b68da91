"""Run configuration: one flat key=value file governing every stage.

Defaults mirror the small-benchmark settings (loss weights 1e-5/1e-3, Top-K
{2, 10, 8}, margin 10, 4 grapher layers); the large-benchmark variant ships
as a second config file. Missing keys take defaults, unknown keys are hard
errors, and one global seed drives all randomness.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .adapter import AdapterTrainSettings, LossWeights
from .errors import ParseError
from .graph import TopKConfig
from .vig import EnergyConfig, ViGTrainSettings


@dataclass
class RunConfig:
    tau: float = 0.01
    lambda_pos: float = 1e-5
    lambda_neg: float = 1e-3
    lambda_energy: float = 0.1
    m_in: float = 10.0
    t_energy: float = 1.0
    n_features: int = 3
    k_text: int = 2
    k_patch: int = 10
    k_cross: int = 8
    vig_layers: int = 4
    hidden_dim: int = 0  # 0 = automatic (twice the embedding dimension)
    lr_adapter: float = 1e-2
    lr_vig: float = 0.05
    epochs_adapter: int = 200
    epochs_vig: int = 100
    pooling: str = "mean"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def fail(key: str, message: str):
            raise ParseError(message, key=key)

        if self.tau <= 0:
            fail("tau", f"tau must be positive, got {self.tau}")
        if self.lambda_pos < 0:
            fail("lambda_pos", "loss weights must be non-negative")
        if self.lambda_neg < 0:
            fail("lambda_neg", "loss weights must be non-negative")
        if self.lambda_energy < 0:
            fail("lambda_energy", "loss weights must be non-negative")
        if self.t_energy <= 0:
            fail("t_energy", f"t_energy must be positive, got {self.t_energy}")
        if self.n_features < 1:
            fail("n_features", f"n_features must be at least 1, got {self.n_features}")
        for key in ("k_text", "k_patch", "k_cross"):
            if getattr(self, key) < 1:
                fail(key, f"{key} must be at least 1, got {getattr(self, key)}")
        if self.vig_layers < 1:
            fail("vig_layers", f"vig_layers must be at least 1, got {self.vig_layers}")
        if self.hidden_dim < 0:
            fail("hidden_dim", f"hidden_dim must be non-negative, got {self.hidden_dim}")
        if self.lr_adapter <= 0:
            fail("lr_adapter", "learning rates must be positive")
        if self.lr_vig <= 0:
            fail("lr_vig", "learning rates must be positive")
        if self.epochs_adapter < 0:
            fail("epochs_adapter", "epoch counts must be non-negative")
        if self.epochs_vig < 0:
            fail("epochs_vig", "epoch counts must be non-negative")
        if self.pooling not in ("mean", "max"):
            fail("pooling", f"pooling must be 'mean' or 'max', got {self.pooling!r}")

    # views consumed by the owning modules

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_pos=self.lambda_pos, lambda_neg=self.lambda_neg, tau=self.tau)

    def topk(self) -> TopKConfig:
        return TopKConfig(k_text=self.k_text, k_patch=self.k_patch, k_cross=self.k_cross)

    def energy(self) -> EnergyConfig:
        return EnergyConfig(
            temperature=self.t_energy, margin_in=self.m_in, lambda_energy=self.lambda_energy
        )

    def adapter_settings(self) -> AdapterTrainSettings:
        return AdapterTrainSettings(
            learning_rate=self.lr_adapter, epochs=self.epochs_adapter, seed=self.seed
        )

    def vig_settings(self) -> ViGTrainSettings:
        return ViGTrainSettings(
            learning_rate=self.lr_vig, epochs=self.epochs_vig, seed=self.seed,
            pooling=self.pooling,
        )

    def hidden_dim_for(self, dim: int) -> int:
        return self.hidden_dim if self.hidden_dim else 2 * dim


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_INT_KEYS = {
    "n_features", "k_text", "k_patch", "k_cross", "vig_layers", "hidden_dim",
    "epochs_adapter", "epochs_vig", "seed",
}
_FLOAT_KEYS = {
    "tau", "lambda_pos", "lambda_neg", "lambda_energy", "m_in", "t_energy",
    "lr_adapter", "lr_vig",
}
_STR_KEYS = {"pooling"}


def parse_config(text: str) -> RunConfig:
    """Parse `key = value` lines; '#' starts a comment, blanks are ignored.

    Raises:
        ParseError: unknown or repeated key, bad value, or range violation,
            tagged with its line number.
    """
    values: dict[str, object] = {}
    line_of: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw!r}", lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _FIELD_TYPES:
            raise ParseError(f"unknown key {key!r}", lineno)
        if key in values:
            raise ParseError(f"key {key!r} set twice", lineno)
        try:
            if key in _INT_KEYS:
                values[key] = int(value)
            elif key in _FLOAT_KEYS:
                values[key] = float(value)
            else:
                values[key] = value
        except ValueError:
            raise ParseError(f"cannot parse value {value!r} for {key!r}", lineno)
        line_of[key] = lineno

    try:
        return RunConfig(**values)
    except ParseError as exc:
        raise ParseError(exc.args[0], line=line_of.get(exc.key), key=exc.key) from None


def load_config(path: str | Path | None) -> RunConfig:
    """Read a config file; a missing path means all defaults."""
    if path is None:
        return RunConfig()
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
