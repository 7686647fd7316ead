"""Flat ``key = value`` run configuration files.

Keys are the :class:`~duallm.model.ModelConfig` fields plus the run settings
in :class:`RunConfig`. Unknown keys are rejected; ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .model import ConfigError, ModelConfig
from .train import DynevalSettings, TrainSettings


@dataclass
class RunConfig:
    # corpus files (no default)
    train_path: str = ""
    valid_path: str = ""
    test_path: str = ""
    checkpoint: str = ""  # empty: <out_dir>/checkpoint.bin
    out_dir: str = "runs"
    epochs: int = 100
    batch_size: int = 32
    seq_len: int = 25
    lr: float = 1e-3
    beta1: float = 0.9
    clipnorm: float = 0.0
    eval_batch_size: int = 1
    lr_eval: float = 1e-5
    clipnorm_eval: float = 0.0
    seq_len_eval: int = 25
    temperature: float = 1.0
    tune_mode: str = "static"
    compare_recurrences: str = "LSTM,dLSTM,mdLSTM"
    log_seconds: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            epochs=self.epochs,
            batch_size=self.batch_size,
            seq_len=self.seq_len,
            lr=self.lr,
            beta1=self.beta1,
            clipnorm=self.clipnorm,
            eval_batch_size=self.eval_batch_size,
        )

    def dyneval_settings(self) -> DynevalSettings:
        return DynevalSettings(
            lr_eval=self.lr_eval,
            clipnorm_eval=self.clipnorm_eval,
            seq_len_eval=self.seq_len_eval,
            temperature=self.temperature,
            batch_size=self.eval_batch_size,
            beta1=self.beta1,
        )

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out_dir) / "checkpoint.bin"

    def validate(self) -> RunConfig:
        for name in ("epochs", "batch_size", "seq_len", "eval_batch_size", "seq_len_eval"):
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        for name in ("lr", "lr_eval", "clipnorm", "clipnorm_eval"):
            if getattr(self, name) < 0:
                raise ConfigError(name, f"must be >= 0, got {getattr(self, name)}")
        if not 0 <= self.beta1 < 1:
            raise ConfigError("beta1", f"must lie in [0, 1), got {self.beta1}")
        if self.temperature <= 0:
            raise ConfigError("temperature", f"must be positive, got {self.temperature}")
        if self.tune_mode not in ("static", "dynamic"):
            raise ConfigError("tune_mode", f"expected 'static' or 'dynamic', got {self.tune_mode!r}")
        return self


_RUN_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "model"}
_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}
_RUN_HINTS = typing.get_type_hints(RunConfig)
_MODEL_HINTS = typing.get_type_hints(ModelConfig)
KEYS = tuple(_MODEL_FIELDS) + tuple(_RUN_FIELDS)


def _convert(key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind.__name__}") from None
    return raw


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def build_run_config(pairs: dict[str, str]) -> RunConfig:
    run_kw, model_kw = {}, {}
    for key, raw in pairs.items():
        if key in _MODEL_FIELDS:
            model_kw[key] = _convert(key, raw, _MODEL_HINTS[key])
        elif key in _RUN_FIELDS:
            run_kw[key] = _convert(key, raw, _RUN_HINTS[key])
        else:
            raise ConfigError(key, "unknown config key")
    return RunConfig(model=ModelConfig(**model_kw), **run_kw).validate()


def load_run_config(path=None, overrides: list[str] | None = None) -> tuple[RunConfig, dict[str, str]]:
    """Read ``path`` (optional) and apply ``key=value`` overrides, which win.

    Returns the config and the effective raw pairs (for echoing).
    """
    pairs: dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        pairs.update(parse_pairs(text, str(path)))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    return build_run_config(pairs), pairs


def dump_run_config(cfg: RunConfig) -> str:
    """Every key with its effective value, model keys first."""
    lines = [f"{k} = {_fmt(getattr(cfg.model, k))}" for k in _MODEL_FIELDS]
    lines += [f"{k} = {_fmt(getattr(cfg, k))}" for k in _RUN_FIELDS]
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)
