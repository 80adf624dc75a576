"""Flat key=value run configuration with [data]/[model]/[train]/[eval] sections.

``#`` starts a comment, unknown sections or keys are errors, and parsing is
locale-independent (decimal point only). One file drives every pipeline
stage; the effective config can be dumped back to text that re-parses to
the same values.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

from .nets import EncoderConfig
from .syndata import SynthSpec
from .train import TrainConfig


class ConfigError(ValueError):
    """Raised for unparsable or unknown configuration input."""


@dataclass(frozen=True)
class ModelArch:
    """Architecture knobs; channel counts come from the data section."""

    conv_blocks: int = 3
    kernel: int = 5
    dilations: tuple[int, ...] = (1, 2, 4)
    conv_channels: int = 64
    gru_hidden: int = 32
    content_dim: int = 12
    prosody_dim: int = 4
    speaker_dim: int = 64
    n_style_tokens: int = 8


@dataclass(frozen=True)
class EvalConfig:
    n_pairs: int = 100
    seed: int = 0
    use_dtw: bool = False
    exclude_first_channel: bool = False


@dataclass(frozen=True)
class RunConfig:
    data: SynthSpec
    model: ModelArch
    train: TrainConfig
    eval: EvalConfig

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            unit_channels=self.data.unit_channels,
            mel_channels=self.data.mel_channels,
            n_emotions=self.data.n_emotions,
            **asdict(self.model) | {"dilations": self.model.dilations},
        )


def default_config() -> RunConfig:
    return RunConfig(
        data=SynthSpec(n_speakers=10),
        model=ModelArch(),
        train=TrainConfig(),
        eval=EvalConfig(),
    )


_INT, _FLOAT, _BOOL, _STR, _INTS = "int", "float", "bool", "str", "ints"

# data section flattens the two range fields into lo/hi scalars
_DATA_KEYS = {
    "n_speakers": _INT,
    "n_emotions": _INT,
    "utterances_per_pair": _INT,
    "frames": _INT,
    "unit_channels": _INT,
    "mel_channels": _INT,
    "seed": _INT,
    "speaker_scale_lo": _FLOAT,
    "speaker_scale_hi": _FLOAT,
    "speaker_shift_lo": _FLOAT,
    "speaker_shift_hi": _FLOAT,
}
_MODEL_KEYS = {
    "conv_blocks": _INT,
    "kernel": _INT,
    "dilations": _INTS,
    "conv_channels": _INT,
    "gru_hidden": _INT,
    "content_dim": _INT,
    "prosody_dim": _INT,
    "speaker_dim": _INT,
    "n_style_tokens": _INT,
}
_TRAIN_KEYS = {
    "alpha": _FLOAT,
    "beta": _FLOAT,
    "lambda": _FLOAT,
    "cons_weight": _FLOAT,
    "lr_teacher": _FLOAT,
    "lr_main": _FLOAT,
    "batch_size": _INT,
    "teacher_steps": _INT,
    "main_steps": _INT,
    "finetune_steps": _INT,
    "grad_clip": _FLOAT,
    "seed": _INT,
    "asa_mode": _STR,
    "grl_lambda": _FLOAT,
    "holdout_fraction": _FLOAT,
    "prosody_enabled": _BOOL,
    "discrete_units": _BOOL,
    "adv_check_interval": _INT,
}
_EVAL_KEYS = {
    "n_pairs": _INT,
    "seed": _INT,
    "use_dtw": _BOOL,
    "exclude_first_channel": _BOOL,
}
_SCHEMA = {
    "data": _DATA_KEYS,
    "model": _MODEL_KEYS,
    "train": _TRAIN_KEYS,
    "eval": _EVAL_KEYS,
}


def _convert(section: str, key: str, raw: str, kind: str):
    try:
        if kind == _INT:
            return int(raw)
        if kind == _FLOAT:
            return float(raw)
        if kind == _BOOL:
            low = raw.lower()
            if low in ("true", "false"):
                return low == "true"
            raise ValueError("expected true/false")
        if kind == _INTS:
            return tuple(int(v.strip()) for v in raw.split(","))
        return raw
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} ({e})") from e


def parse_config_text(text: str) -> tuple[RunConfig, set[tuple[str, str]]]:
    """Parse config text; returns the config and the explicitly-set keys."""
    values: dict[tuple[str, str], object] = {}
    section: str | None = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SCHEMA:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside of any section")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _SCHEMA[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        if (section, key) in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in [{section}]")
        values[(section, key)] = _convert(section, key, raw, _SCHEMA[section][key])

    cfg = default_config()
    data_kwargs = {k: v for (s, k), v in values.items() if s == "data"}
    scale = (
        data_kwargs.pop("speaker_scale_lo", cfg.data.speaker_scale_range[0]),
        data_kwargs.pop("speaker_scale_hi", cfg.data.speaker_scale_range[1]),
    )
    shift = (
        data_kwargs.pop("speaker_shift_lo", cfg.data.speaker_shift_range[0]),
        data_kwargs.pop("speaker_shift_hi", cfg.data.speaker_shift_range[1]),
    )
    train_kwargs = {k: v for (s, k), v in values.items() if s == "train"}
    if "lambda" in train_kwargs:
        train_kwargs["lam"] = train_kwargs.pop("lambda")
    model_kwargs = {k: v for (s, k), v in values.items() if s == "model"}
    eval_kwargs = {k: v for (s, k), v in values.items() if s == "eval"}
    try:
        run = RunConfig(
            data=replace(
                cfg.data,
                speaker_scale_range=scale,
                speaker_shift_range=shift,
                **data_kwargs,
            ),
            model=replace(cfg.model, **model_kwargs),
            train=replace(cfg.train, **train_kwargs),
            eval=replace(cfg.eval, **eval_kwargs),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return run, set(values)


def load_config(path) -> tuple[RunConfig, set[tuple[str, str]]]:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config_text(text)


def _dump_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def dump_config(cfg: RunConfig) -> str:
    """Canonical text form; re-parses to an equal RunConfig."""
    lines = []
    lines.append("[data]")
    d = cfg.data
    flat_data = {
        "n_speakers": d.n_speakers,
        "n_emotions": d.n_emotions,
        "utterances_per_pair": d.utterances_per_pair,
        "frames": d.frames,
        "unit_channels": d.unit_channels,
        "mel_channels": d.mel_channels,
        "seed": d.seed,
        "speaker_scale_lo": d.speaker_scale_range[0],
        "speaker_scale_hi": d.speaker_scale_range[1],
        "speaker_shift_lo": d.speaker_shift_range[0],
        "speaker_shift_hi": d.speaker_shift_range[1],
    }
    lines.extend(f"{k} = {_dump_value(v)}" for k, v in flat_data.items())
    lines.append("")
    lines.append("[model]")
    for f in fields(ModelArch):
        lines.append(f"{f.name} = {_dump_value(getattr(cfg.model, f.name))}")
    lines.append("")
    lines.append("[train]")
    for f in fields(TrainConfig):
        key = "lambda" if f.name == "lam" else f.name
        lines.append(f"{key} = {_dump_value(getattr(cfg.train, f.name))}")
    lines.append("")
    lines.append("[eval]")
    for f in fields(EvalConfig):
        lines.append(f"{f.name} = {_dump_value(getattr(cfg.eval, f.name))}")
    return "\n".join(lines) + "\n"


def apply_seed_overrides(
    cfg: RunConfig,
    provided: set[tuple[str, str]],
    cli_seed: int | None,
    env_seed: int | None,
) -> RunConfig:
    """Seed precedence: CLI flag > config file > SAVC_SEED env > defaults."""
    if cli_seed is not None:
        return RunConfig(
            data=replace(cfg.data, seed=cli_seed),
            model=cfg.model,
            train=replace(cfg.train, seed=cli_seed),
            eval=replace(cfg.eval, seed=cli_seed),
        )
    if env_seed is None:
        return cfg
    data = cfg.data if ("data", "seed") in provided else replace(cfg.data, seed=env_seed)
    train = cfg.train if ("train", "seed") in provided else replace(cfg.train, seed=env_seed)
    ev = cfg.eval if ("eval", "seed") in provided else replace(cfg.eval, seed=env_seed)
    return RunConfig(data=data, model=cfg.model, train=train, eval=ev)
