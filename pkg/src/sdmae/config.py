"""Experiment configuration: defaults, presets, validation and the key=value file format.

Config files are flat ``key = value`` lines; ``#`` starts a comment.  Values
are resolved in increasing precedence::

    built-in defaults (or preset) < SDMAE_<KEY> env vars < config file < overrides

Defaults (``full`` preset):

==========================  ==================  =========================================
key                         default             meaning
==========================  ==================  =========================================
patch_size                  16                  token side d in pixels
frame_height                224                 resize target h
frame_width                 224                 resize target w
channels                    3                   input channels c
mask_ratio                  0.5                 fraction of tokens removed in training
encoder_blocks              3                   transformer blocks in the shared encoder
encoder_dim                 256                 encoder embedding width
teacher_decoder_blocks      3                   blocks in the teacher decoder
student_decoder_blocks      1                   blocks in the student decoder
decoder_dim                 128                 decoder embedding width
attention_heads             4                   heads in every block
mlp_ratio                   4                   feed-forward expansion factor
ffn_type                    pointwise           ``pointwise`` (1x1 conv) or ``mlp`` (dense)
predict_anomaly_map         true                extra anomaly-map output channel
motion_weighting            true                motion-gradient token weights (else uniform)
loss_on_masked_only         false               restrict the loss to masked tokens
augment_probability         0.25                chance of pasting a synthetic event
learning_rate               1e-4                Adam step size
batch_size                  100                 frames per mini-batch
teacher_epochs              100                 stage-1 epochs
student_epochs              40                  stage-2 epochs
score_strategy              T_TSD               T, T_S, T_TSD or T_S_TSD
smooth_kernel               5,5,5               (t, h, w) mean-filter window, odd
gaussian_sigma              3.0                 temporal Gaussian std (frames)
inference_mask_ratio        = mask_ratio        masking applied to test frames
seed                        0                   global seed
==========================  ==================  =========================================

The ``toy`` preset changes h=w=64, d=8, c=1, encoder_dim=64, decoder_dim=32,
teacher_epochs=10, student_epochs=4 and batch_size=16.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping

ENV_PREFIX = "SDMAE_"
STRATEGIES = ("T", "T_S", "T_TSD", "T_S_TSD")
FFN_TYPES = ("pointwise", "mlp")

# fields that determine parameter shapes; used for checkpoint fingerprints
ARCH_FIELDS = (
    "patch_size", "frame_height", "frame_width", "channels",
    "encoder_blocks", "encoder_dim", "teacher_decoder_blocks",
    "student_decoder_blocks", "decoder_dim", "attention_heads",
    "mlp_ratio", "ffn_type", "predict_anomaly_map",
)


class ConfigError(ValueError):
    """Invalid, unparseable or missing configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    patch_size: int = 16
    frame_height: int = 224
    frame_width: int = 224
    channels: int = 3
    mask_ratio: float = 0.5
    encoder_blocks: int = 3
    encoder_dim: int = 256
    teacher_decoder_blocks: int = 3
    student_decoder_blocks: int = 1
    decoder_dim: int = 128
    attention_heads: int = 4
    mlp_ratio: int = 4
    ffn_type: str = "pointwise"
    predict_anomaly_map: bool = True
    motion_weighting: bool = True
    loss_on_masked_only: bool = False
    augment_probability: float = 0.25
    learning_rate: float = 1e-4
    batch_size: int = 100
    teacher_epochs: int = 100
    student_epochs: int = 40
    score_strategy: str = "T_TSD"
    smooth_kernel: tuple[int, int, int] = (5, 5, 5)
    gaussian_sigma: float = 3.0
    inference_mask_ratio: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.inference_mask_ratio is None:
            object.__setattr__(self, "inference_mask_ratio", self.mask_ratio)
        object.__setattr__(self, "smooth_kernel", tuple(self.smooth_kernel))

    @property
    def grid(self) -> tuple[int, int]:
        return self.frame_height // self.patch_size, self.frame_width // self.patch_size

    @property
    def num_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def out_channels(self) -> int:
        return self.channels + (1 if self.predict_anomaly_map else 0)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def fingerprint(self) -> str:
        text = ";".join(f"{k}={format_value(getattr(self, k))}" for k in ARCH_FIELDS)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


PRESETS: dict[str, dict] = {
    "full": {},
    "toy": dict(
        frame_height=64, frame_width=64, patch_size=8, channels=1,
        encoder_dim=64, decoder_dim=32, teacher_epochs=10, student_epochs=4,
        batch_size=16,
    ),
}


def preset(name: str = "full") -> ExperimentConfig:
    try:
        return ExperimentConfig(**PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def _fail(name: str, rule: str):
    raise ConfigError(f"{name}: {rule}")


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Return ``cfg`` unchanged if every invariant holds, else raise ConfigError."""
    positive_ints = ("patch_size", "frame_height", "frame_width", "channels", "encoder_dim",
                     "decoder_dim", "attention_heads", "mlp_ratio", "batch_size")
    for name in positive_ints:
        if getattr(cfg, name) < 1:
            _fail(name, "must be >= 1")
    if cfg.frame_height % cfg.patch_size:
        _fail("frame_height", f"h not divisible by d ({cfg.frame_height} % {cfg.patch_size} != 0)")
    if cfg.frame_width % cfg.patch_size:
        _fail("frame_width", f"w not divisible by d ({cfg.frame_width} % {cfg.patch_size} != 0)")
    n = cfg.num_tokens
    for name in ("mask_ratio", "inference_mask_ratio"):
        r = getattr(cfg, name)
        if not 0.0 <= r < 1.0:
            _fail(name, "must lie in [0, 1)")
        if n - round(r * n) < 1:
            _fail(name, f"leaves no visible token out of {n}")
    for name in ("encoder_blocks", "teacher_decoder_blocks"):
        if getattr(cfg, name) < 1:
            _fail(name, "must be >= 1")
    if cfg.student_decoder_blocks < 1:
        _fail("student_decoder_blocks", "must be >= 1")
    for name in ("encoder_dim", "decoder_dim"):
        if getattr(cfg, name) % cfg.attention_heads:
            _fail(name, "must be divisible by attention_heads")
    if not 0.0 <= cfg.augment_probability <= 1.0:
        _fail("augment_probability", "must lie in [0, 1]")
    if not cfg.learning_rate > 0:
        _fail("learning_rate", "must be positive")
    if cfg.teacher_epochs < 0 or cfg.student_epochs < 0:
        _fail("teacher_epochs" if cfg.teacher_epochs < 0 else "student_epochs", "must be >= 0")
    if cfg.score_strategy not in STRATEGIES:
        _fail("score_strategy", f"must be one of {STRATEGIES}")
    if cfg.ffn_type not in FFN_TYPES:
        _fail("ffn_type", f"must be one of {FFN_TYPES}")
    if len(cfg.smooth_kernel) != 3:
        _fail("smooth_kernel", "must have three entries (t, h, w)")
    for k in cfg.smooth_kernel:
        if k < 1 or k % 2 == 0:
            _fail("smooth_kernel", f"entries must be odd and >= 1, got {cfg.smooth_kernel}")
    if not cfg.gaussian_sigma > 0:
        _fail("gaussian_sigma", "must be positive")
    return cfg


# ----------------------------------------------------------------------------
# text format


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def parse_value(key: str, text: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind == "bool":
            return _parse_bool(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "float | None":
            return None if text.lower() in ("", "none") else float(text)
        if kind == "tuple[int, int, int]":
            return tuple(int(v) for v in text.replace("(", "").replace(")", "").split(","))
        return text
    except ValueError:
        raise ConfigError(f"cannot parse {key}={text!r} as {kind}") from None


def parse_lines(lines: Iterable[str], source: str = "<text>") -> dict:
    values = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, text = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, text)
    return values


def dumps(cfg: ExperimentConfig) -> str:
    return "".join(f"{f.name} = {format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


def loads(text: str) -> ExperimentConfig:
    return validate_config(ExperimentConfig(**parse_lines(text.splitlines())))


def save_config(cfg: ExperimentConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(dumps(cfg))


def _env_values(environ: Mapping[str, str]) -> dict:
    values = {}
    for name, text in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            if key in _FIELD_TYPES:
                values[key] = parse_value(key, text)
    return values


def load_config(
    path: str | os.PathLike | None = None,
    overrides: Iterable[str] | Mapping[str, object] = (),
    base: str = "full",
    environ: Mapping[str, str] | None = None,
) -> ExperimentConfig:
    """Build a validated config from a preset, env vars, a file and overrides.

    ``overrides`` is either a mapping or ``key=value`` strings as given to the
    CLI ``--set`` flag.
    """
    if base not in PRESETS:
        raise ConfigError(f"unknown preset {base!r}; choose from {sorted(PRESETS)}")
    values = dict(PRESETS[base])
    values.update(_env_values(os.environ if environ is None else environ))
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_lines(path.read_text().splitlines(), str(path)))
    if isinstance(overrides, Mapping):
        for key, value in overrides.items():
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = parse_value(key, value) if isinstance(value, str) else value
    else:
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must be key=value, got {item!r}")
            key, text = item.split("=", 1)
            values[key.strip()] = parse_value(key.strip(), text)
    # an explicit mask_ratio without inference_mask_ratio keeps the two tied
    values.setdefault("inference_mask_ratio", None)
    return validate_config(ExperimentConfig(**values))
