"""Plain-text ``key = value`` run configuration with a typed schema.

A config file holds one ``key = value`` pair per line; ``#`` starts a comment.
Keys are fixed by :data:`SCHEMA` and unknown keys are rejected.  Values are
resolved in this order, later sources winning: schema defaults, the config
file, ``--set`` overrides, then the ``--seed`` / ``--preset`` flags.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .detector import FUSION_VARIANTS, ModelConfig
from .pseudofake import AugmentConfig
from .synthdata import FAKE_STYLES, CorpusSpec, SplitStyle
from .train import GRIDS, TrainConfig

RESOLVED_NAME = "config.resolved"


class ConfigError(ValueError):
    """Invalid key, value or file."""


# -- value types ---------------------------------------------------------------


@dataclass(frozen=True)
class Kind:
    name: str
    parse: Callable[[str], Any]
    show: Callable[[Any], str] = str


def _int(text: str) -> int:
    return int(text.strip())


def _float(text: str) -> float:
    return float(text.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


def _pair(parse_one):
    def parse(text: str):
        vals = tuple(parse_one(p) for p in text.replace("x", ",").split(","))
        if len(vals) != 2:
            raise ValueError(f"expected two comma-separated values, got {text!r}")
        return vals

    return parse


def _optional_pair(text: str):
    if text.strip().lower() in ("none", ""):
        return None
    return _pair(int)(text)


def _choice(*options):
    def parse(text: str) -> str:
        t = text.strip()
        if t not in options:
            raise ValueError(f"{t!r} is not one of {', '.join(options)}")
        return t

    return parse


def _show_seq(v) -> str:
    return "none" if v is None else ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)


INT = Kind("int", _int)
FLOAT = Kind("float", _float, repr)
BOOL = Kind("bool", _bool, lambda v: "true" if v else "false")
STR = Kind("str", str.strip)
INTS = Kind("int list", _ints, _show_seq)
INT_PAIR = Kind("int pair", _pair(int), _show_seq)
FLOAT_PAIR = Kind("float pair", _pair(float), _show_seq)
OPT_PAIR = Kind("int pair or none", _optional_pair, _show_seq)


def _choice_kind(*options) -> Kind:
    return Kind(" | ".join(options), _choice(*options))


# -- schema ----------------------------------------------------------------------


def _schema() -> dict[str, tuple[Kind, Any]]:
    corpus = CorpusSpec()
    aug = AugmentConfig()
    tr = TrainConfig()
    model = ModelConfig()
    styles = FAKE_STYLES
    s: dict[str, tuple[Kind, Any]] = {
        "seed": (INT, 0),
        "preset": (_choice_kind("desk", "paper"), "desk"),
        # corpus; an empty corpus.dir means "generate in memory from the seed"
        "corpus.dir": (STR, ""),
        "corpus.n_train": (INT, corpus.n_train),
        "corpus.n_test": (INT, corpus.n_test),
        "corpus.n_shift": (INT, corpus.n_shift),
        "corpus.patch": (INT, corpus.patch),
        "corpus.distractors": (INT, corpus.distractors),
        "corpus.noise": (FLOAT, corpus.noise),
        "corpus.audio_noise": (FLOAT, corpus.audio_noise),
        "corpus.envelope_floor": (FLOAT, corpus.envelope_floor),
    }
    for split, style in (("train", corpus.train_style), ("shift", corpus.shift_style)):
        s[f"corpus.{split}_carrier"] = (FLOAT_PAIR, style.carrier_band)
        s[f"corpus.{split}_anchor"] = (INT_PAIR, style.anchor)
        s[f"corpus.{split}_jitter"] = (INT, style.jitter)
        s[f"corpus.{split}_fake_style"] = (_choice_kind(*styles), style.fake_style)
    s.update(
        {
            "model.attention": (BOOL, model.attention),
            "model.fusion": (_choice_kind(*FUSION_VARIANTS), model.fusion),
            "model.pooled_size": (OPT_PAIR, None),
            "model.dtype": (_choice_kind("float32", "float64"), model.dtype),
            "augment.enabled": (BOOL, True),
            "augment.r_min": (FLOAT, aug.r_min),
            "augment.r_max": (FLOAT, aug.r_max),
            "augment.apply_probability": (FLOAT, aug.apply_probability),
            "train.epochs": (INT, tr.epochs),
            "train.batch_size": (INT, tr.batch_size),
            "train.lr": (FLOAT, tr.lr),
            "train.weight_decay": (FLOAT, tr.weight_decay),
            "eval.split": (_choice_kind("train", "test", "shift"), "test"),
            "eval.checkpoint": (STR, ""),
            "ablate.grid": (_choice_kind(*GRIDS), "table1"),
            "ablate.seeds": (INTS, (0, 1, 2, 3, 4)),
            "export.split": (_choice_kind("train", "test", "shift"), "test"),
            "export.limit": (INT, 8),
        }
    )
    return s


SCHEMA = _schema()


def parse_value(key: str, text: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    kind = SCHEMA[key][0]
    try:
        return kind.parse(text)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{key}: expected {kind.name}, got {text!r} ({exc})") from None


def parse_assignment(line: str, where: str = "") -> tuple[str, str]:
    if "=" not in line:
        raise ConfigError(f"{where}expected key=value, got {line!r}")
    key, _, value = line.partition("=")
    return key.strip(), value.strip()


def read_config_file(path) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = parse_assignment(line, f"{path}:{n}: ")
        if key in values:
            raise ConfigError(f"{path}:{n}: duplicate key {key!r}")
        try:
            values[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{n}: {exc}") from None
    return values


# -- resolved configuration ---------------------------------------------------------


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: {k: v for k, (_, v) in SCHEMA.items()})

    @classmethod
    def resolve(
        cls,
        config_path=None,
        overrides: list[str] | None = None,
        seed: int | None = None,
        preset: str | None = None,
    ) -> RunConfig:
        cfg = cls()
        if config_path is not None:
            cfg.values.update(read_config_file(config_path))
        for item in overrides or []:
            key, value = parse_assignment(item, "--set: ")
            cfg.values[key] = parse_value(key, value)
        if seed is not None:
            cfg.values["seed"] = seed
        if preset is not None:
            cfg.values["preset"] = parse_value("preset", preset)
        cfg.validate()
        return cfg

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def validate(self) -> None:
        """Build every derived object once so bad combinations fail early."""
        try:
            self.model_config()
            self.corpus_spec()
            self.train_config()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if self["train.epochs"] < 1 or self["train.batch_size"] < 2:
            raise ConfigError("train.epochs must be >= 1 and train.batch_size >= 2")
        if self["export.limit"] < 1:
            raise ConfigError("export.limit must be positive")

    def model_config(self, **overrides) -> ModelConfig:
        fields = dict(
            attention=self["model.attention"],
            fusion=self["model.fusion"],
            pooled_size=self["model.pooled_size"],
            dtype=self["model.dtype"],
        )
        fields.update(overrides)
        return ModelConfig.from_preset(self["preset"], **fields)

    def corpus_spec(self) -> CorpusSpec:
        m = self.model_config()

        def style(split):
            return SplitStyle(
                carrier_band=self[f"corpus.{split}_carrier"],
                anchor=self[f"corpus.{split}_anchor"],
                jitter=self[f"corpus.{split}_jitter"],
                fake_style=self[f"corpus.{split}_fake_style"],
            )

        return CorpusSpec(
            n_train=self["corpus.n_train"],
            n_test=self["corpus.n_test"],
            n_shift=self["corpus.n_shift"],
            audio_len=m.audio_len,
            frames=m.frames,
            channels=m.visual_channels,
            height=m.height,
            width=m.width,
            patch=self["corpus.patch"],
            distractors=self["corpus.distractors"],
            noise=self["corpus.noise"],
            audio_noise=self["corpus.audio_noise"],
            envelope_floor=self["corpus.envelope_floor"],
            train_style=style("train"),
            shift_style=style("shift"),
            seed=self.seed,
        )

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            r_min=self["augment.r_min"],
            r_max=self["augment.r_max"],
            apply_probability=self["augment.apply_probability"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            model=self.model_config(),
            augment=self.augment_config() if self["augment.enabled"] else None,
            epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            lr=self["train.lr"],
            weight_decay=self["train.weight_decay"],
            seed=self.seed,
        )

    def to_text(self) -> str:
        lines = []
        for key, (kind, _) in SCHEMA.items():
            lines.append(f"{key} = {kind.show(self.values[key])}")
        return "\n".join(lines) + "\n"

    def write_resolved(self, out_dir) -> Path:
        """Write ``config.resolved`` read-only; re-running from it reproduces the run."""
        path = Path(out_dir) / RESOLVED_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_text())
        os.chmod(tmp, 0o444)
        tmp.replace(path)
        return path
