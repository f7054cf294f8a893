"""Typed key=value configuration shared by every CLI command.

Text format: ``key = value`` lines, ``#`` comment lines, optional
``[section]`` headers that prefix the keys that follow. Every key has a
declared type and default; unknown keys and malformed values are rejected
with the full key path. Serialization is canonical (sorted dotted keys),
so parse -> serialize -> parse is the identity.
"""
from __future__ import annotations

from dataclasses import dataclass

from .encoder import EncoderConfig
from .errors import ConfigError, FlowtrackError
from .flow_mask import FlowPolicy
from .model import ModelGeometry
from .pipeline import RunConfig
from .synth_bench import SynthConfig


def _parse_bool(text):
    if text in ("true", "false"):
        return text == "true"
    raise ValueError("expected true or false")


def _parse_schedule(text):
    """Elimination schedule: comma-separated layer:count pairs, may be empty."""
    if not text:
        return ()
    pairs = []
    for part in text.split(","):
        layer, sep, count = part.partition(":")
        if not sep or not layer or not count:
            raise ValueError(f"expected layer:count, got {part!r}")
        pairs.append((int(layer), int(count)))
    # keep the canonical text stable under pair reordering
    return tuple(sorted(pairs))


def _format_schedule(value):
    return ",".join(f"{layer}:{count}" for layer, count in value)


def _parse_str_list(text):
    return tuple(p for p in (s.strip() for s in text.split(",")) if p)


def _parse_int_list(text):
    return tuple(int(p) for p in text.split(",") if p.strip())


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return _format_schedule(value)
        return ",".join(str(v) for v in value)
    return str(value)


# key -> (parser, default). Paper-scale model defaults; synth and training
# knobs default to the toy benchmark scale.
SCHEMA = {
    "seed": (int, 0),
    "geometry.template_size": (int, 128),
    "geometry.search_size": (int, 256),
    "geometry.dynamic_size": (int, 192),
    "geometry.patch": (int, 16),
    "encoder.n_layers": (int, 12),
    "encoder.d": (int, 768),
    "encoder.h": (int, 12),
    "encoder.ffn_dim": (int, 0),
    "flow.variant": (str, "full"),
    "flow.partition_layer": (int, 10),
    "flow.k_top": (int, 64),
    "flow.elimination": (_parse_schedule, ((7, 64),)),
    "flow.partition_mode": (str, "per_layer"),
    "flow.omega_reduce": (str, "mean"),
    "run.search_factor": (float, 4.0),
    "run.template_factor": (float, 2.0),
    "run.update_interval": (int, 25),
    "run.update_threshold": (float, 0.7),
    "loss.lambda_iou": (float, 2.0),
    "loss.lambda_l1": (float, 5.0),
    "synth.frame_size": (int, 96),
    "synth.n_frames": (int, 8),
    "synth.target_size": (int, 20),
    "synth.texture_seed": (int, 0),
    "synth.n_distractors": (int, 2),
    "synth.similarity": (float, 0.8),
    "synth.speed": (float, 3.0),
    "synth.jitter": (float, 0.0),
    "synth.drift": (float, 0.0),
    "synth.occlusion": (_parse_bool, False),
    "synth.seed": (int, 0),
    "train.steps": (int, 200),
    "train.lr": (float, 0.05),
    "train.sequences": (int, 20),
    "ablate.variants": (_parse_str_list, ("baseline", "C", "full")),
    "ablate.seeds": (_parse_int_list, (0, 1, 2, 3, 4)),
    "ablate.train_sequences": (int, 200),
    "ablate.eval_sequences": (int, 50),
    "paths.run_dir": (str, "runs"),
    "paths.sequence": (str, ""),
    "paths.boxes": (str, ""),
    "paths.predictions": (str, ""),
    "paths.checkpoint": (str, ""),
}


@dataclass(frozen=True)
class Config:
    """Validated configuration; ``values`` maps dotted keys to typed values."""

    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def to_text(self):
        return "\n".join(f"{k} = {_fmt(self.values[k])}"
                         for k in sorted(self.values)) + "\n"

    # -- domain-object builders -------------------------------------------

    def geometry(self):
        v = self.values
        return _build("geometry", ModelGeometry,
                      template_size=v["geometry.template_size"],
                      search_size=v["geometry.search_size"],
                      dynamic_size=v["geometry.dynamic_size"],
                      patch=v["geometry.patch"])

    def flow_policy(self):
        v = self.values
        return _build("flow", FlowPolicy,
                      variant=v["flow.variant"],
                      partition_layer=v["flow.partition_layer"],
                      k_top=v["flow.k_top"],
                      elimination=v["flow.elimination"],
                      n_layers=v["encoder.n_layers"],
                      partition_mode=v["flow.partition_mode"],
                      omega_reduce=v["flow.omega_reduce"])

    def encoder_config(self):
        v = self.values
        return _build("encoder", EncoderConfig,
                      n_layers=v["encoder.n_layers"], d=v["encoder.d"],
                      h=v["encoder.h"], ffn_dim=v["encoder.ffn_dim"],
                      policy=self.flow_policy())

    def run_config(self):
        v = self.values
        return _build("run", RunConfig, geometry=self.geometry(),
                      search_factor=v["run.search_factor"],
                      template_factor=v["run.template_factor"],
                      update_interval=v["run.update_interval"],
                      update_threshold=v["run.update_threshold"])

    def synth_config(self, **overrides):
        v = self.values
        fields = {name: v[f"synth.{name}"] for name in
                  ("frame_size", "n_frames", "target_size", "texture_seed",
                   "n_distractors", "similarity", "speed", "jitter",
                   "drift", "occlusion", "seed")}
        fields.update(overrides)
        return _build("synth", SynthConfig, **fields)


def _build(section, cls, **kwargs):
    try:
        return cls(**kwargs)
    except FlowtrackError as exc:
        raise ConfigError(str(exc), key=section) from exc


def _set(values, key, raw):
    if key not in SCHEMA:
        raise ConfigError("unknown config key", key=key)
    parser, _ = SCHEMA[key]
    try:
        values[key] = parser(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"invalid value {raw.strip()!r} ({exc})",
                          key=key) from None


def parse_config(text, overrides=()):
    """Parse config text plus ``key=value`` override strings (flags win)."""
    values = {k: default for k, (_, default) in SCHEMA.items()}
    section = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        key, eq, raw = line.partition("=")
        if not eq:
            raise ConfigError(f"line {lineno}: expected key = value, got "
                              f"{line!r}")
        key = key.strip()
        # dotted keys are absolute; bare keys pick up the open section
        if section and "." not in key:
            key = f"{section}.{key}"
        _set(values, key, raw)
    for item in overrides:
        key, eq, raw = item.partition("=")
        if not eq:
            raise ConfigError(f"override must be key=value, got {item!r}")
        _set(values, key.strip(), raw)
    cfg = Config(values)
    _validate(cfg)
    return cfg


def _validate(cfg):
    cfg.run_config()
    cfg.encoder_config()
    cfg.synth_config()
    if cfg["encoder.d"] % 16:
        raise ConfigError("token dim must be divisible by 16 for the head",
                          key="encoder.d")
    if not 0.0 <= cfg["run.update_threshold"] <= 1.0:
        raise ConfigError("update threshold must lie in [0, 1]",
                          key="run.update_threshold")
    for key in ("loss.lambda_iou", "loss.lambda_l1"):
        if cfg[key] < 0.0:
            raise ConfigError("loss weight must be nonnegative", key=key)
    for key in ("train.steps", "train.sequences", "ablate.train_sequences",
                "ablate.eval_sequences"):
        if cfg[key] < 1:
            raise ConfigError("must be >= 1", key=key)
    if cfg["train.lr"] <= 0.0:
        raise ConfigError("learning rate must be positive", key="train.lr")
    if not cfg["ablate.variants"]:
        raise ConfigError("need at least one variant", key="ablate.variants")
    if not cfg["ablate.seeds"]:
        raise ConfigError("need at least one seed", key="ablate.seeds")


def load_config(path, overrides=()):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config(text, overrides)
