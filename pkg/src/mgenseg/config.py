"""Run configuration: dataclasses, a flat INI-style config format, hashing.

Config files use sections mirroring the package modules ([synth], [ingest],
[model], [losses], [training], [eval]). Unknown sections or keys are hard
errors; a handful of keys are required, everything else has defaults.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .losses import LossWeights

MODALITIES = ("S", "T")
ABLATIONS = (
    "none",
    "no_image_level",
    "no_healthy_mod_translation",
    "no_A_to_P",
    "unshared_latents",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StyleParams:
    """Appearance of one modality: intensity transfer plus texture.

    Defaults are the identity transform. `invert` flips intensities v -> 1-v
    before the gamma/affine stages. Texture and noise are applied only on
    tissue (pixels > 0) so the zero background stays clean.
    """

    gamma: float = 1.0
    invert: bool = False
    contrast: float = 1.0
    brightness: float = 0.0
    texture_amp: float = 0.0
    texture_scale: float = 8.0
    noise_amp: float = 0.0

    def is_identity(self):
        return (
            self.gamma == 1.0
            and not self.invert
            and self.contrast == 1.0
            and self.brightness == 0.0
            and self.texture_amp == 0.0
            and self.noise_amp == 0.0
        )


# Defaults calibrated so that a source-only segmenter transfers poorly (but
# not catastrophically) to the T appearance: T compresses dark intensities
# and carries coarse blob texture that mimics faint lesions.
DEFAULT_STYLE_S = StyleParams(gamma=0.9, noise_amp=0.02)
DEFAULT_STYLE_T = StyleParams(gamma=1.9, texture_amp=0.16, texture_scale=5.0, noise_amp=0.02)


@dataclass(frozen=True)
class SynthConfig:
    """Everything the synthetic dataset generator needs. Deterministic in seed."""

    image_size: int = 64
    n_subjects_per_modality: int = 200
    slices_per_subject: int = 2
    lesion_probability: float = 0.5
    lesion_radius_min: float = 3.0
    lesion_radius_max: float = 8.0
    lesion_contrast_min: float = 0.25
    lesion_contrast_max: float = 0.55
    diseased_threshold: float = 0.01
    style_s: StyleParams = DEFAULT_STYLE_S
    style_t: StyleParams = DEFAULT_STYLE_T
    min_style_gap: float = 0.05
    seed: int = 0

    def style_for(self, modality):
        if modality == "S":
            return self.style_s
        if modality == "T":
            return self.style_t
        raise ConfigError(f"unknown modality tag {modality!r}")

    def validate(self):
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if self.n_subjects_per_modality < 10:
            raise ConfigError("need at least 10 subjects per modality to fill all partitions")
        if self.slices_per_subject < 1:
            raise ConfigError("slices_per_subject must be >= 1")
        if not 0.0 <= self.lesion_probability <= 1.0:
            raise ConfigError("lesion_probability must be in [0, 1]")
        if self.lesion_radius_min > self.lesion_radius_max:
            raise ConfigError("lesion radius range is inverted")
        if not 0.0 < self.diseased_threshold < 1.0:
            raise ConfigError("diseased_threshold must be in (0, 1)")
        return self


@dataclass(frozen=True)
class IngestConfig:
    source_sequence: str = "t1"
    target_sequence: str = "t2"
    diseased_threshold: float = 0.01
    seed: int = 0


@dataclass(frozen=True)
class ModelConfig:
    base_width: int = 8
    n_down: int = 3
    latent_channels: int = 32
    unique_channels: int = 8  # common channels = latent_channels - unique_channels
    attention_gates: bool = True

    @property
    def common_channels(self):
        return self.latent_channels - self.unique_channels

    def validate(self):
        if self.n_down not in (2, 3, 4):
            raise ConfigError("n_down must be between 2 and 4")
        if not 0 < self.unique_channels < self.latent_channels:
            raise ConfigError("unique_channels must split the latent strictly")
        return self


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 15
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seeds: tuple = (0, 1, 2)
    augment: bool = True
    augment_flip: bool = True
    augment_rotate: bool = True
    augment_intensity: bool = True
    steps_per_epoch: int = 0  # 0: cover the larger diseased cell once per epoch
    log_every_step: bool = True

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 so batches mix A and P samples")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        return self


@dataclass(frozen=True)
class ExperimentConfig:
    """One (source, target, annotation budget, ablation) training scenario."""

    source: str = "S"
    target: str = "T"
    source_annotation_fraction: float = 1.0
    target_annotation_fraction: float = 0.0
    ablation: str = "none"
    eval_threshold: float = 0.5
    baseline: bool = False  # source-supervised, no adaptation

    def validate(self):
        if self.source not in MODALITIES or self.target not in MODALITIES:
            raise ConfigError("source/target must be one of " + "/".join(MODALITIES))
        if self.source == self.target:
            raise ConfigError("source and target modalities must differ")
        for name in ("source_annotation_fraction", "target_annotation_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if not 0.0 < self.eval_threshold < 1.0:
            raise ConfigError("eval_threshold must be in (0, 1)")
        return self


@dataclass(frozen=True)
class MatrixConfig:
    """Enumeration knobs for the experiment matrix command."""

    both_directions: bool = False
    source_fractions: tuple = (1.0,)
    ablations: tuple = ("none",)
    include_baseline: bool = False


@dataclass(frozen=True)
class Config:
    synth: SynthConfig = SynthConfig()
    ingest: IngestConfig = IngestConfig()
    model: ModelConfig = ModelConfig()
    losses: LossWeights = LossWeights()
    training: TrainConfig = TrainConfig()
    experiment: ExperimentConfig = ExperimentConfig()
    matrix: MatrixConfig = MatrixConfig()

    def validate(self):
        self.synth.validate()
        self.model.validate()
        self.losses.validate()
        self.training.validate()
        self.experiment.validate()
        return self


# --------------------------------------------------------------------------
# Flat INI schema


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_tuple(text):
    return tuple(int(x) for x in text.replace(",", " ").split())


def _parse_float_tuple(text):
    return tuple(float(x) for x in text.replace(",", " ").split())


def _parse_str_tuple(text):
    return tuple(x for x in text.replace(",", " ").split())


_REQUIRED = object()

# section -> key -> (target dataclass field path, parser, default marker)
_SCHEMA = {
    "synth": {
        "image_size": ("image_size", int, _REQUIRED),
        "n_subjects_per_modality": ("n_subjects_per_modality", int, _REQUIRED),
        "slices_per_subject": ("slices_per_subject", int, None),
        "lesion_probability": ("lesion_probability", float, None),
        "lesion_radius_min": ("lesion_radius_min", float, None),
        "lesion_radius_max": ("lesion_radius_max", float, None),
        "lesion_contrast_min": ("lesion_contrast_min", float, None),
        "lesion_contrast_max": ("lesion_contrast_max", float, None),
        "diseased_threshold": ("diseased_threshold", float, None),
        "min_style_gap": ("min_style_gap", float, None),
        "seed": ("seed", int, None),
        "style_s_gamma": ("style_s.gamma", float, None),
        "style_s_invert": ("style_s.invert", _parse_bool, None),
        "style_s_contrast": ("style_s.contrast", float, None),
        "style_s_brightness": ("style_s.brightness", float, None),
        "style_s_texture_amp": ("style_s.texture_amp", float, None),
        "style_s_texture_scale": ("style_s.texture_scale", float, None),
        "style_s_noise_amp": ("style_s.noise_amp", float, None),
        "style_t_gamma": ("style_t.gamma", float, None),
        "style_t_invert": ("style_t.invert", _parse_bool, None),
        "style_t_contrast": ("style_t.contrast", float, None),
        "style_t_brightness": ("style_t.brightness", float, None),
        "style_t_texture_amp": ("style_t.texture_amp", float, None),
        "style_t_texture_scale": ("style_t.texture_scale", float, None),
        "style_t_noise_amp": ("style_t.noise_amp", float, None),
    },
    "ingest": {
        "source_sequence": ("source_sequence", str, None),
        "target_sequence": ("target_sequence", str, None),
        "diseased_threshold": ("diseased_threshold", float, None),
        "seed": ("seed", int, None),
    },
    "model": {
        "base_width": ("base_width", int, None),
        "n_down": ("n_down", int, None),
        "latent_channels": ("latent_channels", int, None),
        "unique_channels": ("unique_channels", int, None),
        "attention_gates": ("attention_gates", _parse_bool, None),
    },
    "losses": {
        "weight_seg": ("seg", float, None),
        "weight_adv_mod": ("adv_mod", float, None),
        "weight_cyc_mod": ("cyc_mod", float, None),
        "weight_adv_gen": ("adv_gen", float, None),
        "weight_rec_gen": ("rec_gen", float, None),
        "weight_lat_gen": ("lat_gen", float, None),
    },
    "training": {
        "epochs": ("epochs", int, _REQUIRED),
        "batch_size": ("batch_size", int, None),
        "learning_rate": ("learning_rate", float, None),
        "beta1": ("beta1", float, None),
        "beta2": ("beta2", float, None),
        "seeds": ("seeds", _parse_int_tuple, None),
        "augment": ("augment", _parse_bool, None),
        "augment_flip": ("augment_flip", _parse_bool, None),
        "augment_rotate": ("augment_rotate", _parse_bool, None),
        "augment_intensity": ("augment_intensity", _parse_bool, None),
        "steps_per_epoch": ("steps_per_epoch", int, None),
        "log_every_step": ("log_every_step", _parse_bool, None),
    },
    "eval": {
        "source": ("experiment.source", str, None),
        "target": ("experiment.target", str, None),
        "source_annotation_fraction": ("experiment.source_annotation_fraction", float, None),
        "target_annotation_fraction": ("experiment.target_annotation_fraction", float, None),
        "ablation": ("experiment.ablation", str, None),
        "eval_threshold": ("experiment.eval_threshold", float, None),
        "matrix_both_directions": ("matrix.both_directions", _parse_bool, None),
        "matrix_source_fractions": ("matrix.source_fractions", _parse_float_tuple, None),
        "matrix_ablations": ("matrix.ablations", _parse_str_tuple, None),
        "matrix_include_baseline": ("matrix.include_baseline", _parse_bool, None),
    },
}

_SECTION_ATTR = {
    "synth": "synth",
    "ingest": "ingest",
    "model": "model",
    "losses": "losses",
    "training": "training",
    "eval": None,  # maps onto experiment + matrix via dotted paths
}


def load_config(path, require=()):
    """Parse a flat INI config file into a Config.

    `require` lists sections whose _REQUIRED keys must be present. Unknown
    sections or keys raise ConfigError naming the offender.
    """
    parser = configparser.ConfigParser(interpolation=None)
    text = Path(path).read_text()
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file: {exc}") from exc

    updates = {}  # dotted path -> value
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        schema = _SCHEMA[section]
        for key, raw in parser.items(section):
            if key not in schema:
                raise ConfigError(f"unknown config key {section}.{key}")
            path_spec, parse, _ = schema[key]
            try:
                value = parse(raw)
            except ConfigError:
                raise
            except Exception as exc:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from exc
            attr = _SECTION_ATTR[section]
            dotted = path_spec if attr is None else f"{attr}.{path_spec}"
            updates[dotted] = value

    for section in require:
        schema = _SCHEMA.get(section)
        if schema is None:
            raise ConfigError(f"unknown required section {section!r}")
        for key, (path_spec, _, marker) in schema.items():
            if marker is _REQUIRED:
                attr = _SECTION_ATTR[section]
                dotted = path_spec if attr is None else f"{attr}.{path_spec}"
                if dotted not in updates:
                    raise ConfigError(f"missing config key {section}.{key}")

    cfg = Config()
    for dotted, value in sorted(updates.items()):
        cfg = _apply(cfg, dotted.split("."), value)
    return cfg.validate()


def _apply(obj, parts, value):
    head = parts[0]
    if len(parts) == 1:
        return replace(obj, **{head: value})
    child = getattr(obj, head)
    return replace(obj, **{head: _apply(child, parts[1:], value)})


# --------------------------------------------------------------------------
# Canonical serialization and hashing


def _flatten(prefix, obj, out):
    if hasattr(obj, "__dataclass_fields__"):
        for f in fields(obj):
            _flatten(f"{prefix}{f.name}.", getattr(obj, f.name), out)
    elif isinstance(obj, dict):
        for k in sorted(obj):
            _flatten(f"{prefix}{k}.", obj[k], out)
    elif isinstance(obj, (list, tuple)):
        out[prefix.rstrip(".")] = ",".join(repr(v) for v in obj)
    else:
        out[prefix.rstrip(".")] = repr(obj)


def canonical_text(obj):
    out = {}
    _flatten("", obj, out)
    return "\n".join(f"{k}={v}" for k, v in sorted(out.items())) + "\n"


def config_hash(obj, length=12):
    return hashlib.sha256(canonical_text(obj).encode()).hexdigest()[:length]


def run_config_hash(cfg, experiment, seed=None):
    """Hash identifying one matrix entry (seed excluded unless given)."""
    parts = [
        canonical_text(cfg.synth),
        canonical_text(cfg.model),
        canonical_text(cfg.losses),
        canonical_text(replace(cfg.training, seeds=())),
        canonical_text(experiment),
    ]
    if seed is not None:
        parts.append(f"seed={seed}\n")
    return hashlib.sha256("".join(parts).encode()).hexdigest()[:12]


def dump_config_ini(cfg):
    """Resolved config snapshot in the same INI format load_config reads."""
    lines = []
    for section, schema in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (path_spec, _, _m) in schema.items():
            attr = _SECTION_ATTR[section]
            dotted = path_spec if attr is None else f"{attr}.{path_spec}"
            node = cfg
            for part in dotted.split("."):
                node = getattr(node, part)
            if isinstance(node, bool):
                text = "true" if node else "false"
            elif isinstance(node, (list, tuple)):
                text = ", ".join(str(v) for v in node)
            else:
                text = str(node)
            lines.append(f"{key} = {text}")
        lines.append("")
    return "\n".join(lines)
