"""Plain-text experiment configuration.

The on-disk format is one ``dotted.key = value`` pair per line (``#``
comments and blank lines allowed). Every key has a default; unknown keys
and malformed values fail with the offending field named. The resolved
form (all keys, sorted) is echoed into each run directory and reloads to
an identical configuration, and its hash names the run directory, so a
config fully determines where and what a run writes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .data import ToyWorld
from .nets import LatentDenoiserConfig, TokenDenoiserConfig
from .schedules import NoiseSchedule
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; message names the field."""


_NONE = "none"

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "out_dir": "runs",
    "world.num_factors": 8,
    "world.text_vocab": 64,
    "world.text_len": 16,
    "world.image_vocab": 32,
    "world.image_len": 16,
    "corpus.train_text": 2000,
    "corpus.train_image": 2000,
    "corpus.train_pairs": 1000,
    "corpus.eval_text": 200,
    "corpus.eval_image": 200,
    "corpus.eval_pairs": 128,
    "schedule.kind": "linear",
    "schedule.beta_min": 0.1,
    "schedule.beta_max": 20.0,
    "schedule.num_latent_steps": 100,
    "token_net.layers": 2,
    "token_net.heads": 2,
    "token_net.embed_width": 64,
    "token_net.ff_width": 128,
    "latent_net.dim": 16,
    "latent_net.hidden": "64,64",
    "latent_net.time_embed_width": 16,
    "latent_net.modality_embed_width": 16,
    "stage1.iterations": 2000,
    "stage1.batch_size": 32,
    "stage1.learning_rate": 5e-4,
    "stage1.beta1": 0.9,
    "stage1.beta2": 0.999,
    "stage1.eps": 1e-8,
    "stage1.weight_decay": 0.01,
    "stage1.log_every": 50,
    "stage1.checkpoint_every": 0,
    "stage2.iterations": 5000,
    "stage2.batch_size": 16,
    "stage2.learning_rate": 5e-4,
    "stage2.beta1": 0.9,
    "stage2.beta2": 0.999,
    "stage2.eps": 1e-8,
    "stage2.weight_decay": 0.01,
    "stage2.log_every": 50,
    "stage2.checkpoint_every": 0,
    "stage2.no_injection": False,
    "stage2.fixed_mask_rate": _NONE,
    "stage2.mask_loss_reduction": "mean",
    "sampling.steps": 8,
    "sampling.policy": "confidence",
    "sampling.temperature": 1.0,
    "eval.num_samples": 200,
    "eval.bleu_orders": "2,4",
    "eval.cross_modal_pairs": 128,
    "eval.cross_modal_steps": 8,
    "eval.bootstrap_resamples": 2000,
    "eval.elbo_num_mc": 32,
}

# keys whose value may be the literal "none" or a float
_OPTIONAL_FLOAT_KEYS = {"stage2.fixed_mask_rate"}


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if key in _OPTIONAL_FLOAT_KEYS:
            return _NONE if raw.lower() == _NONE else float(raw)
        if isinstance(default, bool):
            if raw.lower() in ("true", "false"):
                return raw.lower() == "true"
            raise ValueError("expected true/false")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"field {key!r}: cannot parse {raw!r} ({exc})") from exc


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated settings; the single source of truth for a run."""

    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def world(self) -> ToyWorld:
        v = self.values
        return ToyWorld(num_factors=v["world.num_factors"],
                        text_vocab=v["world.text_vocab"],
                        text_len=v["world.text_len"],
                        image_vocab=v["world.image_vocab"],
                        image_len=v["world.image_len"],
                        seed=v["seed"])

    def corpus_counts(self) -> dict[str, int]:
        v = self.values
        return {"train_text": v["corpus.train_text"],
                "train_image": v["corpus.train_image"],
                "train_pairs": v["corpus.train_pairs"],
                "eval_text": v["corpus.eval_text"],
                "eval_image": v["corpus.eval_image"],
                "eval_pairs": v["corpus.eval_pairs"]}

    def schedule(self) -> NoiseSchedule:
        v = self.values
        return NoiseSchedule(kind=v["schedule.kind"],
                             beta_min=v["schedule.beta_min"],
                             beta_max=v["schedule.beta_max"],
                             num_latent_steps=v["schedule.num_latent_steps"])

    def token_net_config(self) -> TokenDenoiserConfig:
        v = self.values
        return TokenDenoiserConfig(
            layers=v["token_net.layers"], heads=v["token_net.heads"],
            embed_width=v["token_net.embed_width"], ff_width=v["token_net.ff_width"],
            text_vocab=v["world.text_vocab"], image_vocab=v["world.image_vocab"],
            max_length=max(v["world.text_len"], v["world.image_len"]))

    def latent_net_config(self) -> LatentDenoiserConfig:
        v = self.values
        hidden = tuple(int(x) for x in str(v["latent_net.hidden"]).split(",") if x)
        return LatentDenoiserConfig(
            hidden=hidden, dim=v["latent_net.dim"],
            time_embed_width=v["latent_net.time_embed_width"],
            modality_embed_width=v["latent_net.modality_embed_width"])

    def stage_config(self, stage: str, no_injection: bool | None = None,
                     fixed_mask_rate: float | None | str = "default") -> TrainConfig:
        v = self.values
        section = "stage1" if stage == "latent" else "stage2"
        kwargs = dict(stage=stage,
                      iterations=v[f"{section}.iterations"],
                      batch_size=v[f"{section}.batch_size"],
                      learning_rate=v[f"{section}.learning_rate"],
                      beta1=v[f"{section}.beta1"], beta2=v[f"{section}.beta2"],
                      eps=v[f"{section}.eps"],
                      weight_decay=v[f"{section}.weight_decay"],
                      seed=v["seed"], log_every=v[f"{section}.log_every"],
                      checkpoint_every=v[f"{section}.checkpoint_every"])
        if stage == "discrete":
            raw_rate = v["stage2.fixed_mask_rate"]
            rate = None if raw_rate == _NONE else float(raw_rate)
            if fixed_mask_rate != "default":
                rate = fixed_mask_rate
            kwargs.update(no_injection=v["stage2.no_injection"]
                          if no_injection is None else no_injection,
                          fixed_mask_rate=rate,
                          mask_loss_reduction=v["stage2.mask_loss_reduction"])
        return TrainConfig(**kwargs)

    def resolved_text(self) -> str:
        lines = [f"{key} = {_format_value(self.values[key])}"
                 for key in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def run_id(self) -> str:
        return hashlib.sha256(self.resolved_text().encode("utf-8")).hexdigest()[:12]


def _validate(values: dict) -> None:
    positive = [k for k, d in DEFAULTS.items()
                if isinstance(d, int) and not isinstance(d, bool)
                and k.startswith(("world.", "corpus.", "token_net.", "latent_net.",
                                  "sampling.steps", "eval.", "schedule.num"))]
    for key in positive:
        if values[key] <= 0:
            raise ConfigError(f"field {key!r}: must be positive, got {values[key]}")
    if values["sampling.temperature"] <= 0:
        raise ConfigError("field 'sampling.temperature': must be positive")
    if values["schedule.kind"] not in ("linear", "cosine"):
        raise ConfigError(f"field 'schedule.kind': unknown kind {values['schedule.kind']!r}")
    if values["sampling.policy"] not in ("confidence", "random", "left_to_right"):
        raise ConfigError(f"field 'sampling.policy': unknown policy "
                          f"{values['sampling.policy']!r}")
    if values["stage2.mask_loss_reduction"] not in ("mean", "sum"):
        raise ConfigError("field 'stage2.mask_loss_reduction': expected mean or sum")
    rate = values["stage2.fixed_mask_rate"]
    if rate != _NONE and not (0.0 < float(rate) < 1.0):
        raise ConfigError("field 'stage2.fixed_mask_rate': must lie in (0, 1) or be none")
    if values["token_net.embed_width"] % values["token_net.heads"] != 0:
        raise ConfigError("field 'token_net.embed_width': must be divisible by heads")
    for stage in ("stage1", "stage2"):
        if values[f"{stage}.iterations"] < 0:
            raise ConfigError(f"field '{stage}.iterations': must be >= 0")
        if values[f"{stage}.learning_rate"] <= 0:
            raise ConfigError(f"field '{stage}.learning_rate': must be positive")


def parse_config(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    values = dict(DEFAULTS)
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown field {key!r}")
        values[key] = _parse_value(key, raw)
    for key, raw in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"override: unknown field {key!r}")
        values[key] = _parse_value(key, raw) if isinstance(raw, str) else raw
    _validate(values)
    return ExperimentConfig(values=values)


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)
