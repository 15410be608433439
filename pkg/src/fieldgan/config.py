"""Run configuration: one JSON document covering every module, fully defaulted.

Validation walks the document against a schema; unknown keys and range
violations raise ConfigError naming the dotted key path, before any work
starts.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field as dc_field

from .data import PRIMITIVES, PoseDistribution
from .errors import ConfigError
from .field import FieldConfig
from .hypernet import GeneratorConfig
from .render import RenderConfig
from .training import TrainConfig


class _Key:
    def __init__(self, default, kind, lo=None, hi=None, choices=None, nullable=False):
        self.default = default
        self.kind = kind  # "int" | "float" | "bool" | "str" | "color"
        self.lo = lo
        self.hi = hi
        self.choices = choices
        self.nullable = nullable

    def check(self, path: str, value):
        if value is None:
            if self.nullable:
                return None
            raise ConfigError(f"{path}: must not be null")
        if self.kind == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{path}: expected an integer, got {value!r}")
        elif self.kind == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{path}: expected a number, got {value!r}")
            value = float(value)
        elif self.kind == "bool":
            if not isinstance(value, bool):
                raise ConfigError(f"{path}: expected true/false, got {value!r}")
        elif self.kind == "str":
            if not isinstance(value, str):
                raise ConfigError(f"{path}: expected a string, got {value!r}")
        elif self.kind == "color":
            if (not isinstance(value, (list, tuple)) or len(value) != 3
                    or any(isinstance(v, bool) or not isinstance(v, (int, float))
                           for v in value)):
                raise ConfigError(f"{path}: expected three numbers, got {value!r}")
            if any(v < 0.0 or v > 1.0 for v in value):
                raise ConfigError(f"{path}: channels must lie in [0, 1], got {value!r}")
            return [float(v) for v in value]
        if self.lo is not None and value < self.lo:
            raise ConfigError(f"{path}: must be >= {self.lo}, got {value!r}")
        if self.hi is not None and value > self.hi:
            raise ConfigError(f"{path}: must be <= {self.hi}, got {value!r}")
        if self.choices is not None and value not in self.choices:
            raise ConfigError(f"{path}: must be one of {sorted(self.choices)}, got {value!r}")
        return value


SCHEMA: dict = {
    "seed": _Key(0, "int", lo=0),
    "field": {
        "hidden_layers": _Key(4, "int", lo=1),
        "hidden_width": _Key(128, "int", lo=8),
        "pe_frequencies": _Key(6, "int", lo=0),
        "include_raw_input": _Key(True, "bool"),
        "fmm_rank": _Key(10, "int", lo=1),
    },
    "generator": {
        "z_dim": _Key(64, "int", lo=1),
        "trunk_layers": _Key(3, "int", lo=1),
        "trunk_width": _Key(256, "int", lo=1),
        "head_scale": _Key(0.05, "float", lo=1e-6),
    },
    "render": {
        "width": _Key(32, "int", lo=1),
        "height": _Key(32, "int", lo=1),
        "samples_per_ray": _Key(32, "int", lo=2),
        "background": _Key([1.0, 1.0, 1.0], "color"),
        "sampling_mode": _Key("stratified", "str", choices={"stratified", "midpoint"}),
        "rng_seed": _Key(0, "int", lo=0),
    },
    "poses": {
        "mode": _Key("full_sphere_sector", "str",
                     choices={"full_sphere_sector", "single_axis"}),
        "radius": _Key(2.0, "float", lo=1e-6),
        "elevation_lo_deg": _Key(-30.0, "float", lo=-89.0, hi=89.0),
        "elevation_hi_deg": _Key(30.0, "float", lo=-89.0, hi=89.0),
        "axis_step_deg": _Key(5.0, "float", lo=1e-6, hi=180.0),
    },
    "data": {
        "source": _Key("procedural", "str", choices={"procedural", "png_dir"}),
        "manifest": _Key(None, "str", nullable=True),
        "n_scenes": _Key(256, "int", lo=1),
        "image_size": _Key(32, "int", lo=1),
        "primitive": _Key("sphere", "str", choices=set(PRIMITIVES)),
        "randomize_color": _Key(True, "bool"),
        "randomize_size": _Key(True, "bool"),
        "background": _Key([1.0, 1.0, 1.0], "color"),
    },
    "train": {
        "batch_size": _Key(8, "int", lo=1),
        "d_steps_per_g_step": _Key(1, "int", lo=1),
        "total_steps": _Key(1000, "int", lo=0),
        "lr_g": _Key(2.5e-3, "float", lo=1e-9),
        "lr_d": _Key(2.5e-3, "float", lo=1e-9),
        "adam_beta1": _Key(0.0, "float", lo=0.0, hi=0.9999),
        "adam_beta2": _Key(0.99, "float", lo=0.0, hi=0.9999),
        "instance_noise_sigma": _Key(0.05, "float", lo=0.0),
        "instance_noise_floor": _Key(0.0, "float", lo=0.0),
        "warmup_steps": _Key(0, "int", lo=0),
        "logit_drift": _Key(1e-3, "float", lo=0.0),
        "log_every": _Key(100, "int", lo=0),
        "checkpoint_every": _Key(1000, "int", lo=0),
    },
    "metrics": {
        "kid_downsample": _Key(16, "int", lo=1),
        "eval_samples": _Key(64, "int", lo=2),
    },
}


@dataclass
class RunConfig:
    seed: int
    field: FieldConfig
    generator: GeneratorConfig
    render: RenderConfig
    poses: PoseDistribution
    data: dict
    train: dict
    metrics: dict
    raw: dict = dc_field(default_factory=dict)


def _validate(doc: dict, schema: dict, path: str = "") -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {doc!r}")
    for key in doc:
        if key not in schema:
            raise ConfigError(f"{path + key}: unknown key")
    out = {}
    for key, spec in schema.items():
        sub_path = f"{path}{key}"
        if isinstance(spec, dict):
            out[key] = _validate(doc.get(key, {}), spec, sub_path + ".")
        else:
            out[key] = spec.check(sub_path, doc.get(key, spec.default))
    return out


def parse_config_dict(doc: dict) -> RunConfig:
    """Validate a config document, fill defaults, and build typed configs."""
    v = _validate(doc, SCHEMA)
    if v["poses"]["elevation_lo_deg"] > v["poses"]["elevation_hi_deg"]:
        raise ConfigError("poses.elevation_lo_deg: must be <= poses.elevation_hi_deg")
    if v["data"]["source"] == "png_dir" and not v["data"]["manifest"]:
        raise ConfigError("data.manifest: required when data.source is png_dir")
    field_cfg = FieldConfig(
        hidden_layers=v["field"]["hidden_layers"],
        hidden_width=v["field"]["hidden_width"],
        pe_frequencies=v["field"]["pe_frequencies"],
        include_raw_input=v["field"]["include_raw_input"],
        fmm_rank=v["field"]["fmm_rank"])
    gen_cfg = GeneratorConfig(
        z_dim=v["generator"]["z_dim"], trunk_layers=v["generator"]["trunk_layers"],
        trunk_width=v["generator"]["trunk_width"],
        head_scale=v["generator"]["head_scale"])
    render_cfg = RenderConfig(
        width=v["render"]["width"], height=v["render"]["height"],
        samples_per_ray=v["render"]["samples_per_ray"],
        background=tuple(v["render"]["background"]),
        sampling_mode=v["render"]["sampling_mode"], rng_seed=v["render"]["rng_seed"])
    poses = PoseDistribution(
        mode=v["poses"]["mode"], radius=v["poses"]["radius"],
        elevation_lo=math.radians(v["poses"]["elevation_lo_deg"]),
        elevation_hi=math.radians(v["poses"]["elevation_hi_deg"]),
        axis_step=math.radians(v["poses"]["axis_step_deg"]))
    return RunConfig(seed=v["seed"], field=field_cfg, generator=gen_cfg,
                     render=render_cfg, poses=poses, data=v["data"],
                     train=v["train"], metrics=v["metrics"], raw=v)


def parse_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise IOError(f"no such config file: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
    return parse_config_dict(doc)


def to_train_config(rc: RunConfig) -> TrainConfig:
    t = rc.train
    return TrainConfig(
        batch_size=t["batch_size"], d_steps_per_g_step=t["d_steps_per_g_step"],
        total_steps=t["total_steps"], lr_g=t["lr_g"], lr_d=t["lr_d"],
        adam_beta1=t["adam_beta1"], adam_beta2=t["adam_beta2"],
        instance_noise_sigma=t["instance_noise_sigma"],
        instance_noise_floor=t["instance_noise_floor"],
        warmup_steps=t["warmup_steps"], logit_drift=t["logit_drift"],
        rng_seed=rc.seed,
        log_every=t["log_every"], checkpoint_every=t["checkpoint_every"],
        field_cfg=rc.field, gen_cfg=rc.generator, render_cfg=rc.render,
        pose_dist=rc.poses)


def run_dict_from_train_config(tc: TrainConfig) -> dict:
    """The canonical config document for a training state (data section defaulted)."""
    return _validate({
        "seed": tc.rng_seed,
        "field": {
            "hidden_layers": tc.field_cfg.hidden_layers,
            "hidden_width": tc.field_cfg.hidden_width,
            "pe_frequencies": tc.field_cfg.pe_frequencies,
            "include_raw_input": tc.field_cfg.include_raw_input,
            "fmm_rank": tc.field_cfg.fmm_rank,
        },
        "generator": {
            "z_dim": tc.gen_cfg.z_dim, "trunk_layers": tc.gen_cfg.trunk_layers,
            "trunk_width": tc.gen_cfg.trunk_width, "head_scale": tc.gen_cfg.head_scale,
        },
        "render": {
            "width": tc.render_cfg.width, "height": tc.render_cfg.height,
            "samples_per_ray": tc.render_cfg.samples_per_ray,
            "background": list(tc.render_cfg.background),
            "sampling_mode": tc.render_cfg.sampling_mode,
            "rng_seed": tc.render_cfg.rng_seed,
        },
        "poses": {
            "mode": tc.pose_dist.mode, "radius": tc.pose_dist.radius,
            "elevation_lo_deg": math.degrees(tc.pose_dist.elevation_lo),
            "elevation_hi_deg": math.degrees(tc.pose_dist.elevation_hi),
            "axis_step_deg": math.degrees(tc.pose_dist.axis_step),
        },
        "train": {
            "batch_size": tc.batch_size, "d_steps_per_g_step": tc.d_steps_per_g_step,
            "total_steps": tc.total_steps, "lr_g": tc.lr_g, "lr_d": tc.lr_d,
            "adam_beta1": tc.adam_beta1, "adam_beta2": tc.adam_beta2,
            "instance_noise_sigma": tc.instance_noise_sigma,
            "instance_noise_floor": tc.instance_noise_floor,
            "warmup_steps": tc.warmup_steps, "logit_drift": tc.logit_drift,
            "log_every": tc.log_every, "checkpoint_every": tc.checkpoint_every,
        },
    }, SCHEMA)
