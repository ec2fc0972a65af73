"""Flat ``key = value`` config files mapped onto the library's config objects.

Keys are the dataclass field names. Loss weights are written as
``alpha = 0.02, 0.04, 0.08, 0.16`` (commas or spaces) and ``beta1``..``beta4``.
Unknown keys are rejected so typos do not pass silently.
"""

from __future__ import annotations

import inspect
from dataclasses import fields
from typing import Dict, Tuple

import numpy as np

from .errors import FormatError, InvalidInputError
from .formats import read_config
from .geometry import RigidTransform
from .losses import LossWeights
from .optimizer import OptimizerConfig
from .preprocess import PreprocessConfig
from .synth import PRESETS, SceneSpec, rotation_deg

WEIGHT_KEYS = ("alpha", "beta1", "beta2", "beta3", "beta4")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_vector(text: str):
    return tuple(float(x) for x in text.replace(",", " ").split())


def _coerce(kind, text: str):
    if kind is bool:
        low = text.lower()
        if low not in _TRUE | _FALSE:
            raise ValueError(f"not a boolean: {text!r}")
        return low in _TRUE
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is tuple:
        return parse_vector(text)
    return text


def _field_kind(default):
    if isinstance(default, bool):
        return bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, (tuple, list)):
        return tuple
    return str


def _convert(values: Dict[str, str], kinds: Dict[str, type], path) -> dict:
    out = {}
    for key, text in values.items():
        if key not in kinds:
            raise FormatError(path, f"unknown key {key!r}; expected one of {sorted(kinds)}")
        try:
            out[key] = _coerce(kinds[key], text)
        except ValueError as exc:
            raise FormatError(path, f"bad value for {key!r}: {exc}") from None
    return out


def weights_from_dict(values: Dict[str, str], path="<config>") -> LossWeights:
    kinds = {"alpha": tuple, "beta1": float, "beta2": float, "beta3": float, "beta4": float}
    args = _convert({k: v for k, v in values.items() if k in WEIGHT_KEYS}, kinds, path)
    try:
        return LossWeights(**args)
    except InvalidInputError as exc:
        raise FormatError(path, str(exc)) from None


def _dataclass_kinds(cls, skip=()):
    kinds = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        kinds[f.name] = _field_kind(f.default)
    return kinds


def preprocess_config_from_dict(values: Dict[str, str], path="<config>") -> PreprocessConfig:
    args = _convert(values, _dataclass_kinds(PreprocessConfig), path)
    try:
        return PreprocessConfig(**args)
    except InvalidInputError as exc:
        raise FormatError(path, str(exc)) from None


def optimizer_config_from_dict(values: Dict[str, str], path="<config>") -> OptimizerConfig:
    kinds = _dataclass_kinds(OptimizerConfig, skip=("weights",))
    own = _convert({k: v for k, v in values.items() if k not in WEIGHT_KEYS}, kinds, path)
    weights = weights_from_dict(values, path)
    try:
        return OptimizerConfig(weights=weights, **own)
    except InvalidInputError as exc:
        raise FormatError(path, str(exc)) from None


def load_preprocess_config(path) -> PreprocessConfig:
    return preprocess_config_from_dict(read_config(path), path)


def load_optimizer_config(path) -> OptimizerConfig:
    return optimizer_config_from_dict(read_config(path), path)


def load_weights(path) -> Tuple[LossWeights, float, int]:
    """Loss weights plus the pyramid ``level_sample_factor`` and ``neighbor_k``
    used to rebuild the levels the weights apply to."""
    values = read_config(path)
    extra = _convert({k: v for k, v in values.items() if k not in WEIGHT_KEYS},
                     {"level_sample_factor": float, "neighbor_k": int}, path)
    defaults = OptimizerConfig()
    return (weights_from_dict(values, path), extra.get("level_sample_factor", defaults.level_sample_factor),
            extra.get("neighbor_k", defaults.neighbor_k))


def scene_from_dict(values: Dict[str, str], path="<scene>") -> SceneSpec:
    """Build a scene from ``preset = name`` plus that preset's keyword arguments.

    ``camera_translation`` and ``camera_rotation_deg`` (xyz Euler angles)
    override the preset's camera motion.
    """
    values = dict(values)
    name = values.pop("preset", None)
    if name not in PRESETS:
        raise FormatError(path, f"preset must be one of {sorted(PRESETS)}, got {name!r}")
    factory = PRESETS[name]
    params = inspect.signature(factory).parameters
    kinds = {k: _field_kind(p.default) for k, p in params.items() if k != "camera_motion"}
    if "box_motion" in kinds:
        kinds["box_motion"] = tuple
    cam_keys = {"camera_translation": tuple, "camera_rotation_deg": tuple}
    cam = _convert({k: v for k, v in values.items() if k in cam_keys}, cam_keys, path)
    args = _convert({k: v for k, v in values.items() if k not in cam_keys}, kinds, path)
    if cam:
        if "camera_motion" not in params:
            raise FormatError(path, f"preset {name!r} does not take a camera motion")
        t = cam.get("camera_translation", (0.0, 0.0, 0.0))
        r = cam.get("camera_rotation_deg", (0.0, 0.0, 0.0))
        if len(t) != 3 or len(r) != 3:
            raise FormatError(path, "camera_translation and camera_rotation_deg need 3 values each")
        args["camera_motion"] = RigidTransform(rotation_deg(*r), np.asarray(t))
    try:
        return factory(**args)
    except (InvalidInputError, TypeError) as exc:
        raise FormatError(path, str(exc)) from None


def load_scene(path) -> SceneSpec:
    return scene_from_dict(read_config(path), path)
