"""Domain types, run configuration and seed derivation."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
import os
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .errors import ConfigError, ValidationError

logger = logging.getLogger(__name__)

SPECIAL_TOKEN = "<*>"
NEUTRAL_TEMPLATE = "a photo of {}"

# lambda1 presets for the two prompt profiles
PROFILE_LAMBDA1 = {"normal": 5, "challenging": 3}


def sub_seed(seed: int, name: str) -> int:
    """Derive a named 63-bit seed from the master seed."""
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def array_digest(arr) -> str:
    a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
    h = hashlib.sha256()
    h.update(str(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class LatentTensor:
    """A denoising state: (C, H, W) float32 array plus its timestep index."""

    data: np.ndarray
    timestep: int

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValidationError(f"latent must have 3 axes, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("latent contains non-finite values")
        if self.timestep < 0:
            raise ValidationError(f"timestep must be >= 0, got {self.timestep}")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self):
        return self.data.shape


class ConditionVariant(str, enum.Enum):
    PERSONALIZED = "y_p"
    TOKEN_REMOVED = "y_p_minus"
    NEUTRAL = "y_r"
    EMPTY = "empty"


@dataclass(frozen=True)
class TextCondition:
    tokens: tuple
    embedding: np.ndarray
    variant: ConditionVariant

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float32)
        if emb.ndim != 2 or emb.shape[0] != len(self.tokens):
            raise ValidationError(
                f"embedding shape {emb.shape} does not match {len(self.tokens)} tokens"
            )
        emb = emb.copy()
        emb.setflags(write=False)
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "embedding", emb)

    def index_of(self, token: str) -> int:
        return self.tokens.index(token)


class MaskProvenance(str, enum.Enum):
    CROSS_ATTN = "cross_attn"
    SEGMENTER = "segmenter"
    COMPOSITE = "composite"
    BINARY_INTERMEDIATE = "binary_intermediate"


BINARY_PROVENANCES = (MaskProvenance.CROSS_ATTN, MaskProvenance.SEGMENTER,
                      MaskProvenance.BINARY_INTERMEDIATE)


@dataclass(frozen=True)
class BlendMask:
    data: np.ndarray
    provenance: MaskProvenance

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise ValidationError(f"mask must be 2-D, got shape {data.shape}")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValidationError("mask values must lie in [0, 1]")
        prov = MaskProvenance(self.provenance)
        if prov in BINARY_PROVENANCES and not np.all((data == 0.0) | (data == 1.0)):
            raise ValidationError(f"{prov.value} mask must be binary")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "provenance", prov)

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.data == 0.0) | (self.data == 1.0)))

    @classmethod
    def binary(cls, values, provenance=MaskProvenance.BINARY_INTERMEDIATE) -> "BlendMask":
        return cls(np.asarray(values).astype(bool).astype(np.float32), provenance)


@dataclass(frozen=True)
class PipelineConfig:
    """Every parameter of a run.

    Windows are expressed in sampling iterations ``s = 1..T`` (generation
    order). The matching timestep index is ``i = T - s + 1``.
    """

    T: int = 50
    lambda1: int = 5
    lambda2: int = 10
    blend_start: int = 31
    ca_threshold: float = 0.35
    volume_threshold: int = 16
    guidance_scale: float = 1.0
    seed: int = 0
    latent_shape: tuple = (4, 8, 8)
    image_size: tuple = (64, 64)
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    special_token: str = SPECIAL_TOKEN
    class_word: Optional[str] = None
    profile: str = "normal"
    # layer indices; None means every layer of the matching kind
    swap_layers: Optional[tuple] = None
    ca_layers: Optional[tuple] = None
    early_query_swap: bool = True
    blend_enabled: bool = True
    # "multi" (layout + reference sources) or "self" (target swaps with its own trace; diagnostic)
    swap_source: str = "multi"

    def __post_init__(self):
        for name in ("latent_shape", "image_size", "swap_layers", "ca_layers"):
            value = getattr(self, name)
            if value is not None and not isinstance(value, tuple):
                object.__setattr__(self, name, tuple(int(v) for v in value))
        self.validate()

    def validate(self):
        T = self.T
        if not isinstance(T, (int, np.integer)) or isinstance(T, bool) or T < 1:
            raise ConfigError("T", f"must be an integer >= 1, got {T!r}")
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or not 0 <= v <= T:
                raise ConfigError(name, f"must be an integer in [0, T={T}], got {v!r}")
        b = self.blend_start
        if not isinstance(b, (int, np.integer)) or isinstance(b, bool) or not 1 <= b <= T:
            raise ConfigError("blend_start", f"must be an integer in [1, T={T}], got {b!r}")
        if not 0.0 < float(self.ca_threshold) < 1.0:
            raise ConfigError("ca_threshold", f"must lie in (0, 1), got {self.ca_threshold!r}")
        if int(self.volume_threshold) < 0:
            raise ConfigError("volume_threshold", "must be >= 0")
        if float(self.guidance_scale) < 0:
            raise ConfigError("guidance_scale", "must be >= 0")
        if len(self.latent_shape) != 3 or min(self.latent_shape) < 1:
            raise ConfigError("latent_shape", f"must be (C, H, W), got {self.latent_shape!r}")
        if len(self.image_size) != 2 or min(self.image_size) < 1:
            raise ConfigError("image_size", f"must be (H, W), got {self.image_size!r}")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError("beta_start", "need 0 < beta_start <= beta_end < 1")
        if self.profile not in PROFILE_LAMBDA1:
            raise ConfigError("profile", f"must be one of {sorted(PROFILE_LAMBDA1)}")
        if self.swap_source not in ("multi", "self"):
            raise ConfigError("swap_source", "must be 'multi' or 'self'")
        if not self.special_token:
            raise ConfigError("special_token", "must be non-empty")

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def iteration_timestep(self, s: int) -> int:
        return self.T - s + 1


CONFIG_KEYS = frozenset(f.name for f in fields(PipelineConfig))


def config_from_mapping(values: dict) -> PipelineConfig:
    """Build a config from a plain mapping, filling defaults.

    Unknown keys are logged and dropped. When ``lambda1`` is absent the
    profile preset supplies it.
    """
    values = dict(values or {})
    for key in sorted(set(values) - CONFIG_KEYS):
        logger.warning("ignoring unknown config key %r", key)
        values.pop(key)
    if "lambda1" not in values:
        profile = values.get("profile", "normal")
        if profile not in PROFILE_LAMBDA1:
            raise ConfigError("profile", f"must be one of {sorted(PROFILE_LAMBDA1)}")
        values["lambda1"] = PROFILE_LAMBDA1[profile]
    try:
        return PipelineConfig(**values)
    except TypeError as exc:
        raise ConfigError("config", str(exc)) from exc


def read_config_mapping(path: str | os.PathLike) -> dict:
    """Raw key/value mapping of a JSON config document; empty file -> {}."""
    with open(path, "rb") as fh:
        text = fh.read().decode("utf-8").strip()
    if not text:
        return {}
    try:
        values = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"not a valid JSON document: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError("config", "top level must be an object")
    return values


def load_config(path: str | os.PathLike) -> PipelineConfig:
    """Read a JSON key/value document; absent keys take their defaults."""
    return config_from_mapping(read_config_mapping(path))
