"""Mask mathematics for adaptive mask blending.

Pipeline of the composite blend weight::

    Mk = OR(resize(Mc), Msam)
    M  = clamp(normalize_half_to_one(edt(Mk)) + remove_small_components(resize(Mc)), 0, 1)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .backends import CROSS
from .core import BlendMask, MaskProvenance
from .errors import MaskError

logger = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def _data(m) -> np.ndarray:
    return np.asarray(getattr(m, "data", m))


def _as_bool(m) -> np.ndarray:
    a = _data(m)
    if a.ndim != 2:
        raise MaskError(f"mask must be 2-D, got shape {a.shape}")
    if a.dtype != bool:
        if not np.all((a == 0) | (a == 1)):
            raise MaskError("mask is not binary")
        a = a.astype(bool)
    return a


def _binary(a, provenance=MaskProvenance.BINARY_INTERMEDIATE) -> BlendMask:
    return BlendMask(np.asarray(a, dtype=bool).astype(np.float32), provenance)


def cross_attention_mask(trace, token_indices, threshold: float, layers: Optional[Iterable[int]] = None,
                         steps: Optional[Iterable[int]] = None, shape=None) -> BlendMask:
    """Binary mask from averaged cross-attention probabilities of the subject token(s).

    Maps are averaged over the selected tokens, layers and steps, min-max
    normalised and kept where ``>= threshold``. ``shape`` defaults to a square
    grid inferred from the number of query positions.
    """
    token_indices = list(token_indices)
    if not token_indices:
        raise MaskError("no subject token indices given")
    layers = None if layers is None else set(layers)
    steps = None if steps is None else set(steps)
    maps = []
    for (s, layer, kind), entry in sorted(trace.entries.items(), key=lambda kv: kv[0][:2]):
        if kind != CROSS:
            continue
        if layers is not None and layer not in layers:
            continue
        if steps is not None and s not in steps:
            continue
        attn = np.asarray(entry.attn, dtype=np.float64)
        if max(token_indices) >= attn.shape[1] or min(token_indices) < 0:
            raise MaskError(f"token index out of range for {attn.shape[1]} tokens")
        maps.append(attn[:, token_indices].mean(axis=1))
    if not maps:
        raise MaskError("no cross-attention maps selected (empty layer/step set)")
    sizes = {m.size for m in maps}
    if len(sizes) != 1:
        raise MaskError(f"selected layers have mixed resolutions {sorted(sizes)}")
    avg = np.mean(maps, axis=0)
    if shape is None:
        side = int(round(np.sqrt(avg.size)))
        if side * side != avg.size:
            raise MaskError("cannot infer a square map shape; pass shape")
        shape = (side, side)
    avg = avg.reshape(shape)
    lo, hi = avg.min(), avg.max()
    if hi == lo:
        logger.warning("cross-attention map is constant; returning an empty mask")
        return _binary(np.zeros(shape, bool), MaskProvenance.CROSS_ATTN)
    norm = (avg - lo) / (hi - lo)
    return _binary(norm >= threshold, MaskProvenance.CROSS_ATTN)


def resize_binary(m, target) -> BlendMask:
    """Nearest-neighbour upsampling of a binary mask to ``target = (H, W)``."""
    a = _as_bool(m)
    H, W = (int(v) for v in target)
    if H <= 0 or W <= 0:
        raise MaskError(f"target size must be positive, got {(H, W)}")
    h, w = a.shape
    if H < h or W < w:
        raise MaskError(f"target {(H, W)} smaller than source {(h, w)}")
    rows = (np.arange(H) * h) // H
    cols = (np.arange(W) * w) // W
    prov = getattr(m, "provenance", MaskProvenance.BINARY_INTERMEDIATE)
    return _binary(a[np.ix_(rows, cols)], prov)


def resize_real(m, target) -> np.ndarray:
    """Bilinear resize of a real-valued map (triangle filter when shrinking)."""
    a = np.asarray(_data(m), dtype=np.float32)
    H, W = (int(v) for v in target)
    if a.shape == (H, W):
        return a.copy()
    out = Image.fromarray(a).resize((W, H), Image.Resampling.BILINEAR)
    return np.asarray(out, dtype=np.float32)


def or_masks(a, b) -> BlendMask:
    x, y = _as_bool(a), _as_bool(b)
    if x.shape != y.shape:
        raise MaskError(f"shape mismatch {x.shape} vs {y.shape}")
    return _binary(x | y)


def distance_transform(m) -> np.ndarray:
    """Exact Euclidean distance of each pixel to the nearest zero pixel.

    Background pixels get 0. A mask without any background pixel measures
    the distance to the area just outside the frame instead.
    """
    a = _as_bool(m)
    if not a.any():
        return np.zeros(a.shape, np.float32)
    if a.all():
        padded = np.pad(a, 1, constant_values=False)
        return ndimage.distance_transform_edt(padded)[1:-1, 1:-1].astype(np.float32)
    return ndimage.distance_transform_edt(a).astype(np.float32)


def normalize_half_to_one(d) -> np.ndarray:
    """Affine map of ``d`` onto [0.5, 1.0]; constant maps become 0.5 (if zero) or 1.0."""
    d = np.asarray(d, dtype=np.float64)
    lo, hi = d.min(), d.max()
    if hi == lo:
        return np.full(d.shape, 0.5 if lo == 0 else 1.0, np.float32)
    return (0.5 + 0.5 * (d - lo) / (hi - lo)).astype(np.float32)


@dataclass(frozen=True)
class ComponentLabeling:
    labels: np.ndarray
    volumes: dict


def label_components(m) -> ComponentLabeling:
    a = _as_bool(m)
    labels, n = ndimage.label(a, structure=EIGHT_CONNECTED)
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    return ComponentLabeling(labels, {k: int(counts[k]) for k in range(1, n + 1)})


def remove_small_components(m, volume_threshold: int) -> BlendMask:
    """Zero every 8-connected component with fewer than ``volume_threshold`` pixels."""
    a = _as_bool(m)
    if volume_threshold < 0:
        raise MaskError("volume_threshold must be >= 0")
    prov = getattr(m, "provenance", MaskProvenance.BINARY_INTERMEDIATE)
    if volume_threshold == 0 or not a.any():
        return _binary(a, prov)
    comp = label_components(a)
    keep = np.zeros(len(comp.volumes) + 1, bool)
    for label, vol in comp.volumes.items():
        keep[label] = vol >= volume_threshold
    return _binary(keep[comp.labels], prov)


def adaptive_mask_stages(mc, msam, volume_threshold: int) -> dict:
    """Every intermediate of the composite mask, keyed by stage name."""
    sam = _as_bool(msam)
    mc_up = resize_binary(mc, sam.shape)
    mk = or_masks(mc_up, sam)
    dist = distance_transform(mk)
    norm = normalize_half_to_one(dist)
    mc_clean = remove_small_components(mc_up, volume_threshold)
    raw = norm + mc_clean.data
    m = BlendMask(np.clip(raw, 0.0, 1.0), MaskProvenance.COMPOSITE)
    return {"mc_resized": mc_up, "mk": mk, "distance": dist, "normalized": norm,
            "mc_clean": mc_clean, "raw": raw, "m": m}


def compose_adaptive_mask(mc, msam, volume_threshold: int) -> BlendMask:
    return adaptive_mask_stages(mc, msam, volume_threshold)["m"]


def blend_latents(phi_t, phi_o, mask) -> np.ndarray:
    """``mask * phi_t + (1 - mask) * phi_o``, mask broadcast over features.

    ``phi`` is either channel-first ``(C, h, w)`` with an ``(h, w)`` mask or
    token-major ``(h*w, d)`` with a mask of ``h*w`` entries.
    """
    t = np.asarray(phi_t, dtype=np.float32)
    o = np.asarray(phi_o, dtype=np.float32)
    m = np.asarray(_data(mask), dtype=np.float32)
    if t.shape != o.shape:
        raise MaskError(f"phi shapes differ: {t.shape} vs {o.shape}")
    if t.ndim == 3 and m.shape == t.shape[1:]:
        m = m[None]
    elif t.ndim == 2 and m.size == t.shape[0]:
        m = m.reshape(-1, 1)
    else:
        raise MaskError(f"mask shape {m.shape} incompatible with phi shape {t.shape}")
    return m * t + (np.float32(1) - m) * o
