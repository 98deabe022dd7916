"""Attention traces and the swap schedule for the retouch target path."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .backends import SELF, AttentionEntry, AttentionOverride
from .errors import TraceError, ValidationError

LAYOUT_BRANCH = "layout"
REFERENCE_BRANCH = "reference"


@dataclass
class AttentionTrace:
    """Captured attention variables of one denoising path, keyed by (s, layer, kind)."""

    path: str
    entries: dict = field(default_factory=dict)

    def record(self, s: int, taps: dict, catalog) -> None:
        kinds = {l.index: l.kind for l in catalog}
        for layer, entry in taps.items():
            key = (s, layer, kinds[layer])
            if key in self.entries:
                raise ValidationError(f"{self.path} trace already holds an entry for {key}")
            self.entries[key] = entry

    def get(self, s: int, layer: int, kind: Optional[str] = None) -> AttentionEntry:
        if kind is None:
            for (ks, kl, _), entry in self.entries.items():
                if ks == s and kl == layer:
                    return entry
            raise TraceError(s, layer, f"missing {self.path} trace entry")
        try:
            return self.entries[(s, layer, kind)]
        except KeyError:
            raise TraceError(s, layer, f"missing {self.path} trace entry") from None

    def steps(self) -> list:
        return sorted({s for s, _, _ in self.entries})

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class SwapPolicy:
    """When and where the target path borrows attention variables.

    ``layers`` is a tuple of ``(index, kind)`` pairs taken from the backend
    catalog. Iterations ``s <= T - lambda2`` borrow from the layout path;
    later ones take self-attention keys/values from the reference path.
    """

    T: int
    lambda2: int
    layers: tuple
    blend_start: int
    early_query_swap: bool = True
    blend_enabled: bool = True

    def __post_init__(self):
        if not 0 <= self.lambda2 <= self.T:
            raise ValidationError(f"lambda2 must lie in [0, {self.T}]")
        if not 1 <= self.blend_start <= self.T:
            raise ValidationError(f"blend_start must lie in [1, {self.T}]")

    @classmethod
    def from_config(cls, config, backend) -> "SwapPolicy":
        catalog = {l.index: l.kind for l in backend.catalog}
        wanted = config.swap_layers if config.swap_layers is not None else tuple(catalog)
        unknown = [i for i in wanted if i not in catalog]
        if unknown:
            raise ValidationError(f"swap_layers not in backend catalog: {unknown}")
        return cls(config.T, config.lambda2, tuple((i, catalog[i]) for i in wanted),
                   config.blend_start, config.early_query_swap, config.blend_enabled)

    def branch(self, s: int) -> str:
        if not 1 <= s <= self.T:
            raise ValidationError(f"iteration {s} outside 1..{self.T}")
        return LAYOUT_BRANCH if s <= self.T - self.lambda2 else REFERENCE_BRANCH

    def self_layers(self) -> tuple:
        return tuple(i for i, kind in self.layers if kind == SELF)


def blend_gate(policy: SwapPolicy, s: int) -> bool:
    return policy.blend_enabled and s >= policy.blend_start


def plan_overrides(policy: SwapPolicy, s: int, layout_trace: AttentionTrace,
                   reference_trace: AttentionTrace) -> dict:
    """Override bundle ``{layer: AttentionOverride}`` for target iteration ``s``.

    Values are handed over as-is; nothing is copied or rescaled.
    """
    bundle = {}
    if policy.branch(s) == LAYOUT_BRANCH:
        for index, kind in policy.layers:
            e = layout_trace.get(s, index, kind)
            if kind == SELF and not policy.early_query_swap:
                bundle[index] = AttentionOverride(k=e.k, v=e.v)
            else:
                bundle[index] = AttentionOverride(q=e.q, k=e.k, v=e.v)
    else:
        for index, kind in policy.layers:
            if kind != SELF:
                continue
            e = reference_trace.get(s, index, kind)
            bundle[index] = AttentionOverride(k=e.k, v=e.v)
    return bundle


def attach_blend(bundle: dict, policy: SwapPolicy, s: int, layout_trace: AttentionTrace,
                 mask_latent: np.ndarray) -> dict:
    """Add mask blending against the layout path's self-attention outputs."""
    flat = np.asarray(mask_latent, dtype=np.float32).reshape(-1)
    out = dict(bundle)
    for index in policy.self_layers():
        phi_o = layout_trace.get(s, index, SELF).phi
        ov = out.get(index, AttentionOverride())
        out[index] = AttentionOverride(q=ov.q, k=ov.k, v=ov.v, phi=ov.phi,
                                       blend_source=phi_o, blend_mask=flat)
    return out


def describe_schedule(policy: SwapPolicy) -> list:
    """Per-iteration plan used for dry runs and the run log."""
    return [{"s": s, "i": policy.T - s + 1, "branch": policy.branch(s),
             "blend": blend_gate(policy, s)} for s in range(1, policy.T + 1)]
