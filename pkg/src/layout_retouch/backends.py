"""Denoiser backends.

A backend predicts noise for a latent under a text condition and exposes its
attention layers so callers can read (taps) or replace (overrides) the
attention variables of any layer. :class:`ToyDenoiser` is a small seeded
numpy transformer that makes every pipeline stage runnable on a laptop.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import (NEUTRAL_TEMPLATE, SPECIAL_TOKEN, ConditionVariant, TextCondition,
                   sub_seed)
from .errors import BackendError, OverrideError, ValidationError

BOS = "<bos>"
SELF, CROSS = "self", "cross"


@dataclass(frozen=True)
class LayerInfo:
    index: int
    kind: str
    resolution: tuple


@dataclass
class AttentionEntry:
    """Effective attention variables of one layer for one forward pass."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    phi: np.ndarray


@dataclass
class AttentionOverride:
    """Replacement values for one layer; ``None`` keeps the computed value.

    ``blend_source``/``blend_mask`` replace the layer output with
    ``mask * phi + (1 - mask) * blend_source`` (mask broadcast over features).
    """

    q: Optional[np.ndarray] = None
    k: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    phi: Optional[np.ndarray] = None
    blend_source: Optional[np.ndarray] = None
    blend_mask: Optional[np.ndarray] = None

    def is_empty(self) -> bool:
        return all(getattr(self, n) is None for n in ("q", "k", "v", "phi", "blend_source"))


class DenoiserBackend:
    """Interface every noise predictor satisfies.

    Subclasses provide ``identity``, ``catalog``, ``latent_shape``,
    ``denoise``, ``encode_text`` and the image codec.
    """

    identity = "external"
    catalog: tuple = ()
    latent_shape: tuple = ()

    def layers(self, kind=None) -> tuple:
        return tuple(l.index for l in self.catalog if kind is None or l.kind == kind)

    def layer(self, index) -> LayerInfo:
        for l in self.catalog:
            if l.index == index:
                return l
        raise OverrideError(index, "unknown layer index")

    def denoise(self, z, cond: TextCondition, i: int, overrides=None, taps=None) -> np.ndarray:
        raise NotImplementedError

    def encode_text(self, tokens) -> np.ndarray:
        raise NotImplementedError

    def encode_image(self, image) -> np.ndarray:
        raise NotImplementedError

    def decode_latent(self, z) -> np.ndarray:
        raise NotImplementedError

    def condition(self, tokens, variant) -> TextCondition:
        tokens = tuple(tokens)
        return TextCondition(tokens, self.encode_text(tokens), ConditionVariant(variant))

    def empty_condition(self) -> TextCondition:
        return self.condition(tokenize(""), ConditionVariant.EMPTY)


def tokenize(text: str) -> tuple:
    """Whitespace tokenizer; every sequence starts with ``<bos>``."""
    return (BOS,) + tuple(text.lower().split()) if text else (BOS,)


def derive_conditions(prompt: str, backend: DenoiserBackend, special_token: str = SPECIAL_TOKEN,
                      class_word: Optional[str] = None):
    """Build ``(y_p, y_p_minus, y_r)`` for a prompt holding the special token once.

    ``y_p_minus`` drops the special token, or substitutes ``class_word``
    when one is given. ``y_r`` is the neutral "a photo of <special>".
    """
    tokens = tokenize(prompt)
    special = special_token.lower()
    count = tokens.count(special)
    if count != 1:
        raise ValidationError(
            f"prompt must contain {special_token!r} exactly once, found {count}"
        )
    pos = tokens.index(special)
    minus = list(tokens)
    if class_word:
        minus[pos:pos + 1] = tokenize(class_word)[1:]
    else:
        del minus[pos]
    y_p = backend.condition(tokens, ConditionVariant.PERSONALIZED)
    y_pm = backend.condition(minus, ConditionVariant.TOKEN_REMOVED)
    y_r = backend.condition(tokenize(NEUTRAL_TEMPLATE.format(special)), ConditionVariant.NEUTRAL)
    return y_p, y_pm, y_r


def predict_noise(backend: DenoiserBackend, z, cond, i, guidance_scale=1.0, uncond=None,
                  overrides=None, taps=None) -> np.ndarray:
    """Classifier-free guided noise; overrides and taps touch the conditional pass only."""
    eps_c = backend.denoise(z, cond, i, overrides=overrides, taps=taps)
    if guidance_scale == 1.0:
        return eps_c
    if uncond is None:
        uncond = backend.empty_condition()
    eps_u = backend.denoise(z, uncond, i)
    w = np.float32(guidance_scale)
    return eps_u + w * (eps_c - eps_u)


# -- toy backend ---------------------------------------------------------------

class ToyTextEncoder:
    """Token -> vector by seeded hashing. The special token has its own namespace."""

    def __init__(self, seed=0, d_text=16, special_token=SPECIAL_TOKEN):
        self.seed = int(seed)
        self.d_text = int(d_text)
        self.special_token = special_token.lower()

    def token_vector(self, token: str) -> np.ndarray:
        namespace = "special" if token == self.special_token else "token"
        digest = hashlib.sha256(f"{namespace}:{self.seed}:{token}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.standard_normal(self.d_text).astype(np.float32)

    def __call__(self, tokens) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.d_text), np.float32)
        vecs = np.stack([self.token_vector(t) for t in tokens])
        pos = np.arange(len(tokens), dtype=np.float32)[:, None]
        freqs = np.arange(1, self.d_text + 1, dtype=np.float32)[None, :] / self.d_text
        return (vecs + np.float32(0.1) * np.sin(pos * freqs)).astype(np.float32)


@dataclass(frozen=True)
class ToyBackendSpec:
    """Shape and seed of a toy denoiser family.

    ``personalization_delta`` scales a rank-1 update of the cross-attention
    key/value projections along the special-token embedding direction.
    """

    seed: int = 0
    n_blocks: int = 2
    latent_shape: tuple = (4, 8, 8)
    d_model: int = 32
    d_text: int = 16
    personalization_delta: float = 1.0
    image_size: tuple = (64, 64)
    special_token: str = SPECIAL_TOKEN
    cross_gain: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "latent_shape", tuple(int(v) for v in self.latent_shape))
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        if self.n_blocks < 1 or self.d_model < 1 or self.d_text < 1:
            raise ValidationError("n_blocks, d_model and d_text must be positive")
        if len(self.latent_shape) != 3 or min(self.latent_shape) < 1:
            raise ValidationError(f"latent_shape must be (C, H, W), got {self.latent_shape}")
        _, h, w = self.latent_shape
        H, W = self.image_size
        if H % h or W % w or H // h != W // w:
            raise ValidationError(
                f"image_size {self.image_size} must be a square multiple of latent dims {(h, w)}"
            )


def _layer_norm(x):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + np.float32(1e-5))


def _softmax(x):
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def _gelu(x):
    return np.float32(0.5) * x * (np.float32(1) + np.tanh(
        np.float32(0.7978845608) * (x + np.float32(0.044715) * x ** 3)))


def _timestep_embedding(i, dim=16, max_period=1000.0):
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = float(i) * freqs
    return np.concatenate([np.cos(args), np.sin(args)]).astype(np.float32)


class ToyDenoiser(DenoiserBackend):
    """Seeded attention denoiser over a (C, H, W) latent.

    Each block is self-attention, cross-attention to the text embedding and
    a small MLP, all residual. Layer ``2b`` is block ``b``'s self-attention
    and ``2b + 1`` its cross-attention.
    """

    TEMB_DIM = 16

    def __init__(self, spec: ToyBackendSpec, identity="personalized"):
        if identity not in ("vanilla", "personalized"):
            raise ValidationError(f"toy identity must be vanilla or personalized, got {identity!r}")
        self.spec = spec
        self.identity = identity
        self.latent_shape = spec.latent_shape
        C, h, w = spec.latent_shape
        self.n_tokens = h * w
        self.catalog = tuple(
            LayerInfo(2 * b + j, kind, (h, w))
            for b in range(spec.n_blocks) for j, kind in enumerate((SELF, CROSS))
        )
        self.text_encoder = ToyTextEncoder(sub_seed(spec.seed, "toy-text"), spec.d_text,
                                           spec.special_token)
        self.weights = self._init_weights()
        self._scale = np.float32(1.0 / np.sqrt(spec.d_model))
        self._init_codec()

    def _init_weights(self) -> dict:
        s = self.spec
        C = s.latent_shape[0]
        d, dt = s.d_model, s.d_text
        rng = np.random.default_rng(sub_seed(s.seed, "toy-weights"))

        def g(*shape, std):
            return (rng.standard_normal(shape) * std).astype(np.float32)

        wts = {
            "in.w": g(C, d, std=1.0 / np.sqrt(C)),
            "in.b": g(d, std=0.1),
            "time.w": g(self.TEMB_DIM, d, std=0.3 / np.sqrt(self.TEMB_DIM)),
            "out.w": g(d, C, std=0.5 / np.sqrt(d)),
            "skip": np.float32(0.2),
        }
        for b in range(s.n_blocks):
            for name in ("q", "k", "v"):
                wts[f"b{b}.self.{name}"] = g(d, d, std=1.0 / np.sqrt(d))
            wts[f"b{b}.self.o"] = g(d, d, std=0.5 / np.sqrt(d))
            wts[f"b{b}.cross.q"] = g(d, d, std=1.0 / np.sqrt(d))
            wts[f"b{b}.cross.k"] = g(dt, d, std=1.0 / np.sqrt(dt))
            wts[f"b{b}.cross.v"] = g(dt, d, std=1.0 / np.sqrt(dt))
            wts[f"b{b}.cross.o"] = g(d, d, std=s.cross_gain / np.sqrt(d))
            wts[f"b{b}.mlp.1"] = g(d, 2 * d, std=1.0 / np.sqrt(d))
            wts[f"b{b}.mlp.2"] = g(2 * d, d, std=0.3 / np.sqrt(2 * d))
        # drawn for both identities so the base weights stay identical
        directions = {b: (g(d, std=1.0 / np.sqrt(d)), g(d, std=1.0 / np.sqrt(d)))
                      for b in range(s.n_blocks)}
        if self.identity == "personalized" and s.personalization_delta != 0:
            e = self.text_encoder.token_vector(self.text_encoder.special_token)
            u = (e / np.linalg.norm(e)).astype(np.float32)
            alpha = np.float32(s.personalization_delta)
            for b, (rk, rv) in directions.items():
                wts[f"b{b}.cross.k"] = wts[f"b{b}.cross.k"] + alpha * np.outer(u, rk)
                wts[f"b{b}.cross.v"] = wts[f"b{b}.cross.v"] + alpha * np.outer(u, rv)
        for arr in wts.values():
            if isinstance(arr, np.ndarray):
                arr.setflags(write=False)
        return wts

    def _init_codec(self):
        C, h, _ = self.spec.latent_shape
        self.patch = self.spec.image_size[0] // h
        dim = self.patch * self.patch * 3
        if C > dim:
            raise ValidationError("latent channels exceed patch dimension")
        rng = np.random.default_rng(sub_seed(self.spec.seed, "toy-codec"))
        q, _ = np.linalg.qr(rng.standard_normal((dim, C)))
        self._proj = np.ascontiguousarray(q.T.astype(np.float32))  # (C, dim), orthonormal rows
        self._gain = np.float32(0.5)

    def weights_digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name], dtype="<f4").tobytes())
        h.update(self._proj.tobytes())
        return h.hexdigest()

    # -- text and image codecs ------------------------------------------------

    def encode_text(self, tokens) -> np.ndarray:
        return self.text_encoder(tuple(tokens))

    def encode_image(self, image) -> np.ndarray:
        """(H, W, 3) float image in [0, 1] -> (C, h, w) latent (fixed linear map)."""
        img = np.asarray(image, dtype=np.float32)
        H, W = self.spec.image_size
        if img.shape != (H, W, 3):
            raise ValidationError(f"image shape {img.shape} != {(H, W, 3)}")
        C, h, w = self.latent_shape
        p = self.patch
        patches = (img - np.float32(0.5)).reshape(h, p, w, p, 3).transpose(0, 2, 1, 3, 4)
        patches = patches.reshape(h, w, p * p * 3)
        z = patches @ self._proj.T / self._gain
        return np.ascontiguousarray(z.transpose(2, 0, 1), dtype=np.float32)

    def decode_latent(self, z) -> np.ndarray:
        z = np.asarray(getattr(z, "data", z), dtype=np.float32)
        C, h, w = self.latent_shape
        p = self.patch
        patches = z.transpose(1, 2, 0) @ self._proj * self._gain + np.float32(0.5)
        img = patches.reshape(h, w, p, p, 3).transpose(0, 2, 1, 3, 4).reshape(h * p, w * p, 3)
        return np.ascontiguousarray(img, dtype=np.float32)

    # -- forward pass -----------------------------------------------------------

    def _check_overrides(self, overrides):
        for index, ov in overrides.items():
            self.layer(index)
            if not isinstance(ov, AttentionOverride):
                raise OverrideError(index, f"expected AttentionOverride, got {type(ov).__name__}")

    def _attention(self, index, q, k, v, ov):
        n, d = self.n_tokens, self.spec.d_model
        if ov is not None:
            if ov.q is not None:
                q = _checked(index, "q", ov.q, (n, d))
            if ov.k is not None:
                k = _checked(index, "k", ov.k, (None, d))
            if ov.v is not None:
                v = _checked(index, "v", ov.v, (None, d))
            if k.shape[0] != v.shape[0]:
                raise OverrideError(index, f"k rows {k.shape[0]} != v rows {v.shape[0]}")
        attn = _softmax((q @ k.T) * self._scale)
        return attn, attn @ v, q, k, v

    def denoise(self, z, cond: TextCondition, i: int, overrides=None, taps=None) -> np.ndarray:
        z = np.asarray(getattr(z, "data", z), dtype=np.float32)
        if z.shape != self.latent_shape:
            raise ValidationError(f"latent shape {z.shape} != backend shape {self.latent_shape}")
        if not np.all(np.isfinite(z)):
            raise ValidationError("latent contains non-finite values")
        emb = np.asarray(cond.embedding, dtype=np.float32)
        if emb.ndim != 2 or emb.shape[1] != self.spec.d_text:
            raise ValidationError(
                f"condition embedding dim {emb.shape[-1]} != backend d_text {self.spec.d_text}"
            )
        overrides = overrides or {}
        self._check_overrides(overrides)
        W = self.weights
        n, d = self.n_tokens, self.spec.d_model
        C = self.latent_shape[0]
        x = z.reshape(C, n).T
        hidden = x @ W["in.w"] + W["in.b"] + _timestep_embedding(i, self.TEMB_DIM) @ W["time.w"]
        for b in range(self.spec.n_blocks):
            # self-attention
            index = 2 * b
            ov = overrides.get(index)
            hn = _layer_norm(hidden)
            q, k, v = (hn @ W[f"b{b}.self.{m}"] for m in "qkv")
            attn, out, q, k, v = self._attention(index, q, k, v, ov)
            phi = out @ W[f"b{b}.self.o"]
            if ov is not None:
                if ov.phi is not None:
                    phi = _checked(index, "phi", ov.phi, (n, d))
                if ov.blend_source is not None:
                    phi = _blend(index, phi, ov, n, d)
            if taps is not None:
                taps[index] = AttentionEntry(q, k, v, attn, phi)
            hidden = hidden + phi
            # cross-attention
            index = 2 * b + 1
            ov = overrides.get(index)
            hn = _layer_norm(hidden)
            q = hn @ W[f"b{b}.cross.q"]
            k = emb @ W[f"b{b}.cross.k"]
            v = emb @ W[f"b{b}.cross.v"]
            attn, out, q, k, v = self._attention(index, q, k, v, ov)
            phi = out @ W[f"b{b}.cross.o"]
            if ov is not None:
                if ov.phi is not None:
                    phi = _checked(index, "phi", ov.phi, (n, d))
                if ov.blend_source is not None:
                    phi = _blend(index, phi, ov, n, d)
            if taps is not None:
                taps[index] = AttentionEntry(q, k, v, attn, phi)
            hidden = hidden + phi
            hidden = hidden + _gelu(_layer_norm(hidden) @ W[f"b{b}.mlp.1"]) @ W[f"b{b}.mlp.2"]
        eps = _layer_norm(hidden) @ W["out.w"] + W["skip"] * x
        return np.ascontiguousarray(eps.T.reshape(self.latent_shape), dtype=np.float32)


def _checked(index, name, value, shape):
    value = np.asarray(value, dtype=np.float32)
    ok = value.ndim == len(shape) and all(s is None or s == v for s, v in zip(shape, value.shape))
    if not ok:
        raise OverrideError(index, f"{name} shape {value.shape} does not match {shape}")
    return value


def _blend(index, phi, ov, n, d):
    src = _checked(index, "blend_source", ov.blend_source, (n, d))
    if ov.blend_mask is None:
        raise OverrideError(index, "blend_source given without blend_mask")
    m = np.asarray(ov.blend_mask, dtype=np.float32).reshape(-1)
    if m.shape != (n,):
        raise OverrideError(index, f"blend_mask has {m.size} entries, expected {n}")
    m = m[:, None]
    return m * phi + (np.float32(1) - m) * src


def make_toy_backend(spec: ToyBackendSpec = ToyBackendSpec(), identity="personalized") -> ToyDenoiser:
    return ToyDenoiser(spec, identity)


def make_toy_pair(spec: ToyBackendSpec = ToyBackendSpec()):
    """``(vanilla, personalized)`` sharing every base weight."""
    return ToyDenoiser(spec, "vanilla"), ToyDenoiser(spec, "personalized")


# -- external adapter ------------------------------------------------------------

@dataclass
class AdapterBackend(DenoiserBackend):
    """Wraps an external noise predictor behind the backend interface.

    ``predict(z, tokens, i, overrides) -> (eps, taps)`` where ``taps`` maps
    layer index to :class:`AttentionEntry`. The layer catalog must be known
    before the run; text embedding is left to the provider, so conditions
    built here carry a zero-width placeholder embedding.
    """

    predict: Callable
    catalog: tuple
    latent_shape: tuple
    encode_image_fn: Optional[Callable] = None
    decode_latent_fn: Optional[Callable] = None
    identity: str = "external"
    d_text: int = 0

    def encode_text(self, tokens) -> np.ndarray:
        return np.zeros((len(tuple(tokens)), self.d_text), np.float32)

    def denoise(self, z, cond, i, overrides=None, taps=None) -> np.ndarray:
        overrides = overrides or {}
        for index in overrides:
            self.layer(index)
        try:
            eps, captured = self.predict(np.asarray(z, np.float32), cond.tokens, int(i), overrides)
        except BackendError:
            raise
        except Exception as exc:
            raise BackendError(f"external denoiser failed at timestep {i}: {exc}") from exc
        eps = np.asarray(eps, dtype=np.float32)
        if eps.shape != tuple(self.latent_shape):
            raise BackendError(f"external eps shape {eps.shape} != {tuple(self.latent_shape)}")
        if taps is not None:
            known = set(self.layers())
            for index, entry in (captured or {}).items():
                if index not in known:
                    raise BackendError(f"external denoiser reported unknown layer {index}")
                taps[index] = entry
        return eps

    def encode_image(self, image):
        if self.encode_image_fn is None:
            raise BackendError("adapter has no image encoder")
        return np.asarray(self.encode_image_fn(image), np.float32)

    def decode_latent(self, z):
        if self.decode_latent_fn is None:
            raise BackendError("adapter has no latent decoder")
        return np.asarray(self.decode_latent_fn(np.asarray(getattr(z, "data", z))), np.float32)
