"""Clients for external segmenter / embedder / classifier providers, plus stubs.

Wire protocol
-------------
subprocess
    The input is written to a temporary file whose path is passed as the
    only argument. The provider prints the path of its output file; the last
    non-empty line of stdout is used.
http
    The input bytes are POSTed to the address; the response body is the result.

Inputs are PPM images (or UTF-8 text for text embedders). Segmenters answer
with a binary PGM; embedders and classifiers with a rank-1 LTR1 vector.

Endpoints are read from ``LAYOUT_RETOUCH_SEGMENTER``,
``LAYOUT_RETOUCH_IMAGE_EMBEDDER``, ``LAYOUT_RETOUCH_TEXT_EMBEDDER`` and
``LAYOUT_RETOUCH_CLASSIFIER``. A value starting with ``http://`` or
``https://`` selects http; anything else is a command line. Unset means the
built-in stub.
"""

from __future__ import annotations

import hashlib
import logging
import os
import shlex
import socket
import subprocess
import tempfile
import urllib.error
import urllib.request
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import BlendMask, MaskProvenance, sub_seed
from .errors import (CorruptionError, FormatError, PluginError, PluginProtocolError,
                     PluginTimeout, ValidationError)
from .fileio import image_to_bytes, load_pgm, tensor_from_bytes, to_uint8

logger = logging.getLogger(__name__)

KINDS = ("segmenter", "image_embedder", "text_embedder", "classifier")
ENV_PREFIX = "LAYOUT_RETOUCH_"
STUB_EMBED_DIM = 64
STUB_CLASSES = 10


@dataclass(frozen=True)
class PluginEndpoint:
    kind: str
    transport: str
    address: str
    timeout: float = 60.0
    dim: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown plugin kind {self.kind!r}")
        if self.transport not in ("subprocess", "http"):
            raise ValidationError(f"transport must be subprocess or http, got {self.transport!r}")
        if not self.address:
            raise ValidationError("endpoint address/command is empty")
        if not self.timeout > 0:
            raise ValidationError("timeout must be positive")

    @classmethod
    def parse(cls, kind: str, value: str, timeout: float = 60.0, dim=None) -> "PluginEndpoint":
        transport = "http" if value.startswith(("http://", "https://")) else "subprocess"
        return cls(kind, transport, value, timeout, dim)

    def call(self, payload: bytes, suffix: str) -> bytes:
        if self.transport == "http":
            return self._call_http(payload)
        return self._call_subprocess(payload, suffix)

    def _call_subprocess(self, payload: bytes, suffix: str) -> bytes:
        with tempfile.TemporaryDirectory(prefix="ltr-plugin-") as tmp:
            src = os.path.join(tmp, "input" + suffix)
            with open(src, "wb") as fh:
                fh.write(payload)
            argv = shlex.split(self.address) + [src]
            try:
                proc = subprocess.run(argv, capture_output=True, timeout=self.timeout, cwd=tmp)
            except subprocess.TimeoutExpired as exc:
                raise PluginTimeout(f"{self.kind} timed out after {self.timeout}s") from exc
            except OSError as exc:
                raise PluginError(f"{self.kind} could not be started: {exc}") from exc
            if proc.returncode != 0:
                err = proc.stderr.decode(errors="replace").strip()[-500:]
                raise PluginError(f"{self.kind} exited with {proc.returncode}: {err}")
            lines = [l.strip() for l in proc.stdout.decode(errors="replace").splitlines() if l.strip()]
            if not lines:
                raise PluginProtocolError(f"{self.kind} printed no output path")
            out = lines[-1]
            if not os.path.isabs(out):
                out = os.path.join(tmp, out)
            try:
                with open(out, "rb") as fh:
                    return fh.read()
            except OSError as exc:
                raise PluginProtocolError(f"{self.kind} output {out!r} unreadable: {exc}") from exc

    def _call_http(self, payload: bytes) -> bytes:
        req = urllib.request.Request(self.address, data=payload, method="POST",
                                     headers={"Content-Type": "application/octet-stream"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.read()
        except (socket.timeout, TimeoutError) as exc:
            raise PluginTimeout(f"{self.kind} timed out after {self.timeout}s") from exc
        except urllib.error.HTTPError as exc:
            raise PluginError(f"{self.kind} answered HTTP {exc.code}") from exc
        except urllib.error.URLError as exc:
            if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                raise PluginTimeout(f"{self.kind} timed out after {self.timeout}s") from exc
            raise PluginError(f"{self.kind} unreachable: {exc.reason}") from exc


def endpoint_from_env(kind: str, environ=None) -> Optional[PluginEndpoint]:
    environ = os.environ if environ is None else environ
    value = environ.get(ENV_PREFIX + kind.upper())
    if not value:
        return None
    timeout = float(environ.get(ENV_PREFIX + kind.upper() + "_TIMEOUT", 60.0))
    dim = environ.get(ENV_PREFIX + kind.upper() + "_DIM")
    return PluginEndpoint.parse(kind, value, timeout, int(dim) if dim else None)


@dataclass(frozen=True)
class Plugins:
    """Endpoint selection for one run; ``None`` entries use the stubs."""

    segmenter: Optional[PluginEndpoint] = None
    image_embedder: Optional[PluginEndpoint] = None
    text_embedder: Optional[PluginEndpoint] = None
    classifier: Optional[PluginEndpoint] = None
    seed: int = 0

    @classmethod
    def from_env(cls, seed=0, environ=None) -> "Plugins":
        return cls(*(endpoint_from_env(k, environ) for k in KINDS), seed=seed)

    def segment(self, image):
        return segment_foreground(image, self.segmenter)

    def embed_image(self, image):
        return embed_image(image, self.image_embedder)

    def embed_text(self, text):
        return embed_text(text, self.text_embedder)

    def classify(self, image):
        return classify(image, self.classifier, seed=self.seed)


# -- stubs ------------------------------------------------------------------------

def luminance(image) -> np.ndarray:
    """Integer Rec.601 luma of an RGB image as uint8."""
    rgb = to_uint8(image)
    if rgb.ndim == 2:
        return rgb
    r, g, b = (rgb[..., c].astype(np.int64) for c in range(3))
    return ((299 * r + 587 * g + 114 * b + 500) // 1000).astype(np.uint8)


def otsu_threshold(gray: np.ndarray) -> int:
    """Otsu threshold on a uint8 image; foreground is ``gray > t``.

    Between-class variances are compared as exact fractions so the result
    does not depend on floating-point rounding.
    """
    hist = np.bincount(gray.ravel(), minlength=256).tolist()
    n = sum(hist)
    total = sum(g * c for g, c in enumerate(hist))
    best_t, best = 0, Fraction(-1)
    w0 = s0 = 0
    for t in range(255):
        w0 += hist[t]
        s0 += t * hist[t]
        w1 = n - w0
        if w0 == 0 or w1 == 0:
            continue
        score = Fraction((total * w0 - n * s0) ** 2, w0 * w1)
        if score > best:
            best, best_t = score, t
    return best_t


def largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), bool))
    if n == 0:
        return np.zeros(mask.shape, bool)
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    return labels == int(np.argmax(counts))


def stub_segment(image) -> BlendMask:
    gray = luminance(image)
    if gray.min() == gray.max():
        logger.warning("segmenter stub: constant image, returning an empty mask")
        return BlendMask(np.zeros(gray.shape, np.float32), MaskProvenance.SEGMENTER)
    fg = gray > otsu_threshold(gray)
    return BlendMask(largest_component(fg).astype(np.float32), MaskProvenance.SEGMENTER)


def thumbnail8(image) -> np.ndarray:
    """8x8 box-filtered luma as uint8."""
    return np.asarray(Image.fromarray(luminance(image)).resize((8, 8), Image.Resampling.BOX))


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.sqrt(np.sum(v * v))
    if norm == 0:
        return np.full(v.shape, 1.0 / np.sqrt(v.size))
    return v / norm


def stub_embed_image(image) -> np.ndarray:
    return _unit(thumbnail8(image).ravel().astype(np.int64))


def stub_embed_text(text: str) -> np.ndarray:
    tokens = text.lower().split()
    if not tokens:
        raise ValidationError("cannot embed empty text")
    counts = [0] * STUB_EMBED_DIM
    for tok in tokens:
        h = hashlib.sha256(tok.encode()).digest()
        idx = int.from_bytes(h[:4], "little") % STUB_EMBED_DIM
        counts[idx] += 1 if h[4] & 1 else -1
    return _unit(np.array(counts, dtype=np.int64))


def stub_classify(image, seed=0, n_classes=STUB_CLASSES) -> np.ndarray:
    rng = np.random.default_rng(sub_seed(seed, "stub-classifier"))
    proj = rng.standard_normal((n_classes, 64)) * 4.0
    x = thumbnail8(image).ravel().astype(np.float64) / 255.0 - 0.5
    logits = proj @ x
    e = np.exp(logits - logits.max())
    return e / e.sum()


# -- client operations --------------------------------------------------------------

def _decode_vector(kind, raw: bytes, endpoint: PluginEndpoint) -> np.ndarray:
    try:
        vec = tensor_from_bytes(raw)
    except (FormatError, CorruptionError) as exc:
        raise PluginProtocolError(f"{kind} returned a malformed vector: {exc}") from exc
    if vec.ndim != 1 or not np.all(np.isfinite(vec)):
        raise PluginProtocolError(f"{kind} must return a finite rank-1 vector, got shape {vec.shape}")
    if endpoint.dim is not None and vec.size != endpoint.dim:
        raise PluginProtocolError(
            f"{kind} returned dimension {vec.size}, endpoint declares {endpoint.dim}"
        )
    return vec.astype(np.float64)


def segment_foreground(image, endpoint: Optional[PluginEndpoint] = None) -> BlendMask:
    """Binary foreground mask at image resolution."""
    if endpoint is None:
        return stub_segment(image)
    raw = endpoint.call(image_to_bytes(image), ".ppm")
    try:
        mask = load_pgm(raw)
    except FormatError as exc:
        raise PluginProtocolError(f"segmenter returned an unreadable mask: {exc}") from exc
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise PluginProtocolError("segmenter mask is not binary {0, 255}")
    h, w = np.asarray(image).shape[:2]
    if mask.shape != (h, w):
        raise PluginProtocolError(f"segmenter mask shape {mask.shape} != image shape {(h, w)}")
    return BlendMask(mask, MaskProvenance.SEGMENTER)


def embed_image(image, endpoint: Optional[PluginEndpoint] = None) -> np.ndarray:
    if endpoint is None:
        return stub_embed_image(image)
    return _unit(_decode_vector("image_embedder", endpoint.call(image_to_bytes(image), ".ppm"), endpoint))


def embed_text(text: str, endpoint: Optional[PluginEndpoint] = None) -> np.ndarray:
    if endpoint is None:
        return stub_embed_text(text)
    raw = endpoint.call(text.encode("utf-8"), ".txt")
    return _unit(_decode_vector("text_embedder", raw, endpoint))


def embed(item, endpoint: Optional[PluginEndpoint] = None) -> np.ndarray:
    """Unit-norm embedding of an image array or a text string."""
    if isinstance(item, str):
        return embed_text(item, endpoint)
    return embed_image(item, endpoint)


def classify(image, endpoint: Optional[PluginEndpoint] = None, seed: int = 0) -> np.ndarray:
    """Class posterior ``p(y|x)``."""
    if endpoint is None:
        return stub_classify(image, seed)
    p = _decode_vector("classifier", endpoint.call(image_to_bytes(image), ".ppm"), endpoint)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-4:
        raise PluginProtocolError("classifier output is not a probability vector")
    return p / p.sum()
