"""Two-stage generation: step-blended layout generation, then retouching."""

from __future__ import annotations

import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import AttentionTrace, SwapPolicy, attach_blend, blend_gate, plan_overrides
from .backends import CROSS, derive_conditions, predict_noise
from .core import LatentTensor, PipelineConfig, array_digest, sub_seed
from .errors import LayoutRetouchError, PipelineError, ValidationError
from .fileio import save_pgm, save_ppm, save_tensor
from .maskops import adaptive_mask_stages, cross_attention_mask, resize_real
from .plugins import Plugins
from .sampler import ddim_invert, ddim_step, make_schedule

logger = logging.getLogger(__name__)

# mask record names -> file stems used by RunRecord.save and mask-debug
MASK_FILES = {"mc": "mask_cross_attn", "msam": "mask_segmenter", "mk": "mask_union",
              "m": "mask_composite"}


@dataclass
class RunRecord:
    """Everything a run produced, plus how long each stage took."""

    config: dict
    latents: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)
    images: dict = field(default_factory=dict)
    step_log: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)

    @contextmanager
    def stage(self, name):
        start = time.perf_counter()
        try:
            yield
        except PipelineError:
            raise
        except LayoutRetouchError as exc:
            raise PipelineError(name, exc) from exc
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start

    def latent_hashes(self) -> dict:
        return {k: array_digest(v) for k, v in sorted(self.latents.items())}

    def artifact_hashes(self) -> dict:
        out = {f"latent:{k}": v for k, v in self.latent_hashes().items()}
        out.update({f"mask:{k}": array_digest(v) for k, v in sorted(self.masks.items())})
        out.update({f"image:{k}": array_digest(v) for k, v in sorted(self.images.items())})
        return out

    def to_dict(self) -> dict:
        return {"config": self.config, "meta": self.meta, "timings": self.timings,
                "latent_hashes": self.latent_hashes(), "files": self.files,
                "step_log": self.step_log}

    def save(self, directory) -> str:
        """Write latents/, masks/, images/ and record.json; returns the record path."""
        files = {}
        for sub, items, writer, ext in (("latents", self.latents, save_tensor, ".ltr"),
                                        ("masks", self.masks, save_pgm, ".pgm"),
                                        ("images", self.images, save_ppm, ".ppm")):
            if not items:
                continue
            os.makedirs(os.path.join(directory, sub), exist_ok=True)
            for name, value in sorted(items.items()):
                stem = MASK_FILES.get(name, name) if sub == "masks" else name
                rel = f"{sub}/{stem}{ext}"
                writer(value, os.path.join(directory, rel))
                files[f"{sub[:-1]}:{name}"] = rel
        self.files = files
        path = os.path.join(directory, "record.json")
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        missing = [rel for rel in files.values() if not os.path.exists(os.path.join(directory, rel))]
        if missing:
            raise PipelineError("record", f"missing artifacts {missing}")
        return path


def _check_backend(backend, config: PipelineConfig):
    if tuple(backend.latent_shape) != tuple(config.latent_shape):
        raise ValidationError(
            f"{backend.identity} backend latent shape {tuple(backend.latent_shape)} "
            f"!= config latent_shape {tuple(config.latent_shape)}"
        )


def initial_noise(config: PipelineConfig, name="noise") -> LatentTensor:
    rng = np.random.default_rng(sub_seed(config.seed, name))
    return LatentTensor(rng.standard_normal(config.latent_shape).astype(np.float32), config.T)


def generate_layout(vanilla, personalized, prompt: str, config: PipelineConfig,
                    record: Optional[RunRecord] = None):
    """Stage 1: vanilla denoiser with ``y_p_minus`` for the first ``lambda1``
    iterations, personalized denoiser with ``y_p`` for the rest.

    Returns ``(layout_image, layout_latent, record)``.
    """
    record = record or RunRecord(config.to_dict())
    with record.stage("layout"):
        config.validate()
        _check_backend(vanilla, config)
        _check_backend(personalized, config)
        if tuple(vanilla.latent_shape) != tuple(personalized.latent_shape):
            raise ValidationError("vanilla and personalized backends disagree on latent shape")
        y_p, _, _ = derive_conditions(prompt, personalized, config.special_token, config.class_word)
        _, y_pm, _ = derive_conditions(prompt, vanilla, config.special_token, config.class_word)
        schedule = make_schedule(config.T, config.beta_start, config.beta_end)
        z = initial_noise(config)
        record.latents["layout_zT"] = z.data
        log = []
        for s in range(1, config.T + 1):
            i = config.T - s + 1
            if s <= config.lambda1:
                backend, cond = vanilla, y_pm
            else:
                backend, cond = personalized, y_p
            eps = predict_noise(backend, z.data, cond, i, config.guidance_scale)
            z = ddim_step(z, eps, schedule)
            log.append({"s": s, "i": i, "backend": backend.identity, "cond": cond.variant.value})
        image = personalized.decode_latent(z.data)
        record.latents["layout_z0"] = z.data
        record.images["layout"] = image
        record.step_log["layout"] = log
        record.meta.update(prompt=prompt, y_p=list(y_p.tokens), y_p_minus=list(y_pm.tokens))
    return image, z, record


def synthesize_reference(personalized, config: PipelineConfig) -> np.ndarray:
    """A stand-in reference image: personalized sampling of the neutral prompt."""
    _, _, y_r = derive_conditions(config.special_token, personalized, config.special_token)
    schedule = make_schedule(config.T, config.beta_start, config.beta_end)
    z = initial_noise(config, "reference-noise")
    for s in range(1, config.T + 1):
        eps = predict_noise(personalized, z.data, y_r, z.timestep, config.guidance_scale)
        z = ddim_step(z, eps, schedule)
    return personalized.decode_latent(z.data)


def blend_masks(layout_trace, y_p, msam, config: PipelineConfig, backend, upto_s: int) -> dict:
    """Cross-attention mask from layout iterations ``1..upto_s`` composed with ``msam``."""
    ca_layers = config.ca_layers if config.ca_layers is not None else backend.layers(CROSS)
    h, w = config.latent_shape[1:]
    mc = cross_attention_mask(layout_trace, [y_p.index_of(config.special_token.lower())],
                              config.ca_threshold, layers=ca_layers,
                              steps=range(1, upto_s + 1), shape=(h, w))
    stages = adaptive_mask_stages(mc, msam, config.volume_threshold)
    stages["mc"] = mc
    stages["m_latent"] = resize_real(stages["m"], (h, w))
    return stages


def _encode(backend, image, config, name):
    image = np.asarray(image, dtype=np.float32)
    H, W = config.image_size
    if image.shape != (H, W, 3):
        raise ValidationError(f"{name} image shape {image.shape} != {(H, W, 3)}")
    return LatentTensor(backend.encode_image(image), 0)


def retouch(layout_image, reference_image, personalized, conditions, msam,
            config: PipelineConfig, record: Optional[RunRecord] = None):
    """Stage 2: multi-source attention swap with adaptive mask blending.

    ``conditions`` is ``(y_r, y_p)``. Reference and layout images are DDIM
    inverted with the empty prompt; the target path starts from the
    inverted layout latent. Returns ``(target_image, record)``.
    """
    record = record or RunRecord(config.to_dict())
    y_r, y_p = conditions
    backend = personalized
    T, w = config.T, config.guidance_scale
    with record.stage("retouch.setup"):
        config.validate()
        _check_backend(backend, config)
        if msam is None:
            raise ValidationError("segmenter mask is missing")
        msam_data = np.asarray(getattr(msam, "data", msam))
        if msam_data.shape != tuple(config.image_size):
            raise ValidationError(f"segmenter mask shape {msam_data.shape} != {tuple(config.image_size)}")
        schedule = make_schedule(T, config.beta_start, config.beta_end)
        policy = SwapPolicy.from_config(config, backend)
        empty = backend.empty_condition()
    with record.stage("retouch.inversion"):
        z_r = ddim_invert(_encode(backend, reference_image, config, "reference"), backend, empty, schedule)
        z_o = ddim_invert(_encode(backend, layout_image, config, "layout"), backend, empty, schedule)
        z_t = LatentTensor(z_o.data, T)
        record.latents["retouch_reference_zT"] = z_r.data
        record.latents["retouch_layout_zT"] = z_o.data
        record.latents["retouch_target_zT"] = z_t.data
    traces = {p: AttentionTrace(p) for p in ("reference", "layout", "target")}
    self_swap = config.swap_source == "self"
    mask_latent = None
    log = []
    with record.stage("retouch.denoise"):
        for s in range(1, T + 1):
            i = T - s + 1
            taps = {}
            eps_r = predict_noise(backend, z_r.data, y_r, i, w, taps=taps)
            traces["reference"].record(s, taps, backend.catalog)
            taps = {}
            eps_o = predict_noise(backend, z_o.data, y_p, i, w, taps=taps)
            traces["layout"].record(s, taps, backend.catalog)
            if self_swap:
                taps = {}
                predict_noise(backend, z_t.data, y_r, i, w, taps=taps)
                traces["target"].record(s, taps, backend.catalog)
                source_a = source_b = traces["target"]
            else:
                source_a, source_b = traces["layout"], traces["reference"]
            bundle = plan_overrides(policy, s, source_a, source_b)
            blending = blend_gate(policy, s)
            if blending:
                if mask_latent is None:
                    stages = blend_masks(traces["layout"], y_p, msam_data, config, backend, s)
                    mask_latent = stages["m_latent"]
                    record.masks.update(mc=stages["mc"].data, msam=msam_data.astype(np.float32),
                                        mk=stages["mk"].data, m=stages["m"].data)
                    record.meta["mask_step"] = s
                bundle = attach_blend(bundle, policy, s, source_a, mask_latent)
            eps_t = predict_noise(backend, z_t.data, y_r, i, w, overrides=bundle)
            z_r = ddim_step(z_r, eps_r, schedule)
            z_o = ddim_step(z_o, eps_o, schedule)
            z_t = ddim_step(z_t, eps_t, schedule)
            log.append({"s": s, "i": i, "branch": policy.branch(s), "blend": blending,
                        "overrides": {str(k): sorted(n for n in ("q", "k", "v", "phi", "blend_source")
                                                     if getattr(v, n) is not None)
                                      for k, v in sorted(bundle.items())}})
    with record.stage("retouch.decode"):
        image = backend.decode_latent(z_t.data)
    record.latents["retouch_target_z0"] = z_t.data
    record.latents["retouch_layout_z0"] = z_o.data
    record.images["target"] = image
    record.step_log["retouch"] = log
    record.meta["traces"] = {p: len(t) for p, t in traces.items()}
    return image, record


def generate(prompt: str, reference_image, vanilla, personalized, config: PipelineConfig,
             plugins: Optional[Plugins] = None):
    """Layout generation, foreground segmentation of the layout, then retouch.

    Returns ``(target_image, record)``. ``reference_image=None`` substitutes
    :func:`synthesize_reference`.
    """
    config.validate()
    plugins = plugins or Plugins(seed=config.seed)
    record = RunRecord(config.to_dict())
    layout_image, _, record = generate_layout(vanilla, personalized, prompt, config, record)
    with record.stage("reference"):
        if reference_image is None:
            reference_image = synthesize_reference(personalized, config)
            record.meta["reference"] = "synthesized"
        record.images["reference"] = np.asarray(reference_image, np.float32)
    with record.stage("segment"):
        msam = plugins.segment(layout_image)
    with record.stage("retouch.conditions"):
        y_p, _, y_r = derive_conditions(prompt, personalized, config.special_token, config.class_word)
    target, record = retouch(layout_image, reference_image, personalized, (y_r, y_p), msam,
                             config, record)
    return target, record


def mask_debug(layout_image, prompt: str, personalized, config: PipelineConfig,
               plugins: Optional[Plugins] = None) -> dict:
    """Masks the retouch stage would build for ``layout_image``.

    Inverts the layout, replays its path up to ``blend_start`` and returns
    every composition stage (``mc``, ``msam``, ``mk``, ``m`` and helpers).
    """
    config.validate()
    plugins = plugins or Plugins(seed=config.seed)
    backend = personalized
    msam = plugins.segment(layout_image)
    y_p, _, _ = derive_conditions(prompt, backend, config.special_token, config.class_word)
    schedule = make_schedule(config.T, config.beta_start, config.beta_end)
    z = ddim_invert(_encode(backend, layout_image, config, "layout"), backend,
                    backend.empty_condition(), schedule)
    trace = AttentionTrace("layout")
    for s in range(1, config.blend_start + 1):
        taps = {}
        eps = predict_noise(backend, z.data, y_p, z.timestep, config.guidance_scale, taps=taps)
        trace.record(s, taps, backend.catalog)
        z = ddim_step(z, eps, schedule)
    stages = blend_masks(trace, y_p, msam.data, config, backend, config.blend_start)
    stages["msam"] = msam
    return stages
