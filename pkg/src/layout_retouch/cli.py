"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 runtime error, 3 plugin failure.
Values resolve as flags > config file > built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import evalkit, pipeline
from .attention import SwapPolicy, describe_schedule
from .backends import ToyBackendSpec, derive_conditions, make_toy_pair
from .core import (BlendMask, MaskProvenance, PipelineConfig, config_from_mapping,
                   read_config_mapping)
from .errors import LayoutRetouchError, PipelineError, PluginError, ValidationError
from .fileio import load_pgm, load_ppm, save_pgm
from .plugins import Plugins

logger = logging.getLogger("layout_retouch")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_PLUGIN = 0, 1, 2, 3

# flag dest -> config field
CONFIG_FLAGS = {
    "T": ("--T", int), "lambda1": ("--lambda1", int), "lambda2": ("--lambda2", int),
    "blend_start": ("--blend-start", int), "ca_threshold": ("--ca-threshold", float),
    "volume_threshold": ("--volume-threshold", int), "guidance_scale": ("--guidance-scale", float),
    "profile": ("--profile", str), "class_word": ("--class-word", str),
    "swap_source": ("--swap-source", str), "special_token": ("--special-token", str),
}


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", default="default",
                   help='JSON config file, or "default" for built-in values')
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--toy-seed", type=int, default=None,
                   help="seed of the toy denoiser weights (defaults to --seed)")
    p.add_argument("--out", default="runs", help="output root directory")
    p.add_argument("--dry-run", action="store_true",
                   help="print the resolved config and step schedule, then exit")
    p.add_argument("--no-blend", action="store_true", help="disable adaptive mask blending")
    for dest, (flag, typ) in CONFIG_FLAGS.items():
        p.add_argument(flag, dest=dest, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="layout-retouch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("layout", help="stage 1: step-blended layout generation")
    _common(p)
    p.add_argument("--prompt", required=True)

    p = sub.add_parser("retouch", help="stage 2 on an existing layout image")
    _common(p)
    p.add_argument("--prompt", required=True)
    p.add_argument("--layout", required=True, help="layout image (PPM)")
    p.add_argument("--reference", required=True, help="reference image (PPM)")
    p.add_argument("--mask", help="segmenter mask (PGM); segmented from the layout if absent")

    p = sub.add_parser("generate", help="layout, segmentation and retouch end to end")
    _common(p)
    p.add_argument("--prompt", required=True)
    p.add_argument("--reference", help="reference image (PPM); synthesized if absent")

    p = sub.add_parser("mask-debug", help="write every blend-mask stage for a layout image")
    _common(p)
    p.add_argument("--prompt", required=True)
    p.add_argument("--layout", required=True, help="layout image (PPM)")

    p = sub.add_parser("eval-centers", help="subject centre distribution and sigma2_avg")
    _common(p)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--images", nargs="+", help="images (PPM), segmented first")
    group.add_argument("--masks", nargs="+", help="binary subject masks (PGM)")
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--sigma", type=float, default=evalkit.DENSITY_SIGMA)

    p = sub.add_parser("eval-diversity", help="inception score and embedding export")
    _common(p)
    p.add_argument("--images", nargs="+", required=True)

    p = sub.add_parser("eval-identity", help="identity and prompt-fidelity scores")
    _common(p)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--references", nargs="+", required=True)
    p.add_argument("--prompt", required=True)

    p = sub.add_parser("sweep-lambda1", help="generate per lambda1 value and tabulate scores")
    _common(p)
    p.add_argument("--prompt", required=True)
    p.add_argument("--values", required=True, help="comma-separated lambda1 values")
    p.add_argument("--reference", help="reference image (PPM); synthesized if absent")
    return parser


def resolve_config(args) -> PipelineConfig:
    values = {}
    if args.config and args.config != "default":
        values.update(read_config_mapping(args.config))
    if args.profile is not None and args.lambda1 is None:
        values.pop("lambda1", None)
    for dest in CONFIG_FLAGS:
        v = getattr(args, dest)
        if v is not None:
            values[dest] = v
    if args.seed is not None:
        values["seed"] = args.seed
    if args.no_blend:
        values["blend_enabled"] = False
    return config_from_mapping(values)


def _backends(args, config):
    toy_seed = args.toy_seed if args.toy_seed is not None else config.seed
    spec = ToyBackendSpec(seed=toy_seed, latent_shape=config.latent_shape,
                          image_size=config.image_size, special_token=config.special_token)
    return make_toy_pair(spec)


def _plan(config, backend) -> list:
    policy = SwapPolicy.from_config(config, backend)
    plan = describe_schedule(policy)
    for row in plan:
        row["layout_backend"] = "vanilla" if row["s"] <= config.lambda1 else "personalized"
    return plan


def _run_dir(args, config, suffix=None) -> str:
    run_id = f"{args.command}-seed{config.seed}"
    path = os.path.join(args.out, run_id, *(suffix or []))
    os.makedirs(path, exist_ok=True)
    return path


def _load_image(path, config, what):
    img = load_ppm(path)
    if img.shape[:2] != tuple(config.image_size):
        raise ValidationError(f"{what} image {path} is {img.shape[:2]}, expected {tuple(config.image_size)}")
    return img


def _emit(payload):
    print(json.dumps(payload, indent=2, sort_keys=True))


def cmd_layout(args, config, plugins):
    vanilla, personalized = _backends(args, config)
    _, _, record = pipeline.generate_layout(vanilla, personalized, args.prompt, config)
    return {"record": record.save(_run_dir(args, config))}


def cmd_retouch(args, config, plugins):
    _, personalized = _backends(args, config)
    layout = _load_image(args.layout, config, "layout")
    reference = _load_image(args.reference, config, "reference")
    if args.mask:
        msam = BlendMask.binary(load_pgm(args.mask) > 0.5, MaskProvenance.SEGMENTER)
    else:
        msam = plugins.segment(layout)
    y_p, _, y_r = derive_conditions(args.prompt, personalized, config.special_token, config.class_word)
    record = pipeline.RunRecord(config.to_dict())
    record.images.update(layout=layout, reference=reference)
    _, record = pipeline.retouch(layout, reference, personalized, (y_r, y_p), msam, config, record)
    return {"record": record.save(_run_dir(args, config))}


def _generate_once(args, config, plugins, reference, suffix=None):
    vanilla, personalized = _backends(args, config)
    target, record = pipeline.generate(args.prompt, reference, vanilla, personalized, config, plugins)
    path = record.save(_run_dir(args, config, suffix))
    return target, record, path


def cmd_generate(args, config, plugins):
    reference = _load_image(args.reference, config, "reference") if args.reference else None
    _, record, path = _generate_once(args, config, plugins, reference)
    return {"record": path, "latent_hashes": record.latent_hashes()}


def cmd_mask_debug(args, config, plugins):
    _, personalized = _backends(args, config)
    layout = _load_image(args.layout, config, "layout")
    stages = pipeline.mask_debug(layout, args.prompt, personalized, config, plugins)
    out = _run_dir(args, config)
    os.makedirs(os.path.join(out, "masks"), exist_ok=True)
    files = {}
    for key, stem in pipeline.MASK_FILES.items():
        rel = f"masks/{stem}.pgm"
        save_pgm(stages[key], os.path.join(out, rel))
        files[key] = rel
    doc = {"config": config.to_dict(), "files": files, "prompt": args.prompt}
    path = os.path.join(out, "record.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return {"record": path, "files": files}


def cmd_eval_centers(args, config, plugins):
    if args.masks:
        masks = [load_pgm(p) > 0.5 for p in args.masks]
        sources = args.masks
    else:
        masks = [plugins.segment(load_ppm(p)).data for p in args.images]
        sources = args.images
    kept = [(src, m) for src, m in zip(sources, masks) if np.any(m)]
    skipped = [src for src, m in zip(sources, masks) if not np.any(m)]
    if not kept:
        raise ValidationError("no non-empty subject masks")
    stats = evalkit.center_point_stats([m for _, m in kept], args.resolution, args.sigma)
    out = _run_dir(args, config)
    density_path = "density.pgm"
    save_pgm(stats.density / stats.density.max(), os.path.join(out, density_path))
    np.save(os.path.join(out, "density.npy"), stats.density)
    doc = dict(stats.to_dict(), sources=[s for s, _ in kept], skipped_empty=skipped,
               density_map=density_path, density_sigma=args.sigma)
    path = os.path.join(out, "stats.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return {"stats": path, "sigma2_avg": stats.sigma2_avg}


def cmd_eval_diversity(args, config, plugins):
    images = [load_ppm(p) for p in args.images]
    score = evalkit.inception_score(images, plugins.classify)
    out = _run_dir(args, config)
    evalkit.export_embeddings([plugins.embed_image(im) for im in images],
                              os.path.join(out, "embeddings.ltr"))
    doc = {"inception_score": score, "n_images": len(images), "images": args.images,
           "embeddings": "embeddings.ltr"}
    path = os.path.join(out, "stats.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return {"stats": path, "inception_score": score}


def cmd_eval_identity(args, config, plugins):
    images = [load_ppm(p) for p in args.images]
    refs = [load_ppm(p) for p in args.references]
    text = _metric_prompt(args.prompt, config)
    doc = {"identity": evalkit.identity_score(images, refs, plugins.embed_image),
           "fidelity": evalkit.fidelity_score(images, text, plugins.embed_image, plugins.embed_text),
           "prompt": text, "images": args.images, "references": args.references}
    path = os.path.join(_run_dir(args, config), "stats.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return dict(doc, stats=path)


def _metric_prompt(prompt, config):
    word = config.class_word or ""
    return " ".join(word if t == config.special_token else t for t in prompt.split()).strip()


def cmd_sweep_lambda1(args, config, plugins):
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--values must be comma-separated integers: {exc}") from exc
    if not values:
        raise UsageError("--values is empty")
    reference = _load_image(args.reference, config, "reference") if args.reference else None
    text = _metric_prompt(args.prompt, config)
    rows = []
    for value in values:
        cfg = config.replace(lambda1=value)
        target, record, path = _generate_once(args, cfg, plugins, reference, [f"lambda1-{value}"])
        ref = record.images["reference"]
        rows.append({
            "lambda1": value,
            "identity": evalkit.identity_score([target], [ref], plugins.embed_image),
            "fidelity": evalkit.fidelity_score([target], text, plugins.embed_image, plugins.embed_text),
            "layout_identity": evalkit.identity_score([record.images["layout"]], [ref],
                                                      plugins.embed_image),
            "record": os.path.relpath(path, _run_dir(args, config)),
        })
    out = _run_dir(args, config)
    table = os.path.join(out, "scores.csv")
    with open(table, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    with open(os.path.join(out, "scores.json"), "w") as fh:
        json.dump({"prompt": args.prompt, "metric_prompt": text, "rows": rows}, fh, indent=2)
    return {"table": table, "rows": rows}


COMMANDS = {
    "layout": cmd_layout, "retouch": cmd_retouch, "generate": cmd_generate,
    "mask-debug": cmd_mask_debug, "eval-centers": cmd_eval_centers,
    "eval-diversity": cmd_eval_diversity, "eval-identity": cmd_eval_identity,
    "sweep-lambda1": cmd_sweep_lambda1,
}


def _exit_code(exc) -> int:
    cause = exc.cause if isinstance(exc, PipelineError) else exc
    if isinstance(cause, PluginError):
        return EXIT_PLUGIN
    if isinstance(cause, ValidationError):
        return EXIT_VALIDATION
    return EXIT_RUNTIME


def main(argv=None) -> int:
    parser = build_parser()
    stage = "arguments"
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        stage = "config"
        config = resolve_config(args)
        if args.dry_run:
            _, personalized = _backends(args, config)
            _emit({"command": args.command, "config": config.to_dict(),
                   "schedule": _plan(config, personalized)})
            return EXIT_OK
        stage = args.command
        plugins = Plugins.from_env(seed=config.seed)
        start = time.perf_counter()
        result = COMMANDS[args.command](args, config, plugins)
        result["seconds"] = round(time.perf_counter() - start, 3)
        _emit(result)
        return EXIT_OK
    except LayoutRetouchError as exc:
        where = exc.stage if isinstance(exc, PipelineError) else stage
        print(f"error [{where}]: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except OSError as exc:
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
