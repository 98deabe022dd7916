"""Layout-diversity and identity/prompt-fidelity instruments."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import rel_entr

from .errors import ValidationError
from .fileio import save_tensor

DENSITY_SIGMA = 0.05


def subject_center(mask) -> tuple:
    """Centre of the tight bounding box, normalised by image size (pixel-centre convention)."""
    a = np.asarray(getattr(mask, "data", mask)) > 0
    if a.ndim != 2:
        raise ValidationError(f"mask must be 2-D, got shape {a.shape}")
    if not a.any():
        raise ValidationError("cannot locate a subject in an empty mask")
    H, W = a.shape
    rows = np.flatnonzero(a.any(axis=1))
    cols = np.flatnonzero(a.any(axis=0))
    x = ((cols[0] + cols[-1]) / 2 + 0.5) / W
    y = ((rows[0] + rows[-1]) / 2 + 0.5) / H
    return float(x), float(y)


@dataclass(frozen=True)
class CenterStats:
    centers: list
    sigma2_avg: float
    density: np.ndarray

    def to_dict(self) -> dict:
        return {"centers": [list(c) for c in self.centers], "sigma2_avg": self.sigma2_avg,
                "n": len(self.centers)}


def sigma2_avg(centers) -> float:
    """Mean of the population variances of the x and y coordinates."""
    c = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    if len(c) == 0:
        raise ValidationError("need at least one center")
    return float((np.var(c[:, 0]) + np.var(c[:, 1])) / 2.0)


def density_map(centers, resolution: int = 64, sigma: float = DENSITY_SIGMA) -> np.ndarray:
    """Sum of isotropic Gaussians at each centre on a unit-square grid, normalised to 1."""
    grid = (np.arange(resolution) + 0.5) / resolution
    gx, gy = np.meshgrid(grid, grid)
    dens = np.zeros((resolution, resolution))
    for x, y in centers:
        dens += np.exp(-((gx - x) ** 2 + (gy - y) ** 2) / (2 * sigma ** 2))
    return dens / dens.sum()


def center_point_stats(masks: Sequence, resolution: int = 64,
                       sigma: float = DENSITY_SIGMA) -> CenterStats:
    if len(masks) == 0:
        raise ValidationError("center_point_stats needs at least one mask")
    centers = [subject_center(m) for m in masks]
    return CenterStats(centers, sigma2_avg(centers), density_map(centers, resolution, sigma))


def inception_score_from_posteriors(posteriors) -> float:
    """``exp(mean_x KL(p(y|x) || p(y)))`` over a single split."""
    p = np.asarray(posteriors, dtype=np.float64)
    if p.ndim != 2 or len(p) < 2:
        raise ValidationError("need posteriors for at least two images")
    marginal = p.mean(axis=0, keepdims=True)
    kl = rel_entr(p, marginal).sum(axis=1)
    return float(np.exp(kl.mean()))


def inception_score(images: Sequence, classify: Callable) -> float:
    if len(images) < 2:
        raise ValidationError("inception score needs at least two images")
    return inception_score_from_posteriors([classify(img) for img in images])


def _cosine_matrix(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return a @ b.T


def identity_score(generated: Sequence, references: Sequence, embed_image: Callable) -> float:
    """Mean cosine similarity over every generated x reference pair."""
    if not generated or not references:
        raise ValidationError("identity_score needs non-empty image lists")
    g = [embed_image(x) for x in generated]
    r = [embed_image(x) for x in references]
    return float(_cosine_matrix(g, r).mean())


def fidelity_score(generated: Sequence, prompt: str, embed_image: Callable,
                   embed_text: Callable) -> float:
    """Mean cosine similarity between each generated image and the prompt."""
    if not generated:
        raise ValidationError("fidelity_score needs generated images")
    g = [embed_image(x) for x in generated]
    t = [embed_text(prompt)]
    return float(_cosine_matrix(g, t).mean())


def export_embeddings(vectors, path) -> None:
    """Stack vectors into an (n, d) LTR1 file for external projection tools."""
    save_tensor(np.stack([np.asarray(v, dtype=np.float32) for v in vectors]), path)


def placement_masks(mode: str, n: int, size: int = 48, seed: int = 0) -> list:
    """Synthetic subject masks from a toy placement policy.

    ``"uniform"`` drops a square subject into one of the 3x3 grid cells at
    random; ``"centered"`` always uses the middle cell.
    """
    if mode not in ("uniform", "centered"):
        raise ValidationError(f"unknown placement mode {mode!r}")
    rng = np.random.default_rng(seed)
    cell = size // 3
    side = max(1, cell // 2)
    masks = []
    for _ in range(n):
        k = int(rng.integers(9)) if mode == "uniform" else 4
        r0 = (k // 3) * cell + (cell - side) // 2
        c0 = (k % 3) * cell + (cell - side) // 2
        m = np.zeros((size, size), np.float32)
        m[r0:r0 + side, c0:c0 + side] = 1.0
        masks.append(m)
    return masks
