"""Post-training generation services: conditional sampling, hybrid images,
latent interpolation, and code export.

Hybrid generation and interpolation use posterior means rather than samples so
outputs are reproducible; sampling stays available for conditional batches.
Images cross this module's boundary as (H, W, C) or (N, H, W, C) float arrays
in [-1, 1], matching the dataset layout.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import autodiff as ad
from .dataio import LabeledImageSet
from .errors import ConfigurationError
from .netcore import ComponentBundle, LatentCode


def to_nchw(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2))


def to_nhwc(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(images).transpose(0, 2, 3, 1))


@dataclass
class HybridRequest:
    """Exactly one content source (vector or image) plus one style image."""

    style_image: np.ndarray
    content_vector: np.ndarray | None = None
    content_image: np.ndarray | None = None

    def __post_init__(self):
        have = (self.content_vector is not None) + (self.content_image is not None)
        if have != 1:
            raise ConfigurationError("hybrid request needs exactly one content source")
        if self.style_image is None:
            raise ConfigurationError("hybrid request needs a style image")


@dataclass
class InterpolationRequest:
    source: np.ndarray
    target: np.ndarray
    mode: str = "both"             # content | style | both
    steps: int = 8

    def __post_init__(self):
        if self.mode not in ("content", "style", "both"):
            raise ConfigurationError(f"unknown interpolation mode {self.mode!r}")
        if self.steps < 2:
            raise ConfigurationError("interpolation needs at least 2 steps")
        if np.asarray(self.source).shape != np.asarray(self.target).shape:
            raise ConfigurationError("interpolation endpoints must share a shape")


def conditional_generate(bundle: ComponentBundle, t: np.ndarray, n: int, seed: int = 0,
                         content_mode: str = "sample") -> np.ndarray:
    """n images for one conditioning vector: c ~ q(c|t) (or its mean), z ~ N(0, I)."""
    t = np.asarray(t, dtype=bundle.cfg.np_dtype()).reshape(1, -1)
    if t.shape[1] != bundle.cfg.t_dim:
        raise ConfigurationError(
            f"conditioning dim {t.shape[1]} does not match profile dim {bundle.cfg.t_dim}")
    if content_mode not in ("sample", "mean"):
        raise ConfigurationError("content_mode must be 'sample' or 'mean'")
    hw, ch = bundle.cfg.image_size, bundle.cfg.channels
    if n == 0:
        return np.zeros((0, hw, hw, ch), dtype=np.float32)
    rng = np.random.default_rng(seed)
    with ad.no_grad():
        post = bundle.encode_condition(np.repeat(t, n, axis=0))
        mean = post.mean_array()
        if content_mode == "sample":
            std = np.exp(0.5 * np.asarray(post.log_variance.data))
            c = mean + std * rng.standard_normal(mean.shape).astype(mean.dtype)
        else:
            c = mean
    z = rng.standard_normal((n, bundle.cfg.d_z)).astype(mean.dtype)
    return to_nhwc(bundle.decode_codes(z, c))


def hybrid_generate(bundle: ComponentBundle, req: HybridRequest) -> np.ndarray:
    """Mix one source's content with another image's style (posterior means)."""
    z_style, _ = bundle.infer_code_means(to_nchw(req.style_image))
    if req.content_vector is not None:
        with ad.no_grad():
            post = bundle.encode_condition(
                np.asarray(req.content_vector, dtype=bundle.cfg.np_dtype()).reshape(1, -1))
        c = post.mean_array()
    else:
        _, c = bundle.infer_code_means(to_nchw(req.content_image))
    return to_nhwc(bundle.decode_codes(z_style, c))[0]


def hybrid_grid(bundle: ComponentBundle, content_sources: list, style_images: list,
                content_kind: str = "image") -> np.ndarray:
    """(len(contents), len(styles), H, W, C) grid; rows share content, columns style."""
    rows = []
    for content in content_sources:
        row = []
        for style in style_images:
            if content_kind == "vector":
                req = HybridRequest(style_image=style, content_vector=content)
            else:
                req = HybridRequest(style_image=style, content_image=content)
            row.append(hybrid_generate(bundle, req))
        rows.append(np.stack(row))
    return np.stack(rows)


def reconstruct(bundle: ComponentBundle, image: np.ndarray) -> np.ndarray:
    """Mean-code reconstruction; identical code path to a degenerate hybrid."""
    return hybrid_generate(bundle, HybridRequest(style_image=image, content_image=image))


def interpolate(bundle: ComponentBundle, req: InterpolationRequest) -> np.ndarray:
    """Linear interpolation between posterior-mean codes of two images."""
    z_a, c_a = bundle.infer_code_means(to_nchw(req.source))
    z_b, c_b = bundle.infer_code_means(to_nchw(req.target))
    alphas = np.linspace(0.0, 1.0, req.steps, dtype=np.float64)
    zs, cs = [], []
    for a in alphas:
        if req.mode in ("style", "both"):
            zs.append(((1.0 - a) * z_a[0] + a * z_b[0]).astype(z_a.dtype))
        else:
            zs.append(z_a[0])
        if req.mode in ("content", "both"):
            cs.append(((1.0 - a) * c_a[0] + a * c_b[0]).astype(c_a.dtype))
        else:
            cs.append(c_a[0])
    return to_nhwc(bundle.decode_codes(np.stack(zs), np.stack(cs)))


def export_codes(bundle: ComponentBundle, subset: LabeledImageSet,
                 path=None) -> list[dict]:
    """One row per item: id, style mean, content mean, conditioning, attribution."""
    z, c = bundle.infer_code_means(to_nchw(subset.images)) if len(subset) else (
        np.zeros((0, bundle.cfg.d_z)), np.zeros((0, bundle.cfg.d_c)))
    rows = []
    for i in range(len(subset)):
        rows.append({
            "id": i,
            "z": z[i].astype(np.float32),
            "c": c[i].astype(np.float32),
            "cond": subset.conditions[i],
            "attr": subset.attributions[i],
        })
    if path is not None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, delimiter="\t")
            writer.writerow(["id"]
                            + [f"z_{k}" for k in range(bundle.cfg.d_z)]
                            + [f"c_{k}" for k in range(bundle.cfg.d_c)]
                            + [f"cond_{k}" for k in range(subset.conditions.shape[1])]
                            + [f"attr_{k}" for k in range(subset.attributions.shape[1])])
            for row in rows:
                writer.writerow([row["id"]]
                                + [repr(float(v)) for v in row["z"]]
                                + [repr(float(v)) for v in row["c"]]
                                + [repr(float(v)) for v in row["cond"]]
                                + [repr(float(v)) for v in row["attr"]])
    return rows


def write_image_grid(grid: np.ndarray, path, gap: int = 2) -> Path:
    """(rows, cols, H, W, C) in [-1, 1] -> one PNG with thin separators."""
    grid = np.asarray(grid)
    rows, cols, h, w, c = grid.shape
    canvas = np.ones((rows * h + (rows - 1) * gap, cols * w + (cols - 1) * gap, c),
                     dtype=np.float32)
    for r in range(rows):
        for cc in range(cols):
            canvas[r * (h + gap):r * (h + gap) + h,
                   cc * (w + gap):cc * (w + gap) + w] = grid[r, cc]
    u8 = np.round((np.clip(canvas, -1, 1) + 1) / 2 * 255).astype(np.uint8)
    path = Path(path)
    if c == 1:
        PILImage.fromarray(u8[:, :, 0], mode="L").save(path)
    else:
        PILImage.fromarray(u8, mode="RGB").save(path)
    return path
