"""Datasets: procedural synthetic corpus, CT/dermatoscopy ingestion, transforms.

The synthetic corpus is the desk-scale stand-in for the two medical sources:
single-channel 64x64 images of one shape each, where the supervision vector
carries (shape class, size bucket) and everything else (position, orientation,
background gradient, noise level) is unlabeled variation that the models are
expected to pick up as style.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import ConfigurationError, IngestionError

log = logging.getLogger(__name__)

TRANSFORMS = ("identity", "rot90", "rot180", "rot270", "hflip", "vflip")

SYNTHETIC_CLASSES = ("disk", "square", "cross")
SYNTHETIC_SIZES = ("small", "medium", "large")

# retained CT nodule characteristics, in this one-hot order (2 dims each)
LIDC_CHARACTERISTICS = ("malignancy", "calcification", "margin", "sphericity", "subtlety", "texture")
LIDC_DROPPED = ("lobulation", "spiculation", "internal structure", "internalStructure")
LIDC_SIZE_EDGES = (2.0, 4.0, 6.0, 8.0, 10.0, 12.0)
LIDC_TRAIN_CASE_LIMIT = 899

HAM_CLASSES = ("nv", "mel", "bkl")


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------

@dataclass
class LabeledImageSet:
    """One split of a dataset: aligned image / condition / attribution arrays."""

    images: np.ndarray        # (N, H, W, C) float32 in [-1, 1]
    conditions: np.ndarray    # (N, t_dim) float32
    attributions: np.ndarray  # (N, a_dim) float32
    split: str

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.conditions = np.asarray(self.conditions, dtype=np.float32)
        self.attributions = np.asarray(self.attributions, dtype=np.float32)
        n = len(self.images)
        if len(self.conditions) != n or len(self.attributions) != n:
            raise ConfigurationError("images/conditions/attributions lengths differ")
        if n and (self.images.min() < -1.0 or self.images.max() > 1.0):
            raise ConfigurationError("image values must lie in [-1, 1]")

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class DatasetBundle:
    """All splits of a built dataset plus profile metadata."""

    profile: str
    splits: dict[str, LabeledImageSet]
    meta: dict

    @property
    def t_dim(self) -> int:
        return int(self.meta["t_dim"])

    @property
    def image_size(self) -> int:
        return int(self.meta["image_size"])

    @property
    def channels(self) -> int:
        return int(self.meta["channels"])


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Recipe for the procedural shape corpus; a pure function of its fields."""

    image_size: int = 64
    size_px: tuple = (5, 8, 12)          # shape scale per size bucket
    center_jitter: float = 1.0           # fraction of the feasible center box used
    rotations: tuple = (0, 1, 2, 3)      # quarter turns applied to the shape
    gradient_amplitude: float = 0.25
    noise_max: float = 0.08
    foreground: float = 0.8
    background: float = -0.6
    train_per_cell: int = 64
    test_per_cell: int = 16
    query_per_cell: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 32 or self.image_size % 16:
            raise ConfigurationError("image_size must be >= 32 and divisible by 16")
        if self.train_per_cell <= 0 or self.test_per_cell < 0 or self.query_per_cell < 0:
            raise ConfigurationError("per-cell counts must be positive for train, >= 0 otherwise")
        if len(self.size_px) != len(SYNTHETIC_SIZES):
            raise ConfigurationError("need one pixel size per size bucket")
        if self.center_jitter <= 0 or self.center_jitter > 1:
            raise ConfigurationError("center_jitter must be in (0, 1]")
        if not self.rotations:
            raise ConfigurationError("rotation set must be non-empty")
        if self.gradient_amplitude <= 0 or self.noise_max < 0:
            raise ConfigurationError("degenerate style factor range")
        if max(self.size_px) * 2 + 4 >= self.image_size:
            raise ConfigurationError("largest shape does not fit the image")


def _shape_mask(shape: str, size: float, cy: float, cx: float, rot_k: int, hw: int) -> np.ndarray:
    """Midpoint rasterization: a pixel is foreground when its center lies in
    the shape.  Counts track the ideal area up to lattice fluctuation."""
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # undo the quarter-turn so the base predicate can stay axis-aligned
    for _ in range(rot_k % 4):
        dy, dx = dx, -dy
    if shape == "disk":
        return dy * dy + dx * dx <= size * size
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= size
    if shape == "cross":
        arm = max(1.0, size / 3.0)
        tall = (np.abs(dx) <= arm) & (np.abs(dy) <= size)
        wide = (np.abs(dy) <= arm) & (np.abs(dx) <= 0.6 * size)
        return tall | wide
    raise ConfigurationError(f"unknown shape class {shape!r}")


def render_synthetic_item(spec: SyntheticSpec, class_idx: int, size_idx: int,
                          cy: float, cx: float, rot_k: int, grad_theta: float,
                          noise_amp: float, rng: np.random.Generator) -> np.ndarray:
    """Render one (H, W, 1) image; exposed so tests can pin the style factors."""
    hw = spec.image_size
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    half = (hw - 1) / 2.0
    grad = (np.cos(grad_theta) * (yy - half) + np.sin(grad_theta) * (xx - half)) / half
    img = spec.background + spec.gradient_amplitude * grad
    mask = _shape_mask(SYNTHETIC_CLASSES[class_idx], float(spec.size_px[size_idx]),
                       cy, cx, rot_k, hw)
    img = np.where(mask, spec.foreground, img)
    if noise_amp > 0:
        img = img + noise_amp * rng.standard_normal((hw, hw))
    return np.clip(img, -1.0, 1.0).astype(np.float32)[:, :, None]


def _synthetic_condition(class_idx: int, size_idx: int) -> np.ndarray:
    cond = np.zeros(6, dtype=np.float32)
    cond[class_idx] = 1.0
    cond[3 + size_idx] = 1.0
    return cond


def _position_bin(pos: float, lo: float, hi: float) -> int:
    if hi <= lo:
        return 1
    frac = (pos - lo) / (hi - lo)
    return int(min(2, max(0, np.floor(frac * 3))))


def make_synthetic_dataset(spec: SyntheticSpec) -> DatasetBundle:
    """Build train/test/query splits; bit-identical replays for a fixed seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    per_split = {"train": spec.train_per_cell, "test": spec.test_per_cell,
                 "query": spec.query_per_cell}
    splits = {}
    for split, per_cell in per_split.items():
        images, conds, attrs = [], [], []
        for class_idx in range(len(SYNTHETIC_CLASSES)):
            for size_idx in range(len(SYNTHETIC_SIZES)):
                r = float(spec.size_px[size_idx])
                margin = r + 2.0
                lo, hi = margin, spec.image_size - 1 - margin
                mid, halfspan = (lo + hi) / 2.0, (hi - lo) / 2.0 * spec.center_jitter
                for _ in range(per_cell):
                    cy = mid + rng.uniform(-halfspan, halfspan)
                    cx = mid + rng.uniform(-halfspan, halfspan)
                    rot_k = int(rng.choice(spec.rotations))
                    theta = rng.uniform(0.0, 2.0 * np.pi)
                    amp = rng.uniform(0.0, spec.noise_max) if spec.noise_max > 0 else 0.0
                    images.append(render_synthetic_item(
                        spec, class_idx, size_idx, cy, cx, rot_k, theta, amp, rng))
                    conds.append(_synthetic_condition(class_idx, size_idx))
                    attrs.append(np.array([
                        class_idx, size_idx,
                        _position_bin(cy, lo, hi), _position_bin(cx, lo, hi),
                        rot_k, int(theta / (2 * np.pi) * 8) % 8,
                        min(2, int(amp / max(spec.noise_max, 1e-9) * 3)),
                    ], dtype=np.float32))
        arr = np.stack(images) if images else np.zeros((0, spec.image_size, spec.image_size, 1), np.float32)
        splits[split] = LabeledImageSet(arr, np.array(conds, np.float32).reshape(-1, 6),
                                        np.array(attrs, np.float32).reshape(-1, 7), split)
    meta = {
        "profile": "synthetic", "image_size": spec.image_size, "channels": 1,
        "t_dim": 6, "a_dim": 7, "n_classes": 3,
        "condition_schema": "one-hot shape class (3) + one-hot size bucket (3)",
        "attribution_schema": "class, size, row bin, col bin, rotation, gradient bin, noise bin",
        "seed": spec.seed,
    }
    return DatasetBundle("synthetic", splits, meta)


# ---------------------------------------------------------------------------
# content-preserving transforms
# ---------------------------------------------------------------------------

def apply_transform(x: np.ndarray, transform_id: str) -> np.ndarray:
    """Pixel-exact geometric transform of one (H, W, C) image."""
    if transform_id not in TRANSFORMS:
        raise ConfigurationError(f"unknown transform {transform_id!r}")
    x = np.asarray(x)
    if transform_id == "identity":
        return x.copy()
    if transform_id == "rot90":
        return np.ascontiguousarray(np.rot90(x, 1, axes=(0, 1)))
    if transform_id == "rot180":
        return np.ascontiguousarray(np.rot90(x, 2, axes=(0, 1)))
    if transform_id == "rot270":
        return np.ascontiguousarray(np.rot90(x, 3, axes=(0, 1)))
    if transform_id == "hflip":
        return np.ascontiguousarray(x[:, ::-1])
    return np.ascontiguousarray(x[::-1, :])


def sample_transform(rng: np.random.Generator) -> str:
    """Uniform draw over the five non-identity transforms."""
    return TRANSFORMS[1 + rng.integers(5)]


def apply_transform_batch(images: np.ndarray, ids: list[str]) -> np.ndarray:
    return np.stack([apply_transform(img, tid) for img, tid in zip(images, ids)])


# ---------------------------------------------------------------------------
# mismatched pairing
# ---------------------------------------------------------------------------

class MismatchSampler:
    """Pairs each condition with an image whose condition differs.

    Within a batch this is a label-aware derangement.  When a label holds a
    strict majority that is impossible for some items, so partners fall back
    to a running cross-batch reservoir; items with no partner anywhere are
    masked out.
    """

    def __init__(self, rng: np.random.Generator, reservoir_size: int = 256):
        self.rng = rng
        self.reservoir_size = reservoir_size
        self._res_images: list[np.ndarray] = []
        self._res_keys: list[bytes] = []

    def __call__(self, images: np.ndarray, conditions: np.ndarray):
        n = len(images)
        if n < 2:
            raise ConfigurationError("mismatch pairing needs a batch of at least 2")
        keys = [conditions[i].tobytes() for i in range(n)]
        groups: dict[bytes, list[int]] = {}
        for i, k in enumerate(keys):
            groups.setdefault(k, []).append(i)
        partner = np.full(n, -1, dtype=np.int64)
        mis = np.empty_like(images)
        valid = np.zeros(n, dtype=bool)

        max_group = max(len(g) for g in groups.values())
        if len(groups) > 1 and max_group <= n - max_group:
            # block layout sorted by group size, cyclic shift by the largest
            # group size: every index lands in a different label block
            blocks = sorted(groups.values(), key=lambda g: (-len(g), keys[g[0]]))
            order = []
            for g in blocks:
                g = list(g)
                self.rng.shuffle(g)
                order.extend(g)
            shift = len(blocks[0])
            for pos in range(n):
                partner[order[pos]] = order[(pos + shift) % n]
            for i in range(n):
                mis[i] = images[partner[i]]
                valid[i] = True
        else:
            if len(groups) == 1:
                log.warning("mismatch: batch is label-homogeneous, using reservoir partners")
            for i in range(n):
                in_batch = [j for j in range(n) if keys[j] != keys[i]]
                if in_batch:
                    mis[i] = images[int(self.rng.choice(in_batch))]
                    valid[i] = True
                    continue
                in_res = [j for j, k in enumerate(self._res_keys) if k != keys[i]]
                if in_res:
                    mis[i] = self._res_images[int(self.rng.choice(in_res))]
                    valid[i] = True
                else:
                    log.warning("mismatch: no partner for item %d, skipping", i)

        for i in range(n):
            if len(self._res_images) < self.reservoir_size:
                self._res_images.append(images[i].copy())
                self._res_keys.append(keys[i])
            else:
                slot = int(self.rng.integers(self.reservoir_size))
                self._res_images[slot] = images[i].copy()
                self._res_keys[slot] = keys[i]
        return mis, valid


def mismatch_pair(images: np.ndarray, conditions: np.ndarray,
                  rng: np.random.Generator | None = None):
    """One-shot mismatched pairing (fresh reservoir); see :class:`MismatchSampler`."""
    sampler = MismatchSampler(rng or np.random.default_rng(0))
    return sampler(images, conditions)


# ---------------------------------------------------------------------------
# CT nodule ingestion
# ---------------------------------------------------------------------------

def _median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


def _size_onehot(size_mm: float) -> np.ndarray:
    onehot = np.zeros(5, dtype=np.float32)
    edges = LIDC_SIZE_EDGES
    idx = int(np.clip(np.searchsorted(edges, size_mm, side="right") - 1, 0, 4))
    onehot[idx] = 1.0
    return onehot


def _equivalent_diameter(mask: np.ndarray, spacing: float) -> float:
    area = float(np.count_nonzero(mask))
    return 2.0 * np.sqrt(area / np.pi) * spacing


def _resize_patch(patch: np.ndarray, out_size: int) -> np.ndarray:
    from scipy.ndimage import zoom

    factor = out_size / patch.shape[0]
    return zoom(patch.astype(np.float64), (factor, factor), order=1)


def _extract_patch(plane: np.ndarray, cy: int, cx: int, half: int) -> np.ndarray:
    h, w = plane.shape
    cy = int(np.clip(cy, half, h - half))
    cx = int(np.clip(cx, half, w - half))
    return plane[cy - half:cy + half, cx - half:cx + half]


def preprocess_lidc(manifest_path, resample_to: int = 256, patch_size: int = 48,
                    out_size: int = 64) -> DatasetBundle:
    """Ingest a CT nodule manifest into train/test/query splits.

    Keeps nodules annotated by at least three radiologists, drops those whose
    inter-observer median malignancy is 3 into the query split, binarizes the
    six retained characteristic ratings by a median split over the training
    nodules, and quantizes nodule size into five 2 mm bins over [2, 12].
    """
    from scipy.ndimage import zoom

    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestionError(f"cannot read manifest {manifest_path}: {exc}") from exc
    root = manifest_path.parent
    spacing = float(manifest.get("spacing_mm", 1.0))
    lung_hu = float(manifest.get("lung_threshold_hu", -320.0))

    records = []
    for case in manifest.get("cases", []):
        case_index = int(case["case_index"])
        vol_path = root / case["volume"]
        try:
            volume = np.load(vol_path).astype(np.float32)
        except Exception as exc:
            raise IngestionError(f"unreadable volume {vol_path}: {exc}") from exc
        scale = [resample_to / s for s in volume.shape]
        resampled = zoom(volume, scale, order=1)
        # crop away the exterior: bounding box of sub-threshold (air-like) voxels
        airish = resampled < lung_hu
        if airish.any():
            idx = np.nonzero(airish)
            box = tuple(slice(int(a.min()), int(a.max()) + 1) for a in idx)
        else:
            box = (slice(None),) * 3
        cropped = resampled[box]
        offsets = [b.start or 0 for b in box]

        for nodule in case.get("nodules", []):
            ratings = nodule.get("ratings") or {}
            ratings = {k: v for k, v in ratings.items() if k not in LIDC_DROPPED}
            seg_rel = nodule.get("segmentation")
            if not ratings or seg_rel is None:
                log.warning("skipping nodule %s/%s: missing ratings or segmentation",
                            case_index, nodule.get("id"))
                continue
            if any(ch not in ratings for ch in LIDC_CHARACTERISTICS):
                log.warning("skipping nodule %s/%s: incomplete characteristics",
                            case_index, nodule.get("id"))
                continue
            n_readers = min(len(ratings[ch]) for ch in LIDC_CHARACTERISTICS)
            if n_readers < 3:
                continue  # detection consensus requires >= 3 radiologists
            try:
                seg = np.load(root / seg_rel)
            except Exception as exc:
                log.warning("skipping nodule %s/%s: unreadable segmentation (%s)",
                            case_index, nodule.get("id"), exc)
                continue
            center = [float(c) for c in nodule["center"]]
            rcenter = [center[d] * scale[d] - offsets[d] for d in range(3)]
            zc = int(np.clip(round(rcenter[0]), 0, cropped.shape[0] - 1))
            patch = _extract_patch(cropped[zc], round(rcenter[1]), round(rcenter[2]),
                                   patch_size // 2)
            patch = _resize_patch(patch, out_size)

            med = {ch: _median(ratings[ch][:n_readers]) for ch in LIDC_CHARACTERISTICS}
            size_mm = _equivalent_diameter(seg, spacing)
            records.append({
                "case_index": case_index,
                "patch": patch,
                "medians": med,
                "size_mm": size_mm,
                "malignancy_median": med["malignancy"],
            })

    if not records:
        raise IngestionError("manifest produced no usable nodules")

    def split_of(rec) -> str:
        if rec["malignancy_median"] == 3.0:
            return "query"
        return "train" if rec["case_index"] < LIDC_TRAIN_CASE_LIMIT else "test"

    train_recs = [r for r in records if split_of(r) == "train"]
    thresholds = {}
    for ch in LIDC_CHARACTERISTICS:
        pool = [r["medians"][ch] for r in train_recs] or [r["medians"][ch] for r in records]
        thresholds[ch] = _median(pool)

    lo = min(float(r["patch"].min()) for r in records)
    hi = max(float(r["patch"].max()) for r in records)
    span = (hi - lo) or 1.0

    sets: dict[str, dict[str, list]] = {s: {"im": [], "co": [], "at": []}
                                        for s in ("train", "test", "query")}
    for rec in records:
        cond = []
        for ch in LIDC_CHARACTERISTICS:
            high = rec["medians"][ch] > thresholds[ch]
            cond.extend([0.0, 1.0] if high else [1.0, 0.0])
        cond = np.concatenate([np.asarray(cond, np.float32), _size_onehot(rec["size_mm"])])
        img = ((rec["patch"] - lo) / span * 2.0 - 1.0).astype(np.float32)[:, :, None]
        attr = np.concatenate([cond, [np.float32(rec["size_mm"])]])
        bucket = sets[split_of(rec)]
        bucket["im"].append(img)
        bucket["co"].append(cond)
        bucket["at"].append(attr)

    splits = {}
    for split, b in sets.items():
        if b["im"]:
            splits[split] = LabeledImageSet(np.stack(b["im"]), np.stack(b["co"]),
                                            np.stack(b["at"]), split)
        else:
            splits[split] = LabeledImageSet(np.zeros((0, out_size, out_size, 1), np.float32),
                                            np.zeros((0, 17), np.float32),
                                            np.zeros((0, 18), np.float32), split)
    meta = {
        "profile": "lidc", "image_size": out_size, "channels": 1,
        "t_dim": 17, "a_dim": 18, "n_classes": 2,
        "condition_schema": "6 characteristics x 2 one-hot + 5 size bins",
        "attribution_schema": "conditioning vector + nodule size (mm)",
        "characteristic_thresholds": thresholds,
    }
    return DatasetBundle("lidc", splits, meta)


# ---------------------------------------------------------------------------
# dermatoscopy ingestion
# ---------------------------------------------------------------------------

def preprocess_ham(manifest_path, patch_size: int = 48, out_size: int = 64) -> DatasetBundle:
    """Ingest a skin-lesion manifest: keep nv/mel/bkl, balance via flip augmentation."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestionError(f"cannot read manifest {manifest_path}: {exc}") from exc
    root = manifest_path.parent

    sets: dict[str, dict[str, list]] = {s: {"im": [], "co": [], "at": []}
                                        for s in ("train", "test")}
    for item in manifest.get("items", []):
        lesion = item.get("lesion_type")
        if lesion not in HAM_CLASSES:
            log.warning("skipping item %s: class %r not in %s", item.get("path"),
                        lesion, HAM_CLASSES)
            continue
        split = item.get("split", "train")
        if split not in sets:
            log.warning("skipping item %s: unknown split %r", item.get("path"), split)
            continue
        try:
            img = np.asarray(PILImage.open(root / item["path"]).convert("RGB"), np.float64)
        except Exception as exc:
            log.warning("skipping item %s: unreadable image (%s)", item.get("path"), exc)
            continue
        cy, cx = (int(v) for v in item.get("center", (img.shape[0] // 2, img.shape[1] // 2)))
        half = patch_size // 2
        cy = int(np.clip(cy, half, img.shape[0] - half))
        cx = int(np.clip(cx, half, img.shape[1] - half))
        patch = img[cy - half:cy + half, cx - half:cx + half]
        from scipy.ndimage import zoom

        patch = zoom(patch, (out_size / patch_size, out_size / patch_size, 1), order=1)
        patch = np.clip(patch / 255.0 * 2.0 - 1.0, -1.0, 1.0).astype(np.float32)

        cls = HAM_CLASSES.index(lesion)
        cond = np.zeros(3, dtype=np.float32)
        cond[cls] = 1.0
        variants = [patch]
        if split == "train" and lesion in ("mel", "bkl"):
            # three flip-composed copies rebalance the minority classes
            variants += [apply_transform(patch, t) for t in ("hflip", "vflip", "rot180")]
        for v in variants:
            sets[split]["im"].append(v)
            sets[split]["co"].append(cond)
            sets[split]["at"].append(cond.copy())

    splits = {}
    for split, b in sets.items():
        if not b["im"]:
            raise IngestionError(f"no usable items in split {split!r}")
        splits[split] = LabeledImageSet(np.stack(b["im"]), np.stack(b["co"]),
                                        np.stack(b["at"]), split)
    meta = {
        "profile": "ham", "image_size": out_size, "channels": 3,
        "t_dim": 3, "a_dim": 3, "n_classes": 3,
        "condition_schema": "one-hot lesion type (nv, mel, bkl)",
        "attribution_schema": "one-hot lesion type",
    }
    return DatasetBundle("ham", splits, meta)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _write_png(path: Path, img: np.ndarray) -> None:
    if img.shape[2] == 1:
        u = np.round((img[:, :, 0].astype(np.float64) + 1.0) / 2.0 * 65535.0).astype(np.uint16)
        PILImage.fromarray(u, mode="I;16").save(path)
    else:
        u = np.round((img.astype(np.float64) + 1.0) / 2.0 * 255.0).astype(np.uint8)
        PILImage.fromarray(u, mode="RGB").save(path)


def _read_png(path: Path, channels: int) -> np.ndarray:
    img = PILImage.open(path)
    if channels == 1:
        arr = np.asarray(img, dtype=np.float64)
        return (arr / 65535.0 * 2.0 - 1.0).astype(np.float32)[:, :, None]
    arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return (arr / 255.0 * 2.0 - 1.0).astype(np.float32)


def save_dataset(bundle: DatasetBundle, out_dir) -> Path:
    """Persist as raster files plus a tabular index; deterministic byte-for-byte."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "meta.json").write_text(json.dumps(
        {"profile": bundle.profile, **bundle.meta}, indent=2, sort_keys=True) + "\n")
    with open(out_dir / "index.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        t_dim = bundle.t_dim
        a_dim = int(bundle.meta["a_dim"])
        writer.writerow(["file", "split"]
                        + [f"cond_{i}" for i in range(t_dim)]
                        + [f"attr_{i}" for i in range(a_dim)])
        counter = 0
        for split in sorted(bundle.splits):
            subset = bundle.splits[split]
            for i in range(len(subset)):
                name = f"item_{counter:06d}.png"
                _write_png(out_dir / "images" / name, subset.images[i])
                writer.writerow([name, split]
                                + [repr(float(v)) for v in subset.conditions[i]]
                                + [repr(float(v)) for v in subset.attributions[i]])
                counter += 1
    return out_dir


def load_dataset(data_dir) -> DatasetBundle:
    data_dir = Path(data_dir)
    try:
        meta = json.loads((data_dir / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestionError(f"cannot read dataset at {data_dir}: {exc}") from exc
    channels = int(meta["channels"])
    t_dim, a_dim = int(meta["t_dim"]), int(meta["a_dim"])
    rows: dict[str, dict[str, list]] = {}
    with open(data_dir / "index.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            b = rows.setdefault(row["split"], {"im": [], "co": [], "at": []})
            b["im"].append(_read_png(data_dir / "images" / row["file"], channels))
            b["co"].append([float(row[f"cond_{i}"]) for i in range(t_dim)])
            b["at"].append([float(row[f"attr_{i}"]) for i in range(a_dim)])
    size = int(meta["image_size"])
    splits = {}
    for split, b in rows.items():
        splits[split] = LabeledImageSet(np.stack(b["im"]) if b["im"] else
                                        np.zeros((0, size, size, channels), np.float32),
                                        np.asarray(b["co"], np.float32).reshape(-1, t_dim),
                                        np.asarray(b["at"], np.float32).reshape(-1, a_dim),
                                        split)
    profile = meta.pop("profile")
    return DatasetBundle(profile, splits, meta)
