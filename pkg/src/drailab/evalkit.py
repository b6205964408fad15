"""Evaluation metrics: the cross-image feature-consistency disentanglement
error, Fréchet distance and diversity score against a trained domain
classifier, conditional-generation accuracy, and retrieval scoring.

Everything here is a pure function of frozen inputs and a seed; reductions run
in a fixed order so repeated evaluations are bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import genlab
from .autodiff import Var
from .dataio import LabeledImageSet
from .errors import ConfigurationError
from .layers import Conv2d, InstanceNorm2d, Linear, Module
from .netcore import ComponentBundle

# class labels per dataset profile, derived from the conditioning vector
_PROFILE_CLASSES = {"synthetic": 3, "ham": 3, "lidc": 2}


def class_labels(conditions: np.ndarray, profile: str) -> np.ndarray:
    """Integer class per item: shape class, lesion type, or benign/malignant."""
    if profile in ("synthetic", "ham"):
        return np.argmax(conditions[:, :3], axis=1)
    if profile == "lidc":
        # the first characteristic pair is malignancy (low, high)
        return np.argmax(conditions[:, :2], axis=1)
    raise ConfigurationError(f"unknown profile {profile!r}")


def n_classes(profile: str) -> int:
    return _PROFILE_CLASSES[profile]


# ---------------------------------------------------------------------------
# feature statistics and the Fréchet distance
# ---------------------------------------------------------------------------

@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if self.count < 2:
            raise ConfigurationError("feature statistics need at least 2 samples")
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ConfigurationError("covariance shape does not match mean")
        if not np.allclose(self.cov, self.cov.T, atol=1e-8):
            raise ConfigurationError("covariance must be symmetric")

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "FeatureStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or len(feats) < 2:
            raise ConfigurationError("need an (N >= 2, D) feature matrix")
        cov = np.cov(feats, rowvar=False)
        return cls(feats.mean(axis=0), np.atleast_2d(cov), len(feats))


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, negatives clipped."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats, eps: float = 1e-12) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The trace term uses tr((S_b^{1/2} S_a S_b^{1/2})^{1/2}), which equals
    tr((S_a S_b)^{1/2}) and keeps every decomposition symmetric; ``eps`` on
    the diagonals guards near-singular products.
    """
    if a.mean.shape != b.mean.shape:
        raise ConfigurationError("feature statistics dimensions differ")
    d = a.mean.size
    cov_a = a.cov + eps * np.eye(d)
    cov_b = b.cov + eps * np.eye(d)
    root_b = _sym_sqrt(cov_b)
    inner = root_b @ cov_a @ root_b
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)


def inception_score(probs: np.ndarray, splits: int = 10) -> tuple[float, float]:
    """exp(mean KL(p(y|x) || p(y))) per split; returns (mean, std) over splits."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or not len(probs):
        raise ConfigurationError("need a non-empty (N, K) probability matrix")
    if (probs < 0).any() or np.abs(probs.sum(axis=1) - 1.0).max() > 1e-6:
        raise ConfigurationError("rows must be probability vectors summing to 1")
    scores = []
    for chunk in np.array_split(probs, min(splits, len(probs))):
        marginal = chunk.mean(axis=0)
        pos = chunk > 0
        safe = np.where(pos, chunk, 1.0)
        ratio = np.where(pos, np.log(safe) - np.log(np.where(marginal > 0, marginal, 1.0)), 0.0)
        kl = (chunk * ratio).sum(axis=1).mean()
        scores.append(np.exp(kl))
    return float(np.mean(scores)), float(np.std(scores))


# ---------------------------------------------------------------------------
# domain classifier (feature backbone for FID / IS / CGAcc)
# ---------------------------------------------------------------------------

class DomainClassifier(Module):
    """Small conv classifier over conditioning classes; exposes penultimate features.

    The trunk ends in global average pooling, which keeps the features
    translation-tolerant and curbs memorization of the unlabeled style factors.
    """

    def __init__(self, image_size: int, channels: int, classes: int,
                 feat_dim: int = 64, width: int = 16, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.conv1 = Conv2d(channels, width, 4, 2, 1, rng)
        self.conv2 = Conv2d(width, 2 * width, 4, 2, 1, rng)
        self.norm2 = InstanceNorm2d(2 * width)
        self.conv3 = Conv2d(2 * width, 4 * width, 4, 2, 1, rng)
        self.norm3 = InstanceNorm2d(4 * width)
        self.conv4 = Conv2d(4 * width, 8 * width, 4, 2, 1, rng)
        self.norm4 = InstanceNorm2d(8 * width)
        self.fc_feat = Linear(8 * width, feat_dim, rng)
        self.fc_out = Linear(feat_dim, classes, rng)
        self.feat_dim = feat_dim
        self.classes = classes
        self.image_size = image_size
        self.channels = channels

    def _trunk(self, x: Var) -> Var:
        h = ad.leaky_relu(self.conv1(x))
        h = ad.leaky_relu(self.norm2(self.conv2(h)))
        h = ad.leaky_relu(self.norm3(self.conv3(h)))
        h = ad.leaky_relu(self.norm4(self.conv4(h)))
        n, c = h.shape[0], h.shape[1]
        pooled = ad.mean_last(ad.reshape(h, (n, c, -1)))
        return ad.leaky_relu(self.fc_feat(pooled))

    def logits(self, x: Var) -> Var:
        return self.fc_out(self._trunk(x))

    def features(self, images_nchw: np.ndarray, batch: int = 256) -> np.ndarray:
        out = []
        with ad.no_grad():
            for lo in range(0, len(images_nchw), batch):
                out.append(np.asarray(self._trunk(Var(images_nchw[lo:lo + batch])).data))
        return np.concatenate(out) if out else np.zeros((0, self.feat_dim), np.float32)

    def predict_proba(self, images_nchw: np.ndarray, batch: int = 256) -> np.ndarray:
        out = []
        with ad.no_grad():
            for lo in range(0, len(images_nchw), batch):
                logit = np.asarray(self.logits(Var(images_nchw[lo:lo + batch])).data,
                                   dtype=np.float64)
                logit -= logit.max(axis=1, keepdims=True)
                e = np.exp(logit)
                out.append(e / e.sum(axis=1, keepdims=True))
        return np.concatenate(out) if out else np.zeros((0, self.classes))


def train_domain_classifier(split: LabeledImageSet, profile: str, seed: int = 0,
                            steps: int = 600, batch_size: int = 64,
                            lr: float = 2e-3, feat_dim: int = 64,
                            augment: bool = True) -> DomainClassifier:
    """Fit the conv classifier on one labeled split; deterministic given seed.

    Batches are augmented with the content-preserving transform family, which
    the class labels are invariant to by construction.
    """
    from .dataio import TRANSFORMS, apply_transform
    from .trainer import Adam

    labels = class_labels(split.conditions, profile)
    if len(np.unique(labels)) < 2:
        raise ConfigurationError("classifier training needs at least two classes")
    clf = DomainClassifier(split.images.shape[1], split.images.shape[3],
                           n_classes(profile), feat_dim=feat_dim, seed=seed)
    opt = Adam(clf.parameters(), lr, beta1=0.9, beta2=0.999)
    rng = np.random.default_rng([seed, 2])
    for _ in range(steps):
        idx = rng.choice(len(split), size=min(batch_size, len(split)), replace=False)
        images = split.images[idx]
        if augment:
            images = np.stack([
                apply_transform(img, TRANSFORMS[rng.integers(len(TRANSFORMS))])
                for img in images])
        clf.zero_grad()
        loss = ad.cross_entropy(clf.logits(Var(genlab.to_nchw(images))), labels[idx])
        loss.backward()
        opt.step()
    return clf


def classifier_accuracy(clf: DomainClassifier, split: LabeledImageSet, profile: str) -> float:
    labels = class_labels(split.conditions, profile)
    probs = clf.predict_proba(genlab.to_nchw(split.images))
    return float((probs.argmax(axis=1) == labels).mean())


# ---------------------------------------------------------------------------
# disentanglement: cross-image feature consistency
# ---------------------------------------------------------------------------

def _mean_abs_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b).mean(axis=1)


def cifc(model, images: np.ndarray, n_pairs: int = 500, seed: int = 0) -> float:
    """Two-step hybrid round trip measured in code space.

    ``model`` needs ``infer_code_means(x) -> (Z, C)`` and
    ``decode_codes(Z, C) -> X`` over (N, C, H, W) arrays.  For a pair (a, b):
    hybrids I_ab = G(z_b, c_a) and I_ba = G(z_a, c_b) are re-encoded, the
    second step rebuilds I_aa from (z of I_ba, c of I_ab) and I_bb from
    (z of I_ab, c of I_ba), and the error is the per-entry l1 distance between
    the original codes and those of the rebuilt images.
    """
    images = np.asarray(images)
    if len(images) < 2:
        raise ConfigurationError("need at least one pair of images")
    rng = np.random.default_rng(seed)
    m = min(n_pairs, len(images) // 2)
    perm = rng.permutation(len(images))[:2 * m]
    a_idx, b_idx = perm[:m], perm[m:]

    z_a, c_a = model.infer_code_means(images[a_idx])
    z_b, c_b = model.infer_code_means(images[b_idx])
    i_ab = model.decode_codes(z_b, c_a)     # content from a, style from b
    i_ba = model.decode_codes(z_a, c_b)
    z_ab, c_ab = model.infer_code_means(i_ab)
    z_ba, c_ba = model.infer_code_means(i_ba)
    i_aa = model.decode_codes(z_ba, c_ab)   # style from I_ba, content from I_ab
    i_bb = model.decode_codes(z_ab, c_ba)
    z_aa, c_aa = model.infer_code_means(i_aa)
    z_bb, c_bb = model.infer_code_means(i_bb)

    per_pair = (_mean_abs_rows(z_a, z_aa) + _mean_abs_rows(c_a, c_aa)
                + _mean_abs_rows(z_b, z_bb) + _mean_abs_rows(c_b, c_bb))
    return float(per_pair.mean())


# ---------------------------------------------------------------------------
# generation metrics
# ---------------------------------------------------------------------------

def fid_is_pipeline(bundle: ComponentBundle, clf: DomainClassifier,
                    test_split: LabeledImageSet, n: int = 1000,
                    seed: int = 0) -> tuple[float, float, float]:
    """FID between real-test and generated features plus IS of the generated set."""
    if n < 2:
        raise ConfigurationError("need at least 2 generated samples")
    gen = _generate_over_labels(bundle, test_split, n, seed)
    real_stats = FeatureStats.from_features(clf.features(genlab.to_nchw(test_split.images)))
    gen_stats = FeatureStats.from_features(clf.features(gen))
    fid = frechet_distance(real_stats, gen_stats)
    is_mean, is_std = inception_score(clf.predict_proba(gen))
    return fid, is_mean, is_std


def _generate_over_labels(bundle: ComponentBundle, split: LabeledImageSet,
                          n: int, seed: int) -> np.ndarray:
    """Sample conditioning rows from the split's empirical label distribution."""
    rng = np.random.default_rng([seed, 3])
    rows = split.conditions[rng.integers(len(split), size=n)]
    dt = bundle.cfg.np_dtype()
    outs = []
    with ad.no_grad():
        for lo in range(0, n, 256):
            t = rows[lo:lo + 256].astype(dt)
            post = bundle.encode_condition(t)
            mean = post.mean_array()
            std = np.exp(0.5 * np.asarray(post.log_variance.data))
            c = mean + std * rng.standard_normal(mean.shape).astype(dt)
            z = rng.standard_normal((len(t), bundle.cfg.d_z)).astype(dt)
            outs.append(bundle.decode_codes(z, c))
    return np.concatenate(outs)


def cg_accuracy(bundle: ComponentBundle, clf: DomainClassifier,
                split: LabeledImageSet, profile: str, n: int = 1000,
                seed: int = 0) -> float:
    """Fraction of generated images the classifier assigns to their conditioning class."""
    if n <= 0:
        raise ConfigurationError("need a positive sample count")
    rng = np.random.default_rng([seed, 4])
    rows = split.conditions[rng.integers(len(split), size=n)]
    labels = class_labels(rows, profile)
    dt = bundle.cfg.np_dtype()
    hits = 0
    with ad.no_grad():
        for lo in range(0, n, 256):
            t = rows[lo:lo + 256].astype(dt)
            post = bundle.encode_condition(t)
            mean = post.mean_array()
            std = np.exp(0.5 * np.asarray(post.log_variance.data))
            c = mean + std * rng.standard_normal(mean.shape).astype(dt)
            z = rng.standard_normal((len(t), bundle.cfg.d_z)).astype(dt)
            gen = bundle.decode_codes(z, c)
            pred = clf.predict_proba(gen).argmax(axis=1)
            hits += int((pred == labels[lo:lo + 256]).sum())
    return hits / n


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------

@dataclass
class RetrievalResult:
    neighbor_ids: np.ndarray
    distances: np.ndarray
    kind: str
    query_id: int | None = None

    def __post_init__(self):
        if np.any(np.diff(self.distances) < 0):
            raise ConfigurationError("retrieval distances must be non-decreasing")


def retrieve(bundle: ComponentBundle, query: np.ndarray, reference: LabeledImageSet,
             kind: str = "content", top_n: int = 3,
             reference_codes: np.ndarray | None = None) -> RetrievalResult:
    """Nearest neighbors by per-entry l1 distance between posterior-mean codes.

    Ties break toward the lower reference index (stable sort).  Pass
    ``reference_codes`` to reuse precomputed codes across many queries.
    """
    if kind not in ("style", "content"):
        raise ConfigurationError("retrieval kind must be 'style' or 'content'")
    if len(reference) < top_n:
        raise ConfigurationError("reference set smaller than the requested top-N")
    if reference_codes is None:
        z, c = bundle.infer_code_means(genlab.to_nchw(reference.images))
        reference_codes = z if kind == "style" else c
    qz, qc = bundle.infer_code_means(genlab.to_nchw(query))
    q = (qz if kind == "style" else qc)[0]
    dists = np.abs(reference_codes - q[None]).mean(axis=1)
    order = np.argsort(dists, kind="stable")[:top_n]
    return RetrievalResult(order, dists[order], kind)


def reference_codes_for(bundle: ComponentBundle, reference: LabeledImageSet,
                        kind: str) -> np.ndarray:
    z, c = bundle.infer_code_means(genlab.to_nchw(reference.images))
    return z if kind == "style" else c


def disagreement_divergence(query_attr: np.ndarray, retrieved_attrs: np.ndarray) -> float:
    """Mean over retrieved items of the MSE to the query's attribution vector."""
    query_attr = np.asarray(query_attr, dtype=np.float64)
    retrieved_attrs = np.atleast_2d(np.asarray(retrieved_attrs, dtype=np.float64))
    if retrieved_attrs.shape[1] != query_attr.size:
        raise ConfigurationError("attribution vector lengths differ")
    return float(((retrieved_attrs - query_attr[None]) ** 2).mean(axis=1).mean())


def label_overlap(query_attr: np.ndarray, reference_attrs: np.ndarray,
                  retrieved_attrs: np.ndarray) -> float:
    """Percentage of ground-truth attribution entries found in the retrieved set.

    The ground truth is the reference item with the smallest disagreement to
    the query (ties to the lowest index); an entry counts as found when any
    retrieved item matches it exactly.
    """
    reference_attrs = np.atleast_2d(np.asarray(reference_attrs, dtype=np.float64))
    if not len(reference_attrs):
        raise ConfigurationError("empty reference set")
    query_attr = np.asarray(query_attr, dtype=np.float64)
    mse = ((reference_attrs - query_attr[None]) ** 2).mean(axis=1)
    gt = reference_attrs[int(np.argmin(mse))]
    retrieved_attrs = np.atleast_2d(np.asarray(retrieved_attrs, dtype=np.float64))
    matched = (retrieved_attrs == gt[None]).any(axis=0)
    return float(100.0 * matched.mean())


# ---------------------------------------------------------------------------
# structured metric records
# ---------------------------------------------------------------------------

@dataclass
class MetricsRecord:
    metric: str
    value: float
    sample_count: int
    seed: int
    checkpoint_step: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"metric": self.metric, "value": self.value,
                           "sample_count": self.sample_count, "seed": self.seed,
                           "checkpoint_step": self.checkpoint_step, **self.extra},
                          sort_keys=True)


def append_records(path, records: list[MetricsRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
