"""Generation-quality and detection metrics.

Generation quality: inception score over a pluggable classifier and
intra-cluster perceptual distance over a pluggable pairwise metric (toy
implementations are provided so everything runs without pretrained nets).
Detection: image-level ROC AUC and max F1, pixel-level per-region-overlap
AUC (up to an FPR limit) and max pixel F1.

All threshold sweeps use the sorted unique observed score values, exact at
desk scale; ``pro_auc`` also takes an optional fixed grid for large pixel
sets.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import DomainError, ShapeError, ValidationError

EIGHT_CONNECTED = np.ones((3, 3), bool)


@dataclass
class DetectionScores:
    """Inputs for the detection metrics."""

    image_scores: list[tuple[float, int]] = field(default_factory=list)
    pixel_maps: list[tuple[np.ndarray, np.ndarray]] = field(
        default_factory=list)

    def __post_init__(self):
        for score, label in self.image_scores:
            if not np.isfinite(score):
                raise ValidationError("non-finite image score")
            if label not in (0, 1):
                raise ValidationError(f"label must be 0/1, got {label}")
        for amap, gt in self.pixel_maps:
            if amap.shape != gt.shape:
                raise ShapeError(
                    f"map {amap.shape} vs ground truth {gt.shape}")


def inception_score(images, classifier, eps: float = 1e-12) -> float:
    """exp of the mean KL between per-image predictions and their mean.

    Single split; ``eps`` smoothing keeps one-hot outputs finite.
    """
    images = list(images)
    if not images:
        raise DomainError("inception score needs at least one image")
    probs = np.stack([np.asarray(classifier.predict(img), dtype=np.float64)
                      for img in images])
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ValidationError("classifier outputs must be probability vectors")
    p_mean = probs.mean(axis=0)
    kl = (probs * (np.log(probs + eps) - np.log(p_mean + eps))).sum(axis=1)
    return float(np.exp(kl.mean()))


def intra_cluster_lpips(clusters, distance) -> float:
    """Mean over clusters of the mean pairwise distance within the cluster.

    Clusters with fewer than two images are skipped with a warning; if all
    clusters are skipped there is nothing to average and that is an error.
    """
    cluster_means = []
    for ci, images in enumerate(clusters):
        images = list(images)
        if len(images) < 2:
            warnings.warn(f"cluster {ci} has {len(images)} image(s); skipped")
            continue
        dists = [distance.dist(images[i], images[j])
                 for i in range(len(images))
                 for j in range(i + 1, len(images))]
        cluster_means.append(float(np.mean(dists)))
    if not cluster_means:
        raise DomainError("no cluster with >= 2 images")
    return float(np.mean(cluster_means))


def _split_scores(scores_with_labels):
    pairs = list(scores_with_labels)
    scores = np.asarray([s for s, _ in pairs], dtype=np.float64)
    labels = np.asarray([l for _, l in pairs], dtype=int)
    return scores, labels


def roc_auc(scores_with_labels) -> float:
    """ROC AUC as the Mann-Whitney statistic, ties counting one half."""
    scores, labels = _split_scores(scores_with_labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DomainError("roc_auc needs both classes present")
    ranks = rankdata(scores)
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def max_f1(scores_with_labels) -> float:
    """Maximum F1 over thresholds placed at every observed score value.

    A sample is predicted positive when its score is >= the threshold.
    """
    scores, labels = _split_scores(scores_with_labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise DomainError("max_f1 needs at least one positive")
    best = 0.0
    for tau in np.unique(scores):
        pred = scores >= tau
        tp = int((pred & (labels == 1)).sum())
        fp = int((pred & (labels == 0)).sum())
        fn = n_pos - tp
        denom = 2 * tp + fp + fn
        f1 = 2.0 * tp / denom if denom else 0.0
        best = max(best, f1)
    return float(best)


def pixel_max_f1(pixel_maps) -> float:
    """Max F1 over all pixels of all maps, flattened."""
    if not pixel_maps:
        raise DomainError("no pixel maps")
    scores = np.concatenate([m.ravel() for m, _ in pixel_maps])
    labels = np.concatenate([g.ravel().astype(int) for _, g in pixel_maps])
    return max_f1(zip(scores.tolist(), labels.tolist()))


def pro_curve(pixel_maps, thresholds=None):
    """Per-region-overlap curve points, FPR ascending.

    For each threshold (descending over the unique observed values unless a
    grid is given, always including the empty prediction), the prediction
    is ``map >= threshold``. FPR pools negative pixels across all maps; the
    overlap is averaged over every 8-connected ground-truth region across
    all maps.
    """
    maps = [(np.asarray(m, dtype=np.float64), np.asarray(g).astype(bool))
            for m, g in pixel_maps]
    regions = []  # (map index, boolean region) pairs
    for mi, (_, gt) in enumerate(maps):
        labels, n = ndimage.label(gt, structure=EIGHT_CONNECTED)
        regions.extend((mi, labels == k) for k in range(1, n + 1))
    if not regions:
        raise DomainError("no ground-truth region in any map")
    n_neg = sum(int((~gt).sum()) for _, gt in maps)
    if thresholds is None:
        thresholds = np.unique(np.concatenate([m.ravel() for m, _ in maps]))
    taus = sorted(np.asarray(thresholds, dtype=np.float64), reverse=True)

    points = [(0.0, 0.0)]  # empty prediction
    for tau in taus:
        preds = [m >= tau for m, _ in maps]
        fp = sum(int((pred & ~gt).sum())
                 for pred, (_, gt) in zip(preds, maps))
        overlaps = [(preds[mi] & region).sum() / region.sum()
                    for mi, region in regions]
        fpr = fp / n_neg if n_neg else 0.0
        points.append((float(fpr), float(np.mean(overlaps))))
    return points


def pro_auc(pixel_maps, fpr_limit: float = 0.3, thresholds=None) -> float:
    """Area under the per-region-overlap curve up to the FPR limit.

    The curve is integrated as a right-continuous step function of FPR and
    normalized by the limit, so an empty prediction scores exactly 0 and a
    perfect binary prediction scores exactly 1.
    """
    if not 0.0 < fpr_limit <= 1.0:
        raise ValidationError(f"fpr_limit must be in (0, 1], got {fpr_limit}")
    points = pro_curve(pixel_maps, thresholds)
    points.sort(key=lambda p: p[0])
    area = 0.0
    for i, (fpr, pro) in enumerate(points):
        if fpr >= fpr_limit:
            break
        next_fpr = points[i + 1][0] if i + 1 < len(points) else fpr_limit
        width = min(next_fpr, fpr_limit) - fpr
        if width > 0:
            area += pro * width
    return float(area / fpr_limit)


def toy_features(image: np.ndarray, grid: int = 4) -> np.ndarray:
    """Deterministic pooled-statistics feature vector for an RGB image.

    Channel means and standard deviations plus per-cell means on a coarse
    grid; enough structure for distribution exports and toy distances.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    ys = np.linspace(0, h, grid + 1).astype(int)
    xs = np.linspace(0, w, grid + 1).astype(int)
    cells = [img[ys[i]:ys[i + 1], xs[j]:xs[j + 1]].mean(axis=(0, 1))
             for i in range(grid) for j in range(grid)]
    return np.concatenate([img.mean(axis=(0, 1)), img.std(axis=(0, 1)),
                           np.concatenate(cells)])


class ToyClassifier:
    """Seeded linear head over toy features with a softmax output."""

    def __init__(self, n_classes: int = 8, seed: int = 0, grid: int = 4):
        self.n_classes = n_classes
        self.grid = grid
        rng = np.random.default_rng(seed)
        dim = 6 + 3 * grid * grid
        self._w = rng.standard_normal((dim, n_classes)) * 4.0 / np.sqrt(dim)

    def predict(self, image: np.ndarray) -> np.ndarray:
        logits = toy_features(image, self.grid) @ self._w
        logits -= logits.max()
        p = np.exp(logits)
        return p / p.sum()


class UniformClassifier:
    """Predicts the uniform distribution for every image."""

    def __init__(self, n_classes: int = 8):
        self.n_classes = n_classes

    def predict(self, image: np.ndarray) -> np.ndarray:
        return np.full(self.n_classes, 1.0 / self.n_classes)


class ToyPerceptualDistance:
    """Mean absolute difference of toy feature vectors: zero on identical
    inputs, symmetric."""

    def __init__(self, grid: int = 4):
        self.grid = grid

    def dist(self, a: np.ndarray, b: np.ndarray) -> float:
        fa = toy_features(a, self.grid)
        fb = toy_features(b, self.grid)
        return float(np.abs(fa - fb).mean())


def export_features(images, groups, extractor=None, path=None,
                    delimiter: str = "\t") -> list[tuple[str, np.ndarray]]:
    """One feature row per image with its group label.

    ``groups`` labels each image (normal / real-anomaly / synthetic or any
    other scheme). When ``path`` is given the rows are written as delimited
    text with a header, ready for external projection and plotting.
    """
    extractor = extractor or toy_features
    rows = [(str(group), np.asarray(extractor(img), dtype=np.float64))
            for img, group in zip(images, groups)]
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            if rows:
                dim = len(rows[0][1])
                header = ["group"] + [f"f{i}" for i in range(dim)]
                fh.write(delimiter.join(header) + "\n")
            for group, feats in rows:
                fh.write(delimiter.join([group] + [repr(v) for v in feats])
                         + "\n")
    return rows
