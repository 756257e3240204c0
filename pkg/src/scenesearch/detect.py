"""Detection post-processing and the assisted-identity query stage.

Covers confidence filtering, greedy NMS, ground-truth matching, positive-crop
harvesting, the labeled/unlabeled center memory, hard-negative selection and
the memory-based classification loss that trains the identity query head.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    UNLABELED,
    BoundingBox,
    Detection,
    IdentityLabel,
    PersonCrop,
    crop_and_resize,
    iou,
    is_labeled,
)
from .data.manifest import AnnotatedFrame


class ConfigError(ValueError):
    """A detector or loss hyperparameter is outside its valid range."""


class EmptyNegativeError(ValueError):
    """Hard-negative selection called with no negative centers."""


class InvalidLabelError(ValueError):
    """Label outside [1, M] handed to the identity memory."""


@dataclass(frozen=True)
class DetectorConfig:
    """Threshold bundle plus loss hyperparameters for the detection stage."""

    confidence_threshold: float = 0.5
    nms_iou_threshold: float = 0.5
    gt_match_iou_threshold: float = 0.6
    tau: float = 0.1
    hard_negative_ratio: float = 0.6

    def __post_init__(self) -> None:
        for name in ("confidence_threshold", "nms_iou_threshold", "gt_match_iou_threshold"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name}={v} outside [0, 1]")
        if self.tau <= 0:
            raise ConfigError(f"temperature tau={self.tau} must be > 0")
        if not (0.0 < self.hard_negative_ratio <= 1.0):
            raise ConfigError(
                f"hard_negative_ratio={self.hard_negative_ratio} outside (0, 1]"
            )

    @classmethod
    def cuhk(cls) -> "DetectorConfig":
        return cls(nms_iou_threshold=0.5, gt_match_iou_threshold=0.6)

    @classmethod
    def prw(cls) -> "DetectorConfig":
        return cls(nms_iou_threshold=0.6, gt_match_iou_threshold=0.5)


PROFILE_CONFIGS = {"cuhk": DetectorConfig.cuhk, "prw": DetectorConfig.prw}


def filter_by_confidence(dets: Sequence[Detection], threshold: float) -> list[Detection]:
    """Keep detections with score >= threshold, preserving order."""
    return [d for d in dets if d.score >= threshold]


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression; output sorted by descending score."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[Detection] = []
    suppressed = [False] * len(dets)
    for i in order:
        if suppressed[i]:
            continue
        kept.append(dets[i])
        for j in order:
            if not suppressed[j] and j != i and iou(dets[i].box, dets[j].box) >= iou_threshold:
                suppressed[j] = True
    return kept


def match_to_ground_truth(
    dets: Sequence[Detection],
    gt: Sequence[tuple[BoundingBox, IdentityLabel]],
    iou_threshold: float,
) -> list[tuple[Detection, Optional[IdentityLabel]]]:
    """Greedily assign each ground-truth box to at most one detection.

    Pairs are taken in descending IoU order; a detection receives the identity
    of its assigned box when that IoU exceeds the threshold, otherwise None.
    """
    pairs = []
    for di, det in enumerate(dets):
        for gi, (box, _) in enumerate(gt):
            v = iou(det.box, box)
            if v > iou_threshold:
                pairs.append((v, di, gi))
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
    assigned: dict[int, IdentityLabel] = {}
    used_gt: set[int] = set()
    for v, di, gi in pairs:
        if di in assigned or gi in used_gt:
            continue
        assigned[di] = gt[gi][1]
        used_gt.add(gi)
    return [(det, assigned.get(di)) for di, det in enumerate(dets)]


def crop_positive_samples(
    frame: AnnotatedFrame,
    matched: Sequence[tuple[Detection, Optional[IdentityLabel]]],
    crop_h: int = 256,
    crop_w: int = 128,
) -> list[PersonCrop]:
    """Crops for detections matched to a labeled identity; background and
    unlabeled matches are discarded."""
    crops = []
    for det, label in matched:
        if not is_labeled(label):
            continue
        pixels = crop_and_resize(frame.scene.pixels, det.box, crop_h, crop_w)
        crops.append(PersonCrop(pixels=pixels, identity=label, source=frame.frame_id))
    return crops


def crop_unlabeled_samples(
    frame: AnnotatedFrame,
    matched: Sequence[tuple[Detection, Optional[IdentityLabel]]],
    crop_h: int = 256,
    crop_w: int = 128,
) -> list[PersonCrop]:
    """Crops for detections matched to an unlabeled person (memory negatives)."""
    crops = []
    for det, label in matched:
        if label is UNLABELED:
            pixels = crop_and_resize(frame.scene.pixels, det.box, crop_h, crop_w)
            crops.append(PersonCrop(pixels=pixels, identity=UNLABELED, source=frame.frame_id))
    return crops


class IdentityMemory:
    """Unit-norm feature centers: one per labeled identity plus a growable set
    for unlabeled persons. Single-writer: updates must be serialized."""

    def __init__(
        self,
        n_identities: int,
        dim: int,
        momentum: float = 0.5,
        new_center_threshold: float = 0.5,
        seed: int = 0,
    ):
        if not (0.0 < momentum < 1.0) and momentum not in (0.0, 1.0):
            raise ConfigError(f"momentum {momentum} outside [0, 1]")
        if not (-1.0 < new_center_threshold < 1.0):
            raise ConfigError(f"new_center_threshold {new_center_threshold} outside (-1, 1)")
        self.n_identities = n_identities
        self.dim = dim
        self.momentum = momentum
        self.new_center_threshold = new_center_threshold
        rng = np.random.default_rng(seed)
        raw = rng.standard_normal((n_identities, dim))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        self.labeled = torch.from_numpy(raw.astype(np.float32))
        self.unlabeled = torch.zeros((0, dim), dtype=torch.float32)

    def all_centers(self) -> torch.Tensor:
        """(M + U, dim): labeled rows first, then unlabeled."""
        return torch.cat([self.labeled, self.unlabeled], dim=0)

    @torch.no_grad()
    def update(self, x: torch.Tensor, label: IdentityLabel) -> "IdentityMemory":
        x = x.detach().to(self.labeled.dtype)
        norm = float(x.norm())
        if abs(norm - 1.0) > 1e-3:
            raise ValueError(f"memory update requires a unit vector, got norm {norm}")
        mu = self.momentum
        if is_labeled(label):
            if not (1 <= label <= self.n_identities):
                raise InvalidLabelError(
                    f"label {label} outside [1, {self.n_identities}]"
                )
            c = mu * self.labeled[label - 1] + (1.0 - mu) * x
            self.labeled[label - 1] = F.normalize(c, dim=0)
        else:
            if len(self.unlabeled) == 0:
                self.unlabeled = x[None, :].clone()
            else:
                sims = self.unlabeled @ x
                best = int(sims.argmax())
                if float(sims[best]) < self.new_center_threshold:
                    self.unlabeled = torch.cat([self.unlabeled, x[None, :]], dim=0)
                else:
                    c = mu * self.unlabeled[best] + (1.0 - mu) * x
                    self.unlabeled[best] = F.normalize(c, dim=0)
        return self

    def state_dict(self) -> dict:
        return {
            "labeled": self.labeled,
            "unlabeled": self.unlabeled,
            "momentum": self.momentum,
            "new_center_threshold": self.new_center_threshold,
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "IdentityMemory":
        mem = cls.__new__(cls)
        mem.labeled = state["labeled"].clone()
        mem.unlabeled = state["unlabeled"].clone()
        mem.n_identities = mem.labeled.shape[0]
        mem.dim = mem.labeled.shape[1]
        mem.momentum = state["momentum"]
        mem.new_center_threshold = state["new_center_threshold"]
        return mem


def update_memory(mem: IdentityMemory, x: torch.Tensor, label: IdentityLabel) -> IdentityMemory:
    """Momentum-update the center for `label` (or the unlabeled pool) with x."""
    return mem.update(x, label)


def _count_from_scores(scores_desc: np.ndarray, ratio: float) -> int:
    """Hard-negative count from similarity scores already sorted descending."""
    n = len(scores_desc)
    total = float(scores_desc.sum())
    if total <= 0.0:
        return n  # cumulative ratio ill-defined; penalize every negative
    cum = np.cumsum(scores_desc) / total
    return int(np.argmin(np.abs(cum - ratio))) + 1


def hard_negative_count(
    x: np.ndarray | torch.Tensor,
    negatives: np.ndarray | torch.Tensor,
    ratio: float,
) -> int:
    """Number K of hard negatives: the prefix of descending-sorted similarity
    scores whose share of the total score is closest to `ratio`.

    Ties break toward smaller K; a non-positive score total falls back to all
    negatives.
    """
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    if isinstance(negatives, torch.Tensor):
        negatives = negatives.detach().cpu().numpy()
    negatives = np.asarray(negatives, dtype=np.float64)
    if negatives.ndim != 2 or len(negatives) == 0:
        raise EmptyNegativeError("hard-negative selection needs at least one negative center")
    if not (0.0 < ratio <= 1.0):
        raise ConfigError(f"hard-negative ratio {ratio} outside (0, 1]")
    scores = negatives @ np.asarray(x, dtype=np.float64)
    scores_desc = np.sort(scores)[::-1]
    return _count_from_scores(scores_desc, ratio)


def aidq_loss(
    features: torch.Tensor,
    labels: Sequence[int],
    memory: IdentityMemory,
    tau: float,
    hard_negative_ratio: float,
) -> torch.Tensor:
    """Memory-based classification loss with per-sample hard-negative pools.

    Each unit-norm feature is pulled toward its labeled center and pushed from
    the K highest-scoring other centers (labeled and unlabeled pooled), with K
    chosen per sample by `hard_negative_count`. Returns the batch mean.
    """
    if tau <= 0:
        raise ConfigError(f"temperature tau={tau} must be > 0")
    if not (0.0 < hard_negative_ratio <= 1.0):
        raise ConfigError(f"hard_negative_ratio={hard_negative_ratio} outside (0, 1]")
    if features.ndim != 2 or features.shape[0] != len(labels):
        raise ValueError("features must be (N, d) aligned with labels")
    centers = memory.all_centers().to(features.dtype)
    if centers.shape[0] < 2:
        raise EmptyNegativeError("need at least one negative center")
    with torch.no_grad():
        norms = features.norm(dim=1)
        if float((norms - 1.0).abs().max()) > 1e-3:
            raise ValueError("aidq_loss expects L2-normalized features")

    sims = features @ centers.t()  # (N, M+U)
    losses = []
    for i, label in enumerate(labels):
        if not (1 <= label <= memory.n_identities):
            raise InvalidLabelError(f"label {label} outside [1, {memory.n_identities}]")
        pos = sims[i, label - 1]
        neg_mask = torch.ones(centers.shape[0], dtype=torch.bool)
        neg_mask[label - 1] = False
        neg = sims[i][neg_mask]
        order = torch.argsort(neg.detach(), descending=True, stable=True)
        neg_sorted = neg[order]
        k = _count_from_scores(neg_sorted.detach().cpu().numpy().astype(np.float64),
                               hard_negative_ratio)
        logits = torch.cat([pos[None] / tau, neg_sorted[:k] / tau])
        losses.append(torch.logsumexp(logits, dim=0) - pos / tau)
    return torch.stack(losses).mean()


# ---------------------------------------------------------------------------
# Detection sources. Training a region-proposal network is out of scope; the
# pipeline instead accepts ground-truth passthrough, precomputed boxes from a
# file, or a sliding-window occupancy detector for toy scenes.
# ---------------------------------------------------------------------------


class GroundTruthDetector:
    """Emits ground-truth boxes as unit-confidence detections, optionally
    jittered to mimic localization noise."""

    def __init__(self, jitter: float = 0.0, seed: int = 0):
        if jitter < 0:
            raise ConfigError("jitter must be >= 0")
        self.jitter = jitter
        self._rng = np.random.default_rng(seed)

    def detect(self, frame: AnnotatedFrame) -> list[Detection]:
        h, w = frame.scene.pixels.shape[:2]
        dets = []
        for box, _ in frame.ground_truth:
            if self.jitter > 0:
                dx = self.jitter * box.width * self._rng.uniform(-1, 1, size=2)
                dy = self.jitter * box.height * self._rng.uniform(-1, 1, size=2)
                x1 = float(np.clip(box.x1 + dx[0], 0, w - 2))
                x2 = float(np.clip(box.x2 + dx[1], x1 + 1, w))
                y1 = float(np.clip(box.y1 + dy[0], 0, h - 2))
                y2 = float(np.clip(box.y2 + dy[1], y1 + 1, h))
                jittered = BoundingBox(x1, y1, x2, y2)
                score = 1.0 - 0.2 * self.jitter * float(self._rng.random())
                dets.append(Detection(box=jittered, score=min(score, 1.0)))
            else:
                dets.append(Detection(box=box, score=1.0))
        return dets


class FileDetector:
    """Replays precomputed detections from a JSON file keyed by frame id."""

    def __init__(self, path: str | Path):
        with open(path) as fh:
            records = json.load(fh)
        self._by_frame: dict[str, list[Detection]] = {}
        for r in records:
            det = Detection(
                box=BoundingBox(float(r["x1"]), float(r["y1"]), float(r["x2"]), float(r["y2"])),
                score=float(r["score"]),
            )
            self._by_frame.setdefault(str(r["frame"]), []).append(det)

    def detect(self, frame: AnnotatedFrame) -> list[Detection]:
        return list(self._by_frame.get(frame.frame_id, []))


class TemplateToyDetector:
    """Sliding-window occupancy detector for toy scenes.

    Scores each window by the fraction of saturated (person-colored) pixels it
    covers, using an integral image; meant only for desk-scale experiments.
    """

    def __init__(
        self,
        window_h: int = 56,
        window_w: int = 28,
        stride: int = 4,
        scales: Sequence[float] = (0.8, 1.0),
        spread_threshold: float = 0.25,
    ):
        self.window_h = window_h
        self.window_w = window_w
        self.stride = stride
        self.scales = tuple(scales)
        self.spread_threshold = spread_threshold

    def detect(self, frame: AnnotatedFrame) -> list[Detection]:
        pixels = frame.scene.pixels
        spread = pixels.max(axis=2) - pixels.min(axis=2)
        fg = (spread > self.spread_threshold).astype(np.float64)
        integral = np.zeros((fg.shape[0] + 1, fg.shape[1] + 1))
        integral[1:, 1:] = fg.cumsum(axis=0).cumsum(axis=1)
        h, w = fg.shape
        dets = []
        for scale in self.scales:
            wh = int(round(self.window_h * scale))
            ww = int(round(self.window_w * scale))
            if wh > h or ww > w:
                continue
            for y in range(0, h - wh + 1, self.stride):
                for x in range(0, w - ww + 1, self.stride):
                    total = (
                        integral[y + wh, x + ww]
                        - integral[y, x + ww]
                        - integral[y + wh, x]
                        + integral[y, x]
                    )
                    occupancy = total / (wh * ww)
                    if occupancy > 0.2:
                        dets.append(
                            Detection(
                                box=BoundingBox(float(x), float(y), float(x + ww), float(y + wh)),
                                score=min(float(occupancy), 1.0),
                            )
                        )
        return dets


class PostProcessedDetector:
    """Composes a raw detection source with confidence filtering and NMS."""

    def __init__(self, source, config: DetectorConfig):
        self.source = source
        self.config = config

    def detect(self, frame: AnnotatedFrame) -> list[Detection]:
        dets = filter_by_confidence(self.source.detect(frame), self.config.confidence_threshold)
        return nms(dets, self.config.nms_iou_threshold)


class AidqNet(nn.Module):
    """Small convolutional embedder for person crops.

    Strided convs halve the spatial extent four times; features then pool
    into horizontal strips whose concatenation feeds the linear embedding.
    Strip pooling keeps the vertical color layout, so the embedding stays
    sensitive to body-part proportions rather than collapsing to one global
    color mix.
    """

    def __init__(self, dim: int = 64, width: int = 16, strips: int = 4):
        super().__init__()
        widths = [width, width * 2, width * 4, width * 4]
        layers: list[nn.Module] = []
        prev = 3
        for c in widths:
            layers += [nn.Conv2d(prev, c, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
            prev = c
        self.features = nn.Sequential(*layers)
        self.strips = strips
        self.fc = nn.Linear(prev * strips, dim)
        self.dim = dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        h = F.adaptive_avg_pool2d(h, (self.strips, 1)).flatten(1)
        return F.normalize(self.fc(h), dim=1)


def crops_to_batch(crops: Sequence[PersonCrop]) -> torch.Tensor:
    """Stack crops into an NCHW float tensor."""
    if not crops:
        raise ValueError("empty crop batch")
    arr = np.stack([c.pixels for c in crops]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr))


def harvest_gt_crops(
    frames: Sequence[AnnotatedFrame],
    crop_h: int,
    crop_w: int,
    labeled_only: bool = True,
) -> list[PersonCrop]:
    """Crops cut directly from ground-truth annotation boxes."""
    crops = []
    for frame in frames:
        for box, label in frame.ground_truth:
            if labeled_only and not is_labeled(label):
                continue
            crops.append(
                PersonCrop(
                    pixels=crop_and_resize(frame.scene.pixels, box, crop_h, crop_w),
                    identity=label,
                    source=frame.frame_id,
                )
            )
    return crops


def harvest_detection_crops(
    frames: Sequence[AnnotatedFrame],
    detector,
    config: DetectorConfig,
    crop_h: int,
    crop_w: int,
) -> tuple[list[PersonCrop], list[PersonCrop]]:
    """(labeled, unlabeled) crops from post-processed, ground-truth-matched
    detections."""
    post = PostProcessedDetector(detector, config)
    labeled: list[PersonCrop] = []
    unlabeled: list[PersonCrop] = []
    for frame in frames:
        matched = match_to_ground_truth(
            post.detect(frame), frame.ground_truth, config.gt_match_iou_threshold
        )
        labeled += crop_positive_samples(frame, matched, crop_h, crop_w)
        unlabeled += crop_unlabeled_samples(frame, matched, crop_h, crop_w)
    return labeled, unlabeled


def train_embedder(
    crops: Sequence[PersonCrop],
    n_identities: int,
    config: DetectorConfig,
    iterations: int,
    seed: int = 0,
    dim: int = 64,
    batch_size: int = 16,
    lr: float = 1e-3,
    log_every: int = 50,
    log_fn=None,
) -> tuple[AidqNet, IdentityMemory]:
    """Train a crop embedder on a fixed crop pool with the memory loss.

    Each step embeds a sampled batch, applies the hard-negative memory loss
    over the labeled rows, then momentum-updates the memory with every row
    (unlabeled rows feed the unlabeled center pool).
    """
    if not any(is_labeled(c.identity) for c in crops):
        raise ValueError("embedder training needs labeled crops")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    net = AidqNet(dim=dim)
    memory = IdentityMemory(n_identities, dim, seed=seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    pool = list(crops)
    for it in range(iterations):
        idx = rng.choice(len(pool), size=min(batch_size, len(pool)), replace=False)
        batch = [pool[i] for i in idx]
        feats = net(crops_to_batch(batch))
        lab_rows = [j for j, c in enumerate(batch) if is_labeled(c.identity)]
        if not lab_rows:
            continue
        loss = aidq_loss(
            feats[lab_rows],
            [batch[j].identity for j in lab_rows],
            memory,
            config.tau,
            config.hard_negative_ratio,
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            for j, crop in enumerate(batch):
                memory.update(F.normalize(feats[j].detach(), dim=0), crop.identity)
        if log_fn is not None and (it % log_every == 0 or it == iterations - 1):
            log_fn(it, float(loss.detach()))
    return net, memory


def run_aidq_training(
    frames: Sequence[AnnotatedFrame],
    detector,
    config: DetectorConfig,
    n_identities: int,
    iterations: int,
    seed: int = 0,
    dim: int = 64,
    batch_size: int = 16,
    lr: float = 1e-3,
    crop_h: int = 64,
    crop_w: int = 32,
    log_every: int = 50,
    log_fn=None,
) -> tuple[AidqNet, IdentityMemory]:
    """Harvest positive crops from post-processed detections, then train the
    embedder against the identity memory."""
    labeled, unlabeled = harvest_detection_crops(frames, detector, config, crop_h, crop_w)
    if not labeled:
        raise ValueError("no labeled crops survived detection matching")
    return train_embedder(
        labeled + unlabeled, n_identities, config, iterations,
        seed=seed, dim=dim, batch_size=batch_size, lr=lr,
        log_every=log_every, log_fn=log_fn,
    )
