"""Retrieval evaluation: average precision, mAP, CMC top-k, end-to-end person
search over gallery frames, gallery resampling, and the generic sweep harness
that varies one axis with seeded repetitions.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Detection, PersonCrop, crop_and_resize, iou
from .data.manifest import AnnotatedFrame, Query, SearchProtocol
from .detect import ConfigError


class UnevaluableQueryError(ValueError):
    """The query identity has no ground-truth match in its gallery."""


class EmptyEvaluationError(ValueError):
    """No evaluable queries remain."""


@dataclass(frozen=True)
class RankedResult:
    """One query's ranked gallery detections with correctness flags.

    Correctness flags are claimed once per ground-truth box, so at most n_gt
    positions are flagged and average precision stays in [0, 1].
    """

    detections: tuple[Detection, ...]
    similarities: tuple[float, ...]
    rel: tuple[bool, ...]
    n_gt: int

    def __post_init__(self) -> None:
        if not (len(self.detections) == len(self.similarities) == len(self.rel)):
            raise ValueError("ranked-result fields must align")
        if self.n_gt < 1:
            raise UnevaluableQueryError("n_gt must be >= 1 for an evaluable query")
        sims = np.asarray(self.similarities, dtype=np.float64)
        if len(sims) > 1 and np.any(np.diff(sims) > 1e-9):
            raise ValueError("similarities must be non-increasing")
        if sum(self.rel) > self.n_gt:
            raise ValueError("more correct flags than ground-truth matches")


def average_precision(r: RankedResult) -> float:
    """Sum over ranks of precision-at-k times the correctness flag, divided by
    the number of ground-truth matches. Zero when nothing correct was
    retrieved."""
    correct = 0
    total = 0.0
    for k, flag in enumerate(r.rel, start=1):
        if flag:
            correct += 1
            total += correct / k
    return total / r.n_gt


def mean_ap(results: Sequence[RankedResult]) -> float:
    """Arithmetic mean of per-query average precision."""
    if not results:
        raise EmptyEvaluationError("mean_ap needs at least one query")
    return float(np.mean([average_precision(r) for r in results]))


def cmc_top_k(results: Sequence[RankedResult], k: int) -> float:
    """Fraction of queries with at least one correct result in the top k."""
    if k < 1:
        raise ConfigError(f"k={k} must be >= 1")
    if not results:
        raise EmptyEvaluationError("cmc_top_k needs at least one query")
    hits = sum(1 for r in results if any(r.rel[:k]))
    return hits / len(results)


def rank_gallery_detections(
    query_identity: int,
    scored: Sequence[tuple[AnnotatedFrame, Detection, float]],
    gallery: Sequence[AnnotatedFrame],
    match_iou: float,
) -> RankedResult:
    """Rank (frame, detection, similarity) triples and flag correctness.

    Ordering is by similarity, then detection score, then frame id, then the
    original index, so rankings are stable under gallery permutation. Each
    ground-truth box of the query identity can justify at most one result.
    """
    n_gt = sum(
        1
        for frame in gallery
        for _, label in frame.ground_truth
        if label == query_identity
    )
    if n_gt == 0:
        raise UnevaluableQueryError(
            f"identity {query_identity} absent from gallery ground truth"
        )
    order = sorted(
        range(len(scored)),
        key=lambda i: (-scored[i][2], -scored[i][1].score, scored[i][0].frame_id, i),
    )
    claimed: dict[str, set[int]] = {}
    rel = []
    for i in order:
        frame, det, _ = scored[i]
        taken = claimed.setdefault(frame.frame_id, set())
        best_iou, best_gi = 0.0, None
        for gi, (box, label) in enumerate(frame.ground_truth):
            if label != query_identity or gi in taken:
                continue
            v = iou(det.box, box)
            if v > best_iou:
                best_iou, best_gi = v, gi
        if best_gi is not None and best_iou >= match_iou:
            taken.add(best_gi)
            rel.append(True)
        else:
            rel.append(False)
    return RankedResult(
        detections=tuple(scored[i][1] for i in order),
        similarities=tuple(scored[i][2] for i in order),
        rel=tuple(rel),
        n_gt=n_gt,
    )


EmbedFn = Callable[[Sequence[PersonCrop]], np.ndarray]


def search(
    query_crop: PersonCrop,
    query_identity: int,
    gallery: Sequence[AnnotatedFrame],
    detector,
    embed_fn: EmbedFn,
    match_iou: float = 0.5,
    crop_h: int = 64,
    crop_w: int = 32,
) -> RankedResult:
    """Detect persons in gallery frames, embed their crops, and rank by cosine
    similarity to the query embedding."""
    if any(f.frame_id == query_crop.source for f in gallery):
        raise ValueError(f"query frame {query_crop.source!r} present in its own gallery")
    q = embed_fn([query_crop])[0]
    q = q / np.linalg.norm(q)
    scored: list[tuple[AnnotatedFrame, Detection, float]] = []
    for frame in gallery:
        dets = detector.detect(frame)
        if not dets:
            continue
        crops = [
            PersonCrop(
                pixels=crop_and_resize(frame.scene.pixels, d.box, crop_h, crop_w),
                identity=None,
                source=frame.frame_id,
            )
            for d in dets
        ]
        embs = embed_fn(crops)
        embs = embs / np.linalg.norm(embs, axis=1, keepdims=True)
        sims = embs @ q
        scored += [(frame, d, float(s)) for d, s in zip(dets, sims)]
    return rank_gallery_detections(query_identity, scored, gallery, match_iou)


@dataclass
class EvalSummary:
    """Aggregate retrieval metrics over the evaluable queries.

    `per_query` aligns with the protocol's query order; None marks a query
    that was unevaluable and therefore excluded from every aggregate.
    """

    mAP: float
    top1: float
    top5: float
    top10: float
    n_queries: int
    n_unevaluable: int
    aps: list[float] = field(default_factory=list)
    per_query: list[Optional[float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "top1": self.top1,
            "top5": self.top5,
            "top10": self.top10,
            "n_queries": self.n_queries,
            "n_unevaluable": self.n_unevaluable,
        }


def evaluate_protocol(
    frames: Sequence[AnnotatedFrame],
    protocol: SearchProtocol,
    detector,
    embed_fn: EmbedFn,
    match_iou: float = 0.5,
    crop_h: int = 64,
    crop_w: int = 32,
) -> EvalSummary:
    """Run every query in the protocol; unevaluable queries are counted and
    excluded from the aggregates."""
    by_id = {f.frame_id: f for f in frames}
    results: list[RankedResult] = []
    per_query: list[Optional[float]] = []
    n_unevaluable = 0
    for query in protocol.queries:
        qframe = by_id[query.frame_id]
        qcrop = PersonCrop(
            pixels=crop_and_resize(qframe.scene.pixels, query.box, crop_h, crop_w),
            identity=query.identity,
            source=query.frame_id,
        )
        gallery = [by_id[fid] for fid in query.gallery]
        try:
            result = search(
                qcrop, query.identity, gallery, detector, embed_fn,
                match_iou=match_iou, crop_h=crop_h, crop_w=crop_w,
            )
            results.append(result)
            per_query.append(average_precision(result))
        except UnevaluableQueryError:
            n_unevaluable += 1
            per_query.append(None)
    if not results:
        raise EmptyEvaluationError(
            f"all {len(protocol.queries)} queries were unevaluable"
        )
    return EvalSummary(
        mAP=mean_ap(results),
        top1=cmc_top_k(results, 1),
        top5=cmc_top_k(results, 5),
        top10=cmc_top_k(results, 10),
        n_queries=len(results),
        n_unevaluable=n_unevaluable,
        aps=[ap for ap in per_query if ap is not None],
        per_query=per_query,
    )


def resample_galleries(
    frames: Sequence[AnnotatedFrame],
    protocol: SearchProtocol,
    gallery_size: int,
    seed: int,
) -> SearchProtocol:
    """Redraw every query's gallery at a new size.

    Each gallery keeps at least one frame containing the query identity (so
    queries stay evaluable), excludes the query frame, and fills the rest by
    sampling without replacement.
    """
    if gallery_size < 1:
        raise ConfigError(f"gallery_size {gallery_size} must be >= 1")
    if gallery_size > len(frames) - 1:
        raise ConfigError(
            f"gallery_size {gallery_size} exceeds available frames ({len(frames) - 1})"
        )
    rng = np.random.default_rng(seed)
    id_frames: dict[int, list[str]] = {}
    for f in frames:
        for _, label in f.ground_truth:
            if isinstance(label, int):
                id_frames.setdefault(label, []).append(f.frame_id)
    all_ids = [f.frame_id for f in frames]
    queries = []
    for q in protocol.queries:
        holders = sorted(set(id_frames.get(q.identity, [])) - {q.frame_id})
        if not holders:
            raise UnevaluableQueryError(
                f"identity {q.identity} appears only in its query frame"
            )
        anchor = holders[int(rng.integers(len(holders)))]
        others = [fid for fid in all_ids if fid not in (q.frame_id, anchor)]
        fill = rng.choice(len(others), size=gallery_size - 1, replace=False)
        gallery = [anchor] + [others[i] for i in fill]
        perm = rng.permutation(len(gallery))
        queries.append(
            Query(
                frame_id=q.frame_id,
                identity=q.identity,
                box=q.box,
                gallery=tuple(gallery[i] for i in perm),
            )
        )
    return SearchProtocol(queries=tuple(queries), gallery_size=gallery_size)


SWEEP_AXES = ("gallery_size", "lambda", "iou_threshold")
SWEEP_CSV_HEADER = "axis,value,repetition,mAP,top1,top5,top10,n_queries,n_unevaluable,seed"


@dataclass(frozen=True)
class SweepRow:
    axis: str
    value: float
    repetition: int
    summary: EvalSummary
    seed: int


@dataclass
class SweepReport:
    """One row per (axis value, repetition); aggregates are means over
    repetitions."""

    axis: str
    values: list[float]
    repetitions: int
    seed: int
    rows: list[SweepRow]

    def mean_by_value(self, metric: str = "mAP") -> dict[float, float]:
        out: dict[float, list[float]] = {}
        for row in self.rows:
            out.setdefault(row.value, []).append(getattr(row.summary, metric))
        return {v: float(np.mean(ms)) for v, ms in out.items()}

    def _format_value(self, value: float) -> str:
        return f"{int(value)}" if self.axis == "gallery_size" else f"{value:g}"

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SWEEP_CSV_HEADER.split(","))
            for row in self.rows:
                s = row.summary
                writer.writerow(
                    [
                        self.axis,
                        self._format_value(row.value),
                        row.repetition,
                        f"{s.mAP:.6f}",
                        f"{s.top1:.6f}",
                        f"{s.top5:.6f}",
                        f"{s.top10:.6f}",
                        s.n_queries,
                        s.n_unevaluable,
                        row.seed,
                    ]
                )

    def to_json(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "axis": self.axis,
            "values": self.values,
            "repetitions": self.repetitions,
            "seed": self.seed,
            "mean_mAP": {self._format_value(v): m for v, m in self.mean_by_value("mAP").items()},
            "mean_top1": {self._format_value(v): m for v, m in self.mean_by_value("top1").items()},
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")


def _validate_axis(axis: str, values: Sequence[float]) -> None:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    for v in values:
        if axis == "gallery_size" and (v < 1 or v != int(v)):
            raise ConfigError(f"gallery_size value {v} must be a positive integer")
        if axis == "lambda" and not (0.0 < v <= 1.0):
            raise ConfigError(f"lambda value {v} outside (0, 1]")
        if axis == "iou_threshold" and not (0.0 <= v <= 1.0):
            raise ConfigError(f"iou_threshold value {v} outside [0, 1]")


def cell_seed(seed: int, value_index: int, repetition: int) -> int:
    """Deterministic per-cell seed, decorrelated across cells."""
    return int(np.random.SeedSequence([seed, value_index, repetition]).generate_state(1)[0])


def sweep(
    axis: str,
    values: Sequence[float],
    repetitions: int,
    seed: int,
    runner: Callable[[str, float, int], EvalSummary],
) -> SweepReport:
    """Evaluate `runner(axis, value, cell_seed)` on every (value, repetition)
    cell. The runner owns what the axis means (gallery resampling versus a
    short retrain); this harness owns seeding and report assembly."""
    _validate_axis(axis, values)
    if repetitions < 1:
        raise ConfigError(f"repetitions {repetitions} must be >= 1")
    rows = []
    for vi, value in enumerate(values):
        for rep in range(repetitions):
            s = cell_seed(seed, vi, rep)
            summary = runner(axis, float(value), s)
            rows.append(
                SweepRow(axis=axis, value=float(value), repetition=rep, summary=summary, seed=s)
            )
    return SweepReport(
        axis=axis,
        values=[float(v) for v in values],
        repetitions=repetitions,
        seed=seed,
        rows=rows,
    )
