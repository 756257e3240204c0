"""Concrete experiment runners at toy scale: embedder training for each sweep
axis, synthetic-crop pools, and the three-arm ablation comparing noisy-crop
training, clean memory-loss training, and memory-loss training augmented with
synthesized crops.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .core import PersonCrop
from .data.manifest import AnnotatedFrame, SearchProtocol
from .data.toy import ToySpec, ToyOracle, generate_toy_dataset
from .detect import (
    AidqNet,
    DetectorConfig,
    GroundTruthDetector,
    crops_to_batch,
    harvest_detection_crops,
    harvest_gt_crops,
    train_embedder,
)
from .evaluation import (
    EvalSummary,
    EmbedFn,
    evaluate_protocol,
    resample_galleries,
)
from .synthgan import SceneSynthesisModel


def embedder_fn(net: AidqNet) -> EmbedFn:
    """Adapt a trained embedder to the evaluation interface."""

    def fn(crops: Sequence[PersonCrop]) -> np.ndarray:
        with torch.no_grad():
            return net(crops_to_batch(crops)).numpy()

    return fn


@dataclass
class ToyBench:
    """A dataset bundled with everything evaluation needs. The oracle and the
    generation spec are present only for generated datasets."""

    frames: list[AnnotatedFrame]
    protocol: SearchProtocol
    oracle: Optional[ToyOracle] = None
    spec: Optional[ToySpec] = None
    crop_h: int = 64
    crop_w: int = 32

    @property
    def n_identities(self) -> int:
        ids = {
            label
            for f in self.frames
            for _, label in f.ground_truth
            if isinstance(label, int)
        }
        return max(ids) if ids else 0

    def evaluate(self, net: AidqNet, match_iou: float = 0.5,
                 protocol: Optional[SearchProtocol] = None) -> EvalSummary:
        return evaluate_protocol(
            self.frames,
            protocol if protocol is not None else self.protocol,
            GroundTruthDetector(),
            embedder_fn(net),
            match_iou=match_iou,
            crop_h=self.crop_h,
            crop_w=self.crop_w,
        )


def build_toy_bench(spec: ToySpec, crop_h: int = 64, crop_w: int = 32) -> ToyBench:
    frames, protocol, oracle = generate_toy_dataset(spec)
    return ToyBench(frames=frames, protocol=protocol, oracle=oracle, spec=spec,
                    crop_h=crop_h, crop_w=crop_w)


def train_toy_embedder(
    bench: ToyBench,
    config: DetectorConfig,
    iterations: int,
    seed: int,
    dim: int = 64,
    extra_crops: Sequence[PersonCrop] = (),
) -> AidqNet:
    """Clean-pipeline embedder: ground-truth detections, strict matching,
    memory loss; optionally augmented with extra (synthetic) crops."""
    labeled, unlabeled = harvest_detection_crops(
        bench.frames, GroundTruthDetector(), config, bench.crop_h, bench.crop_w
    )
    pool = labeled + unlabeled + list(extra_crops)
    net, _ = train_embedder(
        pool, bench.n_identities, config, iterations, seed=seed, dim=dim
    )
    return net


def gallery_sweep_runner(bench: ToyBench, net: AidqNet, match_iou: float = 0.5):
    """Axis runner that resamples galleries at the requested size; models are
    reused, only the protocol changes."""

    def runner(axis: str, value: float, seed: int) -> EvalSummary:
        protocol = resample_galleries(bench.frames, bench.protocol, int(value), seed)
        return bench.evaluate(net, match_iou=match_iou, protocol=protocol)

    return runner


def retrain_sweep_runner(
    bench: ToyBench,
    base_config: DetectorConfig,
    iterations: int,
    match_iou: float = 0.5,
    dim: int = 64,
):
    """Axis runner that retrains the embedder per value: the hard-negative
    ratio and the ground-truth match threshold are training-time knobs, so
    each cell is a short training run followed by a fixed evaluation."""

    def runner(axis: str, value: float, seed: int) -> EvalSummary:
        if axis == "lambda":
            config = replace(base_config, hard_negative_ratio=value)
        elif axis == "iou_threshold":
            config = replace(base_config, gt_match_iou_threshold=value)
        else:
            raise ValueError(f"retrain runner cannot handle axis {axis!r}")
        net = train_toy_embedder(bench, config, iterations, seed, dim=dim)
        return bench.evaluate(net, match_iou=match_iou)

    return runner


def synthesize_crop_pool(
    model: SceneSynthesisModel,
    crops: Sequence[PersonCrop],
    n_samples: int,
    seed: int,
    batch_size: int = 32,
    classifier: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
) -> list[PersonCrop]:
    """Generate appearance/structure recombinations from a trained synthesis
    model: each sample takes the appearance of one labeled crop and the pose
    of another, and is labeled with the appearance provider's identity.

    `classifier` maps a synthesized NCHW batch to predicted 1-based identity
    labels; recombinations it assigns to a different identity than their
    appearance provider are discarded and redrawn, an identity-preservation
    gate on the pool. Redraws are capped at six times n_samples, so the
    returned pool can come up short when the model is bad."""
    labeled = [c for c in crops if isinstance(c.identity, int)]
    if len(labeled) < 2:
        raise ValueError("need at least two labeled crops to recombine")
    rng = np.random.default_rng(seed)

    def draw_pair() -> tuple[int, int]:
        a = int(rng.integers(len(labeled)))
        choices = [k for k in range(len(labeled)) if labeled[k].identity != labeled[a].identity]
        return a, choices[int(rng.integers(len(choices)))]

    out: list[PersonCrop] = []
    drawn = 0
    cap = n_samples if classifier is None else 6 * n_samples
    model.eval()
    with torch.no_grad():
        while len(out) < n_samples and drawn < cap:
            take = min(batch_size, cap - drawn)
            if classifier is None:
                take = min(take, n_samples - len(out))
            chunk = [draw_pair() for _ in range(take)]
            drawn += take
            x_app = crops_to_batch([labeled[a] for a, _ in chunk])
            x_str = crops_to_batch([labeled[b] for _, b in chunk])
            synth = model.synthesize(x_app, x_str).clamp(0.0, 1.0)
            rows = range(len(chunk))
            if classifier is not None:
                pred = classifier(synth)
                rows = [r for r in rows if int(pred[r]) == labeled[chunk[r][0]].identity]
            arr = synth.permute(0, 2, 3, 1).numpy().astype(np.float32)
            for r in rows:
                if len(out) == n_samples:
                    break
                out.append(
                    PersonCrop(
                        pixels=np.ascontiguousarray(arr[r]),
                        identity=labeled[chunk[r][0]].identity,
                        source="synthesized",
                    )
                )
    return out


@dataclass
class AblationArmResult:
    name: str
    per_seed_map: list[float]

    @property
    def mean_map(self) -> float:
        return float(np.mean(self.per_seed_map))


@dataclass
class AblationResult:
    neither: AblationArmResult
    aidq: AblationArmResult
    aidq_synth: AblationArmResult

    def margins(self) -> dict[str, float]:
        return {
            "aidq_synth_vs_aidq": self.aidq_synth.mean_map - self.aidq.mean_map,
            "aidq_synth_vs_neither": self.aidq_synth.mean_map - self.neither.mean_map,
        }

    def rows(self) -> list[dict]:
        out = []
        for arm in (self.neither, self.aidq, self.aidq_synth):
            for rep, v in enumerate(arm.per_seed_map):
                out.append({"arm": arm.name, "repetition": rep, "mAP": v})
        return out


def split_pose_benchmark(
    spec: ToySpec, eval_spec: Optional[ToySpec] = None
) -> tuple[ToyBench, ToyBench]:
    """Train/eval toy benches sharing palettes but with disjoint pose usage.

    Training frames restrict each identity to a single pose; evaluation frames
    draw each identity only from its held-out poses, so every evaluation
    instance is a novel identity/pose combination. That separates embedders
    that memorized the training combinations from ones exposed to
    recombinations.
    """
    pose_map = {
        i: ((i - 1) % spec.n_poses,) for i in range(1, spec.n_identities + 1)
    }
    eval_map = {
        i: tuple(p for p in range(spec.n_poses) if p not in pose_map[i])
        for i in range(1, spec.n_identities + 1)
    }
    train_frames, train_protocol, oracle = generate_toy_dataset(spec, pose_map=pose_map)
    if eval_spec is None:
        eval_spec = spec
    eval_frames, eval_protocol, _ = generate_toy_dataset(
        eval_spec, pose_map=eval_map, frame_seed=spec.seed + 7919
    )
    train = ToyBench(frames=train_frames, protocol=train_protocol, oracle=oracle, spec=spec)
    evalb = ToyBench(frames=eval_frames, protocol=eval_protocol, oracle=oracle, spec=eval_spec)
    return train, evalb


def run_ablation(
    train_bench: ToyBench,
    eval_bench: ToyBench,
    synthesis_model: SceneSynthesisModel,
    seeds: Sequence[int],
    iterations: int = 400,
    dim: int = 32,
    synth_pool_size: int = 192,
    detector_jitter: float = 0.35,
    config: Optional[DetectorConfig] = None,
    synth_classifier: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
) -> AblationResult:
    """Three training regimes over one sloppy detector, identical evaluation.

    All arms harvest from the same jittered detection stream; they differ in
    what they keep and how they train on it.

    neither: every detection loosely matched to ground truth is kept, labeled
        crops only, hard-negative ratio 1 — a plain per-center softmax
        baseline with no quality gating or mining.
    aidq: the same detections gated at the strict match threshold, unlabeled
        survivors feeding the memory's unlabeled centers, mined hard
        negatives.
    aidq_synth: the same plus synthesized appearance/pose recombinations,
        optionally gated by `synth_classifier` (see synthesize_crop_pool).
    """
    if config is None:
        config = DetectorConfig()
    loose = replace(config, gt_match_iou_threshold=0.2, hard_negative_ratio=1.0)
    gt_crops = harvest_gt_crops(train_bench.frames, train_bench.crop_h, train_bench.crop_w)

    arms = {name: [] for name in ("neither", "aidq", "aidq_synth")}
    for seed in seeds:
        # fresh detector instances with one seed replay the same jitter stream
        noisy_labeled, _ = harvest_detection_crops(
            train_bench.frames, GroundTruthDetector(jitter=detector_jitter, seed=seed),
            loose, train_bench.crop_h, train_bench.crop_w,
        )
        net_a, _ = train_embedder(
            noisy_labeled, train_bench.n_identities, loose,
            iterations, seed=seed, dim=dim,
        )
        arms["neither"].append(eval_bench.evaluate(net_a).mAP)

        gated_labeled, gated_unlabeled = harvest_detection_crops(
            train_bench.frames, GroundTruthDetector(jitter=detector_jitter, seed=seed),
            config, train_bench.crop_h, train_bench.crop_w,
        )
        net_b, _ = train_embedder(
            gated_labeled + gated_unlabeled, train_bench.n_identities, config,
            iterations, seed=seed, dim=dim,
        )
        arms["aidq"].append(eval_bench.evaluate(net_b).mAP)

        synth = synthesize_crop_pool(
            synthesis_model, gt_crops, synth_pool_size, seed=seed,
            classifier=synth_classifier,
        )
        net_c, _ = train_embedder(
            gated_labeled + gated_unlabeled + synth, train_bench.n_identities, config,
            iterations, seed=seed, dim=dim,
        )
        arms["aidq_synth"].append(eval_bench.evaluate(net_c).mAP)

    return AblationResult(
        neither=AblationArmResult("neither", arms["neither"]),
        aidq=AblationArmResult("aidq", arms["aidq"]),
        aidq_synth=AblationArmResult("aidq_synth", arms["aidq_synth"]),
    )
