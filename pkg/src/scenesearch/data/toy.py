"""Procedural toy scenes with factorized appearance and structure.

Each identity owns a fixed color palette (head/torso/legs); each rendered
instance picks a pose layout, scale and position. Appearance and structure are
therefore separately measurable: the oracle recovers the identity from colors
alone and the pose from the silhouette alone, which real photos do not allow
at desk scale.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..core import UNLABELED, BoundingBox, IdentityLabel, is_labeled
from .manifest import AnnotatedFrame, Query, SceneImage, SearchProtocol


class PlacementError(ValueError):
    """Persons cannot be placed without overlap in the configured frame."""


@dataclass(frozen=True)
class ToySpec:
    """Parameters of the procedural dataset. Same spec + seed => identical bytes."""

    n_identities: int = 8
    n_frames: int = 64
    persons_per_frame: int = 3
    seed: int = 0
    frame_h: int = 96
    frame_w: int = 160
    appearance_parts: int = 3  # colored body segments per identity palette
    n_poses: int = 4
    person_h: int = 56
    person_w: int = 28
    unlabeled_per_frame: int = 0
    gallery_size: int = 20
    n_queries: int = 16
    background_clutter: float = 0.0  # density of dark colored background patches

    def __post_init__(self) -> None:
        if self.n_identities < 2:
            raise ValueError("need at least 2 identities for pair sampling")
        for name in ("n_frames", "persons_per_frame", "frame_h", "frame_w",
                     "appearance_parts", "n_poses", "person_h", "person_w",
                     "gallery_size", "n_queries"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.unlabeled_per_frame < 0:
            raise ValueError("unlabeled_per_frame must be >= 0")
        if not 0.0 <= self.background_clutter <= 1.0:
            raise ValueError("background_clutter must be in [0, 1]")
        if self.gallery_size > self.n_frames - 1:
            raise ValueError("gallery_size must leave room to exclude the query frame")


def _pose_layout(pose: int, n_poses: int) -> dict:
    """Deterministic layout constants for one pose, in unit person coordinates."""
    t = pose / max(n_poses - 1, 1)
    return {
        "head_w": 0.32 + 0.12 * ((pose % 3) / 2.0),
        "torso_w": 0.70 + 0.22 * (((pose + 1) % 3) / 2.0),
        "leg_w": 0.18 + 0.08 * (pose % 2),
        "leg_offset": 0.06 + 0.24 * t,  # horizontal center offset of each leg
    }


def _part_bands(n_parts: int) -> list[tuple[float, float]]:
    """Vertical (top, bottom) span of each colored part, head first, legs last."""
    if n_parts == 1:
        return [(0.02, 0.98)]
    bands = [(0.02, 0.22), (0.26, 0.60)]
    lo, hi = 0.64, 0.98
    rest = n_parts - 2
    if rest <= 0:
        return bands[:n_parts]
    step = (hi - lo) / rest
    for k in range(rest):
        bands.append((lo + k * step, lo + (k + 1) * step - 0.01))
    return bands


def _part_rects(pose: int, n_poses: int, n_parts: int) -> list[list[tuple[float, float, float, float]]]:
    """Per part, a list of (x1, y1, x2, y2) rectangles in unit coordinates."""
    lay = _pose_layout(pose, n_poses)
    bands = _part_bands(n_parts)
    rects: list[list[tuple[float, float, float, float]]] = []
    for p, (top, bot) in enumerate(bands):
        if p == 0 and n_parts >= 2:  # head, centered
            w = lay["head_w"]
            rects.append([(0.5 - w / 2, top, 0.5 + w / 2, bot)])
        elif p == n_parts - 1 and n_parts >= 2:  # legs, possibly split
            w, off = lay["leg_w"], lay["leg_offset"]
            left = (0.5 - off - w / 2, top, 0.5 - off + w / 2, bot)
            right = (0.5 + off - w / 2, top, 0.5 + off + w / 2, bot)
            rects.append([left, right])
        else:  # torso-like full-width band
            w = lay["torso_w"]
            rects.append([(0.5 - w / 2, top, 0.5 + w / 2, bot)])
    return rects


def _render_person(
    canvas: np.ndarray, x: int, y: int, w: int, h: int,
    palette: np.ndarray, pose: int, n_poses: int,
) -> None:
    """Composite one person (uint8 palette colors) onto a uint8 canvas in place."""
    n_parts = palette.shape[0]
    for part, rect_list in enumerate(_part_rects(pose, n_poses, n_parts)):
        color = palette[part]
        for rx1, ry1, rx2, ry2 in rect_list:
            px1 = x + int(round(rx1 * w))
            px2 = x + int(round(rx2 * w))
            py1 = y + int(round(ry1 * h))
            py2 = y + int(round(ry2 * h))
            canvas[py1:py2, max(px1, x):min(px2, x + w)] = color


def _make_palettes(
    n_labeled: int, n_unlabeled: int, n_parts: int, rng: np.random.Generator
) -> np.ndarray:
    """(n_labeled + n_unlabeled, n_parts, 3) uint8 palettes.

    Each labeled identity owns one hue family, with parts separated by value
    tiers: hue spacing between identities stays wide (a blend of two parts of
    one person remains in that person's hue family), so nearest-palette
    classification tolerates rendering noise. Unlabeled persons get hues
    halfway between labeled ones: visually plausible distractors that never
    capture a labeled vote.
    """
    labeled_hues = rng.permutation((np.arange(n_labeled) + 0.5) / n_labeled)
    tiers = np.linspace(0.95, 0.60, n_parts)

    def family(hue: float) -> list[tuple[float, float, float]]:
        sat = 0.78 + 0.14 * rng.random()
        return [
            colorsys.hsv_to_rgb(
                hue, sat, float(np.clip(t + 0.04 * (rng.random() - 0.5), 0.0, 1.0))
            )
            for t in tiers
        ]

    colors = [family(h) for h in labeled_hues]
    for k in range(n_unlabeled):
        base = labeled_hues[k % n_labeled] + 0.5 / n_labeled
        colors.append(family(base % 1.0))
    quantized = np.rint(np.array(colors) * 255.0).astype(np.uint8)
    return quantized.reshape(n_labeled + n_unlabeled, n_parts, 3)


def _render_background(
    h: int, w: int, rng: np.random.Generator, clutter: float = 0.0
) -> np.ndarray:
    """Low-saturation textured background (uint8): gray base + gradient + noise.

    With clutter > 0, dark saturated rectangles are scattered over the base:
    their hue content bleeds into badly cropped training samples, but the
    colors stay below the oracle's foreground spread and outside its palette
    vote radius, so oracle classification is unaffected.
    """
    base = 0.30 + 0.25 * rng.random()
    gx = (0.30 * rng.random() - 0.15) * np.linspace(-1, 1, w)[None, :]
    gy = (0.30 * rng.random() - 0.15) * np.linspace(-1, 1, h)[:, None]
    noise = 0.05 * (rng.random((h, w)) - 0.5)
    lum = np.clip(base + gx + gy + noise, 0.05, 0.9)
    tint = 0.04 * (rng.random(3) - 0.5)
    img = np.clip(lum[:, :, None] + tint[None, None, :], 0.0, 1.0)
    if clutter > 0:  # guarded so clutter-free specs keep their exact RNG stream
        for _ in range(int(round(clutter * h * w / 300.0))):
            ph = int(rng.integers(5, 13))
            pw = int(rng.integers(5, 13))
            py = int(rng.integers(0, max(h - ph, 1)))
            px = int(rng.integers(0, max(w - pw, 1)))
            img[py:py + ph, px:px + pw] = colorsys.hsv_to_rgb(
                float(rng.random()),
                0.45 + 0.15 * float(rng.random()),
                0.22 + 0.13 * float(rng.random()),
            )
    return np.rint(img * 255.0).astype(np.uint8)


class ToyOracle:
    """Classifies crops by palette nearest-neighbor (appearance) and by
    silhouette matching (structure pose). Exact on clean rendered crops."""

    # max RGB distance (unit scale) for a pixel to vote for a palette color
    VOTE_RADIUS = 0.18
    # min channel spread marking a pixel as (saturated) foreground
    FOREGROUND_SPREAD = 0.25

    def __init__(self, spec: ToySpec, palettes: np.ndarray):
        self.spec = spec
        self.palettes = palettes  # (M, parts, 3) uint8, labeled identities only
        self._mask_cache: dict[tuple[int, int], np.ndarray] = {}

    @property
    def n_identities(self) -> int:
        return self.palettes.shape[0]

    def appearance_vector(self, identity: int) -> np.ndarray:
        """Flat palette colors of one identity, unit scale, shape (parts*3,)."""
        return (self.palettes[identity - 1].astype(np.float64) / 255.0).reshape(-1)

    def classify_appearance(self, pixels: np.ndarray) -> int:
        """Identity in [1, M] whose palette collects the most pixel votes."""
        flat = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
        part_colors = self.palettes.reshape(-1, 3).astype(np.float64) / 255.0
        d2 = ((flat[:, None, :] - part_colors[None, :, :]) ** 2).sum(axis=2)
        nearest = d2.argmin(axis=1)
        voting = d2[np.arange(len(flat)), nearest] < self.VOTE_RADIUS**2
        n_parts = self.palettes.shape[1]
        votes = np.bincount(
            nearest[voting] // n_parts, minlength=self.n_identities
        )
        return int(votes.argmax()) + 1

    def foreground_mask(self, pixels: np.ndarray) -> np.ndarray:
        arr = np.asarray(pixels, dtype=np.float64)
        return (arr.max(axis=2) - arr.min(axis=2)) > self.FOREGROUND_SPREAD

    def pose_mask(self, pose: int, h: int, w: int) -> np.ndarray:
        key = (pose, h * 100000 + w)
        if key not in self._mask_cache:
            canvas = np.zeros((h, w, 3), dtype=np.uint8)
            flat_palette = np.full((self.spec.appearance_parts, 3), 255, dtype=np.uint8)
            _render_person(canvas, 0, 0, w, h, flat_palette, pose, self.spec.n_poses)
            self._mask_cache[key] = canvas[:, :, 0] > 0
        return self._mask_cache[key]

    def classify_structure(self, pixels: np.ndarray) -> int:
        """Pose index in [0, n_poses) by silhouette IoU against reference layouts."""
        mask = self.foreground_mask(pixels)
        h, w = mask.shape
        best, best_iou = 0, -1.0
        for pose in range(self.spec.n_poses):
            ref = self.pose_mask(pose, h, w)
            inter = np.logical_and(mask, ref).sum()
            union = np.logical_or(mask, ref).sum()
            score = inter / union if union else 0.0
            if score > best_iou:
                best, best_iou = pose, score
        return best


def generate_toy_dataset(
    spec: ToySpec,
    pose_map: Optional[dict[int, tuple[int, ...]]] = None,
    frame_seed: Optional[int] = None,
) -> tuple[list[AnnotatedFrame], SearchProtocol, ToyOracle]:
    """Render the dataset described by `spec`. Deterministic in `spec.seed`.

    `pose_map` restricts each labeled identity to a subset of poses (used to
    build train/eval splits with disjoint pose coverage); `frame_seed`
    reseeds scene layout independently of the palettes, so two datasets can
    share identities while differing in frames.
    """
    rng = np.random.default_rng(spec.seed)
    m = spec.n_identities
    if pose_map is not None:
        for identity, poses in pose_map.items():
            if not (1 <= identity <= m):
                raise ValueError(f"pose_map identity {identity} outside [1, {m}]")
            if not poses or any(not (0 <= p < spec.n_poses) for p in poses):
                raise ValueError(f"pose_map poses for identity {identity} invalid")
    # reserve extra palette slots for unlabeled persons so their colors never
    # collide with labeled identities
    n_unlabeled_slots = max(spec.unlabeled_per_frame * 2, 1) if spec.unlabeled_per_frame else 0
    palettes = _make_palettes(m, n_unlabeled_slots, spec.appearance_parts, rng)
    oracle = ToyOracle(spec, palettes[:m])
    if frame_seed is not None:
        rng = np.random.default_rng(frame_seed)

    per_frame = spec.persons_per_frame + spec.unlabeled_per_frame
    if per_frame * spec.person_h * spec.person_w > 0.6 * spec.frame_h * spec.frame_w:
        raise PlacementError(
            f"{per_frame} persons of {spec.person_h}x{spec.person_w} exceed "
            f"frame capacity at {spec.frame_h}x{spec.frame_w}"
        )

    frames: list[AnnotatedFrame] = []
    id_frames: dict[int, list[str]] = {i: [] for i in range(1, m + 1)}
    slot = 0
    for f in range(spec.n_frames):
        frame_id = f"frame_{f:04d}"
        canvas = _render_background(
            spec.frame_h, spec.frame_w, rng, clutter=spec.background_clutter
        )
        placed: list[tuple[int, int, int, int]] = []
        gt: list[tuple[BoundingBox, IdentityLabel]] = []
        for s in range(per_frame):
            if s < spec.persons_per_frame:
                identity: IdentityLabel = (slot % m) + 1
                palette = palettes[slot % m]
                slot += 1
            else:
                identity = UNLABELED
                palette = palettes[m + int(rng.integers(n_unlabeled_slots))]
            scale = 0.8 + 0.2 * rng.random()
            h = max(int(round(spec.person_h * scale)), 8)
            w = max(int(round(spec.person_w * scale)), 4)
            if pose_map is not None and is_labeled(identity) and identity in pose_map:
                allowed = pose_map[identity]
                pose = int(allowed[int(rng.integers(len(allowed)))])
            else:
                pose = int(rng.integers(spec.n_poses))
            for attempt in range(200):
                x = int(rng.integers(1, spec.frame_w - w - 1))
                y = int(rng.integers(1, spec.frame_h - h - 1))
                if all(
                    x + w <= ox or ox + ow <= x or y + h <= oy or oy + oh <= y
                    for ox, oy, ow, oh in placed
                ):
                    break
            else:
                raise PlacementError(
                    f"could not place person {s} in frame {frame_id} without overlap"
                )
            placed.append((x, y, w, h))
            _render_person(canvas, x, y, w, h, palette, pose, spec.n_poses)
            gt.append((BoundingBox(float(x), float(y), float(x + w), float(y + h)), identity))
            if is_labeled(identity):
                if not id_frames[identity] or id_frames[identity][-1] != frame_id:
                    id_frames[identity].append(frame_id)
        frames.append(
            AnnotatedFrame(
                scene=SceneImage(
                    pixels=canvas.astype(np.float32) / 255.0, frame_id=frame_id
                ),
                ground_truth=gt,
            )
        )

    protocol = _build_protocol(spec, frames, id_frames, rng)
    return frames, protocol, oracle


def _build_protocol(
    spec: ToySpec,
    frames: list[AnnotatedFrame],
    id_frames: dict[int, list[str]],
    rng: np.random.Generator,
) -> SearchProtocol:
    frame_ids = [f.frame_id for f in frames]
    gt_lookup = {f.frame_id: f for f in frames}
    queries: list[Query] = []
    for q in range(spec.n_queries):
        identity = (q % spec.n_identities) + 1
        appearances = id_frames[identity]
        if len(appearances) < 2:
            raise PlacementError(
                f"identity {identity} appears in fewer than 2 frames; "
                "increase n_frames or persons_per_frame"
            )
        query_frame = appearances[int(rng.integers(len(appearances)))]
        box = next(
            b for b, lab in gt_lookup[query_frame].ground_truth if lab == identity
        )
        match_pool = [fid for fid in appearances if fid != query_frame]
        guaranteed = match_pool[int(rng.integers(len(match_pool)))]
        others = [fid for fid in frame_ids if fid not in (query_frame, guaranteed)]
        fill = rng.choice(len(others), size=spec.gallery_size - 1, replace=False)
        gallery = [guaranteed] + [others[i] for i in fill]
        gallery = [gallery[i] for i in rng.permutation(len(gallery))]
        queries.append(Query(frame_id=query_frame, identity=identity, box=box, gallery=gallery))
    return SearchProtocol(queries=queries, gallery_size=spec.gallery_size)
