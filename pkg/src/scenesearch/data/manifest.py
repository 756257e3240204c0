"""Dataset manifest ingestion and serialization.

One JSON manifest describes frames (with PNG images on disk) plus the search
protocol. The toy generator emits the same format, so real and synthetic
datasets share this code path.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from ..core import UNLABELED, BoundingBox, GeometryError, IdentityLabel, iou, is_labeled


class IngestionError(ValueError):
    """Manifest or image files could not be read."""


class ValidationError(ValueError):
    """Manifest content violates a dataset invariant."""


@dataclass
class SceneImage:
    """Whole scene frame, float pixels in [0, 1]."""

    pixels: np.ndarray  # (H, W, 3) float32
    frame_id: str
    camera_id: Optional[str] = None


@dataclass
class AnnotatedFrame:
    scene: SceneImage
    ground_truth: list[tuple[BoundingBox, IdentityLabel]]

    @property
    def frame_id(self) -> str:
        return self.scene.frame_id


@dataclass
class Query:
    frame_id: str
    identity: int
    box: BoundingBox
    gallery: list[str]


@dataclass
class SearchProtocol:
    queries: list[Query]
    gallery_size: int


def _parse_box(raw: dict, where: str) -> BoundingBox:
    try:
        return BoundingBox(
            float(raw["x1"]), float(raw["y1"]), float(raw["x2"]), float(raw["y2"])
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{where}: malformed box {raw!r}") from exc
    except GeometryError as exc:
        raise ValidationError(f"{where}: {exc}") from exc


def load_annotations(path: str | Path) -> tuple[list[AnnotatedFrame], SearchProtocol]:
    """Load a dataset manifest; labeled identities are re-indexed to [1, M]."""
    manifest_path = Path(path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    if not manifest_path.is_file():
        raise IngestionError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    with open(manifest_path) as fh:
        doc = json.load(fh)

    raw_ids: set[int] = set()
    for fr in doc.get("frames", []):
        for b in fr.get("boxes", []):
            ident = b.get("identity")
            if ident is not None:
                raw_ids.add(int(ident))
    remap = {orig: i + 1 for i, orig in enumerate(sorted(raw_ids))}

    frames: list[AnnotatedFrame] = []
    for fr in doc.get("frames", []):
        frame_id = str(fr["id"])
        image_path = root / fr["image"]
        if not image_path.is_file():
            raise IngestionError(f"frame {frame_id}: missing image file {image_path}")
        with Image.open(image_path) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        gt: list[tuple[BoundingBox, IdentityLabel]] = []
        for b in fr.get("boxes", []):
            box = _parse_box(b, f"frame {frame_id}")
            ident = b.get("identity")
            label: IdentityLabel = UNLABELED if ident is None else remap[int(ident)]
            gt.append((box, label))
        for i in range(len(gt)):
            for j in range(i + 1, len(gt)):
                if (
                    is_labeled(gt[i][1])
                    and gt[i][1] == gt[j][1]
                    and iou(gt[i][0], gt[j][0]) > 0.0
                ):
                    raise ValidationError(
                        f"frame {frame_id}: identity {gt[i][1]} appears in two overlapping boxes"
                    )
        frames.append(
            AnnotatedFrame(
                scene=SceneImage(pixels=pixels, frame_id=frame_id,
                                 camera_id=fr.get("camera")),
                ground_truth=gt,
            )
        )

    frame_ids = {f.frame_id for f in frames}
    gt_by_frame = {
        f.frame_id: {lab for _, lab in f.ground_truth if is_labeled(lab)} for f in frames
    }
    queries: list[Query] = []
    gallery_size: Optional[int] = None
    for q in doc.get("queries", []):
        ident = remap.get(int(q["identity"]))
        if ident is None:
            raise ValidationError(f"query identity {q['identity']} not in any frame")
        gallery = [str(g) for g in q["gallery"]]
        unknown = [g for g in gallery if g not in frame_ids]
        if unknown:
            raise ValidationError(f"query gallery names unknown frames {unknown}")
        if not any(ident in gt_by_frame[g] for g in gallery):
            raise ValidationError(
                f"query identity {ident} absent from its gallery's ground truth"
            )
        if gallery_size is None:
            gallery_size = len(gallery)
        elif len(gallery) != gallery_size:
            raise ValidationError("inconsistent gallery sizes across queries")
        queries.append(
            Query(
                frame_id=str(q["frame"]),
                identity=ident,
                box=_parse_box(q["box"], "query"),
                gallery=gallery,
            )
        )

    protocol = SearchProtocol(queries=queries, gallery_size=gallery_size or 0)
    return frames, protocol


def save_annotations(
    frames: list[AnnotatedFrame],
    protocol: SearchProtocol,
    out_dir: str | Path,
    force: bool = False,
) -> Path:
    """Write manifest.json plus 8-bit PNG images under out_dir; returns manifest path."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise IngestionError(f"output directory {out} is not empty (use force)")
    (out / "images").mkdir(parents=True, exist_ok=True)

    frame_docs = []
    for frame in frames:
        rel = f"images/{frame.frame_id}.png"
        arr = np.clip(np.rint(frame.scene.pixels * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(out / rel)
        boxes = []
        for box, label in frame.ground_truth:
            boxes.append(
                {
                    "x1": box.x1, "y1": box.y1, "x2": box.x2, "y2": box.y2,
                    "identity": label if is_labeled(label) else None,
                }
            )
        doc = {"id": frame.frame_id, "image": rel, "boxes": boxes}
        if frame.scene.camera_id is not None:
            doc["camera"] = frame.scene.camera_id
        frame_docs.append(doc)

    query_docs = [
        {
            "frame": q.frame_id,
            "identity": q.identity,
            "box": {"x1": q.box.x1, "y1": q.box.y1, "x2": q.box.x2, "y2": q.box.y2},
            "gallery": list(q.gallery),
        }
        for q in protocol.queries
    ]

    manifest = out / "manifest.json"
    with open(manifest, "w") as fh:
        json.dump({"frames": frame_docs, "queries": query_docs}, fh, indent=1)
        fh.write("\n")
    return manifest
