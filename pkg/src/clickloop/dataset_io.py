"""Dataset ingestion and serialization.

Two on-disk layouts are supported:
  * COCO keypoint JSON (interchange format, pixel-space coordinates)
  * the internal JSONL layout (one image per line, normalized coordinates,
    pixel buffers as PNG files referenced by image_id)

The JSONL layout round-trips bit-exactly; COCO round-trips exactly for
power-of-two image dims and within float precision otherwise.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .core import (
    BUNDLED_SKELETONS,
    BoundingBox,
    Dataset,
    ImageRecord,
    PersonInstance,
    Pose,
    Skeleton,
    Visibility,
)

__all__ = [
    "CocoParseError",
    "CocoSchemaError",
    "load_coco_keypoints",
    "save_coco_keypoints",
    "build_coco_dict",
    "write_jsonl_dataset",
    "load_jsonl_dataset",
]


class CocoParseError(ValueError):
    """Malformed JSON; carries the byte offset of the failure."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(message)
        self.byte_offset = byte_offset


class CocoSchemaError(ValueError):
    """Structurally valid JSON that violates the COCO keypoint schema."""

    def __init__(self, message: str, annotation_id=None):
        super().__init__(message)
        self.annotation_id = annotation_id


# ---------------------------------------------------------------------------
# COCO keypoint JSON
# ---------------------------------------------------------------------------

def load_coco_keypoints(
    path: str | Path,
    skeleton: Skeleton,
    images_dir: str | Path | None = None,
    require_pixels: bool = False,
) -> Dataset:
    """Load a COCO keypoint annotation file into a Dataset.

    Pixel-space coordinates are normalized to [0,1]; the visibility triplet
    third value maps 0/1/2 onto the Visibility enum. Image files are read
    from images_dir (default: the JSON's directory); a missing file yields a
    zero pixel buffer unless require_pixels is set.

    Raises:
        CocoParseError: the file is not valid JSON (includes byte offset).
        CocoSchemaError: an annotation violates the schema (includes its id).
    """
    path = Path(path)
    raw = path.read_bytes()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CocoParseError(
            f"{path}: malformed JSON at byte {exc.pos}: {exc.msg}", byte_offset=exc.pos
        ) from exc

    if not isinstance(doc, dict) or "images" not in doc or "annotations" not in doc:
        raise CocoSchemaError(f"{path}: missing top-level 'images'/'annotations'")

    images_meta: dict = {}
    for img in doc["images"]:
        try:
            images_meta[img["id"]] = (int(img["width"]), int(img["height"]), img.get("file_name"))
        except (KeyError, TypeError) as exc:
            raise CocoSchemaError(f"{path}: image entry missing id/width/height: {img!r}") from exc

    k = skeleton.n_keypoints
    persons_by_image: dict = {image_id: [] for image_id in images_meta}
    for ann in doc["annotations"]:
        ann_id = ann.get("id")
        image_id = ann.get("image_id")
        if image_id not in images_meta:
            raise CocoSchemaError(
                f"annotation {ann_id!r} references unknown image {image_id!r}",
                annotation_id=ann_id,
            )
        width, height, _ = images_meta[image_id]
        kps = ann.get("keypoints")
        if not isinstance(kps, list) or len(kps) != 3 * k:
            got = len(kps) if isinstance(kps, list) else type(kps).__name__
            raise CocoSchemaError(
                f"annotation {ann_id!r}: expected {3 * k} keypoint values, got {got}",
                annotation_id=ann_id,
            )
        triplets = np.asarray(kps, dtype=np.float64).reshape(k, 3)
        vis = triplets[:, 2].astype(np.int64)
        if not np.all(np.isin(vis, (0, 1, 2))):
            raise CocoSchemaError(
                f"annotation {ann_id!r}: visibility values must be 0/1/2",
                annotation_id=ann_id,
            )
        coords = triplets[:, :2] / np.array([width, height], dtype=np.float64)
        labeled = vis != int(Visibility.NOT_LABELED)
        coords[labeled] = np.clip(coords[labeled], 0.0, 1.0)
        coords[~labeled] = 0.0

        bbox = ann.get("bbox")
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise CocoSchemaError(
                f"annotation {ann_id!r}: missing or malformed bbox", annotation_id=ann_id
            )
        bx, by, bw, bh = (float(v) for v in bbox)
        box = BoundingBox.clipped(
            cx=(bx + bw / 2.0) / width,
            cy=(by + bh / 2.0) / height,
            w=bw / width,
            h=bh / height,
        )
        persons_by_image[image_id].append(
            PersonInstance(
                box=box,
                pose=Pose(coords=coords, visibility=vis),
                instance_id=ann_id,
            )
        )

    base_dir = Path(images_dir) if images_dir is not None else path.parent
    records = []
    for image_id in sorted(images_meta, key=str):
        width, height, file_name = images_meta[image_id]
        pixels = None
        if file_name:
            img_path = base_dir / file_name
            if img_path.exists():
                with Image.open(img_path) as im:
                    pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
        if pixels is None:
            if require_pixels:
                raise FileNotFoundError(f"image file for id {image_id!r} not found under {base_dir}")
            pixels = np.zeros((height, width, 3), dtype=np.uint8)
        records.append(
            ImageRecord(
                image_id=image_id,
                pixels=pixels,
                persons=tuple(persons_by_image[image_id]),
            )
        )
    return Dataset(images=tuple(records), skeleton=skeleton)


def build_coco_dict(
    images: Sequence[tuple[object, int, int, str]],
    annotations: Sequence[tuple[object, object, Pose, BoundingBox]],
    skeleton: Skeleton,
) -> dict:
    """Assemble a COCO keypoint document.

    Args:
        images: (image_id, width, height, file_name) per image.
        annotations: (annotation_id, image_id, pose, box) per person.
        skeleton: drives the category entry and keypoint count.
    """
    dims = {image_id: (w, h) for image_id, w, h, _ in images}
    ann_entries = []
    for ann_id, image_id, pose, box in annotations:
        width, height = dims[image_id]
        flat: list[float] = []
        for (x, y), v in zip(pose.coords, pose.visibility):
            if v == int(Visibility.NOT_LABELED):
                flat.extend((0.0, 0.0, 0))
            else:
                flat.extend((float(x * width), float(y * height), int(v)))
        bw = box.w * width
        bh = box.h * height
        ann_entries.append(
            {
                "id": ann_id,
                "image_id": image_id,
                "category_id": 1,
                "keypoints": flat,
                "num_keypoints": pose.n_labeled,
                "bbox": [float(box.x1 * width), float(box.y1 * height), float(bw), float(bh)],
                "area": float(bw * bh),
                "iscrowd": 0,
            }
        )
    return {
        "images": [
            {"id": image_id, "width": w, "height": h, "file_name": name}
            for image_id, w, h, name in images
        ],
        "annotations": ann_entries,
        "categories": [
            {
                "id": 1,
                "name": "person",
                "supercategory": "person",
                "keypoints": list(skeleton.keypoint_names),
                "skeleton": [[a + 1, b + 1] for a, b in skeleton.limb_edges],
            }
        ],
    }


def save_coco_keypoints(dataset: Dataset, path: str | Path) -> Path:
    """Serialize a Dataset to COCO keypoint JSON (annotations only, no pixels)."""
    path = Path(path)
    images = [
        (rec.image_id, rec.dims[0], rec.dims[1], f"{rec.image_id}.png") for rec in dataset
    ]
    annotations = []
    fallback_id = 1
    for rec in dataset:
        for person in rec.persons:
            ann_id = person.instance_id if isinstance(person.instance_id, int) else fallback_id
            annotations.append((ann_id, rec.image_id, person.pose, person.box))
            fallback_id += 1
    doc = build_coco_dict(images, annotations, dataset.skeleton)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))
    return path


# ---------------------------------------------------------------------------
# Internal JSONL layout
# ---------------------------------------------------------------------------

def write_jsonl_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write annotations.jsonl + one PNG per image + meta.json under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in dataset:
        Image.fromarray(np.asarray(rec.pixels)).save(out_dir / f"{rec.image_id}.png")
        persons = [
            {
                "box": [p.box.cx, p.box.cy, p.box.w, p.box.h],
                "pose": [
                    [float(x), float(y), int(v)]
                    for (x, y), v in zip(p.pose.coords, p.pose.visibility)
                ],
                "id": p.instance_id,
            }
            for p in rec.persons
        ]
        lines.append(json.dumps({"image_id": rec.image_id, "persons": persons}))
    (out_dir / "annotations.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    skel = dataset.skeleton
    meta = {"skeleton": skel.name}
    if skel.name not in BUNDLED_SKELETONS:
        meta["skeleton_spec"] = {
            "keypoint_names": list(skel.keypoint_names),
            "flip_pairs": [list(p) for p in skel.flip_pairs],
            "oks_sigmas": list(skel.oks_sigmas),
            "limb_edges": [list(e) for e in skel.limb_edges],
        }
    (out_dir / "meta.json").write_text(json.dumps(meta))
    return out_dir


def load_jsonl_dataset(data_dir: str | Path, skeleton: Skeleton | None = None) -> Dataset:
    """Load a dataset written by write_jsonl_dataset.

    The skeleton comes from meta.json unless explicitly passed.
    """
    data_dir = Path(data_dir)
    if skeleton is None:
        meta = json.loads((data_dir / "meta.json").read_text())
        name = meta["skeleton"]
        if name in BUNDLED_SKELETONS:
            skeleton = BUNDLED_SKELETONS[name]
        else:
            spec = meta["skeleton_spec"]
            skeleton = Skeleton(
                name=name,
                keypoint_names=tuple(spec["keypoint_names"]),
                flip_pairs=tuple(tuple(p) for p in spec["flip_pairs"]),
                oks_sigmas=tuple(spec["oks_sigmas"]),
                limb_edges=tuple(tuple(e) for e in spec["limb_edges"]),
            )

    records = []
    jsonl_path = data_dir / "annotations.jsonl"
    for line_no, line in enumerate(jsonl_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CocoParseError(
                f"{jsonl_path}:{line_no}: malformed JSON at byte {exc.pos}", byte_offset=exc.pos
            ) from exc
        image_id = entry["image_id"]
        with Image.open(data_dir / f"{image_id}.png") as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
        persons = []
        for p in entry["persons"]:
            pose_arr = np.asarray(p["pose"], dtype=np.float64)
            persons.append(
                PersonInstance(
                    box=BoundingBox(*p["box"]),
                    pose=Pose(coords=pose_arr[:, :2], visibility=pose_arr[:, 2].astype(np.int64)),
                    instance_id=p["id"],
                )
            )
        records.append(ImageRecord(image_id=image_id, pixels=pixels, persons=tuple(persons)))
    return Dataset(images=tuple(records), skeleton=skeleton)
