"""Scene records: a synthetic-shapes generator and a COCO-like annotation loader.

Annotation layout (``annotations.json``)::

    {
      "categories":  [{"id": 1, "name": "circle"}, ...],
      "images":      [{"id": 7, "file_name": "000007.png", "width": 64, "height": 64,
                       "caption": "a circle left of a square"}, ...],
      "annotations": [{"image_id": 7, "category_id": 1, "bbox": [x, y, w, h],
                       "mask_file": "000007_0.png"}, ...]
    }

``bbox`` is in pixels, origin top-left. ``mask_file`` is an optional
full-image 8-bit mask; an image whose annotations lack masks yields a
record without masks or segmentation.
"""
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from PIL import Image
from pydantic import BaseModel, Field, ValidationError, model_validator

from layout_guidance.errors import MissingImageError, SchemaError
from layout_guidance.scene_graph import SceneGraph, Vocab, validate
from layout_guidance.sg2seg import MASK_SIZE, BBox, Layout, SegMap, warp_masks
from layout_guidance.shapes import DEFAULT_COLORS, DEFAULT_SHAPES, canonical_mask, class_palette

logger = logging.getLogger(__name__)

RELATIONS = ('left-of', 'above', 'inside', 'beside')
OFFSET_THRESHOLD = 0.1
DEFAULT_CLASS_SIZES = {'square': 24, 'circle': 20, 'triangle': 16, 'star': 12}

# slot centers by object count; 2 objects pick one of the two pairs
_PAIR_SLOTS = (((0.25, 0.5), (0.75, 0.5)), ((0.5, 0.25), (0.5, 0.75)))
_GRID_SLOTS = ((0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75))


class ShapesConfig(BaseModel):
    image_size: int = Field(default=64, ge=16, description="Square image side in pixels")
    classes: Tuple[str, ...] = Field(default=DEFAULT_SHAPES, description="Shape classes")
    colors: Dict[str, Tuple[float, float, float]] = Field(default_factory=lambda: dict(DEFAULT_COLORS))
    class_sizes: Dict[str, int] = Field(default_factory=lambda: dict(DEFAULT_CLASS_SIZES),
                                        description="Object side in pixels at a 64 px image")
    min_objects: int = Field(default=1, ge=1, le=4)
    max_objects: int = Field(default=4, ge=1, le=4)
    jitter: int = Field(default=2, ge=0, le=3, description="Max slot offset in pixels at a 64 px image")
    background: float = Field(default=0.5, ge=0, le=1, description="Gray level behind the shapes")
    offset_threshold: float = Field(default=OFFSET_THRESHOLD, gt=0)
    seed: int = Field(default=0)

    @model_validator(mode='after')
    def _check(self):
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects must not exceed max_objects")
        for name in self.classes:
            canonical_mask(name, 8)
        return self

    @property
    def vocab(self) -> Vocab:
        return Vocab(object_classes=tuple(self.classes), relationship_classes=RELATIONS)


@dataclass
class SceneRecord:
    """One image with its graph and ground-truth layout; image is H x W x 3 in [0, 1]"""

    image: torch.Tensor
    graph: SceneGraph
    vocab: Vocab
    boxes: List[BBox]
    caption: str
    masks: Optional[torch.Tensor] = None
    seg: Optional[SegMap] = None
    record_id: str = ""

    def __post_init__(self):
        n = self.graph.num_nodes
        if len(self.boxes) != n:
            raise ValueError(f"{len(self.boxes)} boxes for {n} graph nodes")
        if self.masks is not None and self.masks.shape[0] != n:
            raise ValueError(f"{self.masks.shape[0]} masks for {n} graph nodes")
        if self.image.dim() != 3 or self.image.shape[-1] != 3:
            raise ValueError(f"image must be H x W x 3, got {tuple(self.image.shape)}")
        if self.seg is not None and self.seg.size != tuple(self.image.shape[:2]):
            raise ValueError(f"seg size {self.seg.size} differs from image {tuple(self.image.shape[:2])}")
        problems = validate(self.graph, self.vocab)
        if problems:
            raise ValueError('; '.join(problems))

    @property
    def image_size(self) -> Tuple[int, int]:
        return tuple(self.image.shape[:2])

    def image_chw(self) -> torch.Tensor:
        return self.image.permute(2, 0, 1)

    def layout(self) -> Layout:
        return Layout(boxes=list(self.boxes), classes=list(self.graph.object_indices), vocab=self.vocab,
                      masks=self.masks, seg=self.seg, source="ground-truth")


def geometric_relations(boxes: Sequence[BBox], threshold: float = OFFSET_THRESHOLD) -> List[Tuple[int, str, int]]:
    """(subject, relation, object) for every ordered pair, derived from box geometry"""
    def directed(i, j):
        (cx_i, cy_i), (cx_j, cy_j) = boxes[i].center, boxes[j].center
        rels = []
        if cx_i <= cx_j - threshold:
            rels.append('left-of')
        if cy_i <= cy_j - threshold:
            rels.append('above')
        if boxes[j].contains(boxes[i]):
            rels.append('inside')
        return rels

    triples = []
    for i in range(len(boxes)):
        for j in range(len(boxes)):
            if i == j:
                continue
            rels = directed(i, j)
            if not rels and not directed(j, i):
                rels = ['beside']
            triples.extend((i, rel, j) for rel in rels)
    return triples


def graph_from_boxes(classes: Sequence[int], boxes: Sequence[BBox], vocab: Vocab,
                     threshold: float = OFFSET_THRESHOLD) -> SceneGraph:
    edges = tuple((i, vocab.relation_index(rel), j) for i, rel, j in geometric_relations(boxes, threshold))
    return SceneGraph(nodes=tuple(enumerate(classes)), edges=edges)


def caption_for(graph: SceneGraph, vocab: Vocab) -> str:
    names = [vocab.object_classes[c] for c in graph.object_indices]
    if not graph.edges:
        return ' and '.join(f"a {name}" for name in names)
    parts = [f"a {names[s]} {vocab.relationship_classes[r].replace('-', ' ')} a {names[d]}"
             for s, r, d in graph.edges]
    return ', '.join(parts)


def paint_scene(boxes: Sequence[BBox], masks: torch.Tensor, classes: Sequence[int], colors: torch.Tensor,
                height: int, width: int, background: float = 0.5) -> Tuple[torch.Tensor, torch.Tensor]:
    """Draw back to front by node index; returns (H x W x 3 image, H x W labels)"""
    warped = warp_masks(boxes, masks.to(torch.float64), height, width)
    image = torch.full((height, width, 3), background, dtype=torch.float64)
    labels = torch.zeros((height, width), dtype=torch.long)
    for i in reversed(range(len(boxes))):
        region = warped[i] > 0.5
        image[region] = colors[classes[i] + 1]
        labels[region] = classes[i] + 1
    return image, labels


def _slot_centers(rng: np.random.Generator, count: int) -> List[Tuple[float, float]]:
    if count == 1:
        return [(0.5, 0.5)]
    if count == 2:
        return list(_PAIR_SLOTS[int(rng.integers(2))])
    order = rng.permutation(len(_GRID_SLOTS))[:count]
    return [_GRID_SLOTS[k] for k in order]


def _place_box(center: Tuple[float, float], side: int, jitter: int, size: int, rng) -> BBox:
    corners = []
    for c in center:
        mid = int(round(c * size)) + int(rng.integers(-jitter, jitter + 1))
        lo = min(max(mid - side // 2, 0), size - side)
        corners.append(lo)
    x0, y0 = corners
    return BBox.from_pixels(x0, y0, x0 + side, y0 + side, size, size)


def generate_shapes(config: ShapesConfig, count: int) -> List[SceneRecord]:
    """Deterministic synthetic scenes with exact masks, segmentation and geometric graphs"""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    vocab = config.vocab
    size = config.image_size
    scale = size / 64
    palette = class_palette(vocab.object_classes, config.colors)
    masks_by_class = [torch.from_numpy(canonical_mask(name).astype(np.float64)) for name in vocab.object_classes]
    rng = np.random.default_rng(config.seed)

    records = []
    for k in range(count):
        n = int(rng.integers(config.min_objects, config.max_objects + 1))
        classes = [int(c) for c in rng.integers(0, len(vocab.object_classes), size=n)]
        jitter = int(round(config.jitter * scale))
        boxes = []
        for center, cls_idx in zip(_slot_centers(rng, n), classes):
            side = max(2, int(round(config.class_sizes.get(vocab.object_classes[cls_idx], 16) * scale)))
            boxes.append(_place_box(center, side, jitter, size, rng))
        masks = torch.stack([masks_by_class[c] for c in classes])
        image, labels = paint_scene(boxes, masks, classes, palette, size, size, config.background)
        graph = graph_from_boxes(classes, boxes, vocab, config.offset_threshold)
        records.append(SceneRecord(
            image=image, graph=graph, vocab=vocab, boxes=boxes, caption=caption_for(graph, vocab),
            masks=masks, seg=SegMap(labels, len(vocab.object_classes) + 1), record_id=f"shapes-{config.seed}-{k:05d}",
        ))
    logger.info(f"Generated {count} synthetic scenes (seed {config.seed})")
    return records


# COCO-like annotation files

class _Category(BaseModel):
    id: int
    name: str


class _ImageEntry(BaseModel):
    id: int
    file_name: str
    width: int = Field(..., gt=0)
    height: int = Field(..., gt=0)
    caption: str = ""


class _Annotation(BaseModel):
    image_id: int
    category_id: int
    bbox: Tuple[float, float, float, float]
    mask_file: Optional[str] = None


class _AnnotationFile(BaseModel):
    categories: List[_Category]
    images: List[_ImageEntry]
    annotations: List[_Annotation] = []


def _field_path(loc) -> str:
    path = ''
    for part in loc:
        path += f'[{part}]' if isinstance(part, int) else ('.' if path else '') + str(part)
    return path or '<root>'


def _read_png(path: Path, mode: str) -> np.ndarray:
    if not path.exists():
        raise MissingImageError(f"Image not found: {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert(mode))


class CocoLikeLoader:
    """Streams SceneRecords from an annotation file, skipping records that break invariants"""

    def __init__(self, annotation_path, image_dir, offset_threshold: float = OFFSET_THRESHOLD):
        self.logger = logging.getLogger(__name__)
        self.annotation_path = Path(annotation_path)
        self.image_dir = Path(image_dir)
        self.offset_threshold = offset_threshold
        self.skipped: List[Tuple[int, str]] = []

    def _read_annotations(self) -> _AnnotationFile:
        try:
            with open(self.annotation_path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError:
            raise MissingImageError(f"Annotation file not found: {self.annotation_path}")
        except json.JSONDecodeError as e:
            raise SchemaError('<root>', f"not valid JSON: {e}", module="datasets")
        try:
            return _AnnotationFile.model_validate(data)
        except ValidationError as e:
            err = e.errors()[0]
            raise SchemaError(_field_path(err['loc']), err['msg'], module="datasets")

    def _skip(self, image_id: int, reason: str):
        self.skipped.append((image_id, reason))
        self.logger.warning(f"Skipping image {image_id}: {reason}")

    def __iter__(self) -> Iterator[SceneRecord]:
        doc = self._read_annotations()
        categories = {c.id: k for k, c in enumerate(doc.categories)}
        vocab = Vocab(object_classes=tuple(c.name for c in doc.categories), relationship_classes=RELATIONS)
        palette = class_palette(vocab.object_classes)
        by_image = defaultdict(list)
        for k, ann in enumerate(doc.annotations):
            if ann.category_id not in categories:
                raise SchemaError(f'annotations[{k}].category_id', f"unknown category {ann.category_id}",
                                  module="datasets")
            by_image[ann.image_id].append(ann)

        self.logger.info(f"Loading {len(doc.images)} images from {self.annotation_path}")
        for entry in doc.images:
            anns = by_image.get(entry.id, [])
            if not anns:
                self._skip(entry.id, "no annotations")
                continue
            record = self._build(entry, anns, categories, vocab, palette)
            if record is not None:
                yield record

    def _build(self, entry: _ImageEntry, anns, categories, vocab: Vocab, palette) -> Optional[SceneRecord]:
        W, H = entry.width, entry.height
        boxes = []
        for ann in anns:
            x, y, w, h = ann.bbox
            try:
                boxes.append(BBox(x / W, y / H, (x + w) / W, (y + h) / H))
            except ValueError as e:
                self._skip(entry.id, f"malformed box {list(ann.bbox)}: {e}")
                return None

        pixels = _read_png(self.image_dir / entry.file_name, 'RGB')
        if pixels.shape[:2] != (H, W):
            self._skip(entry.id, f"image is {pixels.shape[1]}x{pixels.shape[0]}, annotation says {W}x{H}")
            return None
        image = torch.from_numpy(pixels.astype(np.float64) / 255.0)
        classes = [categories[ann.category_id] for ann in anns]

        masks = seg = None
        if all(ann.mask_file for ann in anns):
            full = [_read_png(self.image_dir / ann.mask_file, 'L') > 127 for ann in anns]
            masks = torch.stack([self._crop_mask(m, ann.bbox) for m, ann in zip(full, anns)])
            labels = torch.zeros((H, W), dtype=torch.long)
            for i in reversed(range(len(anns))):
                labels[torch.from_numpy(full[i])] = classes[i] + 1
            seg = SegMap(labels, len(vocab.object_classes) + 1)

        graph = graph_from_boxes(classes, boxes, vocab, self.offset_threshold)
        caption = entry.caption or caption_for(graph, vocab)
        try:
            return SceneRecord(image=image, graph=graph, vocab=vocab, boxes=boxes, caption=caption,
                               masks=masks, seg=seg, record_id=str(entry.id))
        except ValueError as e:
            self._skip(entry.id, str(e))
            return None

    @staticmethod
    def _crop_mask(mask: np.ndarray, bbox) -> torch.Tensor:
        """Box-relative MASK_SIZE x MASK_SIZE crop, nearest-neighbour resampled"""
        x, y, w, h = bbox
        H, W = mask.shape
        r0, c0 = max(int(math.floor(y)), 0), max(int(math.floor(x)), 0)
        r1, c1 = min(max(int(math.ceil(y + h)), r0 + 1), H), min(max(int(math.ceil(x + w)), c0 + 1), W)
        crop = torch.from_numpy(mask[r0:r1, c0:c1].astype(np.float64))[None, None]
        return F.interpolate(crop, size=(MASK_SIZE, MASK_SIZE), mode='nearest')[0, 0]


def load_coco_like(annotation_path, image_dir, offset_threshold: float = OFFSET_THRESHOLD) -> Iterator[SceneRecord]:
    return iter(CocoLikeLoader(annotation_path, image_dir, offset_threshold))


def save_coco_like(records: Sequence[SceneRecord], out_dir) -> Path:
    """Write records as PNGs plus annotations.json in the layout above"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = records[0].vocab
    images, annotations = [], []
    for idx, record in enumerate(records):
        H, W = record.image_size
        file_name = f"{idx:06d}.png"
        pixels = (record.image.clamp(0, 1) * 255).round().to(torch.uint8).numpy()
        Image.fromarray(pixels, mode='RGB').save(out_dir / file_name)
        images.append({'id': idx, 'file_name': file_name, 'width': W, 'height': H, 'caption': record.caption})
        full = None
        if record.masks is not None:
            full = warp_masks(record.boxes, record.masks.to(torch.float64), H, W) > 0.5
        for node, (box, cls_idx) in enumerate(zip(record.boxes, record.graph.object_indices)):
            ann = {'image_id': idx, 'category_id': cls_idx + 1,
                   'bbox': [box.x0 * W, box.y0 * H, box.width * W, box.height * H]}
            if full is not None:
                mask_name = f"{idx:06d}_{node}.png"
                Image.fromarray(full[node].numpy().astype(np.uint8) * 255, mode='L').save(out_dir / mask_name)
                ann['mask_file'] = mask_name
            annotations.append(ann)
    doc = {
        'categories': [{'id': k + 1, 'name': name} for k, name in enumerate(vocab.object_classes)],
        'images': images,
        'annotations': annotations,
    }
    path = out_dir / 'annotations.json'
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(doc, f, indent=2)
    logger.info(f"Wrote {len(records)} records to {out_dir}")
    return path


def split_records(records: Sequence[SceneRecord], val_fraction: float = 0.2,
                  seed: int = 0) -> Tuple[List[SceneRecord], List[SceneRecord]]:
    """Seeded shuffle split into (train, validation)"""
    order = np.random.default_rng(seed).permutation(len(records))
    n_val = int(round(len(records) * val_fraction))
    val = [records[i] for i in sorted(order[:n_val])]
    train = [records[i] for i in sorted(order[n_val:])]
    return train, val


def write_manifest(path, splits: Dict[str, Sequence[str]], seed: int, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump({'seed': seed, 'splits': {k: list(v) for k, v in splits.items()}, **(extra or {})}, f, indent=2)
    return path


def load_manifest(path) -> dict:
    with open(path, 'r', encoding='utf-8') as f:
        manifest = json.load(f)
    if 'splits' not in manifest or 'seed' not in manifest:
        raise SchemaError('splits' if 'splits' not in manifest else 'seed', "missing field", module="datasets")
    return manifest


def describe_records(records: Sequence[SceneRecord]) -> pd.DataFrame:
    """Census of object classes and relations across records"""
    objects, relations = Counter(), Counter()
    for record in records:
        objects.update(record.vocab.object_classes[c] for c in record.graph.object_indices)
        relations.update(record.vocab.relationship_classes[r] for _, r, _ in record.graph.edges)
    rows = [{'kind': 'object', 'name': k, 'count': v} for k, v in sorted(objects.items())]
    rows += [{'kind': 'relation', 'name': k, 'count': v} for k, v in sorted(relations.items())]
    return pd.DataFrame(rows, columns=['kind', 'name', 'count'])


def records_to_images(records: Sequence[SceneRecord], size: int = 32) -> torch.Tensor:
    """N x 3 x size x size tensor, area-downsampled"""
    batch = torch.stack([r.image_chw() for r in records]).to(torch.float64)
    if batch.shape[-1] != size or batch.shape[-2] != size:
        batch = F.interpolate(batch, size=(size, size), mode='area')
    return batch
