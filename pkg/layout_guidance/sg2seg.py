"""Scene graph -> object embeddings, boxes, masks and a composed segmentation map.

The graph network follows the SG2Im triple convolution: each edge's
[subject, relation, object] vectors pass through an MLP, the subject and
object halves are averaged back onto their nodes, and every node also keeps
its own per-layer transform. The box head is two linear layers with ReLU;
the mask head is six cascaded upsample / batch norm / 3x3 conv / ReLU
blocks followed by a 1x1 conv and a sigmoid.
"""
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from pydantic import BaseModel, Field

from layout_guidance.checkpoints import load_checkpoint, save_checkpoint
from layout_guidance.embeddings import Embedder, EmbedderProfile, class_prompt_features
from layout_guidance.errors import (DatasetEmptyError, EmptyLayoutError, LengthMismatchError,
                                    NonFiniteLossError, SchemaError, ShapeError)
from layout_guidance.scene_graph import SceneGraph, Vocab
from layout_guidance.shapes import class_palette

logger = logging.getLogger(__name__)

MASK_SIZE = 64
MIN_BOX_SIDE = 1.0 / 64
MASK_EPS = 1e-6
MIN_CANVAS_SIDE = 64


@dataclass(frozen=True)
class BBox:
    """Normalized box, origin top-left, (x0, y0) the min corner"""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise ValueError(f"Invalid box ({self.x0}, {self.y0}, {self.x1}, {self.y1})")

    @classmethod
    def from_sequence(cls, values) -> "BBox":
        x0, y0, x1, y1 = (float(v) for v in values)
        return cls(x0, y0, x1, y1)

    @classmethod
    def from_pixels(cls, x0: int, y0: int, x1: int, y1: int, width: int, height: int) -> "BBox":
        return cls(x0 / width, y0 / height, x1 / width, y1 / height)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    def as_tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.tensor(self.as_tuple(), dtype=dtype)

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return ((self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2)

    def contains(self, other: "BBox") -> bool:
        return (self.x0 <= other.x0 and self.y0 <= other.y0
                and other.x1 <= self.x1 and other.y1 <= self.y1)


@dataclass(frozen=True)
class SegMap:
    """H x W class grid; 0 is background and object class k is stored as k + 1"""

    labels: torch.Tensor
    num_classes: int

    def __post_init__(self):
        if self.labels.dim() != 2:
            raise ShapeError(f"SegMap labels must be H x W, got {tuple(self.labels.shape)}", module="sg2seg")
        if self.labels.numel() and (int(self.labels.min()) < 0 or int(self.labels.max()) >= self.num_classes):
            raise ValueError(f"SegMap labels must lie in [0, {self.num_classes})")

    @property
    def size(self) -> Tuple[int, int]:
        return tuple(self.labels.shape)

    def one_hot(self, dtype=torch.float64) -> torch.Tensor:
        """num_classes x H x W real view"""
        return F.one_hot(self.labels.long(), self.num_classes).permute(2, 0, 1).to(dtype)

    def resize(self, height: int, width: int) -> "SegMap":
        resized = F.interpolate(self.labels[None, None].float(), size=(height, width), mode='nearest')
        return SegMap(resized[0, 0].long(), self.num_classes)


@dataclass
class Layout:
    """Per-object boxes and masks plus the composed map; one contract for predicted and
    ground-truth sources"""

    boxes: List[BBox]
    classes: List[int]
    vocab: Vocab
    masks: Optional[torch.Tensor] = None
    seg: Optional[SegMap] = None
    source: str = "ground-truth"
    extra: dict = field(default_factory=dict)

    @property
    def labels(self) -> List[str]:
        return [self.vocab.object_classes[c] for c in self.classes]

    def __len__(self) -> int:
        return len(self.boxes)


class SG2SEGModelConfig(BaseModel):
    node_feature_dim: int = Field(default=512, description="Input node feature width (embedder dimension)")
    embedding_dim: int = Field(default=128, description="Object embedding width d")
    gconv_hidden_dim: int = Field(default=512, description="Hidden width of the triple MLPs")
    gconv_num_layers: int = Field(default=5, ge=1, description="Rounds of message passing")
    box_hidden_dim: int = Field(default=512, description="Hidden width of the box MLP")
    mask_blocks: int = Field(default=6, description="Upsampling blocks; 6 gives 64x64 masks")


class SG2SEGTrainConfig(BaseModel):
    seed: int = Field(default=0, description="Seed for init and shuffling")
    epochs: int = Field(default=20, ge=1)
    batch_size: int = Field(default=32, ge=1)
    learning_rate: float = Field(default=1e-4, gt=0)
    box_weight: float = Field(default=1.0, ge=0)
    mask_weight: float = Field(default=1.0, ge=0)
    seg_weight: float = Field(default=1.0, ge=0)
    node_features: Literal["semantic", "random"] = Field(
        default="semantic", description="Templated prompt embeddings or class-free random vectors")
    seg_size: int = Field(default=64, ge=8, description="Resolution of the soft maps compared by L_seg")
    max_steps: Optional[int] = Field(default=None, description="Stop after this many optimizer steps")
    checkpoint_path: Optional[str] = Field(default=None, description="Where to save the trained model")


def build_mlp(dims: Sequence[int], final_nonlinearity: bool = True) -> nn.Sequential:
    layers = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2 or final_nonlinearity:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class GraphTripleConv(nn.Module):
    """One round of message passing over (subject, relation, object) triples"""

    def __init__(self, dim: int, hidden_dim: int):
        super().__init__()
        self.dim = dim
        self.hidden_dim = hidden_dim
        self.node_transform = nn.Sequential(nn.Linear(dim, dim), nn.ReLU())
        self.net1 = build_mlp([3 * dim, hidden_dim, 2 * hidden_dim + dim])
        self.net2 = build_mlp([hidden_dim, hidden_dim, dim])

    def forward(self, obj_vecs: torch.Tensor, pred_vecs: torch.Tensor, edges: torch.Tensor):
        """
        Inputs:
        - obj_vecs: (O, D) object vectors
        - pred_vecs: (T, D) relation vectors
        - edges: (T, 2) LongTensor of [subject, object] node indices
        """
        updated = self.node_transform(obj_vecs)
        if edges.numel() == 0:
            return updated, pred_vecs

        H, D = self.hidden_dim, self.dim
        s_idx, o_idx = edges[:, 0], edges[:, 1]
        triples = torch.cat([obj_vecs[s_idx], pred_vecs, obj_vecs[o_idx]], dim=1)
        new_t = self.net1(triples)
        new_s, new_p, new_o = new_t[:, :H], new_t[:, H:H + D], new_t[:, H + D:]

        num_objs = obj_vecs.size(0)
        pooled = obj_vecs.new_zeros(num_objs, H)
        pooled = pooled.index_add(0, s_idx, new_s).index_add(0, o_idx, new_o)
        ones = obj_vecs.new_ones(s_idx.size(0))
        counts = obj_vecs.new_zeros(num_objs).index_add(0, s_idx, ones).index_add(0, o_idx, ones)
        pooled = pooled / counts.clamp(min=1).unsqueeze(1)

        # isolated nodes get no message contribution
        messages = self.net2(pooled) * (counts > 0).to(pooled.dtype).unsqueeze(1)
        return updated + messages, new_p


class SceneGraphEncoder(nn.Module):

    def __init__(self, num_relations: int, config: SG2SEGModelConfig):
        super().__init__()
        dim = config.embedding_dim
        self.input_proj = nn.Linear(config.node_feature_dim, dim)
        self.rel_embeddings = nn.Embedding(num_relations, dim)
        self.gconvs = nn.ModuleList([
            GraphTripleConv(dim, config.gconv_hidden_dim) for _ in range(config.gconv_num_layers)
        ])

    def forward(self, node_features: torch.Tensor, edges: torch.Tensor, rel_idx: torch.Tensor) -> torch.Tensor:
        obj_vecs = self.input_proj(node_features)
        pred_vecs = self.rel_embeddings(rel_idx)
        for gconv in self.gconvs:
            obj_vecs, pred_vecs = gconv(obj_vecs, pred_vecs, edges)
        return obj_vecs


class MaskNet(nn.Module):

    def __init__(self, dim: int = 128, blocks: int = 6):
        super().__init__()
        self.dim = dim
        layers = []
        for _ in range(blocks):
            layers += [
                nn.Upsample(scale_factor=2, mode='nearest'),
                nn.BatchNorm2d(dim),
                nn.Conv2d(dim, dim, kernel_size=3, padding=1),
                nn.ReLU(),
            ]
        self.blocks = nn.Sequential(*layers)
        self.output = nn.Conv2d(dim, 1, kernel_size=1)

    def forward(self, obj_vecs: torch.Tensor) -> torch.Tensor:
        x = obj_vecs.view(obj_vecs.size(0), self.dim, 1, 1)
        x = self.output(self.blocks(x))
        return torch.sigmoid(x).clamp(MASK_EPS, 1 - MASK_EPS)


class SG2SEGModel(nn.Module):

    def __init__(self, num_relations: int, config: Optional[SG2SEGModelConfig] = None):
        super().__init__()
        self.config = config or SG2SEGModelConfig()
        self.num_relations = num_relations
        dim = self.config.embedding_dim
        self.gcn = SceneGraphEncoder(num_relations, self.config)
        self.box_net = build_mlp([dim, self.config.box_hidden_dim, 4], final_nonlinearity=False)
        self.mask_net = MaskNet(dim, self.config.mask_blocks)

    def forward(self, node_features, edges, rel_idx):
        obj_vecs = self.gcn(node_features, edges, rel_idx)
        raw_boxes = self.box_net(obj_vecs)
        return obj_vecs, raw_boxes, clamp_box(raw_boxes), self.mask_net(obj_vecs)


def build_model(num_relations: int, config: Optional[SG2SEGModelConfig] = None, seed: int = 0) -> SG2SEGModel:
    """Seeded construction that leaves the global RNG untouched"""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return SG2SEGModel(num_relations, config)


def graph_tensors(graph: SceneGraph) -> Tuple[torch.Tensor, torch.Tensor]:
    """(E, 2) edge endpoints and (E,) relation indices"""
    if graph.edges:
        edges = torch.tensor([[s, d] for s, _, d in graph.edges], dtype=torch.long)
        rels = torch.tensor([r for _, r, _ in graph.edges], dtype=torch.long)
    else:
        edges = torch.zeros((0, 2), dtype=torch.long)
        rels = torch.zeros((0,), dtype=torch.long)
    return edges, rels


def _model_dtype(model: nn.Module):
    return next(model.parameters()).dtype


def gcn_forward(model: SG2SEGModel, graph: SceneGraph, node_features: torch.Tensor) -> torch.Tensor:
    """n x d object embeddings for ``graph``"""
    expected = (graph.num_nodes, model.config.node_feature_dim)
    if tuple(node_features.shape) != expected:
        raise ShapeError(f"node_features must be {expected}, got {tuple(node_features.shape)}", module="sg2seg")
    edges, rels = graph_tensors(graph)
    return model.gcn(node_features.to(_model_dtype(model)), edges, rels)


def clamp_box(raw: torch.Tensor) -> torch.Tensor:
    """Sigmoid, corner ordering per axis and a 1/64 minimum side; (..., 4) -> (..., 4)"""
    squashed = torch.sigmoid(raw)
    xa, ya, xb, yb = squashed.unbind(-1)
    corners = []
    for a, b in ((xa, xb), (ya, yb)):
        lo, hi = torch.minimum(a, b), torch.maximum(a, b)
        side = torch.clamp(hi - lo, min=MIN_BOX_SIDE)
        center = (lo + hi) / 2
        lo = torch.minimum(torch.clamp(center - side / 2, min=0.0), 1.0 - side)
        hi = torch.clamp(lo + side, max=1.0)
        corners.append((lo, hi))
    (x0, x1), (y0, y1) = corners
    return torch.stack([x0, y0, x1, y1], dim=-1)


def predict_box_raw(model: SG2SEGModel, obj_vecs: torch.Tensor) -> torch.Tensor:
    if obj_vecs.dim() == 1:
        obj_vecs = obj_vecs.unsqueeze(0)
    if obj_vecs.shape[-1] != model.config.embedding_dim:
        raise ShapeError(f"Object embeddings must have width {model.config.embedding_dim}", module="sg2seg")
    return model.box_net(obj_vecs.to(_model_dtype(model)))


def predict_box(model: SG2SEGModel, obj_vecs: torch.Tensor) -> List[BBox]:
    """One BBox per embedding row"""
    with torch.no_grad():
        boxes = clamp_box(predict_box_raw(model, obj_vecs))
    return [BBox.from_sequence(row.tolist()) for row in boxes]


def predict_mask(model: SG2SEGModel, obj_vecs: torch.Tensor) -> torch.Tensor:
    """N x 1 x 64 x 64 soft masks strictly inside (0, 1)"""
    if obj_vecs.dim() == 1:
        obj_vecs = obj_vecs.unsqueeze(0)
    if obj_vecs.shape[-1] != model.config.embedding_dim:
        raise ShapeError(f"Object embeddings must have width {model.config.embedding_dim}", module="sg2seg")
    return model.mask_net(obj_vecs.to(_model_dtype(model)))


def _boxes_tensor(boxes, dtype) -> torch.Tensor:
    if isinstance(boxes, torch.Tensor):
        return boxes.to(dtype)
    return torch.stack([b.as_tensor(dtype) for b in boxes]) if len(boxes) else torch.zeros((0, 4), dtype=dtype)


def warp_masks(boxes, masks: torch.Tensor, height: int, width: int, hard_box: bool = True) -> torch.Tensor:
    """Bilinearly place each (M x M) mask into its box on an H x W canvas -> N x H x W.

    With ``hard_box`` pixels whose centers fall outside the box are exactly zero;
    otherwise the mask fades out through zero padding, which keeps the result
    differentiable with respect to the box coordinates.
    """
    if masks.dim() == 3:
        masks = masks.unsqueeze(1)
    boxes = _boxes_tensor(boxes, masks.dtype)
    n = masks.size(0)
    xs = (torch.arange(width, dtype=masks.dtype) + 0.5) / width
    ys = (torch.arange(height, dtype=masks.dtype) + 0.5) / height
    x0, y0, x1, y1 = boxes.unbind(-1)
    gx = (xs[None, :] - x0[:, None]) / (x1 - x0)[:, None]
    gy = (ys[None, :] - y0[:, None]) / (y1 - y0)[:, None]
    grid = torch.stack([
        (gx * 2 - 1)[:, None, :].expand(n, height, width),
        (gy * 2 - 1)[:, :, None].expand(n, height, width),
    ], dim=-1)
    warped = F.grid_sample(masks, grid, mode='bilinear',
                           padding_mode='border' if hard_box else 'zeros', align_corners=False)[:, 0]
    if hard_box:
        inside_x = (gx >= 0) & (gx < 1)
        inside_y = (gy >= 0) & (gy < 1)
        warped = warped * (inside_y[:, :, None] & inside_x[:, None, :]).to(warped.dtype)
    return warped


def compose_segmentation(boxes: Sequence[BBox], masks: torch.Tensor, classes: Sequence[int],
                         height: int, width: int, num_classes: Optional[int] = None) -> SegMap:
    """Per pixel, the class of the strongest warped mask when it exceeds 0.5, else background.

    ``classes`` are object class indices; the map stores them as index + 1.
    Ties go to the lower node index.
    """
    if len(boxes) == 0:
        raise EmptyLayoutError("compose_segmentation needs at least one object")
    if not (len(boxes) == len(classes) == masks.size(0)):
        raise LengthMismatchError(f"{len(boxes)} boxes, {masks.size(0)} masks, {len(classes)} classes")
    if height < MIN_CANVAS_SIDE or width < MIN_CANVAS_SIDE:
        raise ShapeError(f"Canvas must be at least {MIN_CANVAS_SIDE}x{MIN_CANVAS_SIDE}", module="sg2seg")
    if num_classes is None:
        num_classes = max(classes) + 2

    warped = warp_masks(boxes, masks.to(torch.float64), height, width)
    best, winner = warped.max(dim=0)
    labels = torch.tensor(list(classes), dtype=torch.long)[winner] + 1
    labels = torch.where(best > 0.5, labels, torch.zeros_like(labels))
    return SegMap(labels, num_classes)


def soft_layout(boxes: torch.Tensor, masks: torch.Tensor, classes: torch.Tensor,
                num_classes: int, height: int, width: int) -> torch.Tensor:
    """Differentiable num_classes x H x W soft map (channel 0 background) for L_seg"""
    warped = warp_masks(boxes, masks, height, width, hard_box=False)
    class_maps = warped.new_zeros(num_classes, height, width).index_add(0, classes + 1, warped)
    foreground = class_maps[1:].clamp(max=1.0)
    background = (1.0 - warped.sum(dim=0)).clamp(min=0.0)
    return torch.cat([background.unsqueeze(0), foreground], dim=0)


def _as_box_tensor(values, name: str) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values
    rows = [v.as_tuple() if isinstance(v, BBox) else tuple(v) for v in values]
    return torch.tensor(rows, dtype=torch.float64).reshape(-1, 4)


def loss_box(pred, gt) -> torch.Tensor:
    """Sum over objects of the L1 distance between the 4 coordinates"""
    pred, gt = _as_box_tensor(pred, 'pred'), _as_box_tensor(gt, 'gt')
    if pred.shape != gt.shape:
        raise LengthMismatchError(f"{pred.shape[0]} predicted boxes vs {gt.shape[0]} ground-truth boxes")
    return (pred - gt).abs().sum()


def loss_mask(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean binary cross entropy per object, summed over objects"""
    if pred.shape != gt.shape:
        raise ShapeError(f"Mask shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}", module="sg2seg")
    per_pixel = F.binary_cross_entropy(pred, gt.to(pred.dtype), reduction='none')
    return per_pixel.flatten(1).mean(dim=1).sum()


def loss_seg(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean L1 difference between soft or one-hot maps"""
    if pred.shape != gt.shape:
        raise ShapeError(f"Map shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}", module="sg2seg")
    return (pred - gt.to(pred.dtype)).abs().mean()


def mask_iou(pred: torch.Tensor, gt: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Per-object IoU of thresholded masks"""
    p = (pred > threshold).flatten(1)
    g = (gt > threshold).flatten(1)
    inter = (p & g).sum(dim=1).to(torch.float64)
    union = (p | g).sum(dim=1).to(torch.float64)
    return torch.where(union > 0, inter / union.clamp(min=1), torch.ones_like(union))


class NodeFeatureSource:
    """Node features for the graph network: templated prompt embeddings, or random
    unit vectors that carry no class information (the ablation baseline)"""

    def __init__(self, embedder: Embedder, vocab: Vocab, mode: str = "semantic", seed: int = 0):
        self.mode = mode
        self.seed = seed
        self.dimension = embedder.dimension
        self._class_features = class_prompt_features(embedder, vocab.object_classes).to(torch.float32)

    def for_graph(self, graph: SceneGraph, key: int = 0) -> torch.Tensor:
        if self.mode == "semantic":
            return self._class_features[graph.object_indices]
        generator = torch.Generator().manual_seed(self.seed * 1_000_003 + key)
        return F.normalize(torch.randn(graph.num_nodes, self.dimension, generator=generator), dim=-1)


@dataclass
class _Sample:
    graph: SceneGraph
    features: torch.Tensor
    boxes: torch.Tensor
    masks: Optional[torch.Tensor]
    seg: Optional[torch.Tensor]


@dataclass
class TrainResult:
    checkpoint_path: Optional[Path]
    metrics: pd.DataFrame


class SG2SEGTrainer:
    """Trains SG2SEG on SceneRecords with L_box + L_mask + L_seg"""

    def __init__(self, model: SG2SEGModel, vocab: Vocab, embedder: Embedder, config: SG2SEGTrainConfig):
        self.model = model
        self.vocab = vocab
        self.embedder = embedder
        self.config = config
        self.num_classes = len(vocab.object_classes) + 1
        self.features = NodeFeatureSource(embedder, vocab, config.node_features, config.seed)
        self.logger = logging.getLogger(__name__)

    def _prepare(self, records, offset: int) -> List[_Sample]:
        size = self.config.seg_size
        samples = []
        for k, record in enumerate(records):
            seg = None
            if record.seg is not None and record.masks is not None:
                seg = record.seg.resize(size, size).one_hot(torch.float32)
            samples.append(_Sample(
                graph=record.graph,
                features=self.features.for_graph(record.graph, key=offset + k),
                boxes=torch.tensor([b.as_tuple() for b in record.boxes], dtype=torch.float32),
                masks=None if record.masks is None else record.masks.to(torch.float32),
                seg=seg,
            ))
        return samples

    @staticmethod
    def _collate(samples: Sequence[_Sample]):
        features, edges, rels, spans = [], [], [], []
        offset = 0
        for sample in samples:
            e, r = graph_tensors(sample.graph)
            features.append(sample.features)
            edges.append(e + offset)
            rels.append(r)
            spans.append((offset, offset + sample.graph.num_nodes))
            offset += sample.graph.num_nodes
        return torch.cat(features), torch.cat(edges), torch.cat(rels), spans

    def _batch_losses(self, samples: Sequence[_Sample]):
        features, edges, rels, spans = self._collate(samples)
        _, _, boxes, masks = self.model(features, edges, rels)
        gt_boxes = torch.cat([s.boxes for s in samples])
        l_box = loss_box(boxes, gt_boxes)

        l_mask = boxes.new_zeros(())
        l_seg = boxes.new_zeros(())
        size = self.config.seg_size
        for sample, (start, end) in zip(samples, spans):
            if sample.masks is None:
                continue
            l_mask = l_mask + loss_mask(masks[start:end, 0], sample.masks)
            if sample.seg is not None:
                classes = torch.tensor(sample.graph.object_indices, dtype=torch.long)
                pred_seg = soft_layout(boxes[start:end], masks[start:end], classes,
                                       self.num_classes, size, size)
                l_seg = l_seg + loss_seg(pred_seg, sample.seg)

        n = len(samples)
        l_box, l_mask, l_seg = l_box / n, l_mask / n, l_seg / n
        total = (self.config.box_weight * l_box + self.config.mask_weight * l_mask
                 + self.config.seg_weight * l_seg)
        return total, l_box, l_mask, l_seg

    @torch.no_grad()
    def evaluate(self, samples: Sequence[_Sample]) -> dict:
        """Mean per-coordinate box L1 error and mean mask IoU"""
        was_training = self.model.training
        self.model.eval()
        errors, ious = [], []
        for start in range(0, len(samples), self.config.batch_size):
            chunk = samples[start:start + self.config.batch_size]
            features, edges, rels, spans = self._collate(chunk)
            _, _, boxes, masks = self.model(features, edges, rels)
            errors.append((boxes - torch.cat([s.boxes for s in chunk])).abs().flatten())
            for sample, (lo, hi) in zip(chunk, spans):
                if sample.masks is not None:
                    ious.append(mask_iou(masks[lo:hi, 0], sample.masks))
        self.model.train(was_training)
        return {
            'box_l1': float(torch.cat(errors).mean()) if errors else float('nan'),
            'mask_iou': float(torch.cat(ious).mean()) if ious else float('nan'),
        }

    def train(self, records, val_records=None) -> TrainResult:
        if not records:
            raise DatasetEmptyError("SG2SEG training needs at least one record")
        cfg = self.config
        self.logger.info(f"Training SG2SEG on {len(records)} records "
                         f"({cfg.node_features} node features, {cfg.epochs} epochs)")
        train_samples = self._prepare(records, offset=0)
        val_samples = self._prepare(val_records, offset=len(records)) if val_records else []

        generator = torch.Generator().manual_seed(cfg.seed)
        optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.learning_rate)
        rows = []
        step = 0
        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            self.model.train()
            order = torch.randperm(len(train_samples), generator=generator).tolist()
            sums = np.zeros(4)
            batches = 0
            for start in range(0, len(order), cfg.batch_size):
                batch = [train_samples[i] for i in order[start:start + cfg.batch_size]]
                total, l_box, l_mask, l_seg = self._batch_losses(batch)
                if not torch.isfinite(total):
                    raise NonFiniteLossError(
                        "SG2SEG loss is not finite",
                        diagnostics={'epoch': epoch, 'step': step, 'loss_box': float(l_box),
                                     'loss_mask': float(l_mask), 'loss_seg': float(l_seg)})
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                sums += [float(total), float(l_box), float(l_mask), float(l_seg)]
                batches += 1
                step += 1
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break

            train_metrics = self.evaluate(train_samples)
            row = {
                'epoch': epoch,
                'steps': step,
                'loss': sums[0] / batches,
                'loss_box': sums[1] / batches,
                'loss_mask': sums[2] / batches,
                'loss_seg': sums[3] / batches,
                'train_box_l1': train_metrics['box_l1'],
                'train_mask_iou': train_metrics['mask_iou'],
            }
            if val_samples:
                val_metrics = self.evaluate(val_samples)
                row['val_box_l1'] = val_metrics['box_l1']
                row['val_mask_iou'] = val_metrics['mask_iou']
            rows.append(row)
            self.logger.info(
                f"Epoch {epoch}: loss {row['loss']:.4f}, box L1 {row['train_box_l1']:.4f}, "
                f"mask IoU {row['train_mask_iou']:.3f}"
                + (f", val box L1 {row['val_box_l1']:.4f}, val mask IoU {row['val_mask_iou']:.3f}"
                   if val_samples else '')
                + f" ({time.perf_counter() - started:.1f}s)")
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break

        self.model.eval()
        checkpoint = None
        if cfg.checkpoint_path:
            checkpoint = save_sg2seg(cfg.checkpoint_path, self.model, self.vocab, self.embedder.profile, cfg)
        return TrainResult(checkpoint, pd.DataFrame(rows))

    def feature_source(self) -> NodeFeatureSource:
        return self.features


def train(model: SG2SEGModel, dataset, config: SG2SEGTrainConfig, vocab: Vocab,
          embedder: Embedder, val_dataset=None) -> TrainResult:
    return SG2SEGTrainer(model, vocab, embedder, config).train(list(dataset), val_dataset)


def save_sg2seg(path, model: SG2SEGModel, vocab: Vocab, profile: EmbedderProfile,
                train_config: Optional[SG2SEGTrainConfig] = None) -> Path:
    config = {
        'model': model.config.model_dump(),
        'vocab': {'objects': list(vocab.object_classes), 'relations': list(vocab.relationship_classes)},
        'embedder': profile.model_dump(),
        'train': train_config.model_dump() if train_config else None,
    }
    return save_checkpoint(path, 'sg2seg', config, model.state_dict())


def load_sg2seg(path) -> Tuple[SG2SEGModel, Vocab, EmbedderProfile, dict]:
    header, state = load_checkpoint(path, expected_kind='sg2seg')
    config = header['config']
    vocab = Vocab(object_classes=tuple(config['vocab']['objects']),
                  relationship_classes=tuple(config['vocab']['relations']))
    model = SG2SEGModel(len(vocab.relationship_classes), SG2SEGModelConfig(**config['model']))
    model.load_state_dict(state)
    model.eval()
    return model, vocab, EmbedderProfile(**config['embedder']), config.get('train') or {}


@torch.no_grad()
def predict_layout(model: SG2SEGModel, graph: SceneGraph, vocab: Vocab, embedder: Embedder,
                   image_size: int = 64, node_features: Optional[torch.Tensor] = None) -> Layout:
    """Graph -> predicted boxes, masks and composed segmentation"""
    model.eval()
    if node_features is None:
        node_features = NodeFeatureSource(embedder, vocab).for_graph(graph)
    obj_vecs = gcn_forward(model, graph, node_features)
    boxes = predict_box(model, obj_vecs)
    masks = predict_mask(model, obj_vecs)[:, 0].to(torch.float64)
    size = max(image_size, MIN_CANVAS_SIDE)
    seg = compose_segmentation(boxes, masks, graph.object_indices, size, size,
                               num_classes=len(vocab.object_classes) + 1)
    if size != image_size:
        seg = seg.resize(image_size, image_size)
    return Layout(boxes=boxes, classes=list(graph.object_indices), vocab=vocab,
                  masks=masks, seg=seg, source="predicted")


def save_seg_png(seg: SegMap, vocab: Vocab, path) -> Path:
    """Palette-indexed PNG; palette row k + 1 is the color of class k"""
    palette = class_palette(vocab.object_classes)
    flat = (palette * 255).round().to(torch.uint8).flatten().tolist()
    image = Image.fromarray(seg.labels.to(torch.uint8).numpy(), mode='P')
    image.putpalette(flat + [0] * (768 - len(flat)))
    image.save(path)
    return Path(path)


def save_layout_json(layout: Layout, path) -> Path:
    """Layout JSON plus 8-bit mask PNGs and the segmentation PNG next to it"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.stem
    objects = []
    for i, (box, cls_idx) in enumerate(zip(layout.boxes, layout.classes)):
        entry = {'node': i, 'class': layout.vocab.object_classes[cls_idx], 'box': list(box.as_tuple())}
        if layout.masks is not None:
            mask_name = f"{stem}_mask_{i:03d}.png"
            pixels = (layout.masks[i].clamp(0, 1) * 255).round().to(torch.uint8).numpy()
            Image.fromarray(pixels, mode='L').save(path.parent / mask_name)
            entry['mask'] = mask_name
        objects.append(entry)
    doc = {
        'source': layout.source,
        'vocab': {'objects': list(layout.vocab.object_classes),
                  'relations': list(layout.vocab.relationship_classes)},
        'objects': objects,
        'segmentation': None,
    }
    if layout.seg is not None:
        seg_name = f"{stem}_seg.png"
        save_seg_png(layout.seg, layout.vocab, path.parent / seg_name)
        doc['segmentation'] = seg_name
        doc['image_size'] = list(layout.seg.size)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(doc, f, indent=2)
    return path


def load_layout_json(path) -> Layout:
    path = Path(path)
    with open(path, 'r', encoding='utf-8') as f:
        doc = json.load(f)
    try:
        vocab = Vocab(object_classes=tuple(doc['vocab']['objects']),
                      relationship_classes=tuple(doc['vocab']['relations']))
        boxes, classes, masks = [], [], []
        for k, entry in enumerate(doc['objects']):
            try:
                boxes.append(BBox.from_sequence(entry['box']))
            except ValueError as e:
                raise SchemaError(f'objects[{k}].box', str(e), module='sg2seg')
            classes.append(vocab.object_index(entry['class']))
            if 'mask' in entry:
                pixels = np.asarray(Image.open(path.parent / entry['mask']).convert('L'), dtype=np.float64)
                masks.append(torch.from_numpy(pixels / 255.0))
    except KeyError as e:
        raise SchemaError(str(e.args[0]), "missing field", module='sg2seg')
    seg = None
    if doc.get('segmentation'):
        labels = np.asarray(Image.open(path.parent / doc['segmentation']), dtype=np.int64)
        seg = SegMap(torch.from_numpy(labels), len(vocab.object_classes) + 1)
    return Layout(boxes=boxes, classes=classes, vocab=vocab,
                  masks=torch.stack(masks) if len(masks) == len(boxes) and masks else None,
                  seg=seg, source=doc.get('source', 'ground-truth'))
