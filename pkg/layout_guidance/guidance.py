"""Layout guidance terms for the DDIM sampler.

Every term returns ``(score, gradient)`` where the gradient is the ascent
direction of the score with respect to the image estimate in [0, 1]. The
sampler adds ``alpha * posterior_variance * gradient``, so larger scores
are always the goal. Gradients are computed with autograd in float64.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator

from layout_guidance.diffusion import FirstStageAE, ae_code
from layout_guidance.embeddings import OBJ_PLACEHOLDER, Embedder
from layout_guidance.errors import (EmptyRoiError, LengthMismatchError, MissingInputError,
                                    NonDifferentiableEmbedderError, NonFiniteLossError)
from layout_guidance.sg2seg import BBox, Layout, SegMap
from layout_guidance.shapes import class_palette

logger = logging.getLogger(__name__)

PADDING_STREAM = 0
GAUSS_STREAM = 1


class GuidanceSpec(BaseModel):
    """Which terms run and how they are weighted"""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    enable_text: bool = Field(default=True, description="CLIP text guidance on the whole image")
    enable_box: bool = Field(default=True, description="Per-object guidance on noise-padded ROIs")
    enable_seg: bool = Field(default=True, description="Segmentation-map guidance through T(.)")
    lambda_: float = Field(default=1.2, ge=0, alias="lambda", description="Augmented box intensity")
    seg_scale: float = Field(default=0.5, ge=0, description="Multiplier of the segmentation term")
    alpha: float = Field(default=1.0, ge=0, description="Global guidance scale")
    noise_seed: int = Field(default=0, ge=0, description="Seed of the padding noise streams")
    augment_box: bool = Field(default=True, description="False selects vanilla box guidance")
    box_prompt_template: str = Field(default="A photo of a [obj]", description="Per-object prompt")

    @field_validator('box_prompt_template')
    @classmethod
    def _one_placeholder(cls, template: str) -> str:
        if template.count(OBJ_PLACEHOLDER) != 1:
            raise ValueError(f"template must contain exactly one {OBJ_PLACEHOLDER} placeholder")
        return template

    def box_prompt(self, label: str) -> str:
        return self.box_prompt_template.replace(OBJ_PLACEHOLDER, label)


@dataclass(frozen=True)
class RoiContext:
    """Objects the box term scores, each weighted by its share of total box area"""

    boxes: Tuple[BBox, ...]
    labels: Tuple[str, ...]
    image_size: Tuple[int, int]

    def __post_init__(self):
        if len(self.boxes) != len(self.labels):
            raise LengthMismatchError(f"{len(self.boxes)} boxes vs {len(self.labels)} labels", module="guidance")

    @classmethod
    def from_layout(cls, layout: Layout, image_size: Tuple[int, int]) -> "RoiContext":
        return cls(tuple(layout.boxes), tuple(layout.labels), tuple(image_size))

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def weights_exact(self) -> Tuple[Fraction, ...]:
        areas = [(Fraction(b.x1) - Fraction(b.x0)) * (Fraction(b.y1) - Fraction(b.y0)) for b in self.boxes]
        total = sum(areas)
        return tuple(a / total for a in areas)

    @property
    def weights(self) -> Tuple[float, ...]:
        return tuple(float(w) for w in self.weights_exact)


def box_interior_mask(box: BBox, height: int, width: int) -> torch.Tensor:
    """H x W bool: pixel centers inside [x0, x1) x [y0, y1)"""
    xs = (torch.arange(width, dtype=torch.float64) + 0.5) / width
    ys = (torch.arange(height, dtype=torch.float64) + 0.5) / height
    inside_x = (xs >= box.x0) & (xs < box.x1)
    inside_y = (ys >= box.y0) & (ys < box.y1)
    return inside_y[:, None] & inside_x[None, :]


def box_pixel_bounds(box: BBox, height: int, width: int) -> Tuple[int, int, int, int]:
    """(row0, row1, col0, col1) of the interior, at least one pixel"""
    c0 = min(max(math.ceil(box.x0 * width - 0.5), 0), width - 1)
    r0 = min(max(math.ceil(box.y0 * height - 0.5), 0), height - 1)
    c1 = max(min(math.ceil(box.x1 * width - 0.5), width), c0 + 1)
    r1 = max(min(math.ceil(box.y1 * height - 0.5), height), r0 + 1)
    return r0, r1, c0, c1


def _noise(shape, seed: int, step: int, index: int, stream: int) -> torch.Tensor:
    rng = np.random.default_rng(np.random.SeedSequence([seed, step, index, stream]))
    return torch.from_numpy(rng.standard_normal(tuple(shape)))


def noise_canvas(shape, seed: int, step: int = 0, index: int = 0, stream: int = PADDING_STREAM) -> torch.Tensor:
    """Gaussian noise mapped to image range: clamp(0.5 + 0.2 eps, 0, 1)"""
    return (0.5 + 0.2 * _noise(shape, seed, step, index, stream)).clamp(0.0, 1.0)


def pad_with_noise(image: torch.Tensor, box: BBox, seed: int, step: int = 0, object_index: int = 0) -> torch.Tensor:
    """Keep the box interior, replace everything else with constant seeded noise"""
    height, width = image.shape[-2:]
    exterior = noise_canvas(image.shape, seed, step, object_index).to(image.dtype)
    return torch.where(box_interior_mask(box, height, width), image, exterior)


def _require_differentiable(embedder: Embedder):
    if not embedder.profile.differentiable_image_path:
        raise NonDifferentiableEmbedderError(
            f"Embedder '{embedder.profile.name}' has no differentiable image path")


def _leaf(image: torch.Tensor) -> torch.Tensor:
    return image.detach().to(torch.float64).requires_grad_(True)


def text_guidance(embedder: Embedder, image: torch.Tensor, prompt: str) -> Tuple[float, torch.Tensor]:
    """Similarity of the whole image to ``prompt`` and its gradient"""
    _require_differentiable(embedder)
    x = _leaf(image)
    text = embedder.encode_text(prompt).detach().to(torch.float64)
    score = torch.dot(embedder.encode_image(x), text)
    grad, = torch.autograd.grad(score, x)
    return float(score), grad


def _box_scores(embedder: Embedder, image: torch.Tensor, rois: RoiContext, seed: int, step: int,
                template: str) -> torch.Tensor:
    padded = torch.stack([pad_with_noise(image, box, seed, step, k) for k, box in enumerate(rois.boxes)])
    texts = torch.stack([
        embedder.encode_text(template.replace(OBJ_PLACEHOLDER, label)) for label in rois.labels
    ]).detach().to(torch.float64)
    return (embedder.encode_image(padded) * texts).sum(dim=-1)


def box_object_scores(embedder: Embedder, image: torch.Tensor, rois: RoiContext, seed: int, step: int = 0,
                      template: str = "A photo of a [obj]") -> List[float]:
    """Per-object similarity of each noise-padded ROI to its own prompt"""
    if len(rois) == 0:
        raise EmptyRoiError("box guidance needs at least one ROI")
    with torch.no_grad():
        return _box_scores(embedder, image.to(torch.float64), rois, seed, step, template).tolist()


def box_guidance(embedder: Embedder, image: torch.Tensor, rois: RoiContext, seed: int, step: int = 0,
                 template: str = "A photo of a [obj]") -> Tuple[float, torch.Tensor]:
    """Area-weighted sum of per-object scores on noise-padded images"""
    if len(rois) == 0:
        raise EmptyRoiError("box guidance needs at least one ROI")
    _require_differentiable(embedder)
    x = _leaf(image)
    weights = torch.tensor(rois.weights, dtype=torch.float64)
    score = (weights * _box_scores(embedder, x, rois, seed, step, template)).sum()
    grad, = torch.autograd.grad(score, x)
    return float(score), grad


def gaussian_reference_guidance(embedder: Embedder, image: torch.Tensor, rois: RoiContext, seed: int,
                                step: int = 0, template: str = "A photo of a [obj]") -> Tuple[float, torch.Tensor]:
    """Box guidance evaluated on a pure noise image of the same size"""
    canvas = noise_canvas(image.shape, seed, step, 0, GAUSS_STREAM)
    return box_guidance(embedder, canvas, rois, seed, step, template)


def augmented_box_guidance(embedder: Embedder, image: torch.Tensor, rois: RoiContext, lambda_: float,
                           seed: int, step: int = 0, template: str = "A photo of a [obj]",
                           box_grad: Optional[torch.Tensor] = None) -> torch.Tensor:
    """lambda * (g_box - g_gauss) + g_gauss; lambda = 1 is vanilla box guidance.

    ``box_grad`` is a g_box already computed for the same image, seed and step.
    """
    if lambda_ < 0:
        raise ValueError(f"lambda must be >= 0, got {lambda_}")
    g_box = box_grad if box_grad is not None else box_guidance(embedder, image, rois, seed, step, template)[1]
    if lambda_ == 1.0:
        return g_box
    _, g_gauss = gaussian_reference_guidance(embedder, image, rois, seed, step, template)
    return lambda_ * (g_box - g_gauss) + g_gauss


def render_segmap(seg: SegMap, palette: torch.Tensor, size: Optional[Tuple[int, int]] = None) -> torch.Tensor:
    """3 x H x W image: each class painted with its palette color"""
    if size is not None and tuple(size) != seg.size:
        seg = seg.resize(*size)
    if palette.shape[0] < seg.num_classes:
        raise LengthMismatchError(f"palette has {palette.shape[0]} rows for {seg.num_classes} classes",
                                  module="guidance")
    return palette.to(torch.float64)[seg.labels.long()].permute(2, 0, 1)


def default_palette(num_classes: int) -> torch.Tensor:
    return class_palette([f"class-{k}" for k in range(num_classes - 1)])


def seg_guidance(ae: FirstStageAE, image: torch.Tensor, seg: SegMap,
                 palette: Optional[torch.Tensor] = None) -> Tuple[float, torch.Tensor]:
    """Similarity of the image code to the code of the rendered segmentation map"""
    palette = default_palette(seg.num_classes) if palette is None else palette
    target = render_segmap(seg, palette, tuple(image.shape[-2:]))
    with torch.no_grad():
        target_code = ae_code(ae, target).to(torch.float64)
    x = _leaf(image)
    score = torch.dot(ae_code(ae, x).to(torch.float64), target_code)
    grad, = torch.autograd.grad(score, x)
    return float(score), grad


@dataclass
class TermResult:
    score: float
    gradient: torch.Tensor

    @property
    def grad_norm(self) -> float:
        return float(self.gradient.norm())


@dataclass
class GuidanceEvaluation:
    gradient: torch.Tensor
    terms: Dict[str, TermResult] = field(default_factory=dict)


def evaluate_guidance(spec: GuidanceSpec, embedder: Optional[Embedder], ae: Optional[FirstStageAE],
                      image: torch.Tensor, prompt: Optional[str] = None, rois: Optional[RoiContext] = None,
                      seg: Optional[SegMap] = None, seed: Optional[int] = None, step: int = 0,
                      palette: Optional[torch.Tensor] = None) -> GuidanceEvaluation:
    """Every enabled term plus their combination g_text + g_box + seg_scale * g_seg"""
    seed = spec.noise_seed if seed is None else seed
    if spec.enable_text and (not prompt or not prompt.strip() or embedder is None):
        raise MissingInputError('text')
    if spec.enable_box and (rois is None or len(rois) == 0 or embedder is None):
        raise MissingInputError('box')
    if spec.enable_seg and (seg is None or ae is None):
        raise MissingInputError('seg')

    total = torch.zeros(image.shape, dtype=torch.float64)
    terms = {}
    if spec.enable_text:
        score, grad = text_guidance(embedder, image, prompt)
        terms['text'] = TermResult(score, grad)
        total = total + grad
    if spec.enable_box:
        template = spec.box_prompt_template
        score, grad = box_guidance(embedder, image, rois, seed, step, template)
        if spec.augment_box:
            grad = augmented_box_guidance(embedder, image, rois, spec.lambda_, seed, step, template, box_grad=grad)
        terms['box'] = TermResult(score, grad)
        total = total + grad
    if spec.enable_seg:
        score, grad = seg_guidance(ae, image, seg, palette)
        terms['seg'] = TermResult(score, grad)
        total = total + spec.seg_scale * grad
    if not torch.isfinite(total).all():
        raise NonFiniteLossError("Guidance gradient is not finite",
                                 diagnostics={name: t.score for name, t in terms.items()}, module="guidance")
    return GuidanceEvaluation(total, terms)


def total_guidance(spec: GuidanceSpec, embedder: Optional[Embedder], ae: Optional[FirstStageAE],
                   image: torch.Tensor, prompt: Optional[str] = None, rois: Optional[RoiContext] = None,
                   seg: Optional[SegMap] = None, seed: Optional[int] = None, step: int = 0,
                   palette: Optional[torch.Tensor] = None) -> torch.Tensor:
    return evaluate_guidance(spec, embedder, ae, image, prompt, rois, seg, seed, step, palette).gradient


class GuidanceTrace:
    """Per-step score and gradient norm of every evaluated term"""

    COLUMNS = ['step', 't', 'term', 'score', 'grad_norm']

    def __init__(self):
        self.records: List[dict] = []

    def record(self, step: int, t: int, term: str, score: float, grad_norm: float):
        if not (math.isfinite(score) and math.isfinite(grad_norm)):
            raise ValueError(f"Non-finite trace entry for term '{term}' at step {step}")
        self.records.append({'step': step, 't': t, 'term': term, 'score': score, 'grad_norm': grad_norm})

    def __len__(self) -> int:
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.records, columns=self.COLUMNS)

    def summary(self) -> Dict[str, dict]:
        """Per term: steps seen, first/last/mean score and mean gradient norm"""
        df = self.to_frame()
        if df.empty:
            return {}
        out = {}
        for term, group in df.groupby('term', sort=True):
            group = group.sort_values('step')
            out[term] = {
                'steps': int(len(group)),
                'first_score': float(group['score'].iloc[0]),
                'last_score': float(group['score'].iloc[-1]),
                'mean_score': float(group['score'].mean()),
                'mean_grad_norm': float(group['grad_norm'].mean()),
            }
        return out

    def write_jsonl(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            for rec in self.records:
                f.write(json.dumps(rec) + '\n')
        return path

    @classmethod
    def read_jsonl(cls, path) -> "GuidanceTrace":
        trace = cls()
        with open(path, 'r', encoding='utf-8') as f:
            for line in f:
                if line.strip():
                    rec = json.loads(line)
                    trace.record(rec['step'], rec['t'], rec['term'], rec['score'], rec['grad_norm'])
        return trace

    def plot(self, path) -> Path:
        """Score per step for each term"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig, ax = plt.subplots(figsize=(8, 4))
        df = self.to_frame()
        if not df.empty:
            sns.lineplot(data=df, x='step', y='score', hue='term', ax=ax)
        ax.set_title('Guidance scores per sampler step')
        ax.set_xlabel('Step')
        ax.set_ylabel('Score')
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        return path


def box_adherence(gradient: torch.Tensor, rois: RoiContext) -> float:
    """Share of absolute gradient mass that falls inside the union of ROI interiors"""
    height, width = gradient.shape[-2:]
    union = torch.zeros(height, width, dtype=torch.bool)
    for box in rois.boxes:
        union |= box_interior_mask(box, height, width)
    mass = gradient.abs().sum(dim=tuple(range(gradient.dim() - 2))) if gradient.dim() > 2 else gradient.abs()
    total = float(mass.sum())
    return float(mass[union].sum()) / total if total > 0 else 0.0


def roi_similarity(embedder: Embedder, image: torch.Tensor, rois: RoiContext,
                   template: str = "A photo of a [obj]", crop_size: int = 32) -> float:
    """Mean similarity of each ROI crop (resized) to its object prompt"""
    if len(rois) == 0:
        raise EmptyRoiError("roi_similarity needs at least one ROI")
    height, width = image.shape[-2:]
    crops = []
    for box in rois.boxes:
        r0, r1, c0, c1 = box_pixel_bounds(box, height, width)
        crop = image[:, r0:r1, c0:c1].to(torch.float64).unsqueeze(0)
        crops.append(F.interpolate(crop, size=(crop_size, crop_size), mode='bilinear', align_corners=False)[0])
    with torch.no_grad():
        image_features = embedder.encode_image(torch.stack(crops))
        texts = torch.stack([embedder.encode_text(template.replace(OBJ_PLACEHOLDER, label))
                             for label in rois.labels]).to(torch.float64)
    return float((image_features * texts).sum(dim=-1).mean())


class LayoutGuidance:
    """Sampler callback: evaluates the enabled terms on x0-hat and records a trace"""

    def __init__(self, spec: GuidanceSpec, embedder: Optional[Embedder], ae: Optional[FirstStageAE] = None,
                 prompt: Optional[str] = None, rois: Optional[RoiContext] = None,
                 seg: Optional[SegMap] = None, palette: Optional[torch.Tensor] = None,
                 trace: Optional[GuidanceTrace] = None):
        self.spec = spec
        self.embedder = embedder
        self.ae = ae
        self.prompt = prompt
        self.rois = rois
        self.seg = seg
        self.palette = palette
        self.trace = trace if trace is not None else GuidanceTrace()
        self.adherence: List[float] = []
        self.logger = logging.getLogger(__name__)

    @classmethod
    def from_layout(cls, spec: GuidanceSpec, embedder: Embedder, ae: Optional[FirstStageAE], layout: Layout,
                    prompt: Optional[str], image_size: Tuple[int, int]) -> "LayoutGuidance":
        rois = RoiContext.from_layout(layout, image_size)
        palette = class_palette(layout.vocab.object_classes)
        seg = layout.seg if spec.enable_seg else None
        return cls(spec, embedder, ae, prompt, rois, seg, palette)

    def __call__(self, image: torch.Tensor, step: int, t: int) -> torch.Tensor:
        evaluation = evaluate_guidance(self.spec, self.embedder, self.ae, image, self.prompt, self.rois,
                                       self.seg, self.spec.noise_seed, step, self.palette)
        for name, term in evaluation.terms.items():
            self.trace.record(step, t, name, term.score, term.grad_norm)
            self.logger.debug(f"step {step} (t={t}) {name}: score {term.score:.4f}, |grad| {term.grad_norm:.3e}")
        if self.rois is not None and len(self.rois):
            self.adherence.append(box_adherence(evaluation.gradient, self.rois))
        return evaluation.gradient

    @property
    def mean_adherence(self) -> float:
        return float(np.mean(self.adherence)) if self.adherence else 0.0
