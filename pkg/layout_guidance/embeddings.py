"""Text/image embedders sharing one unit-norm embedding space.

``ToyEmbedder`` is the deterministic differentiable embedder every test runs
on. Its image path average-pools the image to 8x8, centers it at gray,
appends a constant and applies a fixed seeded random projection before L2
normalization. Its text path runs the same image path over a rendered
prototype patch of each class named in the text; texts naming no known
class hash to a seeded pseudo-random unit vector.
"""
import hashlib
import json
import logging
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Literal, Optional, Sequence

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator

from layout_guidance.errors import (DimensionMismatchError, EmbedderUnavailableError,
                                    EmptyInputError, ShapeError)
from layout_guidance.shapes import DEFAULT_COLORS, DEFAULT_SHAPES, render_prototype

logger = logging.getLogger(__name__)

OBJ_PLACEHOLDER = '[obj]'
POOL_SIZE = 8
MIN_IMAGE_SIDE = 8
BIAS_FEATURE = 0.05


class EmbedderProfile(BaseModel):
    """Small JSON descriptor of an embedder"""

    model_config = ConfigDict(frozen=True)

    name: str = Field(default="toy", description="Profile name")
    kind: Literal["toy", "external"] = Field(default="toy", description="Embedder implementation")
    dimension: int = Field(default=512, gt=0, description="Embedding dimension D")
    differentiable_image_path: bool = Field(default=True, description="Whether image gradients are available")
    prompt_template: str = Field(default="a photo of an [obj]", description="Node prompt template")
    space_tag: str = Field(default="toy-shapes", description="Identifier of the shared text/image space")
    seed: int = Field(default=0, description="Seed of the toy projection")
    weights_path: Optional[str] = Field(default=None, description="External adapter weights; never bundled")

    @field_validator('prompt_template')
    @classmethod
    def _one_placeholder(cls, template: str) -> str:
        if template.count(OBJ_PLACEHOLDER) != 1:
            raise ValueError(f"template must contain exactly one {OBJ_PLACEHOLDER} placeholder")
        return template

    def render_prompt(self, obj_name: str) -> str:
        """Apply the template literally, article included"""
        return self.prompt_template.replace(OBJ_PLACEHOLDER, obj_name)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.model_dump(), f, indent=2)
        return path

    @classmethod
    def load(cls, path) -> "EmbedderProfile":
        with open(path, 'r', encoding='utf-8') as f:
            return cls.model_validate(json.load(f))


@dataclass(frozen=True)
class Embedding:
    vector: torch.Tensor
    space_tag: str

    def __post_init__(self):
        if self.vector.dim() != 1:
            raise ShapeError(f"Embedding must be a vector, got shape {tuple(self.vector.shape)}")
        if not torch.isfinite(self.vector).all():
            raise ValueError("Embedding has non-finite entries")
        norm = float(self.vector.norm())
        if abs(norm - 1.0) > 1e-5:
            raise ValueError(f"Embedding must be unit norm, got {norm:.6f}")

    @property
    def dimension(self) -> int:
        return self.vector.shape[0]

    def __neg__(self) -> "Embedding":
        return Embedding(-self.vector, self.space_tag)


class Embedder(ABC):
    """Shared interface: unit-norm float64 features for texts and channels-first images"""

    def __init__(self, profile: EmbedderProfile):
        self.profile = profile

    @property
    def dimension(self) -> int:
        return self.profile.dimension

    @property
    def space_tag(self) -> str:
        return self.profile.space_tag

    def prompt(self, obj_name: str) -> str:
        return self.profile.render_prompt(obj_name)

    @abstractmethod
    def encode_text(self, text: str) -> torch.Tensor:
        """D-dim unit vector for ``text``"""

    @abstractmethod
    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        """(..., 3, H, W) images in [0, 1] -> (..., D) unit vectors, differentiable when supported"""


def _check_images(images: torch.Tensor):
    if images.dim() < 3 or images.shape[-3] != 3:
        raise ShapeError(f"Expected (..., 3, H, W) images, got shape {tuple(images.shape)}")
    if images.shape[-1] < MIN_IMAGE_SIDE or images.shape[-2] < MIN_IMAGE_SIDE:
        raise ShapeError(f"Images must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, "
                         f"got {tuple(images.shape[-2:])}")
    if not torch.isfinite(images).all():
        raise ShapeError("Images contain non-finite pixels")


class ToyEmbedder(Embedder):

    def __init__(self, profile: Optional[EmbedderProfile] = None,
                 prototypes: Optional[Dict[str, torch.Tensor]] = None):
        super().__init__(profile or EmbedderProfile())
        in_dim = 3 * POOL_SIZE * POOL_SIZE + 1
        generator = torch.Generator().manual_seed(self.profile.seed)
        self._projection = torch.randn(self.dimension, in_dim, generator=generator,
                                       dtype=torch.float64) / in_dim ** 0.5
        if prototypes is None:
            prototypes = shape_prototypes()
        self._class_features = {
            name: self._raw_features(patch.to(torch.float64))
            for name, patch in prototypes.items()
        }
        # longest names first so multi-word classes win over their sub-words
        self._class_patterns = sorted(
            ((name, re.compile(r'(?<![\w-])' + re.escape(name.lower()) + r'(?![\w-])'))
             for name in self._class_features),
            key=lambda item: -len(item[0]))

    @property
    def known_classes(self) -> Sequence[str]:
        return tuple(self._class_features)

    def _raw_features(self, images: torch.Tensor) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(images, POOL_SIZE)
        flat = pooled.flatten(-3) - 0.5
        bias = torch.full(flat.shape[:-1] + (1,), BIAS_FEATURE, dtype=flat.dtype)
        return torch.cat([flat, bias], dim=-1) @ self._projection.T

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        _check_images(images)
        return F.normalize(self._raw_features(images.to(torch.float64)), dim=-1)

    def classes_in(self, text: str) -> Sequence[str]:
        """Known class names mentioned in ``text``, in order of first mention"""
        lowered = text.lower()
        hits = []
        taken = []
        for name, pattern in self._class_patterns:
            for match in pattern.finditer(lowered):
                span = match.span()
                if any(s < span[1] and span[0] < e for s, e in taken):
                    continue
                taken.append(span)
                hits.append((span[0], name))
                break
        return [name for _, name in sorted(hits)]

    def encode_text(self, text: str) -> torch.Tensor:
        names = self.classes_in(text)
        if names:
            features = torch.stack([self._class_features[name] for name in names]).mean(dim=0)
            return F.normalize(features, dim=-1)
        digest = hashlib.sha256(text.encode('utf-8')).digest()
        seed = (int.from_bytes(digest[:8], 'little') ^ self.profile.seed) & 0x7FFF_FFFF_FFFF_FFFF
        generator = torch.Generator().manual_seed(seed)
        return F.normalize(torch.randn(self.dimension, generator=generator, dtype=torch.float64), dim=-1)


class ExternalEmbedder(Embedder):
    """Adapter for an external CLIP-like TorchScript module exposing
    ``encode_image(images)`` and ``encode_text(list_of_strings)``"""

    def __init__(self, profile: EmbedderProfile):
        super().__init__(profile)
        self._module = None

    @property
    def is_loaded(self) -> bool:
        return self._module is not None

    def load(self) -> "ExternalEmbedder":
        if not self.profile.weights_path:
            raise EmbedderUnavailableError(f"Profile '{self.profile.name}' has no weights_path")
        path = Path(self.profile.weights_path)
        if not path.exists():
            raise EmbedderUnavailableError(f"Embedder weights not found: {path}")
        self._module = torch.jit.load(str(path), map_location='cpu')
        self._module.eval()
        logger.info(f"Loaded external embedder '{self.profile.name}' from {path}")
        return self

    def _require(self):
        if self._module is None:
            raise EmbedderUnavailableError(f"External embedder '{self.profile.name}' is not loaded")
        return self._module

    def encode_text(self, text: str) -> torch.Tensor:
        module = self._require()
        with torch.no_grad():
            features = module.encode_text([text])[0]
        return F.normalize(features.to(torch.float64), dim=-1)

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        module = self._require()
        _check_images(images)
        flat = images.reshape((-1,) + tuple(images.shape[-3:]))
        features = module.encode_image(flat).to(torch.float64)
        return F.normalize(features, dim=-1).reshape(tuple(images.shape[:-3]) + (-1,))


def shape_prototypes(shapes: Sequence[str] = DEFAULT_SHAPES, colors=None,
                     size: int = 32) -> Dict[str, torch.Tensor]:
    colors = colors or DEFAULT_COLORS
    return {name: render_prototype(name, colors[name], size=size) for name in shapes}


def make_embedder(profile: Optional[EmbedderProfile] = None) -> Embedder:
    profile = profile or EmbedderProfile()
    if profile.kind == 'toy':
        return ToyEmbedder(profile)
    return ExternalEmbedder(profile).load()


def embed_text(embedder: Embedder, text: str) -> Embedding:
    if not text or not text.strip():
        raise EmptyInputError("embed_text needs non-empty text", module="embeddings")
    return Embedding(embedder.encode_text(text).detach(), embedder.space_tag)


def embed_image(embedder: Embedder, image) -> Embedding:
    """Embed one H x W x 3 image with values in [0, 1]"""
    image = torch.as_tensor(image, dtype=torch.float64)
    if image.dim() != 3 or image.shape[-1] != 3:
        raise ShapeError(f"embed_image expects an H x W x 3 image, got shape {tuple(image.shape)}")
    with torch.no_grad():
        vector = embedder.encode_image(image.permute(2, 0, 1))
    return Embedding(vector, embedder.space_tag)


def similarity(a: Embedding, b: Embedding) -> float:
    """Cosine similarity of two unit embeddings (the CLIP score)"""
    if a.dimension != b.dimension:
        raise DimensionMismatchError(f"Embedding dimensions differ: {a.dimension} vs {b.dimension}")
    if a.space_tag != b.space_tag:
        raise DimensionMismatchError(f"Embeddings live in different spaces: '{a.space_tag}' vs '{b.space_tag}'")
    return float(torch.clamp(torch.dot(a.vector, b.vector), -1.0, 1.0))


def class_prompt_features(embedder: Embedder, class_names: Sequence[str]) -> torch.Tensor:
    """len(class_names) x D matrix of templated prompt embeddings"""
    return torch.stack([embedder.encode_text(embedder.prompt(name)) for name in class_names])
