"""Canonical shape masks and prototype patches for the synthetic-shapes world"""
from functools import lru_cache
from typing import Dict, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, ImageDraw

MASK_SIZE = 64

DEFAULT_SHAPES = ('circle', 'square', 'triangle', 'star')

DEFAULT_COLORS: Dict[str, Tuple[float, float, float]] = {
    'circle': (0.9, 0.1, 0.1),
    'square': (0.1, 0.8, 0.2),
    'triangle': (0.15, 0.3, 0.95),
    'star': (0.95, 0.85, 0.1),
}


def _star_points(size: int, points: int = 5):
    cx = cy = (size - 1) / 2
    outer = size / 2
    inner = outer * 0.45
    coords = []
    for k in range(2 * points):
        radius = outer if k % 2 == 0 else inner
        angle = -np.pi / 2 + k * np.pi / points
        coords.append((cx + radius * np.cos(angle), cy + radius * np.sin(angle)))
    return coords


@lru_cache(maxsize=None)
def _canonical_mask(shape: str, size: int) -> bytes:
    image = Image.new('L', (size, size), 0)
    draw = ImageDraw.Draw(image)
    last = size - 1
    if shape == 'circle':
        draw.ellipse([0, 0, last, last], fill=255)
    elif shape == 'square':
        draw.rectangle([0, 0, last, last], fill=255)
    elif shape == 'triangle':
        draw.polygon([(last / 2, 0), (0, last), (last, last)], fill=255)
    elif shape == 'star':
        draw.polygon(_star_points(size), fill=255)
    else:
        raise ValueError(f"Unknown shape '{shape}'")
    return image.tobytes()


def canonical_mask(shape: str, size: int = MASK_SIZE) -> np.ndarray:
    """Binary size x size mask of ``shape`` filling its own box"""
    raw = np.frombuffer(_canonical_mask(shape, size), dtype=np.uint8).reshape(size, size)
    return raw > 127


def class_palette(classes: Sequence[str], colors: Dict[str, Tuple[float, float, float]] = None,
                  seed: int = 0) -> torch.Tensor:
    """(K + 1) x 3 palette; row 0 is the black background, row k + 1 is class k.

    Classes without a configured color get a seeded random color.
    """
    colors = dict(DEFAULT_COLORS if colors is None else colors)
    rng = np.random.default_rng(seed)
    rows = [(0.0, 0.0, 0.0)]
    for name in classes:
        if name in colors:
            rows.append(tuple(colors[name]))
        else:
            rows.append(tuple(rng.uniform(0.2, 1.0, size=3)))
    return torch.tensor(rows, dtype=torch.float64)


def render_prototype(shape: str, color: Tuple[float, float, float], size: int = 32,
                     background: float = 0.5) -> torch.Tensor:
    """3 x size x size patch: the shape in its color, inscribed with a 1/8 margin on gray"""
    margin = size // 8
    inner = size - 2 * margin
    patch = torch.full((3, size, size), background, dtype=torch.float64)
    mask = torch.from_numpy(canonical_mask(shape, inner).copy())
    region = patch[:, margin:margin + inner, margin:margin + inner]
    for c in range(3):
        region[c][mask] = float(color[c])
    return patch
