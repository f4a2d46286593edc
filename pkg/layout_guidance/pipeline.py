"""End-to-end runs: graph -> layout -> guided sampling -> grid, layout, trace and report files"""
import hashlib
import itertools
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from PIL import Image, ImageDraw, ImageFont
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.stats import binomtest

from layout_guidance.config import build_model, resolve_output_dir
from layout_guidance.data_loader import (ShapesConfig, SceneRecord, caption_for, generate_shapes,
                                         load_coco_like)
from layout_guidance.diffusion import AutoencoderProfile, load_diffusion, make_autoencoder, sample
from layout_guidance.embeddings import Embedder, EmbedderProfile, make_embedder
from layout_guidance.errors import CheckpointMissingError, ConfigError, LayoutGuidanceError
from layout_guidance.guidance import GuidanceSpec, LayoutGuidance, RoiContext, roi_similarity
from layout_guidance.scene_graph import SceneGraph, Triplet, Vocab, build_graph, load_graph_json
from layout_guidance.sg2seg import Layout, load_sg2seg, predict_layout, save_layout_json

logger = logging.getLogger(__name__)

TERM_FLAGS = {'text': 'enable_text', 'box': 'enable_box', 'seg': 'enable_seg'}
ELLIPSIS = '...'


class SamplerSettings(BaseModel):
    steps: int = Field(default=100, ge=1, description="DDIM steps over the T-step schedule")
    seed: int = Field(default=0, ge=0, description="Seed of the initial noise")
    image_size: int = Field(default=32, ge=8, description="Sampled image side; a multiple of 4")

    @field_validator('image_size')
    @classmethod
    def _multiple_of_four(cls, size: int) -> int:
        if size % 4:
            raise ValueError("image_size must be a multiple of 4")
        return size


class RunConfig(BaseModel):
    """One pipeline run. Exactly one graph source: graph_path, triplets, dataset_path or shapes"""

    model_config = ConfigDict(populate_by_name=True)

    graph_path: Optional[str] = Field(default=None, description="Graph JSON file")
    triplets: List[str] = Field(default_factory=list, description="'subject,predicate,object' strings")
    vocab: Optional[Dict[str, List[str]]] = Field(default=None, description="objects/relations for triplets")
    dataset_path: Optional[str] = Field(default=None, description="COCO-like annotations.json")
    shapes: Optional[ShapesConfig] = Field(default=None, description="Generate a synthetic record instead")
    record_index: int = Field(default=0, ge=0, description="Which dataset record to use")
    layout_source: Literal["predicted", "ground-truth"] = Field(default="predicted")
    sg2seg_checkpoint: Optional[str] = Field(default=None)
    diffusion_checkpoint: Optional[str] = Field(default=None)
    prompt: Optional[str] = Field(default=None, description="Text prompt; defaults to the record caption")
    guidance: GuidanceSpec = Field(default_factory=GuidanceSpec)
    sampler: SamplerSettings = Field(default_factory=SamplerSettings)
    embedder: EmbedderProfile = Field(default_factory=EmbedderProfile)
    autoencoder: AutoencoderProfile = Field(default_factory=AutoencoderProfile)
    layout_size: int = Field(default=64, ge=64, description="Canvas of the composed segmentation")
    output_dir: str = Field(default="runs/default")
    plot_trace: bool = Field(default=False)

    @model_validator(mode='after')
    def _check_sources(self):
        sources = [self.graph_path is not None, bool(self.triplets), self.dataset_path is not None,
                   self.shapes is not None]
        if sum(sources) != 1:
            raise ValueError("exactly one of graph_path, triplets, dataset_path, shapes must be set")
        if self.layout_source == "ground-truth" and self.dataset_path is None and self.shapes is None:
            raise ValueError("a ground-truth layout needs a dataset_path or shapes record")
        if self.triplets and not self.vocab:
            raise ValueError("triplets need a vocab with 'objects' and 'relations'")
        for name in ('graph_path', 'dataset_path'):
            value = getattr(self, name)
            if value is not None and not Path(value).exists():
                raise ValueError(f"{name} does not exist: {value}")
        return self


class RunReport(BaseModel):
    images: List[str]
    layout: str
    trace: str
    trace_plot: Optional[str] = None
    trace_summary: Dict[str, dict]
    layout_source: str
    prompt: str
    seed: int
    roi_similarity: float
    box_adherence: float
    image_sha256: str
    config: dict
    wall_clock_seconds: float

    def write(self, path) -> Path:
        path = Path(path)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.model_dump(), f, indent=2)
        return path


class AblationGrid(BaseModel):
    lambdas: List[float] = Field(default_factory=lambda: [1.0, 1.2])
    term_sets: List[List[Literal["text", "box", "seg"]]] = Field(
        default_factory=lambda: [["text", "box", "seg"]])
    include_vanilla: bool = Field(default=True, description="Add a vanilla box-guidance reference row")
    max_workers: int = Field(default=1, ge=1)

    def cells(self) -> List[Tuple[float, Tuple[str, ...]]]:
        return [(lam, tuple(terms)) for lam, terms in itertools.product(self.lambdas, self.term_sets)]


def load_run_config(data: dict) -> RunConfig:
    """Build a RunConfig from a merged config dict (``run`` section plus shared sections)"""
    run = dict(data.get('run', {}))
    for section in ('guidance', 'sampler', 'embedder', 'autoencoder'):
        if section in data and section not in run:
            run[section] = data[section]
    return build_model(RunConfig, run)


def _load_record(config: RunConfig) -> SceneRecord:
    if config.shapes is not None:
        records = generate_shapes(config.shapes, config.record_index + 1)
        return records[config.record_index]
    annotations = Path(config.dataset_path)
    for k, record in enumerate(load_coco_like(annotations, annotations.parent)):
        if k == config.record_index:
            return record
    raise ConfigError(f"record_index {config.record_index} is past the end of {annotations}")


def resolve_graph(config: RunConfig) -> Tuple[SceneGraph, Vocab, Optional[SceneRecord]]:
    if config.graph_path is not None:
        graph, vocab = load_graph_json(config.graph_path)
        return graph, vocab, None
    if config.triplets:
        vocab = Vocab(object_classes=tuple(config.vocab['objects']),
                      relationship_classes=tuple(config.vocab['relations']))
        return build_graph([Triplet.parse(t) for t in config.triplets], vocab), vocab, None
    record = _load_record(config)
    return record.graph, record.vocab, record


def resolve_layout(config: RunConfig, graph: SceneGraph, vocab: Vocab, record: Optional[SceneRecord],
                   embedder: Embedder) -> Layout:
    """Predicted and ground-truth layouts leave here through the same Layout contract"""
    if config.layout_source == "ground-truth":
        return record.layout()
    if not config.sg2seg_checkpoint:
        raise CheckpointMissingError("A predicted layout needs sg2seg_checkpoint")
    model, model_vocab, _, _ = load_sg2seg(config.sg2seg_checkpoint)
    if model_vocab != vocab:
        raise ConfigError("The sg2seg checkpoint was trained on a different vocabulary")
    return predict_layout(model, graph, vocab, embedder, image_size=config.layout_size)


def fit_caption(caption: str, max_width: float, font=None) -> str:
    """Truncate with an ellipsis so the rendered caption fits ``max_width`` pixels"""
    font = font or ImageFont.load_default()
    measure = ImageDraw.Draw(Image.new('RGB', (1, 1))).textlength
    if measure(caption, font=font) <= max_width:
        return caption
    text = caption
    while text and measure(text + ELLIPSIS, font=font) > max_width:
        text = text[:-1]
    return text + ELLIPSIS


def grid_shape(n: int) -> Tuple[int, int]:
    """(rows, cols) for n tiles"""
    if n < 1:
        raise ValueError("render_grid needs at least one image")
    cols = math.ceil(math.sqrt(n))
    return math.ceil(n / cols), cols


def render_grid(images: Sequence[torch.Tensor], captions: Sequence[str], path=None,
                tile_scale: int = 4, caption_height: int = 14) -> Image.Image:
    """Tile 3 x H x W images in [0, 1] with a caption strip under each tile"""
    rows, cols = grid_shape(len(images))
    captions = list(captions) + [''] * (len(images) - len(captions))
    height, width = images[0].shape[-2:]
    tile_w, tile_h = width * tile_scale, height * tile_scale
    canvas = Image.new('RGB', (cols * tile_w, rows * (tile_h + caption_height)), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    for k, (image, caption) in enumerate(zip(images, captions)):
        r, c = divmod(k, cols)
        pixels = (image.detach().clamp(0, 1).permute(1, 2, 0) * 255).round().to(torch.uint8).numpy()
        tile = Image.fromarray(pixels, mode='RGB').resize((tile_w, tile_h), Image.NEAREST)
        x, y = c * tile_w, r * (tile_h + caption_height)
        canvas.paste(tile, (x, y))
        draw.text((x + 2, y + tile_h + 1), fit_caption(caption, tile_w - 4, font), fill=(0, 0, 0), font=font)
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        canvas.save(path)
    return canvas


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class PipelineRunner:
    """Runs one configured pipeline and writes its artifacts"""

    def __init__(self, config: RunConfig):
        self.config = config
        self.logger = logging.getLogger(__name__)

    def run(self) -> RunReport:
        cfg = self.config
        started = time.perf_counter()
        try:
            out_dir = resolve_output_dir(Path(cfg.output_dir))
            out_dir.mkdir(parents=True, exist_ok=True)
            self.logger.info(f"Pipeline run ({cfg.layout_source} layout) -> {out_dir}")

            graph, vocab, record = resolve_graph(cfg)
            embedder = make_embedder(cfg.embedder)
            layout = resolve_layout(cfg, graph, vocab, record, embedder)
            if not cfg.diffusion_checkpoint:
                raise CheckpointMissingError("A pipeline run needs diffusion_checkpoint")
            model, schedule = load_diffusion(cfg.diffusion_checkpoint)
            ae = make_autoencoder(cfg.autoencoder)

            prompt = cfg.prompt or (record.caption if record is not None else caption_for(graph, vocab))
            size = cfg.sampler.image_size
            guidance = LayoutGuidance.from_layout(cfg.guidance, embedder, ae, layout, prompt, (size, size))
            spec = cfg.guidance
            enabled = spec.enable_text or spec.enable_box or spec.enable_seg
            image = sample(model, schedule, (3, size, size), guidance if enabled else None,
                           seed=cfg.sampler.seed, steps=cfg.sampler.steps, alpha_scale=spec.alpha)

            grid_path = out_dir / 'grid.png'
            render_grid([image], [prompt], grid_path)
            layout_path = save_layout_json(layout, out_dir / 'layout.json')
            trace_path = guidance.trace.write_jsonl(out_dir / 'trace.jsonl')
            plot_path = guidance.trace.plot(out_dir / 'trace.png') if cfg.plot_trace else None

            rois = RoiContext.from_layout(layout, (size, size))
            report = RunReport(
                images=[str(grid_path)],
                layout=str(layout_path),
                trace=str(trace_path),
                trace_plot=str(plot_path) if plot_path else None,
                trace_summary=guidance.trace.summary(),
                layout_source=cfg.layout_source,
                prompt=prompt,
                seed=cfg.sampler.seed,
                roi_similarity=roi_similarity(embedder, image, rois, spec.box_prompt_template),
                box_adherence=guidance.mean_adherence,
                image_sha256=_sha256(grid_path),
                config=cfg.model_dump(mode='json', by_alias=True),
                wall_clock_seconds=time.perf_counter() - started,
            )
            report.write(out_dir / 'report.json')
            self.logger.info(f"Pipeline finished in {report.wall_clock_seconds:.1f}s, "
                             f"ROI similarity {report.roi_similarity:.4f}")
            return report
        except LayoutGuidanceError as e:
            self.logger.error(f"Pipeline failed in {e.module}: {e}")
            raise


def run_pipeline(config: RunConfig) -> RunReport:
    return PipelineRunner(config).run()


def _cell_config(config: RunConfig, name: str, lambda_: float, terms: Sequence[str], augment: bool) -> RunConfig:
    updates = {flag: term in terms for term, flag in TERM_FLAGS.items()}
    updates.update({'lambda_': lambda_, 'augment_box': augment})
    spec = config.guidance.model_copy(update=updates)
    return config.model_copy(update={'guidance': spec, 'output_dir': str(Path(config.output_dir) / name)})


def ablate(config: RunConfig, grid: AblationGrid) -> pd.DataFrame:
    """One pipeline run per (lambda, term set) cell, all on the same seed; writes ablation.csv"""
    cells = grid.cells()
    if not cells:
        raise ConfigError("Ablation grid is empty")

    jobs = []
    if grid.include_vanilla:
        for terms in dict.fromkeys(cells_terms for _, cells_terms in cells):
            jobs.append((f"vanilla_{'-'.join(terms)}", 1.0, terms, False))
    for lam, terms in cells:
        jobs.append((f"lambda{lam:g}_{'-'.join(terms)}", lam, terms, True))

    def run_cell(job):
        name, lam, terms, augment = job
        started = time.perf_counter()
        report = run_pipeline(_cell_config(config, name, lam, terms, augment))
        return {
            'cell': name,
            'lambda': lam,
            'terms': '+'.join(terms),
            'augment_box': augment,
            'roi_similarity': report.roi_similarity,
            'box_adherence': report.box_adherence,
            'runtime_s': time.perf_counter() - started,
            'image_sha256': report.image_sha256,
        }

    logger.info(f"Ablation over {len(jobs)} cells ({grid.max_workers} workers)")
    if grid.max_workers > 1:
        with ThreadPoolExecutor(max_workers=grid.max_workers) as pool:
            rows = list(pool.map(run_cell, jobs))
    else:
        rows = [run_cell(job) for job in jobs]

    df = pd.DataFrame(rows)
    vanilla = {row['terms']: row['image_sha256'] for row in rows if not row['augment_box']}
    df['equals_vanilla'] = [vanilla.get(t) == h for t, h in zip(df['terms'], df['image_sha256'])]
    out_dir = resolve_output_dir(Path(config.output_dir))
    out_dir.mkdir(parents=True, exist_ok=True)
    df.to_csv(out_dir / 'ablation.csv', index=False)
    return df


def sign_test(guided: Sequence[float], baseline: Sequence[float]) -> Dict[str, float]:
    """Paired one-sided sign test that guided > baseline; ties are dropped"""
    diffs = np.asarray(guided, dtype=np.float64) - np.asarray(baseline, dtype=np.float64)
    wins, losses = int((diffs > 0).sum()), int((diffs < 0).sum())
    n = wins + losses
    p_value = binomtest(wins, n, 0.5, alternative='greater').pvalue if n else 1.0
    return {'wins': wins, 'losses': losses, 'ties': int(len(diffs) - n), 'p_value': float(p_value)}


def guidance_efficacy(model, schedule, embedder: Embedder, records: Sequence[SceneRecord], spec: GuidanceSpec,
                      ae=None, seeds: Sequence[int] = range(20), steps: int = 100,
                      image_size: int = 32) -> Tuple[pd.DataFrame, Dict[str, float]]:
    """Mean ROI similarity with and without guidance per seed, plus the sign test"""
    rows = []
    for seed, record in zip(seeds, itertools.cycle(records)):
        layout = record.layout()
        rois = RoiContext.from_layout(layout, (image_size, image_size))
        unguided = sample(model, schedule, (3, image_size, image_size), None, seed=seed, steps=steps)
        guidance = LayoutGuidance.from_layout(spec, embedder, ae, layout, record.caption, (image_size, image_size))
        guided = sample(model, schedule, (3, image_size, image_size), guidance, seed=seed, steps=steps,
                        alpha_scale=spec.alpha)
        rows.append({
            'seed': seed,
            'record': record.record_id,
            'unguided': roi_similarity(embedder, unguided, rois, spec.box_prompt_template),
            'guided': roi_similarity(embedder, guided, rois, spec.box_prompt_template),
        })
    df = pd.DataFrame(rows)
    return df, sign_test(df['guided'], df['unguided'])
