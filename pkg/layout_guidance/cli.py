"""Command line entry point.

    python -m layout_guidance graph build --triplet "circle,left-of,square" --out graph.json
    python -m layout_guidance graph validate graph.json
    python -m layout_guidance datasets generate --count 1000 --out data/shapes
    python -m layout_guidance sg2seg train --data data/shapes/annotations.json --out ckpt/sg2seg.lgck
    python -m layout_guidance sg2seg predict --checkpoint ckpt/sg2seg.lgck --graph graph.json --out layout.json
    python -m layout_guidance diffuse train --data data/shapes/annotations.json --out ckpt/diffusion.lgck
    python -m layout_guidance diffuse sample --checkpoint ckpt/diffusion.lgck --seed 3 --steps 100 --out img.png
    python -m layout_guidance pipeline run --config run.json --set guidance.lambda=1.0
    python -m layout_guidance pipeline ablate --config run.json --lambdas 1.0 1.2

Every command accepts ``--config FILE`` and repeated ``--set key=value``
overrides on top of the packaged config.json. Exit codes: 0 success,
2 config error, 3 missing artifact, 4 runtime failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from layout_guidance.config import (build_model, deep_merge, load_defaults, parse_override, read_json,
                                    resolve_output_dir, set_dotted, setup_logging)
from layout_guidance.data_loader import (ShapesConfig, describe_records, generate_shapes, load_coco_like,
                                         records_to_images, save_coco_like, split_records, write_manifest)
from layout_guidance.diffusion import (DiffusionTrainConfig, NoiseSchedule, ScheduleConfig, UNetConfig,
                                       build_unet, load_diffusion, sample, train_diffusion)
from layout_guidance.embeddings import EmbedderProfile, make_embedder
from layout_guidance.errors import LayoutGuidanceError, SchemaError
from layout_guidance.pipeline import AblationGrid, ablate, load_run_config, render_grid, run_pipeline
from layout_guidance.scene_graph import (Triplet, Vocab, build_graph, load_graph_json, save_graph_json,
                                         validate)
from layout_guidance.sg2seg import (SG2SEGModelConfig, SG2SEGTrainConfig, build_model as build_sg2seg,
                                    load_sg2seg, predict_layout, save_layout_json, train as train_sg2seg)

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, help='JSON config layered over the packaged defaults')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='Override one config value, e.g. guidance.lambda=1.0')
    common.add_argument('--log-dir', type=Path, default=None, help='Also write layout_guidance.log here')
    common.add_argument('--verbose', action='store_true', help='Log per-step guidance scores')

    parser = argparse.ArgumentParser(prog='layout_guidance', description=__doc__.splitlines()[0])
    groups = parser.add_subparsers(dest='group', required=True)

    graph = groups.add_parser('graph').add_subparsers(dest='command', required=True)
    p = graph.add_parser('build', parents=[common], help='Triplets -> graph JSON')
    p.add_argument('--triplet', action='append', required=True, help="'subject,predicate,object'")
    p.add_argument('--vocab', type=Path, help='JSON with "objects" and "relations" (default: shapes vocab)')
    p.add_argument('--out', type=Path, required=True)
    p = graph.add_parser('validate', parents=[common], help='Check a graph JSON file')
    p.add_argument('path', type=Path)

    datasets = groups.add_parser('datasets').add_subparsers(dest='command', required=True)
    p = datasets.add_parser('generate', parents=[common], help='Write a synthetic-shapes dataset')
    p.add_argument('--count', type=int, default=1000)
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--val-fraction', type=float, default=0.2)
    p.add_argument('--out', type=Path, required=True)

    sg2seg = groups.add_parser('sg2seg').add_subparsers(dest='command', required=True)
    p = sg2seg.add_parser('train', parents=[common], help='Train the graph -> layout model')
    p.add_argument('--data', type=Path, help='annotations.json; default: generate shapes')
    p.add_argument('--count', type=int, default=1000, help='Generated records when --data is absent')
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--node-features', choices=['semantic', 'random'], default=None)
    p.add_argument('--out', type=Path, required=True)
    p = sg2seg.add_parser('predict', parents=[common], help='Predict a layout for a graph')
    p.add_argument('--checkpoint', type=Path, required=True)
    p.add_argument('--graph', type=Path, required=True)
    p.add_argument('--out', type=Path, required=True)

    diffuse = groups.add_parser('diffuse').add_subparsers(dest='command', required=True)
    p = diffuse.add_parser('train', parents=[common], help='Train the toy diffusion model')
    p.add_argument('--data', type=Path, help='annotations.json; default: generate shapes')
    p.add_argument('--count', type=int, default=1000)
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--out', type=Path, required=True)
    p = diffuse.add_parser('sample', parents=[common], help='Unguided sample to PNG')
    p.add_argument('--checkpoint', type=Path, required=True)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--steps', type=int, default=100)
    p.add_argument('--out', type=Path, required=True)

    pipeline = groups.add_parser('pipeline').add_subparsers(dest='command', required=True)
    pipeline.add_parser('run', parents=[common], help='Graph -> layout -> guided sample')
    p = pipeline.add_parser('ablate', parents=[common], help='Grid over lambda and term sets')
    p.add_argument('--lambdas', type=float, nargs='+', default=None)
    p.add_argument('--terms', action='append', default=None,
                   help="Comma-separated term set, e.g. 'text,box,seg'; repeatable")
    p.add_argument('--workers', type=int, default=1)
    return parser


def load_config(args) -> dict:
    """packaged defaults < --config file < --set overrides"""
    data = load_defaults()
    if args.config is not None:
        data = deep_merge(data, read_json(args.config))
    for text in args.overrides:
        key, value = parse_override(text)
        set_dotted(data, key, value)
    return data


def _records(args, config: dict):
    if args.data is not None:
        return list(load_coco_like(args.data, args.data.parent))
    return generate_shapes(build_model(ShapesConfig, config.get('shapes', {})), args.count)


def cmd_graph_build(args, config):
    if args.vocab is not None:
        raw = read_json(args.vocab)
        vocab = build_model(Vocab, {'object_classes': raw.get('objects'),
                                    'relationship_classes': raw.get('relations')})
    else:
        vocab = build_model(ShapesConfig, config.get('shapes', {})).vocab
    graph = build_graph([Triplet.parse(t) for t in args.triplet], vocab)
    save_graph_json(graph, vocab, args.out)
    print(f"Wrote graph with {graph.num_nodes} nodes and {len(graph.edges)} edges to {args.out}")


def cmd_graph_validate(args, config):
    graph, vocab = load_graph_json(args.path)
    problems = validate(graph, vocab)
    if problems:
        raise SchemaError('graph', '; '.join(problems))
    print(f"{args.path}: valid ({graph.num_nodes} nodes, {len(graph.edges)} edges)")


def cmd_datasets_generate(args, config):
    shapes = dict(config.get('shapes', {}))
    if args.seed is not None:
        shapes['seed'] = args.seed
    shapes_config = build_model(ShapesConfig, shapes)
    records = generate_shapes(shapes_config, args.count)
    out = resolve_output_dir(args.out)
    save_coco_like(records, out)
    train, val = split_records(list(range(len(records))), args.val_fraction, shapes_config.seed)
    write_manifest(out / 'manifest.json', {'train': [str(i) for i in train], 'val': [str(i) for i in val]},
                   seed=shapes_config.seed)
    print(describe_records(records).to_string(index=False))


def cmd_sg2seg_train(args, config):
    train_cfg = dict(config.get('sg2seg_train', {}))
    if args.epochs is not None:
        train_cfg['epochs'] = args.epochs
    if args.node_features is not None:
        train_cfg['node_features'] = args.node_features
    train_cfg['checkpoint_path'] = str(resolve_output_dir(args.out))
    train_config = build_model(SG2SEGTrainConfig, train_cfg)
    model_config = build_model(SG2SEGModelConfig, config.get('sg2seg_model', {}))
    embedder = make_embedder(build_model(EmbedderProfile, config.get('embedder', {})))

    records = _records(args, config)
    train, val = split_records(records, 0.2, train_config.seed)
    vocab = records[0].vocab
    model = build_sg2seg(len(vocab.relationship_classes), model_config, seed=train_config.seed)
    result = train_sg2seg(model, train, train_config, vocab, embedder, val_dataset=val)
    metrics_path = Path(result.checkpoint_path).with_suffix('.metrics.csv')
    result.metrics.to_csv(metrics_path, index=False)
    print(result.metrics.tail(1).to_string(index=False))


def cmd_sg2seg_predict(args, config):
    model, vocab, profile, _ = load_sg2seg(args.checkpoint)
    graph, graph_vocab = load_graph_json(args.graph)
    if graph_vocab != vocab:
        raise SchemaError('vocab', "graph vocabulary differs from the checkpoint's", module="sg2seg")
    layout = predict_layout(model, graph, vocab, make_embedder(profile))
    save_layout_json(layout, resolve_output_dir(args.out))
    print(f"Wrote layout for {len(layout)} objects to {args.out}")


def cmd_diffuse_train(args, config):
    train_cfg = dict(config.get('diffusion_train', {}))
    if args.epochs is not None:
        train_cfg['epochs'] = args.epochs
    train_cfg['checkpoint_path'] = str(resolve_output_dir(args.out))
    train_config = build_model(DiffusionTrainConfig, train_cfg)
    schedule = NoiseSchedule.from_config(build_model(ScheduleConfig, config.get('schedule', {})))
    size = config.get('sampler', {}).get('image_size', 32)
    images = records_to_images(_records(args, config), size)
    model = build_unet(build_model(UNetConfig, config.get('unet', {})), seed=train_config.seed)
    result = train_diffusion(model, images, schedule, train_config)
    print(result.loss_log.tail(1).to_string(index=False))


def cmd_diffuse_sample(args, config):
    model, schedule = load_diffusion(args.checkpoint)
    size = config.get('sampler', {}).get('image_size', 32)
    image = sample(model, schedule, (3, size, size), None, seed=args.seed, steps=args.steps)
    render_grid([image], [f"seed {args.seed}"], resolve_output_dir(args.out), tile_scale=1, caption_height=0)
    print(f"Wrote {args.out}")


def cmd_pipeline_run(args, config):
    report = run_pipeline(load_run_config(config))
    print(json.dumps({'images': report.images, 'roi_similarity': report.roi_similarity}, indent=2))


def cmd_pipeline_ablate(args, config):
    grid_data = dict(config.get('ablation', {}))
    if args.lambdas is not None:
        grid_data['lambdas'] = args.lambdas
    if args.terms is not None:
        grid_data['term_sets'] = [[t.strip() for t in s.split(',') if t.strip()] for s in args.terms]
    grid_data['max_workers'] = args.workers
    df = ablate(load_run_config(config), build_model(AblationGrid, grid_data))
    print(df.to_string(index=False))


COMMANDS = {
    ('graph', 'build'): cmd_graph_build,
    ('graph', 'validate'): cmd_graph_validate,
    ('datasets', 'generate'): cmd_datasets_generate,
    ('sg2seg', 'train'): cmd_sg2seg_train,
    ('sg2seg', 'predict'): cmd_sg2seg_predict,
    ('diffuse', 'train'): cmd_diffuse_train,
    ('diffuse', 'sample'): cmd_diffuse_sample,
    ('pipeline', 'run'): cmd_pipeline_run,
    ('pipeline', 'ablate'): cmd_pipeline_ablate,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_dir, logging.DEBUG if args.verbose else logging.INFO)
    try:
        config = load_config(args)
        COMMANDS[(args.group, args.command)](args, config)
        return 0
    except LayoutGuidanceError as e:
        logger.error(str(e))
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        return 4


if __name__ == '__main__':
    sys.exit(main())
