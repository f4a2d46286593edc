import json

import numpy as np
import pytest
import torch
from PIL import Image

from layout_guidance.data_loader import (RELATIONS, CocoLikeLoader, SceneRecord, ShapesConfig, caption_for,
                                         describe_records, generate_shapes, geometric_relations, load_coco_like,
                                         load_manifest, records_to_images, save_coco_like, split_records,
                                         write_manifest)
from layout_guidance.errors import MissingImageError, SchemaError
from layout_guidance.scene_graph import validate
from layout_guidance.sg2seg import BBox, compose_segmentation


def test_generate_shapes_is_deterministic():
    a = generate_shapes(ShapesConfig(seed=3), 5)
    b = generate_shapes(ShapesConfig(seed=3), 5)
    for x, y in zip(a, b):
        assert torch.equal(x.image, y.image), f"{x.record_id} differs between runs"
        assert x.graph == y.graph and x.boxes == y.boxes and x.caption == y.caption
    c = generate_shapes(ShapesConfig(seed=4), 5)
    assert any(not torch.equal(x.image, z.image) for x, z in zip(a, c))


def test_generated_records_are_valid(shapes_records):
    """Test graph validity, object counts, value ranges and mask shapes"""
    for record in shapes_records:
        assert validate(record.graph, record.vocab) == [], f"Invalid graph in {record.record_id}"
        assert 1 <= record.graph.num_nodes <= 4
        assert record.image.shape == (64, 64, 3)
        assert record.image.min() >= 0 and record.image.max() <= 1
        assert record.masks.shape == (record.graph.num_nodes, 64, 64)
        assert set(record.masks.unique().tolist()) <= {0.0, 1.0}
        assert record.caption


def test_single_object_scenes_have_no_edges():
    records = generate_shapes(ShapesConfig(seed=1, min_objects=1, max_objects=1), 6)
    for record in records:
        assert record.graph.num_nodes == 1 and record.graph.edges == ()
        assert record.boxes[0].center == pytest.approx((0.5, 0.5), abs=3 / 64)
        assert record.caption.startswith('a ')


def test_generated_segmentation_matches_composition(shapes_records):
    for record in shapes_records[:8]:
        seg = compose_segmentation(record.boxes, record.masks, record.graph.object_indices, 64, 64,
                                   num_classes=record.seg.num_classes)
        assert torch.equal(seg.labels, record.seg.labels)


def test_shapes_config_rejects_bad_ranges():
    with pytest.raises(ValueError):
        ShapesConfig(min_objects=3, max_objects=2)
    with pytest.raises(ValueError):
        ShapesConfig(classes=('circle', 'hexagon'))
    with pytest.raises(ValueError):
        generate_shapes(ShapesConfig(), 0)


def test_geometric_relations():
    left, right = BBox(0.0, 0.4, 0.2, 0.6), BBox(0.7, 0.4, 0.9, 0.6)
    triples = geometric_relations([left, right])
    assert (0, 'left-of', 1) in triples
    assert all(rel != 'left-of' for s, rel, o in triples if s == 1)

    outer, inner = BBox(0.1, 0.1, 0.9, 0.9), BBox(0.4, 0.4, 0.6, 0.6)
    assert (1, 'inside', 0) in geometric_relations([outer, inner])

    close = [BBox(0.40, 0.40, 0.50, 0.50), BBox(0.45, 0.45, 0.55, 0.55)]
    assert geometric_relations(close) == [(0, 'beside', 1), (1, 'beside', 0)]


def test_caption_names_every_edge(vocab):
    record = generate_shapes(ShapesConfig(seed=2, min_objects=2, max_objects=2), 1)[0]
    caption = caption_for(record.graph, record.vocab)
    assert caption.count(', ') == len(record.graph.edges) - 1
    assert set(RELATIONS) == set(vocab.relationship_classes)


def test_scene_record_invariants(shapes_records):
    record = shapes_records[0]
    with pytest.raises(ValueError):
        SceneRecord(image=record.image, graph=record.graph, vocab=record.vocab,
                    boxes=record.boxes + [BBox(0, 0, 1, 1)], caption='x')
    with pytest.raises(ValueError):
        SceneRecord(image=record.image[..., :2], graph=record.graph, vocab=record.vocab,
                    boxes=record.boxes, caption='x')


def test_coco_like_round_trip(shapes_records, tmp_path):
    """Test that saved records load back with the same boxes, classes and segmentation"""
    originals = shapes_records[:6]
    annotations = save_coco_like(originals, tmp_path / 'coco')
    loader = CocoLikeLoader(annotations, tmp_path / 'coco')
    loaded = list(loader)
    assert loader.skipped == []
    assert len(loaded) == len(originals)
    for original, record in zip(originals, loaded):
        assert record.graph.object_indices == original.graph.object_indices
        for a, b in zip(original.boxes, record.boxes):
            assert a.as_tuple() == pytest.approx(b.as_tuple(), abs=1e-9)
        assert record.graph == original.graph
        assert torch.equal(record.seg.labels, original.seg.labels)
        assert (record.image - original.image).abs().max() <= 0.5 / 255 + 1e-9
        assert record.caption == original.caption


def test_annotations_without_masks_give_boxes_only(shapes_records, tmp_path):
    annotations = save_coco_like(shapes_records[:2], tmp_path)
    doc = json.loads(annotations.read_text())
    for ann in doc['annotations']:
        del ann['mask_file']
    annotations.write_text(json.dumps(doc))
    records = list(load_coco_like(annotations, tmp_path))
    assert len(records) == 2
    assert all(r.masks is None and r.seg is None for r in records)


def test_malformed_box_is_skipped_and_logged(shapes_records, tmp_path, caplog):
    annotations = save_coco_like(shapes_records[:3], tmp_path)
    doc = json.loads(annotations.read_text())
    first = next(a for a in doc['annotations'] if a['image_id'] == 1)
    first['bbox'] = [10, 10, 0, 5]
    annotations.write_text(json.dumps(doc))
    loader = CocoLikeLoader(annotations, tmp_path)
    with caplog.at_level('WARNING'):
        records = list(loader)
    assert [r.record_id for r in records] == ['0', '2']
    assert loader.skipped[0][0] == 1 and 'malformed box' in loader.skipped[0][1]
    assert 'Skipping image 1' in caplog.text


def test_image_without_annotations_is_skipped(tmp_path):
    Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(tmp_path / 'a.png')
    path = tmp_path / 'annotations.json'
    path.write_text(json.dumps({'categories': [{'id': 1, 'name': 'circle'}],
                                'images': [{'id': 5, 'file_name': 'a.png', 'width': 8, 'height': 8}]}))
    loader = CocoLikeLoader(path, tmp_path)
    assert list(loader) == []
    assert loader.skipped == [(5, 'no annotations')]


def test_missing_image_raises(shapes_records, tmp_path):
    annotations = save_coco_like(shapes_records[:1], tmp_path)
    (tmp_path / '000000.png').unlink()
    with pytest.raises(MissingImageError):
        list(load_coco_like(annotations, tmp_path))
    with pytest.raises(MissingImageError):
        list(load_coco_like(tmp_path / 'nope.json', tmp_path))


def test_schema_errors_name_the_field(tmp_path):
    path = tmp_path / 'annotations.json'
    path.write_text(json.dumps({'categories': [{'id': 1, 'name': 'circle'}],
                                'images': [{'id': 0, 'file_name': 'a.png', 'width': -1, 'height': 8}]}))
    with pytest.raises(SchemaError) as err:
        list(load_coco_like(path, tmp_path))
    assert err.value.field_path == 'images[0].width'
    assert err.value.module == 'datasets'

    path.write_text(json.dumps({'categories': [{'id': 1, 'name': 'circle'}],
                                'images': [{'id': 0, 'file_name': 'a.png', 'width': 8, 'height': 8}],
                                'annotations': [{'image_id': 0, 'category_id': 9, 'bbox': [0, 0, 4, 4]}]}))
    with pytest.raises(SchemaError) as err:
        list(load_coco_like(path, tmp_path))
    assert err.value.field_path == 'annotations[0].category_id'

    path.write_text('{broken')
    with pytest.raises(SchemaError):
        list(load_coco_like(path, tmp_path))


def test_split_and_manifest(shapes_records, tmp_path):
    train, val = split_records(shapes_records, 0.25, seed=0)
    assert len(val) == 6 and len(train) == 18
    assert not {r.record_id for r in train} & {r.record_id for r in val}
    again = split_records(shapes_records, 0.25, seed=0)[1]
    assert [r.record_id for r in again] == [r.record_id for r in val]

    path = write_manifest(tmp_path / 'm' / 'manifest.json',
                          {'train': [r.record_id for r in train], 'val': [r.record_id for r in val]},
                          seed=0, extra={'generator': 'shapes'})
    manifest = load_manifest(path)
    assert manifest['splits']['val'] == [r.record_id for r in val]
    assert manifest['generator'] == 'shapes'
    (tmp_path / 'bad.json').write_text(json.dumps({'seed': 0}))
    with pytest.raises(SchemaError):
        load_manifest(tmp_path / 'bad.json')


def test_describe_records(shapes_records):
    census = describe_records(shapes_records)
    assert list(census.columns) == ['kind', 'name', 'count']
    objects = census[census['kind'] == 'object']['count'].sum()
    assert objects == sum(r.graph.num_nodes for r in shapes_records)
    relations = census[census['kind'] == 'relation']['count'].sum()
    assert relations == sum(len(r.graph.edges) for r in shapes_records)


def test_records_to_images(shapes_records):
    images = records_to_images(shapes_records[:4], size=32)
    assert images.shape == (4, 3, 32, 32)
    assert images.dtype == torch.float64
    first = shapes_records[0].image_chw()
    assert torch.allclose(images[0, :, 0, 0], first[:, :2, :2].mean(dim=(1, 2)))


@pytest.mark.slow
def test_generator_composition_oracle_large():
    records = generate_shapes(ShapesConfig(seed=21), 1000)
    for record in records:
        assert validate(record.graph, record.vocab) == []
        seg = compose_segmentation(record.boxes, record.masks, record.graph.object_indices, 64, 64,
                                   num_classes=record.seg.num_classes)
        assert torch.equal(seg.labels, record.seg.labels), f"Composition differs for {record.record_id}"
