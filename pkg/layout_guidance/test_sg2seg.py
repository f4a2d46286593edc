import pytest
import torch
import torch.nn.functional as F

from layout_guidance.data_loader import ShapesConfig, generate_shapes, split_records
from layout_guidance.errors import (DatasetEmptyError, EmptyLayoutError, LengthMismatchError,
                                    NonFiniteLossError, ShapeError)
from layout_guidance.scene_graph import SceneGraph
from layout_guidance.sg2seg import (BBox, NodeFeatureSource, SegMap, SG2SEGModelConfig, SG2SEGTrainConfig,
                                    SG2SEGTrainer, build_model, clamp_box, compose_segmentation, gcn_forward,
                                    load_layout_json, load_sg2seg, loss_box, loss_mask, loss_seg, mask_iou,
                                    predict_box, predict_box_raw, predict_layout, predict_mask,
                                    save_layout_json, soft_layout, train)


def _features(n, dim=512, seed=0):
    return torch.randn(n, dim, generator=torch.Generator().manual_seed(seed))


def test_bbox_invariants():
    with pytest.raises(ValueError):
        BBox(0.5, 0.1, 0.5, 0.2)
    with pytest.raises(ValueError):
        BBox(0.1, 0.1, 1.2, 0.5)
    box = BBox.from_pixels(16, 0, 48, 32, 64, 64)
    assert box.area == 0.25 and box.center == (0.5, 0.25)


def test_gcn_output_shape(small_sg2seg):
    graph = SceneGraph(nodes=((0, 0), (1, 1), (2, 2)), edges=((0, 0, 1), (2, 1, 1)))
    out = gcn_forward(small_sg2seg, graph, _features(3))
    assert out.shape == (3, 32), f"Unexpected embedding shape {tuple(out.shape)}"
    with pytest.raises(ShapeError):
        gcn_forward(small_sg2seg, graph, _features(2))


def test_gcn_isolated_node_is_own_transform(small_sg2seg):
    """Test that a single isolated node only passes through its per-layer transforms"""
    graph = SceneGraph(nodes=((0, 1),))
    x = _features(1)
    with torch.no_grad():
        expected = small_sg2seg.gcn.input_proj(x)
        for gconv in small_sg2seg.gcn.gconvs:
            expected = gconv.node_transform(expected)
        out = gcn_forward(small_sg2seg, graph, x)
    assert torch.allclose(out, expected, atol=1e-6), "Isolated node should ignore message passing"


def test_gcn_permutation_equivariance(small_sg2seg):
    """Test that relabelling nodes permutes the output rows"""
    graph = SceneGraph(nodes=((0, 0), (1, 1), (2, 2), (3, 3)), edges=((0, 0, 1), (1, 1, 2), (3, 3, 0)))
    perm = [2, 0, 3, 1]  # new id of old node i
    inverse = [perm.index(k) for k in range(4)]
    permuted = SceneGraph(nodes=tuple((k, graph.nodes[inverse[k]][1]) for k in range(4)),
                          edges=tuple((perm[s], r, perm[d]) for s, r, d in graph.edges))
    x = _features(4)
    with torch.no_grad():
        out = gcn_forward(small_sg2seg, graph, x)
        out_perm = gcn_forward(small_sg2seg, permuted, x[inverse])
    assert torch.allclose(out_perm, out[inverse], atol=1e-5), "GCN is not permutation equivariant"


def test_gcn_sees_relationship_labels(small_sg2seg):
    x = _features(2)
    with torch.no_grad():
        a = gcn_forward(small_sg2seg, SceneGraph(nodes=((0, 0), (1, 1)), edges=((0, 0, 1),)), x)
        b = gcn_forward(small_sg2seg, SceneGraph(nodes=((0, 0), (1, 1)), edges=((0, 1, 1),)), x)
    assert not torch.allclose(a, b), "Different relationships must change the embeddings"


def test_clamp_box_invariants():
    """Test the box invariants over extreme and random raw outputs"""
    raw = torch.cat([
        torch.randn(500, 4, generator=torch.Generator().manual_seed(1)) * 10,
        torch.tensor([[0.0, 0.0, 0.0, 0.0], [50.0, 50.0, 50.0, 50.0], [-50.0, -50.0, -50.0, -50.0],
                      [5.0, -5.0, -5.0, 5.0]]),
    ]).to(torch.float64)
    boxes = clamp_box(raw)
    x0, y0, x1, y1 = boxes.unbind(-1)
    assert ((x0 >= 0) & (y0 >= 0) & (x1 <= 1) & (y1 <= 1)).all()
    assert ((x1 - x0) >= 1 / 64 - 1e-12).all() and ((y1 - y0) >= 1 / 64 - 1e-12).all()
    for row in boxes:
        BBox.from_sequence(row.tolist())


def test_clamp_box_is_differentiable():
    raw = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    clamp_box(raw).sum().backward()
    assert torch.isfinite(raw.grad).all()


def test_predict_box_and_mask(small_sg2seg):
    emb = torch.randn(3, 32)
    boxes = predict_box(small_sg2seg, emb)
    assert len(boxes) == 3 and all(isinstance(b, BBox) for b in boxes)
    assert predict_box_raw(small_sg2seg, emb).shape == (3, 4)
    small_sg2seg.eval()
    masks = predict_mask(small_sg2seg, emb)
    assert masks.shape == (3, 1, 64, 64)
    assert (masks > 0).all() and (masks < 1).all(), "Mask values must stay inside (0, 1)"


def test_predict_mask_zero_head_is_uniform(small_sg2seg):
    """Test that a zeroed final convolution gives a uniform 0.5 mask"""
    small_sg2seg.eval()
    with torch.no_grad():
        small_sg2seg.mask_net.output.weight.zero_()
        small_sg2seg.mask_net.output.bias.zero_()
        masks = predict_mask(small_sg2seg, torch.randn(2, 32))
    assert torch.equal(masks, torch.full_like(masks, 0.5))


def test_compose_single_full_square():
    """Test that one full-image square gives class + 1 everywhere"""
    seg = compose_segmentation([BBox(0, 0, 1, 1)], torch.ones(1, 64, 64), [3], 64, 64, num_classes=5)
    assert torch.equal(seg.labels, torch.full((64, 64), 4, dtype=torch.long))


def test_compose_tie_goes_to_lower_index():
    boxes = [BBox(0, 0, 1, 1), BBox(0, 0, 1, 1)]
    seg = compose_segmentation(boxes, torch.ones(2, 64, 64), [1, 2], 64, 64)
    assert (seg.labels == 2).all(), "Overlap tie must go to node 0 (class 1 -> label 2)"


def test_compose_background_below_threshold():
    seg = compose_segmentation([BBox(0, 0, 0.5, 0.5)], torch.full((1, 64, 64), 0.4), [0], 64, 64)
    assert (seg.labels == 0).all()


def test_compose_errors():
    with pytest.raises(EmptyLayoutError):
        compose_segmentation([], torch.zeros(0, 64, 64), [], 64, 64)
    with pytest.raises(LengthMismatchError):
        compose_segmentation([BBox(0, 0, 1, 1)], torch.ones(2, 64, 64), [0], 64, 64)
    with pytest.raises(ShapeError):
        compose_segmentation([BBox(0, 0, 1, 1)], torch.ones(1, 64, 64), [0], 32, 32)


def test_compose_reproduces_generator_ground_truth(shapes_records):
    """Test the composition oracle on generated scenes"""
    for record in shapes_records:
        h, w = record.image_size
        seg = compose_segmentation(record.boxes, record.masks, record.graph.object_indices, h, w,
                                   num_classes=record.seg.num_classes)
        assert torch.equal(seg.labels, record.seg.labels), f"Composition differs for {record.record_id}"


@pytest.mark.slow
def test_compose_oracle_sweep():
    for record in generate_shapes(ShapesConfig(seed=11), 1000):
        seg = compose_segmentation(record.boxes, record.masks, record.graph.object_indices, 64, 64,
                                   num_classes=record.seg.num_classes)
        assert torch.equal(seg.labels, record.seg.labels), f"Composition differs for {record.record_id}"


def test_soft_layout_matches_hard_layout_for_binary_masks(shapes_records):
    record = shapes_records[0]
    classes = torch.tensor(record.graph.object_indices)
    boxes = torch.stack([b.as_tensor() for b in record.boxes])
    soft = soft_layout(boxes, record.masks.to(torch.float64), classes, record.seg.num_classes, 64, 64)
    assert soft.shape == (record.seg.num_classes, 64, 64)
    agree = (soft.argmax(dim=0) == record.seg.labels).double().mean()
    assert agree > 0.95, f"Soft layout agrees on only {agree:.3f} of pixels"


def test_loss_box():
    pred = [BBox(0.1, 0.1, 0.5, 0.5)]
    assert float(loss_box(pred, pred)) == 0.0
    gt = [BBox(0.2, 0.1, 0.5, 0.6)]
    assert float(loss_box(pred, gt)) == pytest.approx(0.2)
    with pytest.raises(LengthMismatchError):
        loss_box(pred, gt * 2)


def test_loss_mask_matches_elementwise_bce():
    """Test loss_mask against a hand-written binary cross entropy"""
    g = torch.Generator().manual_seed(3)
    for _ in range(5):
        pred = torch.rand(3, 64, 64, generator=g, dtype=torch.float64).clamp(1e-6, 1 - 1e-6)
        gt = (torch.rand(3, 64, 64, generator=g, dtype=torch.float64) > 0.5).double()
        oracle = -(gt * pred.log() + (1 - gt) * (1 - pred).log()).mean(dim=(1, 2)).sum()
        assert abs(float(loss_mask(pred, gt)) - float(oracle)) < 1e-10
    with pytest.raises(ShapeError):
        loss_mask(torch.rand(2, 64, 64), torch.rand(3, 64, 64))


def test_loss_seg():
    seg = SegMap(torch.randint(0, 3, (16, 16), generator=torch.Generator().manual_seed(0)), 3)
    assert float(loss_seg(seg.one_hot(), seg.one_hot())) == 0.0
    with pytest.raises(ShapeError):
        loss_seg(torch.zeros(3, 8, 8), torch.zeros(3, 16, 16))


def test_mask_iou():
    a = torch.zeros(1, 4, 4)
    a[0, :2] = 1
    b = torch.zeros(1, 4, 4)
    b[0, :1] = 1
    assert float(mask_iou(a, b)[0]) == pytest.approx(0.5)


def test_node_feature_modes(embedder, vocab):
    graph = SceneGraph(nodes=((0, 0), (1, 0)))
    semantic = NodeFeatureSource(embedder, vocab, 'semantic').for_graph(graph)
    assert torch.equal(semantic[0], semantic[1]), "Same class must share semantic features"
    random = NodeFeatureSource(embedder, vocab, 'random', seed=1)
    assert not torch.equal(random.for_graph(graph)[0], random.for_graph(graph)[1])
    assert torch.equal(random.for_graph(graph, key=3), random.for_graph(graph, key=3))


def _tiny_config(**overrides):
    base = dict(epochs=2, batch_size=8, learning_rate=1e-3, seg_size=16)
    base.update(overrides)
    return SG2SEGTrainConfig(**base)


def test_train_runs_and_logs_metrics(small_sg2seg, shapes_records, embedder, tmp_path):
    train_set, val_set = split_records(shapes_records, 0.25, seed=0)
    config = _tiny_config(checkpoint_path=str(tmp_path / 'sg2seg.lgck'))
    result = train(small_sg2seg, train_set, config, shapes_records[0].vocab, embedder, val_dataset=val_set)
    assert list(result.metrics['epoch']) == [1, 2]
    for column in ('loss', 'loss_box', 'loss_mask', 'loss_seg', 'val_box_l1', 'val_mask_iou'):
        assert column in result.metrics.columns, f"Missing metric column {column}"
    assert result.checkpoint_path.exists()

    model, vocab, profile, train_cfg = load_sg2seg(result.checkpoint_path)
    assert vocab == shapes_records[0].vocab
    assert train_cfg['epochs'] == 2
    for key, value in small_sg2seg.state_dict().items():
        assert torch.equal(model.state_dict()[key], value), f"Checkpoint changed {key}"


def test_train_is_deterministic(shapes_records, embedder):
    """Test that identical seeds give identical metric logs"""
    config = SG2SEGModelConfig(embedding_dim=16, gconv_hidden_dim=32, gconv_num_layers=1, box_hidden_dim=32)
    logs = []
    for _ in range(2):
        model = build_model(4, config, seed=5)
        logs.append(train(model, shapes_records[:8], _tiny_config(epochs=1), shapes_records[0].vocab,
                          embedder).metrics)
    assert logs[0].equals(logs[1]), "Metric logs differ between identical runs"


def test_train_errors(small_sg2seg, shapes_records, embedder):
    with pytest.raises(DatasetEmptyError):
        train(small_sg2seg, [], _tiny_config(), shapes_records[0].vocab, embedder)
    with torch.no_grad():
        small_sg2seg.box_net[0].weight.fill_(float('nan'))
    with pytest.raises(NonFiniteLossError) as err:
        train(small_sg2seg, shapes_records[:4], _tiny_config(), shapes_records[0].vocab, embedder)
    assert 'loss_box' in err.value.diagnostics


def test_train_overfits_single_record(embedder):
    """Test that 500 steps on one record drive the box loss close to zero"""
    record = generate_shapes(ShapesConfig(seed=2, min_objects=2, max_objects=2), 1)[0]
    config = SG2SEGModelConfig(embedding_dim=32, gconv_hidden_dim=64, gconv_num_layers=2, box_hidden_dim=64)
    model = build_model(4, config, seed=0)
    trainer = SG2SEGTrainer(model, record.vocab, embedder,
                            _tiny_config(epochs=500, max_steps=500, mask_weight=0.0, seg_weight=0.0))
    result = trainer.train([record])
    assert result.metrics['train_box_l1'].iloc[-1] < 0.02, \
        f"Box error {result.metrics['train_box_l1'].iloc[-1]:.4f} after 500 steps"


def test_predict_layout_and_json_round_trip(small_sg2seg, shapes_records, embedder, tmp_path):
    record = shapes_records[1]
    layout = predict_layout(small_sg2seg, record.graph, record.vocab, embedder)
    assert len(layout) == record.graph.num_nodes
    assert layout.seg.size == (64, 64)
    path = save_layout_json(layout, tmp_path / 'out' / 'layout.json')
    loaded = load_layout_json(path)
    assert loaded.classes == layout.classes
    assert [b.as_tuple() for b in loaded.boxes] == [b.as_tuple() for b in layout.boxes]
    assert torch.equal(loaded.seg.labels, layout.seg.labels), "Palette PNG must keep class indices"
    assert (loaded.masks - layout.masks).abs().max() <= 0.5 / 255 + 1e-9


def test_segmap_one_hot_and_resize():
    labels = torch.tensor([[0, 1], [2, 1]])
    seg = SegMap(labels, 3)
    one_hot = seg.one_hot()
    assert one_hot.shape == (3, 2, 2)
    assert torch.equal(one_hot.argmax(dim=0), labels)
    assert seg.resize(4, 4).labels[3, 0] == 2
    with pytest.raises(ValueError):
        SegMap(torch.tensor([[0, 3]]), 3)
    assert torch.equal(F.one_hot(labels, 3).permute(2, 0, 1).double(), one_hot)


@pytest.mark.slow
def test_sg2seg_learns_shapes_layouts(embedder):
    """Test held-out box error < 0.05 and mask IoU > 0.7 after 20 epochs on 1000 records"""
    records = generate_shapes(ShapesConfig(seed=0), 1000)
    train_set, val_set = records[:800], records[800:]
    model = build_model(4, SG2SEGModelConfig(), seed=0)
    result = train(model, train_set, SG2SEGTrainConfig(epochs=20), records[0].vocab,
                   embedder, val_dataset=val_set)
    last = result.metrics.iloc[-1]
    assert last['val_box_l1'] < 0.05, f"Held-out box L1 {last['val_box_l1']:.4f}"
    assert last['val_mask_iou'] > 0.7, f"Held-out mask IoU {last['val_mask_iou']:.3f}"


@pytest.mark.slow
def test_semantic_node_features_beat_random(embedder):
    """Test that prompt-embedding node features reach held-out box error <= random features"""
    records = generate_shapes(ShapesConfig(seed=4), 400)
    train_set, val_set = records[:320], records[320:]
    config = SG2SEGModelConfig(embedding_dim=64, gconv_hidden_dim=128, gconv_num_layers=3, box_hidden_dim=128)
    errors = {'semantic': [], 'random': []}
    for seed in range(5):
        for mode in errors:
            model = build_model(4, config, seed=seed)
            result = train(model, train_set, SG2SEGTrainConfig(seed=seed, epochs=5, learning_rate=1e-3,
                                                               node_features=mode, mask_weight=0.0,
                                                               seg_weight=0.0),
                           records[0].vocab, embedder, val_dataset=val_set)
            errors[mode].append(result.metrics['val_box_l1'].iloc[-1])
    semantic, random = sum(errors['semantic']) / 5, sum(errors['random']) / 5
    assert semantic <= random, f"Semantic features {semantic:.4f} worse than random {random:.4f}"
