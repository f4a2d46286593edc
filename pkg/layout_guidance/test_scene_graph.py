import json

import pytest

from layout_guidance.errors import EmptyInputError, GraphIoError, SchemaError, UnknownClassError
from layout_guidance.scene_graph import (SceneGraph, Triplet, Vocab, build_graph, graph_from_dict,
                                         graph_to_dict, graph_to_triplets, load_graph_json, save_graph_json,
                                         split_mention, validate)


def T(s, p, o):
    return Triplet(subject_class=s, predicate=p, object_class=o)


def test_build_graph_same_class_pair(sheep_vocab):
    """Test that a sheep by a sheep yields two sheep nodes and one edge"""
    graph = build_graph([T('sheep', 'by', 'sheep')], sheep_vocab)
    assert graph.nodes == ((0, 0), (1, 0)), f"Unexpected nodes {graph.nodes}"
    assert graph.edges == ((0, 0, 1),), f"Unexpected edges {graph.edges}"


def test_build_graph_shared_mentions(sheep_vocab):
    """Test that untagged mentions across triplets refer to the same node"""
    graph = build_graph([T('sheep', 'on', 'grass'), T('sky', 'above', 'grass')], sheep_vocab)
    assert graph.num_nodes == 3, f"Expected 3 nodes, got {graph.num_nodes}"
    assert graph.edges == ((0, 1, 1), (2, 2, 1)), f"Unexpected edges {graph.edges}"


def test_build_graph_instance_tags(sheep_vocab):
    graph = build_graph([T('sheep#1', 'by', 'sheep#2'), T('sheep#2', 'on', 'grass')], sheep_vocab)
    assert graph.num_nodes == 3
    assert graph.edges[1] == (1, 1, 2)


def test_build_graph_errors(sheep_vocab):
    """Test empty input, unknown classes and explicit self references"""
    with pytest.raises(EmptyInputError):
        build_graph([], sheep_vocab)
    with pytest.raises(UnknownClassError) as err:
        build_graph([T('unicorn', 'by', 'sheep')], sheep_vocab)
    assert err.value.name == 'unicorn'
    with pytest.raises(UnknownClassError):
        build_graph([T('sheep', 'eats', 'grass')], sheep_vocab)
    with pytest.raises(SchemaError):
        build_graph([T('sheep#1', 'by', 'sheep#1')], sheep_vocab)


def test_split_mention():
    assert split_mention('sheep#2') == ('sheep', 2)
    assert split_mention(' tree ') == ('tree', None)
    with pytest.raises(SchemaError):
        split_mention('sheep#x')
    with pytest.raises(SchemaError):
        split_mention('sheep#0')


def test_triplet_parse():
    assert Triplet.parse('sheep, left of ,tree') == T('sheep', 'left of', 'tree')
    with pytest.raises(SchemaError):
        Triplet.parse('sheep,by')


def test_graph_to_triplets_rebuilds_graph(sheep_vocab):
    graph = build_graph([T('sheep', 'by', 'sheep'), T('sheep#2', 'on', 'grass')], sheep_vocab)
    rebuilt = build_graph(graph_to_triplets(graph, sheep_vocab), sheep_vocab)
    assert rebuilt == graph, f"Round trip changed the graph: {rebuilt} vs {graph}"


def test_validate_reports_every_violation(sheep_vocab):
    """Test that validate lists self loops, dangling edges and out-of-range classes"""
    graph = SceneGraph.model_construct(nodes=((0, 0), (1, 9)), edges=((0, 0, 0), (0, 7, 5)))
    problems = validate(graph, sheep_vocab)
    assert "self_loop at edge 0" in problems, f"Missing self loop in {problems}"
    assert "edge 1: dst 5 is not a node id" in problems
    assert "node 1: class index 9 out of vocab range" in problems
    assert "edge 1: relationship index 7 out of vocab range" in problems


def test_validate_accepts_isolated_node(sheep_vocab):
    graph = SceneGraph(nodes=((0, 2),))
    assert validate(graph, sheep_vocab) == []


def test_scene_graph_rejects_self_loop():
    with pytest.raises(ValueError):
        SceneGraph(nodes=((0, 0), (1, 1)), edges=((1, 0, 1),))


def test_vocab_rejects_duplicates():
    with pytest.raises(ValueError):
        Vocab(object_classes=('a', 'a'), relationship_classes=('r',))
    with pytest.raises(ValueError):
        Vocab(object_classes=('a#1',), relationship_classes=('r',))


def test_json_round_trip(tmp_path, sheep_vocab):
    """Test save/load keeps nodes, edges and vocab"""
    graph = build_graph([T('sheep', 'on', 'grass'), T('tree', 'left of', 'sheep')], sheep_vocab)
    path = save_graph_json(graph, sheep_vocab, tmp_path / 'g' / 'graph.json')
    loaded, loaded_vocab = load_graph_json(path)
    assert loaded == graph
    assert loaded_vocab == sheep_vocab


def test_graph_from_dict_names_failing_field(sheep_vocab):
    doc = graph_to_dict(build_graph([T('sheep', 'on', 'grass')], sheep_vocab), sheep_vocab)
    doc['edges'][0]['dst'] = 4
    with pytest.raises(SchemaError) as err:
        graph_from_dict(doc)
    assert err.value.field_path == 'edges[0].dst', f"Unexpected field path {err.value.field_path}"

    doc = graph_to_dict(build_graph([T('sheep', 'on', 'grass')], sheep_vocab), sheep_vocab)
    doc['nodes'][1]['class'] = 'cow'
    with pytest.raises(SchemaError) as err:
        graph_from_dict(doc)
    assert err.value.field_path == 'nodes[1].class'

    with pytest.raises(SchemaError) as err:
        graph_from_dict({'vocab': {'objects': [], 'relations': []}, 'nodes': [{'id': 'x', 'class': 'a'}]})
    assert err.value.field_path == 'nodes[0].id'


def test_load_graph_json_errors(tmp_path):
    with pytest.raises(GraphIoError):
        load_graph_json(tmp_path / 'missing.json')
    bad = tmp_path / 'bad.json'
    bad.write_text('{not json')
    with pytest.raises(SchemaError):
        load_graph_json(bad)
    bad.write_text(json.dumps({'vocab': {'objects': ['a'], 'relations': []}, 'nodes': []}))
    with pytest.raises(SchemaError):
        load_graph_json(bad)
