"""Scene graph data model and ingestion from (subject, predicate, object) triplets.

A mention is a class name with an optional instance tag, e.g. ``sheep`` or
``sheep#2``. Untagged mentions in different triplets refer to instance 1 of
their class; when a triplet's subject and object resolve to the same
instance the object becomes the next instance, so ("sheep", "by", "sheep")
yields two sheep nodes.
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from layout_guidance.errors import EmptyInputError, GraphIoError, SchemaError, UnknownClassError

logger = logging.getLogger(__name__)

INSTANCE_SEP = '#'


class Vocab(BaseModel):
    """Ordered object and relationship class names; indices are list positions"""

    model_config = ConfigDict(frozen=True)

    object_classes: Tuple[str, ...] = Field(..., description="Object class names")
    relationship_classes: Tuple[str, ...] = Field(..., description="Predicate names")

    @field_validator('object_classes', 'relationship_classes')
    @classmethod
    def _unique(cls, names):
        seen = set()
        for name in names:
            if name in seen:
                raise ValueError(f"duplicate name '{name}'")
            if INSTANCE_SEP in name:
                raise ValueError(f"name '{name}' may not contain '{INSTANCE_SEP}'")
            seen.add(name)
        return names

    def object_index(self, name: str) -> int:
        try:
            return self.object_classes.index(name)
        except ValueError:
            raise UnknownClassError(name, kind="object")

    def relation_index(self, name: str) -> int:
        try:
            return self.relationship_classes.index(name)
        except ValueError:
            raise UnknownClassError(name, kind="relationship")


class Triplet(BaseModel):
    """One relationship statement, subject first"""

    model_config = ConfigDict(frozen=True)

    subject_class: str
    predicate: str
    object_class: str

    @classmethod
    def parse(cls, text: str) -> "Triplet":
        """Parse the command line form ``"subj,pred,obj"``"""
        parts = [p.strip() for p in text.split(',')]
        if len(parts) != 3 or not all(parts):
            raise SchemaError('triplet', f"expected 'subject,predicate,object', got '{text}'")
        return cls(subject_class=parts[0], predicate=parts[1], object_class=parts[2])


class SceneGraph(BaseModel):
    """Nodes are (node_id, object_class_index); edges are (src, relationship_index, dst)"""

    model_config = ConfigDict(frozen=True)

    nodes: Tuple[Tuple[int, int], ...]
    edges: Tuple[Tuple[int, int, int], ...] = ()

    @model_validator(mode='after')
    def _structure(self):
        problems = structural_violations(self)
        if problems:
            raise ValueError('; '.join(problems))
        return self

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def object_indices(self) -> List[int]:
        return [cls_idx for _, cls_idx in self.nodes]


def split_mention(mention: str) -> Tuple[str, Optional[int]]:
    """``"sheep#2"`` -> ("sheep", 2); ``"sheep"`` -> ("sheep", None)"""
    mention = mention.strip()
    if INSTANCE_SEP in mention:
        name, tag = mention.rsplit(INSTANCE_SEP, 1)
        try:
            instance = int(tag)
        except ValueError:
            raise SchemaError('triplet', f"instance tag in '{mention}' must be an integer")
        if instance < 1:
            raise SchemaError('triplet', f"instance tag in '{mention}' must be >= 1")
        return name.strip(), instance
    return mention, None


def build_graph(triplets: Sequence[Triplet], vocab: Vocab) -> SceneGraph:
    """Build a scene graph with one node per distinct mention and one edge per triplet"""
    if not triplets:
        raise EmptyInputError("build_graph needs at least one triplet")

    node_of: Dict[Tuple[str, int], int] = {}
    nodes: List[Tuple[int, int]] = []
    edges: List[Tuple[int, int, int]] = []

    def node_for(name: str, instance: int) -> int:
        key = (name, instance)
        if key not in node_of:
            node_of[key] = len(nodes)
            nodes.append((len(nodes), vocab.object_index(name)))
        return node_of[key]

    for triplet in triplets:
        subj_name, subj_inst = split_mention(triplet.subject_class)
        obj_name, obj_inst = split_mention(triplet.object_class)
        rel_idx = vocab.relation_index(triplet.predicate.strip())
        # resolve names before creating nodes so unknown classes leave no partial state
        vocab.object_index(subj_name)
        vocab.object_index(obj_name)

        subj_inst = subj_inst or 1
        if obj_inst is None:
            obj_inst = subj_inst + 1 if obj_name == subj_name else 1
        if (subj_name, subj_inst) == (obj_name, obj_inst):
            raise SchemaError('triplet', f"'{triplet.subject_class}' relates to itself")

        src = node_for(subj_name, subj_inst)
        dst = node_for(obj_name, obj_inst)
        edges.append((src, rel_idx, dst))

    graph = SceneGraph(nodes=tuple(nodes), edges=tuple(edges))
    logger.debug(f"Built graph with {graph.num_nodes} nodes and {len(edges)} edges")
    return graph


def graph_to_triplets(graph: SceneGraph, vocab: Vocab) -> List[Triplet]:
    """Canonical tagged triplets that rebuild ``graph`` (isolated nodes are not representable)"""
    instance_of = {}
    counts: Dict[str, int] = {}
    for node_id, cls_idx in graph.nodes:
        name = vocab.object_classes[cls_idx]
        counts[name] = counts.get(name, 0) + 1
        instance_of[node_id] = f"{name}{INSTANCE_SEP}{counts[name]}"
    return [
        Triplet(subject_class=instance_of[src],
                predicate=vocab.relationship_classes[rel],
                object_class=instance_of[dst])
        for src, rel, dst in graph.edges
    ]


def structural_violations(graph: SceneGraph) -> List[str]:
    """Invariant checks that do not need a vocabulary"""
    problems = []
    if len(graph.nodes) == 0:
        problems.append("graph has no nodes")
    ids = [node_id for node_id, _ in graph.nodes]
    if ids != list(range(len(ids))):
        problems.append(f"node ids must be contiguous 0..{len(ids) - 1}, got {ids}")
    valid = set(range(len(graph.nodes)))
    for k, (src, _, dst) in enumerate(graph.edges):
        if src == dst:
            problems.append(f"self_loop at edge {k}")
        for role, endpoint in (('src', src), ('dst', dst)):
            if endpoint not in valid:
                problems.append(f"edge {k}: {role} {endpoint} is not a node id")
    return problems


def validate(graph: SceneGraph, vocab: Vocab) -> List[str]:
    """Every invariant violation as a message; empty when the graph is valid"""
    problems = structural_violations(graph)
    for node_id, cls_idx in graph.nodes:
        if not 0 <= cls_idx < len(vocab.object_classes):
            problems.append(f"node {node_id}: class index {cls_idx} out of vocab range")
    for k, (_, rel_idx, _) in enumerate(graph.edges):
        if not 0 <= rel_idx < len(vocab.relationship_classes):
            problems.append(f"edge {k}: relationship index {rel_idx} out of vocab range")
    return problems


# JSON file schema

class _VocabRecord(BaseModel):
    objects: List[str]
    relations: List[str]


class _NodeRecord(BaseModel):
    id: int
    class_: str = Field(..., alias='class')


class _EdgeRecord(BaseModel):
    src: int
    rel: str
    dst: int


class _GraphFile(BaseModel):
    vocab: _VocabRecord
    nodes: List[_NodeRecord]
    edges: List[_EdgeRecord] = []


def _field_path(loc) -> str:
    path = ''
    for part in loc:
        if isinstance(part, int):
            path += f'[{part}]'
        else:
            path += ('.' if path else '') + str(part)
    return path or '<root>'


def graph_from_dict(data: dict) -> Tuple[SceneGraph, Vocab]:
    """Validate a decoded graph document; SchemaError names the first failing field"""
    try:
        doc = _GraphFile.model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        raise SchemaError(_field_path(err['loc']), err['msg'])

    try:
        vocab = Vocab(object_classes=tuple(doc.vocab.objects),
                      relationship_classes=tuple(doc.vocab.relations))
    except ValidationError as e:
        raise SchemaError('vocab', e.errors()[0]['msg'])

    if not doc.nodes:
        raise SchemaError('nodes', "graph needs at least one node")

    ordered = sorted(enumerate(doc.nodes), key=lambda item: item[1].id)
    ids = [node.id for _, node in ordered]
    if ids != list(range(len(ids))):
        raise SchemaError('nodes', f"node ids must be contiguous 0..{len(ids) - 1}, got {sorted(ids)}")

    nodes = []
    for position, node in ordered:
        if node.class_ not in vocab.object_classes:
            raise SchemaError(f'nodes[{position}].class', f"unknown object class '{node.class_}'")
        nodes.append((node.id, vocab.object_index(node.class_)))

    edges = []
    for k, edge in enumerate(doc.edges):
        for role in ('src', 'dst'):
            endpoint = getattr(edge, role)
            if not 0 <= endpoint < len(nodes):
                raise SchemaError(f'edges[{k}].{role}', f"endpoint {endpoint} is not a node id")
        if edge.src == edge.dst:
            raise SchemaError(f'edges[{k}]', "self-loop edges are not allowed")
        if edge.rel not in vocab.relationship_classes:
            raise SchemaError(f'edges[{k}].rel', f"unknown relationship '{edge.rel}'")
        edges.append((edge.src, vocab.relation_index(edge.rel), edge.dst))

    return SceneGraph(nodes=tuple(nodes), edges=tuple(edges)), vocab


def graph_to_dict(graph: SceneGraph, vocab: Vocab) -> dict:
    """Canonical document: nodes by id, edges in graph order"""
    return {
        'vocab': {
            'objects': list(vocab.object_classes),
            'relations': list(vocab.relationship_classes),
        },
        'nodes': [{'id': node_id, 'class': vocab.object_classes[cls_idx]}
                  for node_id, cls_idx in sorted(graph.nodes)],
        'edges': [{'src': src, 'rel': vocab.relationship_classes[rel], 'dst': dst}
                  for src, rel, dst in graph.edges],
    }


def load_graph_json(path) -> Tuple[SceneGraph, Vocab]:
    """Load a graph file in the documented JSON layout"""
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except OSError as e:
        raise GraphIoError(f"Cannot read graph file {path}: {e}")
    except json.JSONDecodeError as e:
        raise SchemaError('<root>', f"{path} is not valid JSON: {e}")
    graph, vocab = graph_from_dict(data)
    logger.info(f"Loaded graph from {path}: {graph.num_nodes} nodes, {len(graph.edges)} edges")
    return graph, vocab


def save_graph_json(graph: SceneGraph, vocab: Vocab, path) -> Path:
    """Write ``graph`` in canonical form"""
    path = Path(path)
    problems = validate(graph, vocab)
    if problems:
        raise SchemaError('graph', '; '.join(problems))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(graph_to_dict(graph, vocab), f, indent=2)
    except OSError as e:
        raise GraphIoError(f"Cannot write graph file {path}: {e}")
    return path
