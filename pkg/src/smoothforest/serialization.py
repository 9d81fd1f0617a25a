"""JSON documents for forests and embedding checkpoints.

Forest document::

    {"input_dim": 2, "output_dim": 1, "trees": [node, ...]}

    node = {"split": {"feature": 0, "threshold": 0.5, "left": node, "right": node}}
         | {"leaf": {"value": [0.0]}}            # "trainable": false marks a frozen leaf

Embedding checkpoint::

    {"layers": [{"weights": [[...]], "biases": [...], "activation": "relu"}]}

Floats are written with ``repr`` precision so a load after a dump is exact.
"""

import json
import math
from numbers import Integral, Real
from pathlib import Path

import numpy as np

from .exceptions import ForestFormatError, MalformedTreeError
from .forest import Forest, Interval, Leaf, SplitNode, Tree


def _node_to_dict(node):
    if isinstance(node, Leaf):
        body = {"value": [float(v) for v in node.value]}
        if not node.trainable:
            body["trainable"] = False
        return {"leaf": body}
    return {
        "split": {
            "feature": node.feature,
            "threshold": float(node.threshold),
            "left": _node_to_dict(node.left),
            "right": _node_to_dict(node.right),
        }
    }


def forest_to_dict(forest: Forest) -> dict:
    return {
        "input_dim": forest.input_dim,
        "output_dim": forest.output_dim,
        "trees": [_node_to_dict(tree.root) for tree in forest.trees],
    }


def export_forest(forest: Forest, indent=None) -> str:
    return json.dumps(forest_to_dict(forest), indent=indent, allow_nan=False)


def _is_int(v):
    return isinstance(v, Integral) and not isinstance(v, bool)


def _is_real(v):
    return isinstance(v, Real) and not isinstance(v, bool)


def _parse_node(doc, path, input_dim, output_dim, bounds):
    if not isinstance(doc, dict):
        raise ForestFormatError("node must be an object", path)
    keys = set(doc)
    if keys == {"leaf"}:
        body = doc["leaf"]
        if not isinstance(body, dict) or "value" not in body:
            raise ForestFormatError("leaf must contain a 'value' list", path)
        value = body["value"]
        if not isinstance(value, list) or not all(_is_real(v) for v in value):
            raise ForestFormatError("leaf value must be a list of numbers", path)
        if len(value) != output_dim:
            raise ForestFormatError(
                f"leaf value has length {len(value)}, output_dim is {output_dim}", path
            )
        if not all(math.isfinite(v) for v in value):
            raise ForestFormatError("leaf value must be finite", path)
        trainable = body.get("trainable", True)
        if not isinstance(trainable, bool):
            raise ForestFormatError("leaf 'trainable' must be true or false", path)
        return Leaf(value, trainable)
    if keys == {"split"}:
        body = doc["split"]
        if not isinstance(body, dict):
            raise ForestFormatError("split must be an object", path)
        feature = body.get("feature")
        if not _is_int(feature) or not 0 <= feature < input_dim:
            raise ForestFormatError(
                f"split feature must be an integer in [0, {input_dim}), got {feature!r}", path
            )
        threshold = body.get("threshold")
        if not _is_real(threshold) or not math.isfinite(threshold):
            raise ForestFormatError(
                f"split threshold must be a finite number, got {threshold!r}", path
            )
        for side in ("left", "right"):
            if body.get(side) is None:
                raise ForestFormatError(f"split node is missing its {side} child", path)
        current = bounds.get(feature, Interval())
        try:
            left_iv = current.intersect(Interval(upper=threshold))
            right_iv = current.intersect(Interval(lower=threshold))
        except MalformedTreeError:
            raise ForestFormatError(
                f"split x[{feature}] >= {threshold} contradicts conditions above it", path
            ) from None
        left = _parse_node(body["left"], path + "/L", input_dim, output_dim,
                           {**bounds, feature: left_iv})
        right = _parse_node(body["right"], path + "/R", input_dim, output_dim,
                            {**bounds, feature: right_iv})
        return SplitNode(feature, threshold, left, right)
    raise ForestFormatError("node must have exactly one key, 'split' or 'leaf'", path)


def forest_from_dict(doc) -> Forest:
    if not isinstance(doc, dict):
        raise ForestFormatError("forest document must be an object")
    missing = {"input_dim", "output_dim", "trees"} - set(doc)
    if missing:
        raise ForestFormatError(f"missing top-level keys {sorted(missing)}")
    input_dim, output_dim, trees = doc["input_dim"], doc["output_dim"], doc["trees"]
    if not _is_int(input_dim) or input_dim < 1:
        raise ForestFormatError(f"input_dim must be a positive integer, got {input_dim!r}")
    if not _is_int(output_dim) or output_dim < 1:
        raise ForestFormatError(f"output_dim must be a positive integer, got {output_dim!r}")
    if not isinstance(trees, list):
        raise ForestFormatError("'trees' must be a list")
    parsed = [
        Tree(_parse_node(node, f"trees[{t}]", input_dim, output_dim, {}))
        for t, node in enumerate(trees)
    ]
    return Forest(parsed, input_dim, output_dim)


def import_forest(document) -> Forest:
    """Parse a forest from JSON text (or an already-decoded dict)."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ForestFormatError(f"invalid JSON: {exc}") from exc
    return forest_from_dict(document)


def save_forest(forest: Forest, path):
    Path(path).write_text(export_forest(forest, indent=1) + "\n", encoding="utf-8")


def load_forest(path) -> Forest:
    try:
        return import_forest(Path(path).read_text(encoding="utf-8"))
    except ForestFormatError as exc:
        raise ForestFormatError(f"forest document {path}: {exc}") from exc


def embedding_to_dict(net) -> dict:
    return {
        "layers": [
            {
                "weights": layer.weights.tolist(),
                "biases": layer.biases.tolist(),
                "activation": layer.activation,
            }
            for layer in net.layers
        ]
    }


def embedding_from_dict(doc, input_dim=None):
    from .neural import EmbeddingNet, Layer

    if not isinstance(doc, dict) or not isinstance(doc.get("layers"), list):
        raise ValueError("embedding checkpoint must be an object with a 'layers' list")
    layers = []
    for i, spec in enumerate(doc["layers"]):
        try:
            layers.append(
                Layer(np.array(spec["weights"], dtype=float),
                      np.array(spec["biases"], dtype=float),
                      spec.get("activation", "identity"))
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"layer {i}: {exc}") from exc
    if not layers and input_dim is None:
        raise ValueError("identity checkpoint (no layers) needs an explicit input_dim")
    return EmbeddingNet(layers, input_dim=input_dim)


def save_embedding(net, path):
    doc = embedding_to_dict(net)
    if not net.layers:
        doc["input_dim"] = net.input_dim
    Path(path).write_text(json.dumps(doc, allow_nan=False) + "\n", encoding="utf-8")


def load_embedding(path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return embedding_from_dict(doc, input_dim=doc.get("input_dim"))


def save_model(model, directory, forest_name="forest.json", embedding_name="embedding.json"):
    """Write forest, embedding and a ``model.json`` manifest into ``directory``.

    The manifest stores file names relative to itself. Returns its path.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_forest(model.forest, directory / forest_name)
    save_embedding(model.embed, directory / embedding_name)
    manifest = {"forest": forest_name, "embedding": embedding_name, **model.get_config()}
    path = directory / "model.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return path


def load_model(path):
    """Rebuild a model from a ``model.json`` manifest."""
    from .training import Model

    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(manifest, dict) or "forest" not in manifest or "embedding" not in manifest:
        raise ValueError(f"{path}: manifest needs 'forest' and 'embedding' entries")
    base = path.parent
    forest = load_forest(base / manifest["forest"])
    embed = load_embedding(base / manifest["embedding"])
    return Model(embed, forest, sigma=manifest.get("sigma", 0.015),
                 loss=manifest.get("loss", "sigmoid_cross_entropy"),
                 leaf_trainable=manifest.get("leaf_trainable", True),
                 passthrough=manifest.get("passthrough", ()))
