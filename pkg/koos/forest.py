"""Random forest over the nine case features: Gini CART trees on bootstrap samples.

Every tree draws from its own generator, ``child_rng(seed, tree_index)``, so a
trained model is a pure function of the case_id-sorted records and the
parameters, whatever the worker count. Ties resolve to the lowest value
everywhere: feature index, then threshold while splitting; class within a
leaf; grade in the forest vote.
"""

from __future__ import annotations

import gzip
import json
import logging
import zlib
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from jsonschema import Draft202012Validator
from jsonschema.exceptions import best_match
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import KoosError
from .features import FEATURE_NAMES, GRADES, CaseRecord, FeatureVector
from .seeding import child_rng

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
N_FEATURES = len(FEATURE_NAMES)
N_CLASSES = len(GRADES)
_SCHEMA_PATH = Path(__file__).parent / "schemas" / "forest-model.schema.json"
_GZIP_MAGIC = b"\x1f\x8b"
# float scores within this relative band of the best are re-ranked exactly
_NEAR_TIE = 1e-9


class ForestError(KoosError):
    code = "forest_error"


class InsufficientData(ForestError):
    code = "insufficient_data"


class SingleClass(ForestError):
    code = "single_class"


class MalformedModel(ForestError):
    code = "malformed_model"


class ForestParams(BaseModel):
    """Defaults are the published settings plus the standard Breiman choices."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_trees: int = Field(100000, ge=1)
    max_depth: int = Field(5, ge=1)
    min_samples_leaf: int = Field(2, ge=1)
    mtry: int = Field(3, ge=1, le=N_FEATURES)
    seed: int = Field(0, ge=-(2**63), le=2**64 - 1)
    bootstrap: bool = True


@dataclass(frozen=True)
class Leaf:
    class_counts: Tuple[int, int, int, int]

    @property
    def majority(self) -> int:
        return GRADES[int(np.argmax(self.class_counts))]


@dataclass(frozen=True)
class Internal:
    feature_index: int
    threshold: float
    left: "TreeNode"
    right: "TreeNode"


TreeNode = Union[Leaf, Internal]


class Split(NamedTuple):
    feature_index: int
    threshold: float
    impurity_decrease: float


@dataclass(frozen=True, eq=False)
class ForestModel:
    params: ForestParams
    trees: Tuple[TreeNode, ...]
    feature_names: Tuple[str, ...] = FEATURE_NAMES
    class_labels: Tuple[int, ...] = GRADES

    @cached_property
    def _flat(self) -> "_FlatForest":
        return _FlatForest.build(self.trees)


def _gini(counts: np.ndarray) -> float:
    n = counts.sum()
    return 1.0 - float((counts.astype(np.float64) ** 2).sum()) / float(n * n)


def _threshold(low: float, high: float) -> float:
    mid = (low + high) / 2.0
    return mid if low <= mid < high else low


def best_split(
    X: np.ndarray, y: np.ndarray, features: Sequence[int], min_samples_leaf: int
) -> Optional[Split]:
    """Best Gini split of the node samples ``X``/``y`` over ``features``.

    ``y`` holds class indices 0..3. Candidate thresholds are midpoints between
    consecutive distinct values that leave at least ``min_samples_leaf`` samples
    on each side. Maximizing the impurity decrease is maximizing
    ``sum_L/n_L + sum_R/n_R`` (sums of squared class counts), compared here as
    exact integer fractions.
    """
    n = len(y)
    if n < 2:
        return None
    onehot = np.zeros((n, N_CLASSES), dtype=np.int64)
    n_left = np.arange(1, n, dtype=np.int64)
    n_right = n - n_left
    size_ok = (n_left >= min_samples_leaf) & (n_right >= min_samples_leaf)

    best: Optional[Tuple[int, int, int, float]] = None  # num, den, feature, threshold
    for feature in sorted(int(f) for f in features):
        order = np.argsort(X[:, feature], kind="stable")
        xs = X[order, feature]
        onehot[:] = 0
        onehot[np.arange(n), y[order]] = 1
        left = np.cumsum(onehot, axis=0)[:-1]
        right = left[-1] + onehot[-1] - left
        valid = size_ok & (xs[:-1] < xs[1:])
        candidates = np.flatnonzero(valid)
        if candidates.size == 0:
            continue
        sq_left = (left[candidates] ** 2).sum(axis=1)
        sq_right = (right[candidates] ** 2).sum(axis=1)
        nl, nr = n_left[candidates], n_right[candidates]
        num = sq_left * nr + sq_right * nl
        den = nl * nr
        approx = num / den
        near = np.flatnonzero(approx >= approx.max() * (1.0 - _NEAR_TIE))
        pick = near[0]
        for j in near[1:]:
            if int(num[j]) * int(den[pick]) > int(num[pick]) * int(den[j]):
                pick = j
        i = candidates[pick]
        entry = (int(num[pick]), int(den[pick]), feature, _threshold(xs[i], xs[i + 1]))
        if best is None or entry[0] * best[1] > best[0] * entry[1]:
            best = entry

    if best is None:
        return None
    num, den, feature, threshold = best
    parent = np.bincount(y, minlength=N_CLASSES)
    decrease = _gini(parent) - 1.0 + (num / den) / n
    return Split(feature, float(threshold), decrease)


def _grow(
    X: np.ndarray,
    y: np.ndarray,
    idx: np.ndarray,
    depth: int,
    params: ForestParams,
    rng: np.random.Generator,
) -> TreeNode:
    counts = np.bincount(y[idx], minlength=N_CLASSES)
    leaf = Leaf(tuple(int(c) for c in counts))  # type: ignore[arg-type]
    if (
        np.count_nonzero(counts) == 1
        or depth >= params.max_depth
        or len(idx) < 2 * params.min_samples_leaf
    ):
        return leaf
    features = rng.permutation(N_FEATURES)[: params.mtry]
    split = best_split(X[idx], y[idx], features, params.min_samples_leaf)
    if split is None:
        return leaf
    go_left = X[idx, split.feature_index] <= split.threshold
    return Internal(
        split.feature_index,
        split.threshold,
        _grow(X, y, idx[go_left], depth + 1, params, rng),
        _grow(X, y, idx[~go_left], depth + 1, params, rng),
    )


def grow_tree(
    X: np.ndarray, y: np.ndarray, params: ForestParams, tree_index: int
) -> TreeNode:
    rng = child_rng(params.seed, tree_index)
    n = len(y)
    idx = rng.integers(0, n, n) if params.bootstrap else np.arange(n)
    return _grow(X, y, idx, 0, params, rng)


def _grow_chunk(
    X: np.ndarray, y: np.ndarray, params: ForestParams, start: int, stop: int
) -> List[TreeNode]:
    return [grow_tree(X, y, params, t) for t in range(start, stop)]


def feature_matrix(vectors: Iterable[FeatureVector]) -> np.ndarray:
    rows = [fv.values() for fv in vectors]
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), N_FEATURES)


def train(
    records: Sequence[CaseRecord], params: ForestParams, threads: int = 1
) -> ForestModel:
    records = sorted(records, key=lambda r: r.case_id)
    unlabeled = [r.case_id for r in records if r.grade is None]
    if unlabeled:
        raise InsufficientData(f"{len(unlabeled)} record(s) have no grade: {unlabeled[:5]}")
    if len(records) < 2:
        raise InsufficientData(f"training needs at least 2 records; got {len(records)}")
    y = np.asarray([GRADES.index(r.grade) for r in records], dtype=np.int64)
    if np.unique(y).size < 2:
        raise SingleClass(f"every training record has grade {records[0].grade}")
    X = feature_matrix(r.features for r in records)

    jobs = max(1, min(int(threads), params.n_trees))
    bounds = np.linspace(0, params.n_trees, jobs + 1).astype(int)
    chunks = Parallel(n_jobs=jobs)(
        delayed(_grow_chunk)(X, y, params, int(start), int(stop))
        for start, stop in zip(bounds[:-1], bounds[1:])
        if stop > start
    )
    trees = tuple(tree for chunk in chunks for tree in chunk)
    logger.info(
        "trained %d tree(s) on %d record(s) (depth %d, min leaf %d, mtry %d)",
        len(trees),
        len(records),
        params.max_depth,
        params.min_samples_leaf,
        params.mtry,
    )
    return ForestModel(params, trees)


@dataclass(frozen=True, eq=False)
class _FlatForest:
    """All trees as parallel node arrays; ``feature == -1`` marks a leaf."""

    roots: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_class: np.ndarray

    @classmethod
    def build(cls, trees: Sequence[TreeNode]) -> "_FlatForest":
        feature: List[int] = []
        threshold: List[float] = []
        left: List[int] = []
        right: List[int] = []
        leaf_class: List[int] = []

        def add(node: TreeNode) -> int:
            at = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            leaf_class.append(-1)
            if isinstance(node, Leaf):
                leaf_class[at] = int(np.argmax(node.class_counts))
            else:
                feature[at] = node.feature_index
                threshold[at] = node.threshold
                left[at] = add(node.left)
                right[at] = add(node.right)
            return at

        roots = [add(tree) for tree in trees]
        return cls(
            np.asarray(roots, dtype=np.int64),
            np.asarray(feature, dtype=np.int64),
            np.asarray(threshold, dtype=np.float64),
            np.asarray(left, dtype=np.int64),
            np.asarray(right, dtype=np.int64),
            np.asarray(leaf_class, dtype=np.int64),
        )

    def leaf_classes(self, x: np.ndarray) -> np.ndarray:
        node = self.roots.copy()
        active = self.feature[node] >= 0
        while active.any():
            at = node[active]
            go_left = x[self.feature[at]] <= self.threshold[at]
            node[active] = np.where(go_left, self.left[at], self.right[at])
            active = self.feature[node] >= 0
        return self.leaf_class[node]


def tree_predict(tree: TreeNode, fv: FeatureVector) -> int:
    x = fv.values()
    node = tree
    while isinstance(node, Internal):
        node = node.left if x[node.feature_index] <= node.threshold else node.right
    return node.majority


def vote_counts(model: ForestModel, fv: FeatureVector) -> np.ndarray:
    x = np.asarray(fv.values(), dtype=np.float64)
    return np.bincount(model._flat.leaf_classes(x), minlength=N_CLASSES)


def predict(model: ForestModel, fv: FeatureVector) -> int:
    return GRADES[int(np.argmax(vote_counts(model, fv)))]


def predict_distribution(model: ForestModel, fv: FeatureVector) -> Tuple[float, ...]:
    votes = vote_counts(model, fv)
    return tuple(float(v) / len(model.trees) for v in votes)


def _node_doc(node: TreeNode) -> dict:
    if isinstance(node, Leaf):
        return {"class_counts": list(node.class_counts)}
    return {
        "feature_index": node.feature_index,
        "threshold": node.threshold,
        "left": _node_doc(node.left),
        "right": _node_doc(node.right),
    }


def _canonical(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return format(value, ".17g")
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(_canonical(item) for item in value) + "]"
    if isinstance(value, dict):
        return (
            "{"
            + ",".join(
                f"{json.dumps(key)}:{_canonical(value[key])}" for key in sorted(value)
            )
            + "}"
        )
    raise TypeError(f"cannot serialize {type(value).__name__}")


def save_model(model: ForestModel, compress: bool = False) -> bytes:
    document = {
        "format_version": FORMAT_VERSION,
        "params": model.params.model_dump(),
        "feature_names": list(model.feature_names),
        "class_labels": list(model.class_labels),
        "trees": [_node_doc(tree) for tree in model.trees],
    }
    payload = (_canonical(document) + "\n").encode("utf-8")
    if compress:
        return gzip.compress(payload, mtime=0)
    return payload


def _schema_validator() -> Draft202012Validator:
    schema = json.loads(_SCHEMA_PATH.read_text(encoding="utf-8"))
    return Draft202012Validator(schema)


def _node_from_doc(doc: dict, depth: int, max_depth: int) -> TreeNode:
    if "class_counts" in doc:
        counts = tuple(int(c) for c in doc["class_counts"])
        if sum(counts) < 1:
            raise MalformedModel(f"leaf at depth {depth} holds no samples")
        return Leaf(counts)  # type: ignore[arg-type]
    if depth >= max_depth:
        raise MalformedModel(f"internal node at depth {depth} exceeds max_depth {max_depth}")
    feature = int(doc["feature_index"])
    if not 0 <= feature < N_FEATURES:
        raise MalformedModel(f"feature_index {feature} outside 0..{N_FEATURES - 1}")
    threshold = float(doc["threshold"])
    if not np.isfinite(threshold):
        raise MalformedModel(f"threshold {threshold} is not finite")
    return Internal(
        feature,
        threshold,
        _node_from_doc(doc["left"], depth + 1, max_depth),
        _node_from_doc(doc["right"], depth + 1, max_depth),
    )


def load_model(data: bytes) -> ForestModel:
    if data[:2] == _GZIP_MAGIC:
        try:
            data = gzip.decompress(data)
        except (EOFError, gzip.BadGzipFile, zlib.error) as exc:
            raise MalformedModel(f"corrupt gzip model: {exc}") from exc
    try:
        document = json.loads(data.decode("utf-8"))
    except RecursionError as exc:
        raise MalformedModel("model JSON nests too deeply to decode") from exc
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedModel(f"model is not JSON: {exc}") from exc

    try:
        error = best_match(_schema_validator().iter_errors(document))
    except RecursionError as exc:
        raise MalformedModel("model nests too deeply to validate") from exc
    if error is not None:
        where = "/".join(str(p) for p in error.absolute_path) or "<root>"
        raise MalformedModel(f"model schema violation at {where}: {error.message}")

    try:
        params = ForestParams(**document["params"])
    except ValidationError as exc:
        raise MalformedModel(f"invalid model params: {exc.errors()[0]['msg']}") from exc
    if tuple(document["feature_names"]) != FEATURE_NAMES:
        raise MalformedModel(
            f"model features {document['feature_names']} do not match {list(FEATURE_NAMES)}"
        )
    try:
        trees = tuple(
            _node_from_doc(tree, 0, params.max_depth) for tree in document["trees"]
        )
    except RecursionError as exc:
        raise MalformedModel("model trees nest too deeply") from exc
    if len(trees) != params.n_trees:
        raise MalformedModel(f"model holds {len(trees)} tree(s); params say {params.n_trees}")
    return ForestModel(params, trees)


def load_model_file(path: Union[str, Path]) -> ForestModel:
    return load_model(Path(path).read_bytes())


def save_model_file(path: Union[str, Path], model: ForestModel) -> None:
    path = Path(path)
    path.write_bytes(save_model(model, compress=path.name.endswith(".gz")))
    logger.info("wrote model %s (%d trees)", path, len(model.trees))
