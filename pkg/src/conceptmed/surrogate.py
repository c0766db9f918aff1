"""Decision-tree surrogate over concept logits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from conceptmed.concepts import ConceptModel, concept_logit
from conceptmed.errors import ModeError, ShapeError, SplitError
from conceptmed.io import write_csv
from conceptmed.net import LayeredNetwork, forward, forward_split

GAIN_TIE = 1e-12


@dataclass
class FeatureMatrix:
    w: np.ndarray                 # (n, K') concept logits
    targets: np.ndarray           # (n,) argmax f(x)
    concept_ids: list[int]        # column -> concept id
    truth: np.ndarray | None = None  # (n,) ground-truth labels, optional

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.w.ndim != 2 or len(self.w) != len(self.targets):
            raise ShapeError(f"feature rows {self.w.shape} do not match {len(self.targets)} targets")
        if self.w.shape[1] != len(self.concept_ids):
            raise ShapeError("one concept id per feature column required")

    def __len__(self):
        return len(self.targets)

    def select(self, concept_ids) -> FeatureMatrix:
        cols = [self.concept_ids.index(k) for k in concept_ids]
        return FeatureMatrix(self.w[:, cols], self.targets, list(concept_ids), self.truth)


def build_features(models: list[ConceptModel], x, net: LayeredNetwork, split: int, truth=None) -> FeatureMatrix:
    """Concept-logit rows for inputs ``x``; targets are the network's predictions."""
    if not models:
        raise ValueError("need at least one concept model")
    modes = {m.mode for m in models}
    if len(modes) > 1:
        raise ModeError(f"concept models mix vectorization modes {sorted(modes)}")
    for m in models:
        if m.split != split:
            raise SplitError(f"concept {m.concept_id} fit at split {m.split}, not {split}")
    x = np.asarray(x, dtype=np.float64)
    a = forward_split(net, x, split)
    w = np.column_stack([concept_logit(m, a) for m in models])
    targets = forward(net, x).argmax(axis=1)
    return FeatureMatrix(w, targets, [m.concept_id for m in models], truth)


def entropy(counts) -> float:
    """Shannon entropy in bits of a class-count vector."""
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts[counts > 0] / n
    return float(-(p * np.log2(p)).sum())


def _entropy_rows(counts):
    # counts: (m, C) -> (m,) entropies in bits
    n = counts.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(n > 0, counts / n, 0.0)
        terms = np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=1)


@dataclass
class Node:
    # internal nodes set feature/threshold/left/right; leaves set label
    label: int | None = None
    counts: list[int] = field(default_factory=list)
    feature: int | None = None
    concept_id: int | None = None
    threshold: float | None = None
    gain: float = 0.0
    left: Node | None = None
    right: Node | None = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"class": self.label, "counts": self.counts}
        return {
            "feature": self.feature,
            "concept_id": self.concept_id,
            "threshold": self.threshold,
            "gain": self.gain,
            "counts": self.counts,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, d) -> Node:
        if "class" in d:
            return cls(label=d["class"], counts=list(d["counts"]))
        return cls(counts=list(d["counts"]), feature=d["feature"], concept_id=d["concept_id"],
                   threshold=d["threshold"], gain=d["gain"],
                   left=cls.from_dict(d["left"]), right=cls.from_dict(d["right"]))


@dataclass
class SurrogateTree:
    root: Node
    max_depth: int
    min_leaf: int
    n_features: int
    n_classes: int
    concept_ids: list[int]

    def depth(self) -> int:
        def _d(node):
            return 0 if node.is_leaf else 1 + max(_d(node.left), _d(node.right))
        return _d(self.root)

    def leaves(self) -> list[Node]:
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                out.append(node)
            else:
                stack += [node.right, node.left]
        return out

    def to_dict(self) -> dict:
        return {
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "n_features": self.n_features,
            "n_classes": self.n_classes,
            "concept_ids": self.concept_ids,
            "root": self.root.to_dict(),
        }

    @classmethod
    def from_dict(cls, d) -> SurrogateTree:
        return cls(Node.from_dict(d["root"]), d["max_depth"], d["min_leaf"], d["n_features"], d["n_classes"], d["concept_ids"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def render(self, names=None, class_names=None) -> str:
        """Indented if/else text with concept names."""
        names = names or {}
        class_names = class_names or {}
        lines = []

        def walk(node, indent):
            pad = "  " * indent
            if node.is_leaf:
                label = class_names.get(node.label, f"class {node.label}")
                lines.append(f"{pad}predict {label}  (n={sum(node.counts)}, counts={node.counts})")
                return
            name = names.get(node.concept_id, f"c{node.concept_id}")
            lines.append(f"{pad}if logit[{name}] <= {node.threshold:.6g}:")
            walk(node.left, indent + 1)
            lines.append(f"{pad}else:  # logit[{name}] > {node.threshold:.6g}")
            walk(node.right, indent + 1)

        walk(self.root, 0)
        return "\n".join(lines) + "\n"


def _best_split(w, y, n_classes, min_leaf):
    """Highest-gain (feature, threshold, gain) or None."""
    n = len(y)
    parent = entropy(np.bincount(y, minlength=n_classes))
    best = None
    onehot = np.eye(n_classes, dtype=np.float64)[y]
    for j in range(w.shape[1]):
        order = np.argsort(w[:, j], kind="stable")
        v = w[order, j]
        cum = np.cumsum(onehot[order], axis=0)  # counts of rows [0..i]
        # cut after position i (left = rows 0..i) where the value changes
        cut = np.flatnonzero(v[:-1] < v[1:])
        if cut.size == 0:
            continue
        n_left = cut + 1
        ok = (n_left >= min_leaf) & (n - n_left >= min_leaf)
        cut, n_left = cut[ok], n_left[ok]
        if cut.size == 0:
            continue
        left = cum[cut]
        right = cum[-1] - left
        child = (n_left * _entropy_rows(left) + (n - n_left) * _entropy_rows(right)) / n
        gains = parent - child
        # smallest threshold among (near-)maximal gains for this feature
        i = int(np.flatnonzero(gains >= gains.max() - GAIN_TIE)[0])
        gain = float(gains[i])
        if gain <= GAIN_TIE:
            continue
        # strictly better than the incumbent beyond tie tolerance; earlier features win ties
        if best is None or gain > best[2] + GAIN_TIE:
            lo, hi = v[cut[i]], v[cut[i] + 1]
            threshold = 0.5 * (lo + hi)
            if not lo <= threshold < hi:  # adjacent doubles: midpoint rounds onto hi
                threshold = lo
            best = (j, float(threshold), gain)
    return best


def fit_tree(fm: FeatureMatrix, max_depth: int = 3, min_leaf: int = 5, n_classes: int | None = None) -> SurrogateTree:
    """Greedy entropy-gain binary tree mimicking ``fm.targets``.

    Candidate thresholds are midpoints between consecutive distinct values; a
    split must leave ``min_leaf`` rows on each side and have positive gain.
    Ties in gain go to the lower feature column, then the smaller threshold.
    """
    if len(fm) == 0:
        raise ValueError("empty feature matrix")
    n_classes = int(n_classes or max(2, fm.targets.max() + 1))

    def grow(idx, depth):
        y = fm.targets[idx]
        counts = np.bincount(y, minlength=n_classes)
        node = Node(label=int(np.argmax(counts)), counts=[int(c) for c in counts])
        if depth >= max_depth or np.count_nonzero(counts) <= 1 or len(idx) < 2 * min_leaf:
            return node
        found = _best_split(fm.w[idx], y, n_classes, min_leaf)
        if found is None:
            return node
        j, threshold, gain = found
        go_left = fm.w[idx, j] <= threshold
        return Node(counts=node.counts, feature=j, concept_id=fm.concept_ids[j], threshold=threshold, gain=gain,
                    left=grow(idx[go_left], depth + 1), right=grow(idx[~go_left], depth + 1))

    root = grow(np.arange(len(fm)), 0)
    return SurrogateTree(root, max_depth, min_leaf, fm.w.shape[1], n_classes, list(fm.concept_ids))


def predict(tree: SurrogateTree, w) -> int | np.ndarray:
    """Root-to-leaf descent, left when ``w[feature] <= threshold``; accepts one row or many."""
    w = np.asarray(w, dtype=np.float64)
    single = w.ndim == 1
    rows = w[None] if single else w
    if rows.shape[1] != tree.n_features:
        raise ShapeError(f"tree expects {tree.n_features} features, got {rows.shape[1]}")
    out = np.empty(len(rows), dtype=np.int64)
    for i, row in enumerate(rows):
        node = tree.root
        while not node.is_leaf:
            node = node.left if row[node.feature] <= node.threshold else node.right
        out[i] = node.label
    return int(out[0]) if single else out


def fidelity(tree: SurrogateTree, fm: FeatureMatrix) -> dict:
    """Agreement with f and per-class recall against f's labels (and ground truth if present)."""
    if len(fm) == 0:
        raise ValueError("empty feature matrix")
    pred = predict(tree, fm.w)
    out = {"agreement": float((pred == fm.targets).mean()), "recall": {}}
    for c in range(tree.n_classes):
        mask = fm.targets == c
        if mask.any():
            out["recall"][c] = float((pred[mask] == c).mean())
    if fm.truth is not None:
        out["recall_truth"] = {}
        for c in range(tree.n_classes):
            mask = fm.truth == c
            if mask.any():
                out["recall_truth"][c] = float((pred[mask] == c).mean())
    return out


@dataclass
class SweepPoint:
    fraction: float
    n_concepts: int
    concept_ids: list[int]
    recall: float
    agreement: float
    recall_truth: float = float("nan")


def n_top(fraction: float, K: int) -> int:
    return max(1, math.ceil(round(fraction * K, 9)))


def topk_sweep(ranking, fractions, fm_train: FeatureMatrix, fm_test: FeatureMatrix, max_depth: int = 3,
               min_leaf: int = 5, positive: int = 1) -> list[SweepPoint]:
    """Refit the tree on the top ceil(fraction*K) ranked concepts; held-out recall per fraction."""
    fractions = list(fractions)
    if not fractions:
        raise ValueError("empty fractions list")
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    order = [k for k in ranking.order if k in fm_train.concept_ids]
    missing = set(fm_train.concept_ids) - set(order)
    if missing:
        raise ValueError(f"ranking does not cover concepts {sorted(missing)}")
    n_classes = int(max(2, fm_train.targets.max() + 1, fm_test.targets.max() + 1))
    points = []
    for f in fractions:
        ids = order[:n_top(f, len(order))]
        tree = fit_tree(fm_train.select(ids), max_depth, min_leaf, n_classes)
        fid = fidelity(tree, fm_test.select(ids))
        truth = fid.get("recall_truth", {}).get(positive, float("nan"))
        points.append(SweepPoint(f, len(ids), ids, fid["recall"].get(positive, float("nan")), fid["agreement"], truth))
    return points


def corrupt_columns(fm: FeatureMatrix, concept_ids, scale: float, seed: int) -> FeatureMatrix:
    """Add seeded Gaussian noise (``scale`` x column std) to the given concepts' logits."""
    rng = np.random.default_rng(seed)
    w = fm.w.copy()
    for k in concept_ids:
        j = fm.concept_ids.index(k)
        sd = w[:, j].std()
        w[:, j] += rng.normal(0.0, scale * (sd if sd > 0 else 1.0), size=len(w))
    return FeatureMatrix(w, fm.targets, list(fm.concept_ids), fm.truth)


def write_sweep_csv(path, points) -> None:
    rows = [[p.fraction, p.n_concepts, p.recall, p.agreement, p.recall_truth] for p in points]
    write_csv(path, ["fraction", "n_concepts", "recall", "agreement", "recall_truth"], rows)
