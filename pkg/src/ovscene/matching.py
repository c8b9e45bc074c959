"""One-to-one assignment of ground-truth nodes to predicted nodes."""

from collections import namedtuple
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import Edge, Node, SceneGraph
from .geometry import box_l1, giou
from .validation import ContractError

# instances up to this many cells get exact lexicographic tie-breaking
TIE_BREAK_CELLS = 4096


@dataclass(frozen=True)
class SimilarityWeights:
    w_cat: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0

    def __post_init__(self):
        ws = (self.w_cat, self.w_l1, self.w_giou)
        if not all(np.isfinite(w) and w >= 0 for w in ws):
            raise ContractError(f"similarity weights must be finite and non-negative, got {ws}")
        if not any(w > 0 for w in ws):
            raise ContractError("at least one similarity weight must be positive")


@dataclass(frozen=True)
class Assignment:
    pairs: tuple
    unmatched_gt: tuple
    unmatched_pred: tuple
    total: float = 0.0

    def as_dict(self):
        return dict(self.pairs)


def _concept_embedding(node, cs):
    if node.embedding is not None:
        return np.asarray(node.embedding, dtype=np.float64)
    if cs is None:
        raise ContractError("categorical similarity needs a concept space")
    c = cs.get(node.category, "object")
    if c is None:
        raise ContractError(f"unknown category {node.category!r}")
    return c.embedding


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def pair_similarity(gt, pred, cs, w=SimilarityWeights(), image_size=None):
    """w_cat * sigmoid(<w_gt, v_pred>) + w_giou * GIoU - w_l1 * L1.

    `image_size` is (width, height) for normalizing the L1 term; None means
    the boxes are already in normalized coordinates.
    """
    width, height = image_size if image_size is not None else (1.0, 1.0)
    s = 0.0
    if w.w_cat > 0:
        if pred.feature is None:
            raise ContractError("prediction has no feature for categorical similarity")
        s += w.w_cat * float(_sigmoid(np.dot(_concept_embedding(gt, cs), pred.feature)))
    if w.w_giou > 0:
        s += w.w_giou * giou(gt.box, pred.box)
    if w.w_l1 > 0:
        s -= w.w_l1 * box_l1(gt.box, pred.box, width, height)
    return s


def _boxes(nodes):
    return np.array([n.box.as_list() for n in nodes], dtype=np.float64).reshape(-1, 4)


def similarity_matrix(gts, preds, cs, w=SimilarityWeights(), image_size=None):
    """(N, K) matrix of `pair_similarity`, vectorized."""
    N, K = len(gts), len(preds)
    S = np.zeros((N, K))
    if N == 0 or K == 0:
        return S
    width, height = image_size if image_size is not None else (1.0, 1.0)
    if w.w_cat > 0:
        if any(p.feature is None for p in preds):
            raise ContractError("prediction has no feature for categorical similarity")
        Wg = np.stack([_concept_embedding(g, cs) for g in gts])
        Vp = np.stack([np.asarray(p.feature, dtype=np.float64) for p in preds])
        S += w.w_cat * _sigmoid(Wg @ Vp.T)
    a, b = _boxes(gts), _boxes(preds)
    if not (np.all(a[:, 2] > a[:, 0]) and np.all(a[:, 3] > a[:, 1])
            and np.all(b[:, 2] > b[:, 0]) and np.all(b[:, 3] > b[:, 1])
            and np.isfinite(a).all() and np.isfinite(b).all()):
        raise ContractError("degenerate box in matching input")
    if w.w_giou > 0:
        lt = np.maximum(a[:, None, :2], b[None, :, :2])
        rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
        inter = np.prod(np.clip(rb - lt, 0, None), axis=-1)
        area_a = np.prod(a[:, 2:] - a[:, :2], axis=1)
        area_b = np.prod(b[:, 2:] - b[:, :2], axis=1)
        union = area_a[:, None] + area_b[None, :] - inter
        hull = np.prod(np.maximum(a[:, None, 2:], b[None, :, 2:])
                       - np.minimum(a[:, None, :2], b[None, :, :2]), axis=-1)
        S += w.w_giou * (inter / union - (hull - union) / hull)
    if w.w_l1 > 0:
        scale = np.array([width, height, width, height], dtype=np.float64)

        def cxcywh(x):
            return np.concatenate([(x[:, :2] + x[:, 2:]) / 2, x[:, 2:] - x[:, :2]], axis=1) / scale

        S -= w.w_l1 * np.abs(cxcywh(a)[:, None, :] - cxcywh(b)[None, :, :]).sum(axis=-1)
    return S


def _optimum(sim):
    if sim.size == 0:
        return 0.0
    r, c = linear_sum_assignment(sim, maximize=True)
    return float(sim[r, c].sum())


def match_matrix(sim):
    """Maximum-total one-to-one assignment on a similarity matrix.

    Among optimal assignments the lexicographically smallest pair list wins,
    resolved exactly for instances up to TIE_BREAK_CELLS cells.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2:
        raise ContractError("similarity must be a 2-D matrix")
    if not np.isfinite(sim).all():
        raise ContractError("similarity matrix has non-finite entries")
    N, K = sim.shape
    if N == 0 or K == 0:
        return Assignment((), tuple(range(N)), tuple(range(K)), 0.0)
    r, c = linear_sum_assignment(sim, maximize=True)
    target = float(sim[r, c].sum())
    if sim.size <= TIE_BREAK_CELLS:
        tol = 1e-9 * max(1.0, float(np.abs(sim).max()) * min(N, K))
        pairs, rows, cols = [], list(range(N)), list(range(K))
        acc = 0.0
        while rows and len(pairs) < min(N, K):
            i = rows.pop(0)
            for j in cols:
                rest = sim[np.ix_(rows, [k for k in cols if k != j])]
                if acc + sim[i, j] + _optimum(rest) >= target - tol:
                    pairs.append((i, j))
                    acc += sim[i, j]
                    cols.remove(j)
                    break
        pairs = tuple(pairs)
    else:
        pairs = tuple(sorted(zip(r.tolist(), c.tolist())))
    gi = {i for i, _ in pairs}
    pj = {j for _, j in pairs}
    return Assignment(pairs, tuple(i for i in range(N) if i not in gi),
                      tuple(j for j in range(K) if j not in pj),
                      float(sum(sim[i, j] for i, j in pairs)))


def match(gts, preds, cs=None, w=SimilarityWeights(), image_size=None):
    return match_matrix(similarity_matrix(gts, preds, cs, w, image_size))


PredClsSelection = namedtuple("PredClsSelection", "mapping unmatched_gt graph")


def predcls_select(gt_graph, preds, cs=None, w=SimilarityWeights()):
    """Pick a prediction for every ground-truth node.

    The returned graph keeps the ground-truth box and label of each matched
    node with the prediction's feature; unmatched ground-truth nodes are
    reported, never fabricated, and edges touching them are dropped.
    """
    if len(preds) == 0:
        raise ContractError("no candidates")
    a = match(gt_graph.nodes, preds, cs, w, (gt_graph.width, gt_graph.height))
    mapping = a.as_dict()
    keep = sorted(mapping)
    remap = {i: k for k, i in enumerate(keep)}
    nodes = [Node(gt_graph.nodes[i].box, gt_graph.nodes[i].category, 1.0,
                  preds[mapping[i]].feature, gt_graph.nodes[i].embedding) for i in keep]
    edges = [e for e in gt_graph.edges if e.subject in remap and e.object in remap]
    edges = [Edge(remap[e.subject], remap[e.object], e.predicate, e.score) for e in edges]
    graph = SceneGraph(gt_graph.image_id, gt_graph.width, gt_graph.height, nodes, edges)
    return PredClsSelection(mapping, a.unmatched_gt, graph)
