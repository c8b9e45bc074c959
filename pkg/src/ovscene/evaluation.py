"""Recall@K and mean Recall@K for SGDet / PredCls with open-vocabulary partitions."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import Edge, Node, RankedTriplets, SceneGraph, Triplet, triplet_score
from .geometry import iou
from .matching import SimilarityWeights, predcls_select
from .validation import ContractError

log = logging.getLogger(__name__)

PROTOCOLS = ("sgdet", "predcls")
PARTITIONS = ("base_plus_novel", "novel_object", "novel_relation", "joint")


@dataclass(frozen=True)
class EvalConfig:
    ks: tuple = (20, 50, 100)
    iou_threshold: float = 0.5
    protocol: str = "sgdet"
    partition: str = "base_plus_novel"
    max_objects: int = 100
    micro: bool = False  # corpus-level instead of image-level averaging
    match_weights: SimilarityWeights = SimilarityWeights()

    def __post_init__(self):
        ks = tuple(int(k) for k in self.ks)
        if not ks or any(k <= 0 for k in ks) or list(ks) != sorted(set(ks)):
            raise ContractError(f"ks must be positive and strictly ascending, got {self.ks}")
        object.__setattr__(self, "ks", ks)
        if not 0 < self.iou_threshold <= 1:
            raise ContractError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")
        if self.protocol not in PROTOCOLS:
            raise ContractError(f"unknown protocol {self.protocol!r}")
        if self.partition not in PARTITIONS:
            raise ContractError(f"unknown partition {self.partition!r}")
        if self.max_objects <= 0:
            raise ContractError("max_objects must be positive")

    def with_partition(self, partition):
        return EvalConfig(self.ks, self.iou_threshold, self.protocol, partition,
                          self.max_objects, self.micro, self.match_weights)


def match_triplet(pred, gt, cfg=EvalConfig()):
    """Labels equal and both subject and object boxes overlap at the IoU threshold."""
    if (pred.predicate != gt.predicate or pred.subject.category != gt.subject.category
            or pred.object.category != gt.object.category):
        return False
    return (iou(pred.subject.box, gt.subject.box) >= cfg.iou_threshold
            and iou(pred.object.box, gt.object.box) >= cfg.iou_threshold)


def gt_triplets(g):
    return [Triplet(g.nodes[e.subject], e.predicate, g.nodes[e.object], 1.0) for e in g.edges]


def credit_ranks(preds, gts, cfg=EvalConfig()):
    """Rank of the prediction credited to each ground-truth triplet, or None.

    Predictions are visited in rank order up to max(ks); each one credits the
    first still-uncredited ground truth it matches, so duplicates never earn
    twice and each ground truth is credited once.
    """
    if not preds.is_sorted():
        raise ContractError("predictions are not sorted by confidence")
    ranks = [None] * len(gts)
    for r, p in enumerate(preds.triplets[: max(cfg.ks)]):
        for i, g in enumerate(gts):
            if ranks[i] is None and match_triplet(p, g, cfg):
                ranks[i] = r
                break
    return ranks


def recall_at_k(preds, gt, cfg=EvalConfig()):
    """{K: fraction of ground-truth triplets credited within the top K}."""
    gts = gt_triplets(gt) if isinstance(gt, SceneGraph) else list(gt)
    if not gts:
        raise ContractError("ground truth has no triplets")
    ranks = credit_ranks(preds, gts, cfg)
    return {k: sum(r is not None and r < k for r in ranks) / len(gts) for k in cfg.ks}


def in_partition(t, spec, partition):
    if partition == "novel_object":
        return t.subject.category in spec.novel_objects or t.object.category in spec.novel_objects
    if partition == "novel_relation":
        return t.predicate in spec.novel_relations
    return True


def cap_objects(g, max_objects):
    """Keep the `max_objects` highest-scoring nodes (stable) and their edges."""
    if len(g.nodes) <= max_objects:
        return g
    order = sorted(range(len(g.nodes)), key=lambda i: -g.nodes[i].score)[:max_objects]
    keep = sorted(order)
    remap = {old: new for new, old in enumerate(keep)}
    edges = [Edge(remap[e.subject], remap[e.object], e.predicate, e.score)
             for e in g.edges if e.subject in remap and e.object in remap]
    return SceneGraph(g.image_id, g.width, g.height, [g.nodes[i] for i in keep], edges)


def predcls_ranking(gt, pred, cs=None, w=SimilarityWeights()):
    """Rank predicted edges after swapping matched predictions for ground-truth nodes."""
    if w.w_cat > 0 and (cs is None or any(n.feature is None for n in pred.nodes)):
        w = SimilarityWeights(0.0, w.w_l1, w.w_giou)
    if not pred.nodes:
        return RankedTriplets(pred.image_id, ())
    sel = predcls_select(gt, pred.nodes, cs, w)
    owner = {j: i for i, j in sel.mapping.items()}
    trips = []
    for e in pred.edges:
        if e.subject in owner and e.object in owner:
            s, o = gt.nodes[owner[e.subject]], gt.nodes[owner[e.object]]
            trips.append(Triplet(Node(s.box, s.category), e.predicate, Node(o.box, o.category),
                                 triplet_score(1.0, 1.0, e.score)))
    trips.sort(key=lambda t: -t.confidence)
    return RankedTriplets(pred.image_id, trips)


@dataclass
class EvalReport:
    partition: str
    protocol: str
    n_images: int
    recall: dict = field(default_factory=dict)
    mean_recall: dict = field(default_factory=dict)
    per_predicate: dict = field(default_factory=dict)
    missing_images: list = field(default_factory=list)
    unknown_images: list = field(default_factory=list)

    @property
    def empty(self):
        return self.n_images == 0

    def to_json(self):
        return {"partition": self.partition, "protocol": self.protocol,
                "n_images": self.n_images, "empty": self.empty,
                "recall": {str(k): v for k, v in self.recall.items()},
                "mean_recall": {str(k): v for k, v in self.mean_recall.items()},
                "per_predicate": {p: {str(k): v for k, v in r.items()}
                                  for p, r in sorted(self.per_predicate.items())},
                "missing_images": list(self.missing_images),
                "unknown_images": list(self.unknown_images)}


def _fmt(v):
    return "  -  " if v is None else f"{100 * v:5.2f}"


def format_table(reports):
    """Plain-text R@K / mR@K table, one row per report, values in percent."""
    ks = reports[0].recall.keys() if reports else (20, 50, 100)
    head = ["partition".ljust(16)] + [f"R@{k}".rjust(6) for k in ks] + [f"mR@{k}".rjust(6) for k in ks]
    lines = [" ".join(head)]
    for r in reports:
        row = [r.partition.ljust(16)] + [_fmt(r.recall.get(k)).rjust(6) for k in ks]
        row += [_fmt(r.mean_recall.get(k)).rjust(6) for k in ks]
        lines.append(" ".join(row))
    return "\n".join(lines) + "\n"


def evaluate(dataset_gt, dataset_pred, spec, cfg=EvalConfig(), cs=None):
    """Score predictions against ground truth for one partition.

    Recall is averaged over images holding at least one ground-truth triplet
    in the partition (or pooled over the corpus with ``cfg.micro``). An empty
    partition yields None entries. Ground-truth images without a prediction
    and predictions for unknown images are listed in the report and skipped.
    """
    gt_by_id = {g.image_id: g for g in dataset_gt}
    pred_by_id = {}
    for p in dataset_pred:
        pred_by_id[p.image_id] = p
    unknown = sorted(set(pred_by_id) - set(gt_by_id))
    missing = sorted(set(gt_by_id) - set(pred_by_id))
    if unknown:
        log.warning("%d predicted images not in ground truth: %s", len(unknown), unknown[:5])
    if missing:
        log.warning("%d ground-truth images without predictions: %s", len(missing), missing[:5])

    ks = cfg.ks
    image_recalls = []
    hits = {k: 0 for k in ks}
    total = 0
    pred_image_recalls = {}  # predicate -> list of {K: recall} per image
    pred_hits, pred_total = {}, {}
    for image_id, gt in gt_by_id.items():
        if image_id not in pred_by_id:
            continue
        gts = [t for t in gt_triplets(gt) if in_partition(t, spec, cfg.partition)]
        if not gts:
            continue
        pred = pred_by_id[image_id]
        if cfg.protocol == "predcls":
            ranked = predcls_ranking(gt, pred, cs, cfg.match_weights)
        else:
            ranked = RankedTriplets.from_graph(cap_objects(pred, cfg.max_objects))
        ranks = credit_ranks(ranked, gts, cfg)
        got = {k: sum(r is not None and r < k for r in ranks) for k in ks}
        image_recalls.append({k: got[k] / len(gts) for k in ks})
        total += len(gts)
        for k in ks:
            hits[k] += got[k]
        for p in sorted({t.predicate for t in gts}):
            idx = [i for i, t in enumerate(gts) if t.predicate == p]
            got = {k: sum(ranks[i] is not None and ranks[i] < k for i in idx) for k in ks}
            pred_image_recalls.setdefault(p, []).append({k: got[k] / len(idx) for k in ks})
            pred_total[p] = pred_total.get(p, 0) + len(idx)
            pred_hits[p] = {k: pred_hits.get(p, {}).get(k, 0) + got[k] for k in ks}

    report = EvalReport(cfg.partition, cfg.protocol, len(image_recalls),
                        missing_images=missing, unknown_images=unknown)
    if not image_recalls:
        report.recall = {k: None for k in ks}
        report.mean_recall = {k: None for k in ks}
        return report
    if cfg.micro:
        report.recall = {k: hits[k] / total for k in ks}
        report.per_predicate = {p: {k: pred_hits[p][k] / pred_total[p] for k in ks}
                                for p in pred_total}
    else:
        report.recall = {k: float(np.mean([r[k] for r in image_recalls])) for k in ks}
        report.per_predicate = {p: {k: float(np.mean([r[k] for r in rs])) for k in ks}
                                for p, rs in pred_image_recalls.items()}
    report.mean_recall = {k: float(np.mean([r[k] for r in report.per_predicate.values()]))
                          for k in ks}
    return report


def evaluate_partitions(dataset_gt, dataset_pred, spec, cfg=EvalConfig(), cs=None,
                        partitions=PARTITIONS):
    return [evaluate(dataset_gt, dataset_pred, spec, cfg.with_partition(p), cs)
            for p in partitions]
