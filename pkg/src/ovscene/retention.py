"""Teacher-student retention of relation concepts during fine-tuning.

Besides the distillation and combined losses this module carries a small
synthetic world in which fine-tuning on base-only relation annotations makes a
pre-trained relation head forget the novel relations, and in which distilling
background edge features towards the frozen teacher prevents it.
"""

from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np

from .alignment import (RelationHeadParams, _bce_masked, _distill, _forward,
                        batch_to_arrays, bce_loss_arrays, relation_scores)
from .core import BBox, Concept, ConceptSpace, Edge, Node, SceneGraph
from .splits import filter_training_graph, make_split
from .validation import ContractError

HEAD_FIELDS = ("W1", "b1", "W2", "b2", "queries")

TrajectoryPoint = namedtuple("TrajectoryPoint", "step base_recall novel_recall base_plus_novel_recall")


class DivergenceError(FloatingPointError):
    pass


def distill_loss(neg_pairs, teacher, student):
    """Mean L1 distance between student and teacher edge features.

    Gradients are returned for the student only; the projection fields are zero.
    """
    if len(neg_pairs) == 0:
        raise ContractError("distillation needs at least one negative sample")
    Vs = np.asarray([p[0] for p in neg_pairs], dtype=np.float64)
    Vo = np.asarray([p[1] for p in neg_pairs], dtype=np.float64)
    if teacher.to_vector().shape != student.to_vector().shape:
        raise ContractError("teacher and student have different shapes")
    return _distill(Vs, Vo, np.ones(len(Vs)), teacher, student)


@dataclass
class DistillConfig:
    teacher: RelationHeadParams
    student: RelationHeadParams = None
    lambda_: float = 0.1
    step_size: float = 0.02
    steps: int = 300
    seed: int = 0
    neg_ratio: int = 3
    trainable: tuple = HEAD_FIELDS
    eval_every: int = 100
    top_k: int = 50

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ContractError("lambda must be non-negative")
        if self.step_size <= 0:
            raise ContractError("step_size must be positive")
        if self.steps < 0:
            raise ContractError("steps must be non-negative")
        if self.student is None:
            self.student = self.teacher.copy()
        if [a.shape for a in self.teacher.arrays()] != [a.shape for a in self.student.arrays()]:
            raise ContractError("teacher and student dimensions differ")

    def snapshot(self):
        return {"lambda": self.lambda_, "step_size": self.step_size, "steps": self.steps,
                "seed": self.seed, "neg_ratio": self.neg_ratio,
                "trainable": list(self.trainable), "eval_every": self.eval_every,
                "top_k": self.top_k}


def total_loss(batch, neg_pairs, cfg, cs):
    """BCE alignment loss of the student plus lambda times the distillation loss."""
    Vs, Vo, idx, T, y = batch_to_arrays(batch, cs)
    loss, g = bce_loss_arrays(Vs, Vo, idx, T, y, cfg.student)
    if cfg.lambda_ == 0:
        return loss, g
    d_loss, d_g = distill_loss(neg_pairs, cfg.teacher, cfg.student)
    return loss + cfg.lambda_ * d_loss, g.axpy(cfg.lambda_, d_g)


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8, trainable=None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.trainable = trainable
        self.t = 0
        self.m = self.v = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(a) for a in params.arrays()]
            self.v = [np.zeros_like(a) for a in params.arrays()]
        self.t += 1
        c1, c2 = 1 - self.beta1 ** self.t, 1 - self.beta2 ** self.t
        out = []
        for k, (name, p, g) in enumerate(zip(params.FIELDS, params.arrays(), grads.arrays())):
            if self.trainable is not None and name not in self.trainable:
                out.append(p.copy())
                continue
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            out.append(p - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps))
        return RelationHeadParams(*out)


def sample_negative_mask(Y, allowed, neg_ratio, rng):
    """Positives plus ``neg_ratio * max(1, #positives)`` sampled negatives per pair.

    Negatives are drawn without replacement from the relations flagged in
    `allowed` that are not positives of the pair.
    """
    n, R = Y.shape
    pos = Y > 0
    keys = rng.random((n, R))
    keys[pos | ~allowed[None, :]] = np.inf
    count = np.minimum(neg_ratio * np.maximum(pos.sum(axis=1), 1), R)
    top = int(count.max(initial=0))
    mask = pos.astype(np.float64)
    if top == 0:
        return mask
    part = np.argpartition(keys, top - 1, axis=1)[:, :top]
    part = np.take_along_axis(part, np.argsort(np.take_along_axis(keys, part, 1), axis=1), 1)
    take = (np.arange(top)[None, :] < count[:, None]) & np.isfinite(np.take_along_axis(keys, part, 1))
    rows = np.repeat(np.arange(n)[:, None], top, axis=1)
    mask[rows[take], part[take]] = 1.0
    return mask


@dataclass
class SyntheticWorld:
    """Scenes whose relations are fixed by the ordered pair of object categories.

    Node features are the category embedding plus Gaussian noise. Relation text
    embeddings share a common direction (``text_sharing``), the way word
    vectors of predicates do, so suppressing every base predicate on an edge
    also suppresses the novel ones. Novel relations follow the OvR recipe.
    """

    seed: int = 0
    n_objects: int = 12
    n_relations: int = 50
    dim: int = 16
    hidden: int = 128
    pairs_per_relation: int = 2
    nodes_per_scene: int = 8
    feature_noise: float = 0.1
    text_sharing: float = 1.0
    n_pretrain: int = 60
    n_finetune: int = 40
    n_test: int = 60
    pretrain_steps: int = 200
    pretrain_step_size: float = 0.01
    label_noise: float = 0.3
    neg_ratio: int = 3
    image_size: int = 100
    concepts: ConceptSpace = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_objects * (self.n_objects - 1) < self.n_relations * self.pairs_per_relation:
            raise ContractError("not enough category pairs for the requested relations")
        rng = np.random.default_rng([self.seed, 11])
        d = self.dim
        obj = rng.standard_normal((self.n_objects, d))
        rel = rng.standard_normal((self.n_relations, d))
        rel /= np.linalg.norm(rel, axis=1, keepdims=True)
        shared = rng.standard_normal(d)
        rel += self.text_sharing * shared / np.linalg.norm(shared)
        obj_names = [f"object_{i:02d}" for i in range(self.n_objects)]
        rel_names = [f"relation_{i:02d}" for i in range(self.n_relations)]
        cs = ConceptSpace([Concept(n, "object", "base", e) for n, e in zip(obj_names, obj)],
                          [Concept(n, "relation", "base", e) for n, e in zip(rel_names, rel)], d)
        self.split = make_split(cs, "ovr", self.seed)
        self.concepts = cs.with_splits(novel_relations=self.split.novel_relations)
        self.novel_mask = np.array([c.split == "novel" for c in self.concepts.relations])
        pairs = [(a, b) for a in range(self.n_objects) for b in range(self.n_objects) if a != b]
        chosen = rng.permutation(len(pairs))[: self.n_relations * self.pairs_per_relation]
        self.table = -np.ones((self.n_objects, self.n_objects), dtype=int)
        for k, p in enumerate(chosen):
            self.table[pairs[p]] = k % self.n_relations
        self._obj_emb = self.concepts.embedding_matrix("object")
        self._text = self.concepts.embedding_matrix("relation")
        n = self.nodes_per_scene
        self._pair_s, self._pair_o = map(np.array, zip(*[(s, o) for s in range(n)
                                                        for o in range(n) if s != o]))
        stream = np.random.default_rng([self.seed, 12])
        self.pretrain_scenes = [self._scene(stream, f"pretrain-{i}") for i in range(self.n_pretrain)]
        self.finetune_scenes = [self._scene(stream, f"finetune-{i}") for i in range(self.n_finetune)]
        self.test_scenes = [self._scene(stream, f"test-{i}") for i in range(self.n_test)]

    def _scene(self, rng, image_id):
        cats = rng.choice(self.n_objects, self.nodes_per_scene, replace=False)
        feats = self._obj_emb[cats] + self.feature_noise * rng.standard_normal((len(cats), self.dim))
        size = self.image_size
        nodes = []
        for c, f in zip(cats, feats):
            x1, y1 = rng.uniform(0, size / 2, 2)
            w, h = rng.uniform(size / 10, size / 2, 2)
            nodes.append(Node(BBox(x1, y1, x1 + w, y1 + h), self.concepts.objects[c].name,
                              1.0, f))
        names = self.concepts.names("relation")
        edges = [Edge(int(s), int(o), names[self.table[cats[s], cats[o]]])
                 for s, o in zip(self._pair_s, self._pair_o) if self.table[cats[s], cats[o]] >= 0]
        return SceneGraph(image_id, size, size, nodes, edges)

    def pair_arrays(self, graphs):
        """Features of every ordered pair and its (pairs, relations) label matrix."""
        R = len(self._text)
        Vs, Vo, Y = [], [], []
        for g in graphs:
            F = np.stack([n.feature for n in g.nodes])
            n = len(g.nodes)
            ss, oo = zip(*[(s, o) for s in range(n) for o in range(n) if s != o])
            lookup = {(s, o): k for k, (s, o) in enumerate(zip(ss, oo))}
            y = np.zeros((len(ss), R))
            for e in g.edges:
                y[lookup[(e.subject, e.object)], self.concepts.relation_index(e.predicate)] = 1.0
            Vs.append(F[list(ss)])
            Vo.append(F[list(oo)])
            Y.append(y)
        return np.concatenate(Vs), np.concatenate(Vo), np.concatenate(Y)

    def pretrain_teacher(self):
        """Relation-aware pre-training on noisy annotations covering every relation."""
        rng = np.random.default_rng([self.seed, 13])
        names = self.concepts.names("relation")
        noisy = []
        for g in self.pretrain_scenes:
            edges = {}
            for e in g.edges:
                p = names[rng.integers(len(names))] if rng.random() < self.label_noise else e.predicate
                edges[(e.subject, e.object, p)] = Edge(e.subject, e.object, p)
            noisy.append(SceneGraph(g.image_id, g.width, g.height, g.nodes, edges.values()))
        Vs, Vo, Y = self.pair_arrays(noisy)
        everything = np.ones(len(names), dtype=bool)
        params = RelationHeadParams.init(self.dim, hidden=self.hidden, seed=self.seed)
        opt = Adam(self.pretrain_step_size)
        for _ in range(self.pretrain_steps):
            mask = sample_negative_mask(Y, everything, self.neg_ratio, rng)
            _, g, _, _ = _bce_masked(Vs, Vo, self._text, Y, mask, params)
            params = opt.step(params, g)
        return params

    def evaluate(self, params, top_k=50):
        """Image-averaged R@K on the test scenes: (base, novel, base+novel)."""
        if not hasattr(self, "_test_cache"):
            Vs, Vo, Y = self.pair_arrays(self.test_scenes)
            self._test_cache = (Vs, Vo, Y.reshape(self.n_test, -1))
        Vs, Vo, Y = self._test_cache
        E = _forward(Vs, Vo, params)[0]
        S = relation_scores(E, self._text, params).reshape(self.n_test, -1)
        top = np.argsort(-S, axis=1, kind="stable")[:, :top_k]
        hit = np.zeros_like(Y, dtype=bool)
        np.put_along_axis(hit, top, True, axis=1)
        hit &= Y > 0
        novel_cols = np.tile(self.novel_mask, Y.shape[1] // len(self.novel_mask))

        def image_mean(cols):
            gt = (Y > 0) & cols
            n = gt.sum(axis=1)
            ok = n > 0
            if not ok.any():
                return float("nan")
            return float(((hit & cols).sum(axis=1)[ok] / n[ok]).mean())

        everything = np.ones_like(novel_cols)
        return image_mean(~novel_cols), image_mean(novel_cols), image_mean(everything)


@dataclass
class FinetuneResult:
    trajectory: list
    student: RelationHeadParams
    teacher: RelationHeadParams


def finetune(world, cfg):
    """Fine-tune the student on base-only (OvR-filtered) annotations.

    Each step minimizes BCE over annotated pairs plus background pairs, with
    negatives sampled from the base vocabulary, plus ``lambda`` times the L1
    distillation on the background edges. Recall on held-out scenes is
    recorded at step 0, every ``eval_every`` steps and at the end.
    """
    train = []
    for g in world.finetune_scenes:
        f = filter_training_graph(g, world.split)
        train.append(f if f is not None else SceneGraph(g.image_id, g.width, g.height, g.nodes))
    Vs, Vo, Y = world.pair_arrays(train)
    base = ~world.novel_mask
    background = (Y.sum(axis=1) == 0).astype(np.float64)
    extra = None
    if cfg.lambda_ > 0 and background.any():
        E_t = _forward(Vs, Vo, cfg.teacher)[0]
        w = cfg.lambda_ * background[:, None] / background.sum()

        def extra(E):
            D = E - E_t
            return float((np.abs(D) * w).sum()), np.sign(D) * w
    rng = np.random.default_rng([cfg.seed, 21])
    opt = Adam(cfg.step_size, trainable=cfg.trainable)
    student = cfg.student.copy()

    def record(step):
        b, n, bn = world.evaluate(student, cfg.top_k)
        return TrajectoryPoint(step, b, n, bn)

    trajectory = [record(0)]
    for step in range(1, cfg.steps + 1):
        mask = sample_negative_mask(Y, base, cfg.neg_ratio, rng)
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is checked below
            loss, g, _, _ = _bce_masked(Vs, Vo, world._text, Y, mask, student, extra)
        if not np.isfinite(loss) or not np.all(np.isfinite(g.to_vector())):
            raise DivergenceError(f"non-finite loss {loss} at step {step} "
                                  f"(step_size={cfg.step_size}, lambda={cfg.lambda_})")
        student = opt.step(student, g)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            trajectory.append(record(step))
    return FinetuneResult(trajectory, student, cfg.teacher)
