"""Relation head and visual-concept alignment losses with analytic gradients.

Everything works on plain float64 vectors. Node features ``v`` are d-dim,
relation text embeddings ``t`` are d_t-dim. The relation head maps a
(subject, object) pair to an edge feature

    e = mean_n  W2 relu(W1 [v_s; v_o; r_n] + b1) + b2

and a predicate is scored against it by ``<e, proj_W t + proj_b>``.
"""

import json
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator

from .validation import ContractError, check_is_fitted, check_matrix, check_vector

LOGIT_CLAMP = 30.0


@dataclass
class RelationHeadParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    queries: np.ndarray
    proj_W: np.ndarray
    proj_b: np.ndarray

    FIELDS = ("W1", "b1", "W2", "b2", "queries", "proj_W", "proj_b")

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.array(getattr(self, f.name), dtype=np.float64))
        d, hidden, d_t = self.d, self.hidden, self.d_t
        expected = {
            "W1": (hidden, 3 * d), "b1": (hidden,), "W2": (d, hidden), "b2": (d,),
            "proj_W": (d, d_t), "proj_b": (d,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ContractError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.queries.ndim != 2 or self.queries.shape[1] != d or self.queries.shape[0] < 1:
            raise ContractError(f"queries must be (M>=1, {d}), got {self.queries.shape}")
        for name in self.FIELDS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ContractError(f"{name} has non-finite entries")

    @property
    def d(self):
        return self.W2.shape[0]

    @property
    def hidden(self):
        return self.W2.shape[1]

    @property
    def d_t(self):
        return self.proj_W.shape[1]

    @property
    def n_queries(self):
        return self.queries.shape[0]

    @classmethod
    def init(cls, d, d_t=None, n_queries=1, hidden=None, seed=0, scale=1.0):
        """Random initialization; hidden width defaults to 2d."""
        d_t = d if d_t is None else d_t
        hidden = 2 * d if hidden is None else hidden
        rng = np.random.default_rng(seed)
        return cls(
            W1=rng.standard_normal((hidden, 3 * d)) * scale / np.sqrt(3 * d),
            b1=np.zeros(hidden),
            W2=rng.standard_normal((d, hidden)) * scale / np.sqrt(hidden),
            b2=np.zeros(d),
            queries=rng.standard_normal((n_queries, d)),
            proj_W=rng.standard_normal((d, d_t)) * scale / np.sqrt(d_t),
            proj_b=np.zeros(d),
        )

    @classmethod
    def zeros(cls, d, d_t=None, n_queries=1, hidden=None):
        d_t = d if d_t is None else d_t
        hidden = 2 * d if hidden is None else hidden
        return cls(np.zeros((hidden, 3 * d)), np.zeros(hidden), np.zeros((d, hidden)),
                   np.zeros(d), np.zeros((n_queries, d)), np.zeros((d, d_t)), np.zeros(d))

    def zeros_like(self):
        return RelationHeadParams(*(np.zeros_like(a) for a in self.arrays()))

    def copy(self):
        return RelationHeadParams(*(a.copy() for a in self.arrays()))

    def arrays(self):
        return [getattr(self, n) for n in self.FIELDS]

    def axpy(self, alpha, other, mask=None):
        """Return ``self + alpha * other``; fields outside `mask` are copied unchanged."""
        out = []
        for name, a, b in zip(self.FIELDS, self.arrays(), other.arrays()):
            out.append(a + alpha * b if mask is None or name in mask else a.copy())
        return RelationHeadParams(*out)

    def to_vector(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_vector(self, vec):
        """Params shaped like self, filled from a flat vector."""
        out, i = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[i:i + a.size], dtype=np.float64).reshape(a.shape))
            i += a.size
        if i != len(vec):
            raise ContractError("vector length does not match parameter count")
        return RelationHeadParams(*out)

    def allclose(self, other, **kw):
        return all(np.allclose(a, b, **kw) for a, b in zip(self.arrays(), other.arrays()))

    def to_json(self):
        return {"format": "relation-head-params/1",
                "arrays": [{"name": n, "shape": list(a.shape), "data": a.ravel().tolist()}
                           for n, a in zip(self.FIELDS, self.arrays())]}

    @classmethod
    def from_json(cls, obj):
        arrays = {rec["name"]: np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
                  for rec in obj["arrays"]}
        missing = set(cls.FIELDS) - set(arrays)
        if missing:
            raise ContractError(f"checkpoint is missing arrays {sorted(missing)}")
        return cls(*(arrays[n] for n in cls.FIELDS))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))


def _query_groups(queries):
    """Group identical query rows: [(query, member indices)], first-occurrence order.

    Averaging over M copies of one query collapses to a single head
    evaluation with weight exactly 1.0, which keeps it bit-identical to M=1.
    """
    groups = {}
    for n, q in enumerate(queries):
        groups.setdefault(q.tobytes(), (q, []))[1].append(n)
    return list(groups.values())


def _forward(Vs, Vo, params):
    d, M = params.d, params.n_queries
    X = np.concatenate([Vs, Vo], axis=1)
    AB = np.ascontiguousarray(params.W1[:, :2 * d].T)
    C = params.W1[:, 2 * d:]
    base = X @ AB
    W2T = np.ascontiguousarray(params.W2.T)
    E = None
    cache = []
    for q, members in _query_groups(params.queries):
        w = len(members) / M
        H = np.maximum(base + (params.b1 + C @ q), 0.0)
        out = H @ W2T
        if w != 1.0:
            out *= w
        E = out if E is None else E + out
        cache.append((q, members, w, H))
    E += params.b2
    return E, (X, cache)


def _backward(dE, state, params):
    """Parameter gradients given dLoss/dE for a batch forward pass."""
    X, cache = state
    d = params.d
    C = params.W1[:, 2 * d:]
    g = params.zeros_like()
    g.b2 = dE.sum(axis=0)
    dEW2 = dE @ params.W2
    for q, members, w, H in cache:
        g.W2 += w * (dE.T @ H)
        # H > 0 exactly where the pre-activation is positive
        dZ = dEW2 * (H > 0)
        if w != 1.0:
            dZ *= w
        g.W1[:, :2 * d] += (X.T @ dZ).T
        col = dZ.sum(axis=0)
        g.W1[:, 2 * d:] += np.outer(col, q)
        g.b1 += col
        dq = (C.T @ col) / len(members)
        for n in members:
            g.queries[n] = dq
    return g


def _check_pairs(Vs, Vo, params):
    Vs = check_matrix(np.atleast_2d(Vs), (None, params.d), "subject features")
    Vo = check_matrix(np.atleast_2d(Vo), (Vs.shape[0], params.d), "object features")
    return Vs, Vo


def edge_features(Vs, Vo, params):
    """Edge features for a batch of (subject, object) feature rows, shape (B, d)."""
    Vs, Vo = _check_pairs(Vs, Vo, params)
    return _forward(Vs, Vo, params)[0]


def edge_feature(v_s, v_o, params):
    v_s = check_vector(v_s, params.d, "v_s")
    v_o = check_vector(v_o, params.d, "v_o")
    return _forward(v_s[None], v_o[None], params)[0][0]


def node_similarity(w_concept, v_node):
    """Categorical similarity: sigmoid of the dot product."""
    w = check_vector(w_concept, name="w_concept")
    v = check_vector(v_node, len(w), "v_node")
    return float(expit(w @ v))


def text_projection(T, params):
    T = np.atleast_2d(np.asarray(T, dtype=np.float64))
    if T.shape[1] != params.d_t:
        raise ContractError(f"text embedding must have dim {params.d_t}, got {T.shape[1]}")
    return T @ params.proj_W.T + params.proj_b


def relation_score(e, t_embed, params):
    e = check_vector(e, params.d, "edge feature")
    t = check_vector(t_embed, params.d_t, "text embedding")
    return float(e @ (params.proj_W @ t + params.proj_b))


def relation_scores(E, T, params):
    """Score matrix (B, R) of every edge feature row against every text row."""
    return np.asarray(E) @ text_projection(T, params).T


# --- losses -----------------------------------------------------------------

def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def bce_from_logits(s, y):
    """Elementwise BCE on clamped logits and its derivative w.r.t. the logits."""
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = np.abs(s) <= LOGIT_CLAMP
    sc = np.clip(s, -LOGIT_CLAMP, LOGIT_CLAMP)
    loss = -y * _log_sigmoid(sc) - (1 - y) * _log_sigmoid(-sc)
    grad = (expit(sc) - y) * inside
    return loss, grad


def bce_loss_arrays(Vs, Vo, pair_index, T, y, params):
    """BCE alignment loss over rows (pair_index[k], T[k], y[k]), averaged over rows.

    `Vs`, `Vo` hold one row per distinct (subject, object) pair; each loss row
    refers to a pair and carries the text embedding of one predicate.
    """
    pair_index = np.asarray(pair_index, dtype=np.intp)
    if pair_index.size == 0:
        raise ContractError("empty batch: at least one positive or negative sample is required")
    E, state = _forward(Vs, Vo, params)
    U = text_projection(T, params)
    Er = E[pair_index]
    s = np.einsum("ij,ij->i", Er, U)
    losses, ds = bce_from_logits(s, y)
    ds = ds / len(losses)
    dU = ds[:, None] * Er
    dE = np.zeros_like(E)
    np.add.at(dE, pair_index, ds[:, None] * U)
    g = _backward(dE, state, params)
    g.proj_W = dU.T @ np.atleast_2d(T)
    g.proj_b = dU.sum(axis=0)
    return float(losses.mean()), g


def _bce_masked(Vs, Vo, T, Y, mask, params, extra=None):
    """Masked BCE; `extra(E) -> (loss, dE)` adds a feature-space term to the same backward pass."""
    E, state = _forward(Vs, Vo, params)
    U = text_projection(T, params)
    S = E @ U.T
    m = mask > 0
    if not m.any():
        raise ContractError("empty batch: mask selects no samples")
    losses, ds = bce_from_logits(S[m], Y[m])
    loss = float(losses.mean())
    dS = np.zeros_like(S)
    dS[m] = ds / len(losses)
    dE = dS @ U
    if extra is not None:
        x_loss, x_dE = extra(E)
        loss += x_loss
        dE += x_dE
    g = _backward(dE, state, params)
    dU = dS.T @ E
    g.proj_W = dU.T @ T
    g.proj_b = dU.sum(axis=0)
    return loss, g, E, state


def bce_loss_masked(Vs, Vo, T, Y, mask, params):
    """Same loss as `bce_loss` in matrix form.

    Entry (k, r) of the (pairs, relations) arrays ``Y`` / ``mask`` says whether
    relation row ``T[r]`` is a positive for pair k and whether that sample
    takes part in the loss at all.
    """
    Vs, Vo = _check_pairs(Vs, Vo, params)
    return _bce_masked(Vs, Vo, np.atleast_2d(T), np.asarray(Y, float), np.asarray(mask), params)[:2]


def _distill(Vs, Vo, weights, teacher, student, E_s=None, state=None, E_t=None):
    """Weighted mean L1 gap between student and teacher edge features.

    ``weights[k]`` counts how many negative samples pair k stands for.
    """
    if E_t is None:
        E_t = _forward(Vs, Vo, teacher)[0]
    if E_s is None:
        E_s, state = _forward(Vs, Vo, student)
    w = np.asarray(weights, dtype=np.float64)
    n = w.sum()
    if n <= 0:
        raise ContractError("distillation needs at least one negative sample")
    D = E_s - E_t
    loss = float((np.abs(D).sum(axis=1) * w).sum() / n)
    g = _backward(np.sign(D) * (w / n)[:, None], state, student)
    return loss, g


@dataclass(frozen=True)
class PairSample:
    v_subject: np.ndarray
    v_object: np.ndarray
    positives: frozenset
    negatives: frozenset

    def __post_init__(self):
        object.__setattr__(self, "positives", frozenset(self.positives))
        object.__setattr__(self, "negatives", frozenset(self.negatives))
        if self.positives & self.negatives:
            raise ContractError(f"predicates both positive and negative: "
                                f"{sorted(self.positives & self.negatives)}")


def batch_to_arrays(batch, cs):
    """Flatten a list of PairSample into the array form used by bce_loss_arrays."""
    Vs, Vo, idx, T, y = [], [], [], [], []
    for k, sample in enumerate(batch):
        Vs.append(sample.v_subject)
        Vo.append(sample.v_object)
        for label, names in ((1.0, sample.positives), (0.0, sample.negatives)):
            for name in sorted(names):
                idx.append(k)
                T.append(cs.relation(name).embedding)
                y.append(label)
    return (np.asarray(Vs, dtype=np.float64), np.asarray(Vo, dtype=np.float64),
            np.asarray(idx, dtype=np.intp), np.asarray(T).reshape(len(idx), cs.dim),
            np.asarray(y))


def bce_loss(batch, cs, params):
    """Mean binary cross-entropy over all positive and negative samples of the batch.

    Returns ``(loss, grads)`` where grads is a RelationHeadParams of partials.
    """
    if not batch:
        raise ContractError("empty batch")
    Vs, Vo, idx, T, y = batch_to_arrays(batch, cs)
    if len(idx) == 0:
        raise ContractError("batch has no positive or negative predicates")
    Vs, Vo = _check_pairs(Vs, Vo, params)
    return bce_loss_arrays(Vs, Vo, idx, T, y, params)


def focal_loss(logits, labels, alpha=0.25, gamma=2.0):
    """Sigmoid focal loss averaged over entries; returns (loss, d loss / d logits)."""
    s = np.asarray(logits, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if s.shape != y.shape:
        raise ContractError(f"{s.size} logits but {y.size} labels")
    if s.size == 0:
        raise ContractError("focal loss needs at least one logit")
    if not 0.0 < alpha < 1.0 or gamma < 0:
        raise ContractError("need 0 < alpha < 1 and gamma >= 0")
    inside = np.abs(s) <= LOGIT_CLAMP
    sc = np.clip(s, -LOGIT_CLAMP, LOGIT_CLAMP)
    sign = 2 * y - 1  # +1 for positives, -1 for negatives
    log_pt = _log_sigmoid(sign * sc)
    pt = np.exp(log_pt)
    one_minus = expit(-sign * sc)
    a_t = np.where(y == 1, alpha, 1 - alpha)
    mod = one_minus ** gamma
    loss = -a_t * mod * log_pt
    # d/ds of -a (1-p)^g log p, with p = sigmoid(sign * s)
    grad = -a_t * sign * mod * (one_minus - gamma * pt * log_pt) * inside
    return float(loss.mean()), grad / s.size


def sample_pair_batch(graph, cs, neg_ratio=3, rng=None, background_pairs=0):
    """Positive/negative samples for one graph whose nodes carry features.

    Every annotated (s, o, predicate) is positive; each annotated pair also gets
    ``neg_ratio`` negatives per positive drawn from the non-annotated relation
    names. ``background_pairs`` unannotated ordered pairs may be added as
    negative-only samples.
    """
    rng = np.random.default_rng(rng)
    names = cs.names("relation")
    pos = {}
    for e in graph.edges:
        pos.setdefault((e.subject, e.object), set()).add(e.predicate)
    out = []
    for (s, o), preds in sorted(pos.items()):
        pool = [n for n in names if n not in preds]
        k = min(len(pool), neg_ratio * len(preds))
        neg = [pool[i] for i in rng.choice(len(pool), size=k, replace=False)] if k else []
        out.append(PairSample(graph.nodes[s].feature, graph.nodes[o].feature, preds, neg))
    if background_pairs:
        n = len(graph.nodes)
        free = [(s, o) for s in range(n) for o in range(n) if s != o and (s, o) not in pos]
        for i in rng.permutation(len(free))[:background_pairs]:
            s, o = free[i]
            k = min(len(names), neg_ratio)
            neg = [names[j] for j in rng.choice(len(names), size=k, replace=False)]
            out.append(PairSample(graph.nodes[s].feature, graph.nodes[o].feature, (), neg))
    return out


class RelationHead(BaseEstimator):
    """Open-vocabulary relation classifier trained with the BCE alignment loss.

    ``X`` rows are concatenated ``[v_subject, v_object]`` features (2d columns);
    ``Y`` is a binary (n_samples, n_relations) indicator in the order of
    ``concepts.relations``. Every zero entry acts as a negative.
    """

    def __init__(self, concepts=None, n_queries=1, hidden=None, learning_rate=0.5,
                 max_iter=200, random_state=0):
        self.concepts = concepts
        self.n_queries = n_queries
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.max_iter = max_iter
        self.random_state = random_state

    def _split(self, X):
        X = check_matrix(X, name="X")
        d = self.concepts.dim
        if X.shape[1] != 2 * d:
            raise ContractError(f"X must have {2 * d} columns, got {X.shape[1]}")
        return X[:, :d], X[:, d:]

    def fit(self, X, Y):
        if self.concepts is None:
            raise ContractError("RelationHead needs a ConceptSpace")
        Vs, Vo = self._split(X)
        Y = np.asarray(Y, dtype=np.float64)
        T_all = self.concepts.embedding_matrix("relation")
        if Y.shape != (Vs.shape[0], len(T_all)):
            raise ContractError(f"Y must have shape {(Vs.shape[0], len(T_all))}, got {Y.shape}")
        mask = np.ones_like(Y)
        params = RelationHeadParams.init(self.concepts.dim, n_queries=self.n_queries,
                                         hidden=self.hidden, seed=self.random_state)
        self.loss_curve_ = []
        for _ in range(self.max_iter):
            loss, g = bce_loss_masked(Vs, Vo, T_all, Y, mask, params)
            self.loss_curve_.append(loss)
            params = params.axpy(-self.learning_rate, g)
        self.params_ = params
        self.classes_ = np.array(self.concepts.names("relation"))
        return self

    def transform(self, X):
        """Edge features for each pair row."""
        check_is_fitted(self, "params_")
        Vs, Vo = self._split(X)
        return _forward(Vs, Vo, self.params_)[0]

    def decision_function(self, X):
        E = self.transform(X)
        return relation_scores(E, self.concepts.embedding_matrix("relation"), self.params_)

    def predict_proba(self, X):
        return expit(np.clip(self.decision_function(X), -LOGIT_CLAMP, LOGIT_CLAMP))

    def predict(self, X):
        return (self.predict_proba(X) >= 0.5).astype(int)
