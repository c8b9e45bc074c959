import numpy as np
import pytest

from ovscene.alignment import PairSample, RelationHeadParams, bce_loss
from ovscene.core import ConceptSpace
from ovscene.retention import (Adam, DistillConfig, DivergenceError, SyntheticWorld,
                               distill_loss, finetune, sample_negative_mask, total_loss)
from ovscene.validation import ContractError


def small_world(seed=0):
    return SyntheticWorld(seed=seed, hidden=16, n_pretrain=8, n_finetune=6, n_test=6,
                          pretrain_steps=5)


def pairs(rng, d, n=4):
    return [(rng.standard_normal(d), rng.standard_normal(d)) for _ in range(n)]


def test_distill_examples():
    rng = np.random.default_rng(0)
    t = RelationHeadParams.init(5, seed=1)
    neg = pairs(rng, 5)
    loss, g = distill_loss(neg, t, t.copy())
    assert loss == 0.0 and not g.to_vector().any()
    s = t.copy()
    s.b2 = s.b2 + 0.3
    assert distill_loss(neg, t, s)[0] == pytest.approx(0.3 * 5, abs=1e-12)
    with pytest.raises(ContractError):
        distill_loss([], t, s)


def batch_and_space(rng, d=4):
    cs = ConceptSpace.random(["a", "b"], ["r0", "r1", "r2"], d, seed=2)
    return cs, [PairSample(rng.standard_normal(d), rng.standard_normal(d), ["r0"], ["r2"]),
                PairSample(rng.standard_normal(d), rng.standard_normal(d), [], ["r1"])]


def test_total_loss_is_weighted_sum():
    rng = np.random.default_rng(1)
    cs, batch = batch_and_space(rng)
    teacher = RelationHeadParams.init(4, seed=3)
    student = teacher.axpy(0.2, RelationHeadParams.init(4, seed=4))
    neg = pairs(rng, 4)
    bce, g_bce = bce_loss(batch, cs, student)
    dis, g_dis = distill_loss(neg, teacher, student)
    for lam in (0.0, 0.1, 1.0):
        loss, g = total_loss(batch, neg, DistillConfig(teacher, student, lambda_=lam), cs)
        assert loss == pytest.approx(bce + lam * dis, abs=1e-12)
        assert np.allclose(g.to_vector(), g_bce.to_vector() + lam * g_dis.to_vector(), atol=1e-12)
    assert 0.9 + 0.1 * 0.5 == pytest.approx(0.95)


def test_lambda_terms_vanish_when_student_is_teacher():
    rng = np.random.default_rng(2)
    cs, batch = batch_and_space(rng)
    teacher = RelationHeadParams.init(4, seed=5)
    bce, g_bce = bce_loss(batch, cs, teacher)
    for lam in (0.0, 1.0):
        loss, g = total_loss(batch, pairs(rng, 4), DistillConfig(teacher, lambda_=lam), cs)
        assert loss == bce
        assert np.array_equal(g.to_vector(), g_bce.to_vector())


def test_config_validation():
    t = RelationHeadParams.init(3)
    with pytest.raises(ContractError):
        DistillConfig(t, lambda_=-1)
    with pytest.raises(ContractError):
        DistillConfig(t, step_size=0)
    with pytest.raises(ContractError):
        DistillConfig(t, RelationHeadParams.init(4))
    assert DistillConfig(t).student.allclose(t, rtol=0, atol=0)


def test_negative_mask_counts_and_vocabulary():
    rng = np.random.default_rng(3)
    Y = np.zeros((50, 10))
    Y[np.arange(50), rng.integers(0, 10, 50)] = 1
    Y[:5, 9] = 1
    allowed = np.arange(10) < 7
    M = sample_negative_mask(Y, allowed, 2, rng)
    neg = (M > 0) & (Y == 0)
    assert np.all(M[Y > 0] == 1)
    assert not neg[:, ~allowed].any()
    expected = np.minimum(2 * Y.sum(1), (allowed[None] & (Y == 0)).sum(1))
    assert np.array_equal(neg.sum(1), expected)


def test_adam_leaves_frozen_fields():
    p = RelationHeadParams.init(3, seed=0)
    g = RelationHeadParams.init(3, seed=1)
    q = Adam(0.1, trainable=("W1",)).step(p, g)
    assert not np.array_equal(q.W1, p.W1)
    assert np.array_equal(q.proj_W, p.proj_W) and np.array_equal(q.W2, p.W2)


def test_zero_steps_gives_initial_evaluation():
    w = small_world()
    teacher = w.pretrain_teacher()
    r = finetune(w, DistillConfig(teacher, steps=0))
    assert len(r.trajectory) == 1 and r.trajectory[0].step == 0
    assert r.trajectory[0][1:] == w.evaluate(teacher)


def test_finetune_is_bit_reproducible():
    runs = []
    for _ in range(2):
        w = small_world(seed=4)
        r = finetune(w, DistillConfig(w.pretrain_teacher(), steps=10, eval_every=5, seed=4))
        runs.append((r.trajectory, r.student.to_vector()))
    assert runs[0][0] == runs[1][0]
    assert np.array_equal(runs[0][1], runs[1][1])
    assert [p.step for p in runs[0][0]] == [0, 5, 10]


def test_divergence_raises():
    w = small_world()
    t = w.pretrain_teacher()
    with pytest.raises(DivergenceError, match="non-finite"):
        finetune(w, DistillConfig(t, step_size=1e300, steps=5))


def test_world_recall_bounds():
    w = small_world()
    b, n, bn = w.evaluate(w.pretrain_teacher())
    assert all(0.0 <= v <= 1.0 for v in (b, n, bn))
    assert w.novel_mask.sum() == 15
