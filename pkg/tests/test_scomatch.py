import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osslab.baselines import FixMatchConfig, fixmatch_iteration, init_fixmatch_state
from osslab.data import AugmentConfig, BatchStream, SplitConfig, make_synthetic_openset, split_open_set
from osslab.diffcore import Network, SgdConfig, numerical_gradient, relative_error, softmax, softmax_cross_entropy
from osslab.scomatch import (
    EmptyQueueError,
    OODMemoryQueue,
    PseudoLabelBatch,
    ScoMatchConfig,
    ThresholdController,
    close_set_loss,
    cpl_update,
    fixmatch_consistency_loss,
    init_scomatch_state,
    model_close_set_loss,
    model_open_set_loss,
    msp_score,
    open_set_loss,
    pseudo_label,
    pseudo_label_from_probs,
    queue_push,
    queue_sample,
    select_enqueue,
    supervised_losses,
    train_iteration,
)


# -- MSP and enqueue selection ---------------------------------------------

def test_msp_examples():
    assert msp_score(np.array([0.1, 0.5, 0.2, 0.2]), 3) == 0.5
    assert msp_score(np.full(4, 0.25), 3) == 0.25
    assert msp_score(np.array([0.05, 0.05, 0.05, 0.85]), 3) == 0.05


def _probs_with_msp(msps, K=2):
    # rows whose first-K max equals the given value
    rows = []
    for m in msps:
        r = np.zeros(K + 1)
        r[0] = m
        r[K] = 1 - m
        rows.append(r)
    return np.array(rows)


def test_select_enqueue_examples():
    assert select_enqueue(_probs_with_msp([0.9, 0.3, 0.7]), 2, 1).tolist() == [1]
    assert select_enqueue(_probs_with_msp([0.9, 0.3, 0.7]), 2, 3).tolist() == [1, 2, 0]
    assert select_enqueue(_probs_with_msp([0.4, 0.4]), 2, 1).tolist() == [0]


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40), st.integers(2, 6), st.data())
def test_select_enqueue_matches_full_sort_oracle(n, K, data):
    seed = data.draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    # coarse values force ties
    logits = rng.integers(-2, 3, size=(n, K + 1)).astype(float)
    probs = softmax(logits)
    k = data.draw(st.integers(1, n))
    scores = [max(row[:K]) for row in probs]
    oracle = sorted(range(n), key=lambda i: (scores[i], i))[:k]
    assert select_enqueue(probs, K, k).tolist() == oracle


# -- queue ------------------------------------------------------------------

def test_queue_fifo_eviction():
    q = OODMemoryQueue(3, 1)
    for v in range(4):
        queue_push(q, np.array([[float(v)]]))
    assert len(q) == 3
    assert q.features()[:, 0].tolist() == [1.0, 2.0, 3.0]


def test_queue_no_eviction_below_capacity():
    q = OODMemoryQueue(5, 2)
    q.push(np.ones((3, 2)))
    assert len(q) == 3


def test_queue_sample_with_replacement():
    q = OODMemoryQueue(4, 1)
    q.push(np.array([[1.0], [2.0]]))
    draws = queue_sample(q, 16, np.random.default_rng(0))
    assert draws.shape == (16, 1)
    assert set(draws[:, 0].tolist()) <= {1.0, 2.0}


def test_queue_sample_empty():
    with pytest.raises(EmptyQueueError):
        OODMemoryQueue(2, 1).sample(1, np.random.default_rng(0))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10), st.lists(st.integers(1, 5), max_size=30))
def test_queue_fifo_property(cap, pushes):
    q = OODMemoryQueue(cap, 1)
    history = []
    counter = 0
    for k in pushes:
        vals = np.arange(counter, counter + k, dtype=float)[:, None]
        counter += k
        q.push(vals)
        history.extend(vals[:, 0].tolist())
        assert len(q) <= cap
    assert q.features()[:, 0].tolist() == history[-cap:] if history else len(q) == 0


def test_queue_purity():
    q = OODMemoryQueue(10, 1)
    q.push(np.zeros((4, 1)), tags=[3, 3, 0, 3])
    assert q.purity(3) == 0.75
    assert OODMemoryQueue(3, 1).purity(3) is None


# -- thresholds -------------------------------------------------------------

def test_cpl_examples():
    c = ThresholdController(0.95, 0.5, count_ood=20, count_id=100)
    assert cpl_update(c) == 0.5
    c = ThresholdController(0.95, 0.5, count_ood=90, count_id=100)
    assert cpl_update(c) == pytest.approx(0.855)
    c = ThresholdController(0.95, 0.5, tau_ood=0.7, count_ood=5, count_id=0)
    assert cpl_update(c) == 0.7


def test_cpl_counters_decay():
    c = ThresholdController(0.9, 0.5, count_ood=10, count_id=20, decay=0.5)
    cpl_update(c)
    assert (c.count_ood, c.count_id) == (5.0, 10.0)


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 1e6), st.floats(0, 1e6), st.floats(0.01, 0.49), st.floats(0.5, 1.0))
def test_cpl_clamp_property(n_ood, n_id, tau_min, tau):
    c = ThresholdController(tau, tau_min, count_ood=n_ood, count_id=n_id)
    t = cpl_update(c)
    assert tau_min <= t <= tau
    assert c.count_ood >= 0 and c.count_id >= 0


def test_observe_counts_with_fixed_tau():
    probs = np.array([[0.97, 0.01, 0.01, 0.01],    # confident ID
                      [0.01, 0.01, 0.01, 0.97],    # confident OOD
                      [0.2, 0.2, 0.2, 0.4],        # not confident
                      [0.01, 0.96, 0.01, 0.02]])   # confident ID
    c = ThresholdController(0.95, 0.5, tau_ood=0.3)
    c.observe(probs, 3)
    assert (c.count_id, c.count_ood) == (2.0, 1.0)


# -- pseudo-labels -------------------------------------------------------------

def test_pseudo_label_examples():
    p = pseudo_label_from_probs(np.array([[0.96, 0.02, 0.01, 0.01]]), 0.95, 0.5, K=3)
    assert p.labels.tolist() == [0] and p.accept.tolist() == [True]
    q = np.array([[0.2, 0.2, 0.2, 0.4]])
    p = pseudo_label_from_probs(q, 0.95, 0.5, K=3)
    assert p.labels.tolist() == [3] and p.accept.tolist() == [False]
    p = pseudo_label_from_probs(q, 0.95, 0.35, K=3)
    assert p.labels.tolist() == [3] and p.accept.tolist() == [True]


def test_pseudo_label_ties_to_lowest_class():
    p = pseudo_label_from_probs(np.array([[0.4, 0.4, 0.2]]), 0.3, 0.3, K=2)
    assert p.labels.tolist() == [0]


def test_pseudo_label_model_updates_counters(rng):
    net = Network(3, (4,), 4, rng)
    c = ThresholdController(0.0001, 0.00005)
    pl = pseudo_label(net, rng.normal(size=(6, 3)), c)
    assert c.count_id + c.count_ood == 6
    assert pl.thresholds.shape == (6,)


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_ood_logit_permutation_never_flips_id_acceptance(data):
    """Changing the OOD logit among rows rejected as OOD keeps ID acceptances."""
    seed = data.draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    K = 3
    logits = rng.normal(scale=3, size=(12, K + 1))
    tau, tau_ood = 0.9, 0.8
    base = pseudo_label_from_probs(softmax(logits), tau, tau_ood, K)
    rejected_ood = np.flatnonzero((base.labels == K) & ~base.accept)
    shuffled = logits.copy()
    shuffled[rejected_ood, K] = rng.permutation(logits[rejected_ood, K])
    after = pseudo_label_from_probs(softmax(shuffled), tau, tau_ood, K)
    id_acc = (base.labels < K) & base.accept
    np.testing.assert_array_equal(after.accept[id_acc], True)
    np.testing.assert_array_equal(after.labels[id_acc], base.labels[id_acc])


def test_pseudo_accept_consistent_with_threshold(rng):
    probs = softmax(rng.normal(scale=3, size=(50, 5)))
    p = pseudo_label_from_probs(probs, 0.8, 0.6, K=4)
    thr = np.where(p.labels == 4, 0.6, 0.8)
    np.testing.assert_array_equal(p.accept, probs.max(1) > thr)


# -- losses -------------------------------------------------------------------

def _pl(labels, accept, K=3):
    labels = np.asarray(labels)
    n = len(labels)
    return PseudoLabelBatch(np.zeros((n, K + 1)), labels, np.asarray(accept, bool), np.full(n, 0.9))


def test_open_loss_zero_when_nothing_accepted():
    loss, gw, gs = open_set_loss(np.zeros((2, 4)), np.zeros((2, 4)), _pl([0, 3], [False, False]))
    assert loss == 0 and not gw.any() and not gs.any()


def test_open_loss_zero_for_perfect_model():
    big = np.full((2, 4), -1000.0)
    big[0, 1] = big[1, 3] = 0.0
    loss, _, _ = open_set_loss(big, big, _pl([1, 3], [True, True]))
    assert loss == 0.0


def test_open_loss_uniform_normalisation():
    # one accepted of mu*B = 2, uniform outputs: 2*ln(K+1)/(2*2)
    loss, _, _ = open_set_loss(np.zeros((2, 4)), np.zeros((2, 4)), _pl([2, 1], [True, False]))
    assert loss == pytest.approx(2 * math.log(4) / 4, abs=1e-12)


def test_close_loss_filters_ood_pseudo_labels():
    loss, g = close_set_loss(np.random.default_rng(0).normal(size=(3, 4)),
                             _pl([3, 3, 3], [True, True, True]), 3)
    assert loss == 0 and not g.any()


def test_close_loss_uniform_normalisation():
    logits = np.zeros((4, 4))
    logits[:, 3] = 5.0  # OOD column must not matter after renormalising over the first K
    loss, g = close_set_loss(logits, _pl([1, 3, 0, 2], [True, True, False, False]), 3)
    assert loss == pytest.approx(math.log(3) / 4, abs=1e-12)
    assert not g[:, 3].any()


def test_close_loss_matches_fixmatch_on_inert_ood_branch(rng):
    """K+1 head whose OOD row never fires reproduces the FixMatch consistency loss on a K-way head."""
    K = 3
    fm = Network(5, (8,), K, rng)
    sco = Network(5, (8,), K + 1, None)
    for dst, src in zip(sco.params(), fm.params()):
        if dst.shape == src.shape:
            dst[...] = src
    sco.head.W[:K] = fm.head.W
    sco.head.b[:K] = fm.head.b
    sco.head.W[K] = 0.0
    sco.head.b[K] = -1e4  # exp underflows to exactly 0
    aug = AugmentConfig(0.1, 0.5, 0.2)
    u = rng.normal(size=(16, 5)) * 2
    from osslab.data import augment_strong, augment_weak
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    uw1, us1 = augment_weak(u, aug, r1), augment_strong(u, aug, r1)
    uw2, us2 = augment_weak(u, aug, r2), augment_strong(u, aug, r2)
    tau = 0.6
    pfm = pseudo_label_from_probs(softmax(fm.logits(uw1)), tau)
    psc = pseudo_label_from_probs(softmax(sco.logits(uw2)), tau, 1.0, K)
    assert pfm.n_accept > 0
    l_fm, _ = fixmatch_consistency_loss(fm.logits(us1), pfm)
    l_sc, _ = close_set_loss(sco.logits(us2), psc, K)
    assert l_sc == pytest.approx(l_fm, rel=1e-12)


def _tiny_model(rng, K=3):
    net = Network(4, (8, 6), K + 1, rng)
    for p in net.params():
        p[...] = rng.normal(scale=0.6, size=p.shape)
    assert net.num_params() <= 200
    return net


def test_supervised_losses_uniform_model():
    net = Network(4, (5,), 4, None)  # all-zero weights -> uniform outputs
    x = np.ones((3, 4))
    l_id, l_ood, _, skipped = supervised_losses(net, x, np.array([0, 1, 2]), np.ones((3, 4)))
    assert not skipped
    assert l_id == pytest.approx(math.log(4)) and l_ood == pytest.approx(math.log(4))


def test_supervised_losses_perfect_model():
    net = Network(2, (), 3, None)
    net.head.W[...] = 0
    net.head.b[...] = [0, 0, 0]
    net.head.W[0, 0] = 1e4
    net.head.W[2, 1] = 1e4
    x = np.array([[1.0, 0.0]])
    o = np.array([[0.0, 1.0]])
    l_id, l_ood, _, _ = supervised_losses(net, x, np.array([0]), o)
    assert l_id == 0.0 and l_ood == 0.0


def test_supervised_losses_skip_before_warmup(rng):
    net = _tiny_model(rng)
    _, l_ood, _, skipped = supervised_losses(net, rng.normal(size=(2, 4)), np.array([0, 1]), None)
    assert skipped and l_ood == 0.0


def test_supervised_losses_gradient_check(rng):
    net = _tiny_model(rng)
    x, o = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    y = np.array([0, 2, 1])

    def f():
        a, b, _, _ = supervised_losses(net, x, y, o)
        return a + b

    _, _, grads, _ = supervised_losses(net, x, y, o)
    for p, g in zip(net.params(), grads):
        assert relative_error(g, numerical_gradient(f, p)) < 1e-4


def test_open_and_close_loss_gradient_check(rng):
    net = _tiny_model(rng)
    uw, us = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    pl = _pl([0, 3, 2, 1, 3], [True, True, False, True, True])
    for fn in (lambda: model_open_set_loss(net, pl, uw, us),
               lambda: model_open_set_loss(net, pl, uw, us, use_weak=False),
               lambda: model_close_set_loss(net, pl, us, 3)):
        _, grads = fn()
        for p, g in zip(net.params(), grads):
            assert relative_error(g, numerical_gradient(lambda: fn()[0], p)) < 1e-4


def test_close_loss_gradient_skips_ood_head_row(rng):
    net = _tiny_model(rng)
    pl = _pl([0, 1, 2], [True, True, True])
    _, grads = model_close_set_loss(net, pl, rng.normal(size=(3, 4)), 3)
    gW, gb = grads[-2], grads[-1]
    assert not gW[3].any() and gb[3] == 0.0


# -- full iteration -------------------------------------------------------------

@pytest.fixture(scope="module")
def toy():
    ds = make_synthetic_openset(2, 1, 4, 8.0, 200, seed=0)
    return split_open_set(ds, SplitConfig(2, 10, 300, 0.5, seed=0))


def _run(cfg, state, lab, unl, n, aug, step=train_iteration):
    stream = BatchStream(len(lab), len(unl), cfg.B, cfg.mu, state.rngs["batching"])
    reports = []
    for _ in range(n):
        li, ui = next(stream)
        reports.append(step(state, lab.features[li], lab.labels[li], unl.features[ui], cfg, aug,
                            u_truth=unl.labels[ui]))
    return reports


def test_iteration_loss_decreases(toy):
    lab, unl, _ = toy
    cfg = ScoMatchConfig(K=2, B=8, mu=3, N_m=16)
    state = init_scomatch_state(cfg, 4, seed=0, hidden=(16, 16))
    reps = _run(cfg, state, lab, unl, 50, AugmentConfig(0.1, 0.3, 0.1))
    losses = [r.loss_total for r in reps]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    assert all(np.isfinite(losses))
    assert reps[-1].queue_len == 16 and not reps[-1].ood_skipped
    assert cfg.tau_min <= reps[-1].tau_ood <= cfg.tau


def test_iteration_enqueues_minimal_msp_sample():
    K = 2
    cfg = ScoMatchConfig(K=K, B=2, mu=2, N_m=4)
    state = init_scomatch_state(cfg, 2, seed=0, hidden=())
    head = state.student.head
    head.W[...] = [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]
    head.b[...] = 0.0
    u = np.array([[5.0, 0.0], [0.0, 5.0], [0.0, 0.0], [4.0, 4.0]])
    # row 2 gives uniform probs -> MSP 1/3, the analytic minimum among these rows
    train_iteration(state, np.zeros((2, 2)), np.array([0, 1]), u, cfg,
                    AugmentConfig(0.0, 0.0, 0.0))
    np.testing.assert_array_equal(state.queue.features(), [[0.0, 0.0]])


def test_lambda_zero_before_warmup_equals_supervised_step(toy):
    lab, unl, _ = toy
    aug = AugmentConfig(0.1, 0.3, 0.1)
    cfg = ScoMatchConfig(K=2, B=8, mu=3, N_m=16, lambda_u=0.0, queue_warmup_min=16)
    s1 = init_scomatch_state(cfg, 4, seed=3, hidden=(8,))
    s2 = init_scomatch_state(cfg, 4, seed=3, hidden=(8,))
    li, ui = next(BatchStream(len(lab), len(unl), 8, 3, np.random.default_rng(0)))
    x, y, u = lab.features[li], lab.labels[li], unl.features[ui]
    train_iteration(s1, x, y, u, cfg, aug)
    # manual supervised-only step with the same weak draw
    xw = x + aug.weak_noise_sigma * s2.rngs["augment"].standard_normal(x.shape)
    s2.student.zero_grad()
    _, g = softmax_cross_entropy(s2.student.logits(xw), y)
    s2.student.backward(g)
    s2.optimizer.step(s2.student.grads())
    for a, b in zip(s1.student.params(), s2.student.params()):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)


def test_fallback_matches_fixmatch_bitwise(toy):
    lab, unl, _ = toy
    aug = AugmentConfig(0.1, 0.3, 0.1)
    sgd = SgdConfig(0.05, 0.9, 5e-4)
    sco_cfg = ScoMatchConfig(K=2, B=8, mu=3, tau=0.7, ood_supervision=False, use_open_loss=False)
    fm_cfg = FixMatchConfig(K=2, B=8, mu=3, tau=0.7)
    s1 = init_scomatch_state(sco_cfg, 4, seed=1, hidden=(16,), sgd=sgd)
    s2 = init_fixmatch_state(fm_cfg, 4, seed=1, hidden=(16,), sgd=sgd)
    r1 = _run(sco_cfg, s1, lab, unl, 30, aug)
    r2 = _run(fm_cfg, s2, lab, unl, 30, aug, step=fixmatch_iteration)
    assert sum(r.n_accept_id for r in r2) > 0
    for a, b in zip(s1.student.params() + s1.teacher.params(), s2.student.params() + s2.teacher.params()):
        assert a.tobytes() == b.tobytes()
    assert [r.loss_total for r in r1] == [r.loss_total for r in r2]


def test_hidden_truth_does_not_affect_training(toy):
    lab, unl, _ = toy
    aug = AugmentConfig(0.1, 0.3, 0.1)
    cfg = ScoMatchConfig(K=2, B=8, mu=3, N_m=16)
    s1 = init_scomatch_state(cfg, 4, seed=2, hidden=(8,))
    s2 = init_scomatch_state(cfg, 4, seed=2, hidden=(8,))
    st1 = BatchStream(len(lab), len(unl), 8, 3, s1.rngs["batching"])
    st2 = BatchStream(len(lab), len(unl), 8, 3, s2.rngs["batching"])
    garbage = np.random.default_rng(0)
    for _ in range(25):
        li, ui = next(st1)
        train_iteration(s1, lab.features[li], lab.labels[li], unl.features[ui], cfg, aug,
                        u_truth=unl.labels[ui])
        li, ui = next(st2)
        train_iteration(s2, lab.features[li], lab.labels[li], unl.features[ui], cfg, aug,
                        u_truth=garbage.integers(0, 3, len(ui)))
    for a, b in zip(s1.student.params(), s2.student.params()):
        assert a.tobytes() == b.tobytes()


def test_dual_head_iteration_runs(toy):
    lab, unl, _ = toy
    cfg = ScoMatchConfig(K=2, B=8, mu=3, N_m=16, dual_head=True)
    state = init_scomatch_state(cfg, 4, seed=0, hidden=(8,))
    reps = _run(cfg, state, lab, unl, 20, AugmentConfig(0.1, 0.3, 0.1))
    assert state.student.aux_head is not None and state.student.aux_head.out_dim == 2
    assert np.isfinite(reps[-1].loss_total)


def test_config_validation():
    with pytest.raises(ValueError):
        ScoMatchConfig(K=2, tau=0.5, tau_min=0.6)
    with pytest.raises(ValueError):
        ScoMatchConfig(K=2, B=2, mu=1, K_m=3)
    cfg = ScoMatchConfig(K=4, B=64)
    assert cfg.N_m == 32 and cfg.queue_warmup_min == 32
