"""SCOMatch: open-set SSL with an OOD memory queue and SCO self-training.

The network has a single (K+1)-way head; column ``K`` is the OOD class. Each
iteration (i) pushes the ``K_m`` unlabeled samples with the lowest in-class
MSP into a FIFO queue, (ii) supervises the head with labeled ID data plus an
equal number of queue samples labeled ``K``, (iii) pseudo-labels the weak
views with threshold ``tau`` for ID classes and an adaptive ``tau_ood`` for the
OOD class, and (iv) trains open-set (all K+1 columns, weak and strong views)
and close-set (first K columns, strong view, ID pseudo-labels) consistency at
once. The teacher is an EMA of the student and is only used for evaluation.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .data import AugmentConfig, augment_strong, augment_weak
from .diffcore import SGD, Network, SgdConfig, ema_update, softmax, softmax_cross_entropy

RNG_STREAMS = ("init", "batching", "augment", "queue", "split")


class EmptyQueueError(RuntimeError):
    pass


@dataclass
class ScoMatchConfig:
    K: int
    B: int = 64
    mu: int = 7
    tau: float = 0.95
    tau_min: float = 0.5
    lambda_u: float = 1.0
    alpha: float = 0.999
    N_m: int | None = None  # defaults to 8*K
    K_m: int = 1
    queue_warmup_min: int | None = None  # defaults to min(B, N_m)
    cpl_decay: float = 0.999
    # ablation switches
    ood_supervision: bool = True  # False: K-way head, no queue (falls back to FixMatch)
    use_open_loss: bool = True
    use_close_loss: bool = True
    open_weak_view: bool = True
    dual_head: bool = False

    def __post_init__(self):
        if self.N_m is None:
            self.N_m = 8 * self.K
        if self.queue_warmup_min is None:
            self.queue_warmup_min = min(self.B, self.N_m)
        if not 0 < self.tau_min < self.tau <= 1:
            raise ValueError("need 0 < tau_min < tau <= 1")
        if self.K_m > self.mu * self.B:
            raise ValueError("K_m cannot exceed the unlabeled batch size mu*B")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0 < self.cpl_decay <= 1:
            raise ValueError("cpl_decay must lie in (0, 1]")
        if self.queue_warmup_min > self.N_m:
            raise ValueError("queue_warmup_min cannot exceed the queue capacity N_m")
        if self.dual_head and not self.ood_supervision:
            raise ValueError("dual_head requires ood_supervision")

    @property
    def num_outputs(self) -> int:
        return self.K + 1 if self.ood_supervision else self.K


class OODMemoryQueue:
    """Fixed-capacity FIFO of OOD exemplars, all implicitly labeled ``K``.

    ``tags`` hold hidden ground truth for diagnostics; nothing in training
    reads them.
    """

    def __init__(self, capacity: int, dim: int):
        self.capacity = capacity
        self.dim = dim
        self._items: deque = deque(maxlen=capacity)
        self._tags: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def push(self, samples: np.ndarray, tags=None) -> None:
        samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
        if tags is None:
            tags = [None] * len(samples)
        for s, t in zip(samples, tags):
            self._items.append(s.copy())
            self._tags.append(None if t is None else int(t))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` uniform draws with replacement."""
        if not self._items:
            raise EmptyQueueError("cannot sample from an empty OOD queue")
        idx = rng.integers(0, len(self._items), size=n)
        return self.features()[idx]

    def features(self) -> np.ndarray:
        if not self._items:
            return np.zeros((0, self.dim))
        return np.stack(self._items)

    def tags(self) -> list:
        return list(self._tags)

    def purity(self, ood_label: int) -> float | None:
        """Fraction of entries whose hidden tag is the OOD label; ``None`` if unknown or empty."""
        tags = [t for t in self._tags if t is not None]
        if not tags:
            return None
        return sum(t == ood_label for t in tags) / len(tags)


def queue_push(queue: OODMemoryQueue, samples, tags=None) -> None:
    queue.push(samples, tags)


def queue_sample(queue: OODMemoryQueue, n: int, rng: np.random.Generator) -> np.ndarray:
    return queue.sample(n, rng)


@dataclass
class ThresholdController:
    tau: float
    tau_min: float
    tau_ood: float | None = None
    count_ood: float = 0.0
    count_id: float = 0.0
    decay: float = 0.999

    def __post_init__(self):
        if self.tau_ood is None:
            self.tau_ood = self.tau

    def observe(self, probs: np.ndarray, K: int) -> None:
        """Count confident samples (max prob above the fixed ``tau``) per side."""
        conf = probs.max(axis=1) > self.tau
        pred = first_argmax(probs)
        self.count_ood += float(np.sum(conf & (pred == K)))
        self.count_id += float(np.sum(conf & (pred < K)))


def cpl_update(ctrl: ThresholdController) -> float:
    """Rescale ``tau_ood`` by the confident OOD/ID count ratio, clamp, then decay counters."""
    if ctrl.count_id > 0:
        raw = ctrl.count_ood / ctrl.count_id * ctrl.tau
        ctrl.tau_ood = float(min(max(raw, ctrl.tau_min), ctrl.tau))
    ctrl.count_ood *= ctrl.decay
    ctrl.count_id *= ctrl.decay
    return ctrl.tau_ood


def first_argmax(a: np.ndarray) -> np.ndarray:
    # np.argmax already returns the first maximal index
    return np.argmax(a, axis=-1)


def msp_score(probs: np.ndarray, K: int):
    """Maximum probability over the first ``K`` (ID) classes; the OOD column is ignored."""
    return np.asarray(probs)[..., :K].max(axis=-1)


def select_enqueue(batch_probs: np.ndarray, K: int, K_m: int) -> np.ndarray:
    """Indices of the ``K_m`` samples with smallest MSP, ascending; ties go to the lower index."""
    scores = msp_score(batch_probs, K)
    if K_m > len(scores):
        raise ValueError(f"K_m={K_m} exceeds batch size {len(scores)}")
    return np.argsort(scores, kind="stable")[:K_m]


@dataclass(frozen=True)
class PseudoLabelBatch:
    probs: np.ndarray
    labels: np.ndarray
    accept: np.ndarray
    thresholds: np.ndarray

    @property
    def n_accept(self) -> int:
        return int(self.accept.sum())


def pseudo_label_from_probs(probs: np.ndarray, tau: float, tau_ood: float | None = None,
                            K: int | None = None) -> PseudoLabelBatch:
    """Hard pseudo-labels with per-class thresholds.

    Samples predicted as class ``K`` use ``tau_ood``; all others use ``tau``.
    With ``K=None`` (no OOD column) every class uses ``tau``.
    """
    labels = first_argmax(probs)
    thr = np.full(len(labels), tau, dtype=np.float64)
    if K is not None and tau_ood is not None:
        thr[labels == K] = tau_ood
    accept = probs.max(axis=1) > thr
    return PseudoLabelBatch(probs, labels, accept, thr)


def pseudo_label(model: Network, u_weak: np.ndarray, ctrl: ThresholdController) -> PseudoLabelBatch:
    """Pseudo-label weak views with the (K+1)-way head and feed the CPL counters."""
    probs = softmax(model.logits(u_weak))
    K = probs.shape[1] - 1
    ctrl.observe(probs, K)
    return pseudo_label_from_probs(probs, ctrl.tau, ctrl.tau_ood, K)


def id_supervision_loss(logits: np.ndarray, y: np.ndarray):
    """Mean CE of labeled ID samples over every head column."""
    return softmax_cross_entropy(logits, y)


def ood_supervision_loss(logits: np.ndarray, ood_label: int):
    return softmax_cross_entropy(logits, np.full(len(logits), ood_label))


def open_set_loss(logits_w: np.ndarray, logits_s: np.ndarray, pseudo: PseudoLabelBatch,
                  use_weak: bool = True):
    """Consistency on both views over all K+1 columns, normalised by ``2*mu*B``.

    With ``use_weak=False`` only the strong view contributes, normalised by ``mu*B``.
    Returns ``(loss, grad_w, grad_s)``; ``grad_w`` is None when the weak view is off.
    """
    n = len(pseudo.labels)
    mask = pseudo.accept.astype(np.float64)
    if not use_weak:
        loss, gs = softmax_cross_entropy(logits_s, pseudo.labels, mask, denominator=n)
        return loss, None, gs
    lw, gw = softmax_cross_entropy(logits_w, pseudo.labels, mask, denominator=2 * n)
    ls, gs = softmax_cross_entropy(logits_s, pseudo.labels, mask, denominator=2 * n)
    return lw + ls, gw, gs


def close_set_loss(logits_s: np.ndarray, pseudo: PseudoLabelBatch, K: int):
    """Consistency on the strong view over the first ``K`` columns for ID pseudo-labels.

    Normalised by ``mu*B``. The gradient of column ``K`` (if present) is zero.
    """
    n = len(pseudo.labels)
    mask = (pseudo.accept & (pseudo.labels < K)).astype(np.float64)
    targets = np.where(pseudo.labels < K, pseudo.labels, 0)
    loss, g = softmax_cross_entropy(logits_s[:, :K], targets, mask, denominator=n)
    if logits_s.shape[1] == K:
        return loss, g
    grad = np.zeros_like(logits_s)
    grad[:, :K] = g
    return loss, grad


def fixmatch_consistency_loss(logits_s: np.ndarray, pseudo: PseudoLabelBatch):
    """Strong-view CE on accepted pseudo-labels, normalised by ``mu*B``."""
    return softmax_cross_entropy(logits_s, pseudo.labels, pseudo.accept.astype(np.float64),
                                 denominator=len(pseudo.labels))


@dataclass
class TrainState:
    student: Network
    teacher: Network
    optimizer: SGD
    rngs: dict
    queue: OODMemoryQueue | None = None
    controller: ThresholdController | None = None
    iteration: int = 0


def make_rngs(seed: int) -> dict:
    """Independent named generators spawned from one seed."""
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.Generator(np.random.PCG64(s)) for name, s in zip(RNG_STREAMS, children)}


def init_state(in_dim: int, num_outputs: int, seed: int, hidden=(128, 128),
               sgd: SgdConfig | None = None, aux_classes: int | None = None,
               queue_capacity: int | None = None, tau: float = 0.95, tau_min: float = 0.5,
               cpl_decay: float = 0.999) -> TrainState:
    rngs = make_rngs(seed)
    student = Network(in_dim, hidden, num_outputs, rngs["init"], aux_classes=aux_classes)
    teacher = student.copy()
    state = TrainState(student, teacher, SGD(student.params(), sgd or SgdConfig()), rngs)
    if queue_capacity:
        state.queue = OODMemoryQueue(queue_capacity, in_dim)
        state.controller = ThresholdController(tau, tau_min, decay=cpl_decay)
    return state


def init_scomatch_state(cfg: ScoMatchConfig, in_dim: int, seed: int, hidden=(128, 128),
                        sgd: SgdConfig | None = None) -> TrainState:
    return init_state(in_dim, cfg.num_outputs, seed, hidden, sgd,
                      aux_classes=cfg.K if cfg.dual_head else None,
                      queue_capacity=cfg.N_m if cfg.ood_supervision else None,
                      tau=cfg.tau, tau_min=cfg.tau_min, cpl_decay=cfg.cpl_decay)


@dataclass(frozen=True)
class IterationReport:
    iteration: int
    loss_total: float
    loss_sup_id: float
    loss_sup_ood: float = 0.0
    loss_open: float = 0.0
    loss_close: float = 0.0
    ood_skipped: bool = True
    tau_ood: float | None = None
    n_accept_id: int = 0
    n_accept_ood: int = 0
    queue_len: int = 0
    queue_purity: float | None = None
    pseudo_correct: int | None = None
    pseudo_wrong: int | None = None


def pseudo_label_tally(pseudo: PseudoLabelBatch, truth) -> tuple[int | None, int | None]:
    """(correct, wrong) among accepted pseudo-labels against hidden truth."""
    if truth is None:
        return None, None
    truth = np.asarray(truth)
    acc = pseudo.accept
    correct = int(np.sum(acc & (pseudo.labels == truth)))
    return correct, int(acc.sum()) - correct


class JointBatch:
    """Row blocks stacked for a single forward/backward through the student."""

    def __init__(self, **blocks):
        self.names = [k for k, v in blocks.items() if v is not None]
        self.arrays = [blocks[k] for k in self.names]
        sizes = [len(a) for a in self.arrays]
        self.bounds = dict(zip(self.names, zip(np.cumsum([0] + sizes[:-1]), np.cumsum(sizes))))

    def stacked(self) -> np.ndarray:
        return np.concatenate(self.arrays)

    def rows(self, arr: np.ndarray, name: str) -> np.ndarray:
        a, b = self.bounds[name]
        return arr[a:b]


def apply_update(state: TrainState, grad_logits: np.ndarray, grad_aux: np.ndarray | None,
                 alpha: float) -> None:
    """Backward the logit gradients, take one SGD step, then move the EMA teacher."""
    state.student.backward(grad_logits, grad_aux)
    state.optimizer.step(state.student.grads())
    ema_update(state.teacher.params(), state.student.params(), alpha)
    state.iteration += 1


def train_iteration(state: TrainState, x: np.ndarray, y: np.ndarray, u: np.ndarray,
                    cfg: ScoMatchConfig, aug: AugmentConfig, u_truth=None) -> IterationReport:
    """One SCOMatch iteration on labeled ``(x, y)`` and unlabeled ``u``; mutates ``state``.

    ``u_truth`` is hidden ground truth used only for the report's diagnostics.
    """
    K = cfg.K
    student, ctrl, queue = state.student, state.controller, state.queue
    rng = state.rngs["augment"]
    xw = augment_weak(x, aug, rng)
    uw = augment_weak(u, aug, rng)
    us = augment_strong(u, aug, rng)

    out_w = student.forward(uw)
    logits_w0, aux_w0 = out_w if isinstance(out_w, tuple) else (out_w, None)
    probs_w = softmax(logits_w0)

    ood_active = False
    o = None
    if cfg.ood_supervision:
        idx = select_enqueue(probs_w, K, cfg.K_m)
        queue.push(u[idx], None if u_truth is None else np.asarray(u_truth)[idx])
        ctrl.observe(probs_w, K)
        pseudo = pseudo_label_from_probs(probs_w, cfg.tau, ctrl.tau_ood, K)
        ood_active = len(queue) >= cfg.queue_warmup_min
        if ood_active:
            o = queue.sample(len(x), state.rngs["queue"])
    else:
        pseudo = pseudo_label_from_probs(probs_w, cfg.tau)

    need_weak = cfg.use_open_loss and cfg.open_weak_view
    need_strong = cfg.use_open_loss or cfg.use_close_loss or cfg.dual_head
    jb = JointBatch(x=xw, o=o, uw=uw if need_weak else None, us=us if need_strong else None)

    student.zero_grad()
    out = student.forward(jb.stacked())
    logits, aux = out if isinstance(out, tuple) else (out, None)
    grad = np.zeros_like(logits)
    grad_aux = None if aux is None else np.zeros_like(aux)
    lam = cfg.lambda_u

    l_id, g = id_supervision_loss(jb.rows(logits, "x"), y)
    jb.rows(grad, "x")[...] += g
    l_ood = 0.0
    if ood_active:
        l_ood, g = ood_supervision_loss(jb.rows(logits, "o"), K)
        jb.rows(grad, "o")[...] += g
    l_open = l_close = 0.0
    if cfg.use_open_loss:
        lw = jb.rows(logits, "uw") if need_weak else None
        l_open, gw, gs = open_set_loss(lw, jb.rows(logits, "us"), pseudo, use_weak=need_weak)
        if gw is not None:
            jb.rows(grad, "uw")[...] += lam * gw
        jb.rows(grad, "us")[...] += lam * gs
    if cfg.use_close_loss:
        if cfg.dual_head:
            # separate K-way head: supervised by labeled ID data, self-trained on its own pseudo-labels
            aux_pseudo = pseudo_label_from_probs(softmax(aux_w0), cfg.tau)
            l_aux, g = softmax_cross_entropy(jb.rows(aux, "x"), y)
            jb.rows(grad_aux, "x")[...] += g
            l_close, g = fixmatch_consistency_loss(jb.rows(aux, "us"), aux_pseudo)
            jb.rows(grad_aux, "us")[...] += lam * g
            l_id += l_aux
        else:
            l_close, g = close_set_loss(jb.rows(logits, "us"), pseudo, K)
            jb.rows(grad, "us")[...] += lam * g
    total = l_id + l_ood + lam * (l_open + l_close)

    if cfg.ood_supervision:
        cpl_update(ctrl)
    apply_update(state, grad, grad_aux, cfg.alpha)

    correct, wrong = pseudo_label_tally(pseudo, u_truth)
    is_ood_pl = pseudo.labels == K
    return IterationReport(
        iteration=state.iteration,
        loss_total=total,
        loss_sup_id=l_id,
        loss_sup_ood=l_ood,
        loss_open=l_open,
        loss_close=l_close,
        ood_skipped=not ood_active,
        tau_ood=ctrl.tau_ood if ctrl else None,
        n_accept_id=int(np.sum(pseudo.accept & ~is_ood_pl)),
        n_accept_ood=int(np.sum(pseudo.accept & is_ood_pl)),
        queue_len=len(queue) if queue else 0,
        queue_purity=queue.purity(K) if queue else None,
        pseudo_correct=correct,
        pseudo_wrong=wrong,
    )


def supervised_losses(model: Network, x_weak: np.ndarray, y: np.ndarray, o: np.ndarray | None,
                      warmed_up: bool = True):
    """ID and OOD supervision losses on the full head, with parameter gradients of their sum.

    Returns ``(loss_id, loss_ood, grads, skipped)``; with ``o`` missing or the
    queue not warmed up the OOD term is skipped and reported as 0.
    """
    K = model.num_classes - 1
    skipped = o is None or len(o) == 0 or not warmed_up
    jb = JointBatch(x=x_weak, o=None if skipped else o)
    model.zero_grad()
    logits = model.logits(jb.stacked())
    grad = np.zeros_like(logits)
    l_id, g = id_supervision_loss(jb.rows(logits, "x"), y)
    jb.rows(grad, "x")[...] = g
    l_ood = 0.0
    if not skipped:
        l_ood, g = ood_supervision_loss(jb.rows(logits, "o"), K)
        jb.rows(grad, "o")[...] = g
    model.backward(grad)
    return l_id, l_ood, [g.copy() for g in model.grads()], skipped


def model_open_set_loss(model: Network, pseudo: PseudoLabelBatch, u_weak, u_strong, use_weak=True):
    """Open-set consistency loss and parameter gradients for ``model``."""
    jb = JointBatch(uw=u_weak if use_weak else None, us=u_strong)
    model.zero_grad()
    logits = model.logits(jb.stacked())
    grad = np.zeros_like(logits)
    loss, gw, gs = open_set_loss(jb.rows(logits, "uw") if use_weak else None,
                                 jb.rows(logits, "us"), pseudo, use_weak)
    if gw is not None:
        jb.rows(grad, "uw")[...] = gw
    jb.rows(grad, "us")[...] = gs
    model.backward(grad)
    return loss, [g.copy() for g in model.grads()]


def model_close_set_loss(model: Network, pseudo: PseudoLabelBatch, u_strong, K: int):
    """Close-set consistency loss and parameter gradients for ``model``."""
    model.zero_grad()
    logits = model.logits(u_strong)
    loss, grad = close_set_loss(logits, pseudo, K)
    model.backward(grad)
    return loss, [g.copy() for g in model.grads()]
