"""Two-phase training: classifier-only warm-up, then alternating masker /
classifier steps with each network frozen while the other moves."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .losses import LossConfig, loss_clf_total, loss_mask_total
from .models import ClassifierNet, MaskerNet, init_classifier, init_masker
from .tensor import Tensor, parameters_hash

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("iteration", "phase", "L_cls", "L_egl", "L_reg", "L_dist", "L_sparsity", "L_smooth", "val_acc")


class PhaseError(RuntimeError):
    pass


class IsolationError(AssertionError):
    pass


@dataclass
class TrainSchedule:
    warmup_iters: int = 200
    joint_iters: int = 100
    batch_size: int = 16
    lr_classifier: float = 1e-3
    lr_masker: float = 1e-3
    early_stop_patience: int = 10
    eval_interval: int = 10
    masker_steps_per_iter: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.warmup_iters < 0 or self.joint_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.batch_size < 1 or self.eval_interval < 1 or self.masker_steps_per_iter < 1:
            raise ValueError("batch_size, eval_interval and masker_steps_per_iter must be >= 1")
        if self.lr_classifier < 0 or self.lr_masker < 0:
            raise ValueError("learning rates must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


# -- Adam ----------------------------------------------------------------------


@dataclass
class AdamMoments:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params) -> "AdamMoments":
        arrays = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in params]
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def optimizer_update(params: list[np.ndarray], grads: list[np.ndarray], lr: float,
                     moments: AdamMoments) -> list[np.ndarray]:
    """One bias-corrected Adam step; returns new parameter arrays and advances ``moments``."""
    if len(params) != len(grads) or len(params) != len(moments.m):
        raise ValueError("params, grads and moment buffers must align")
    for p, g, m in zip(params, grads, moments.m):
        if np.shape(p) != np.shape(g) or np.shape(p) != m.shape:
            raise ValueError(f"shape mismatch: param {np.shape(p)}, grad {np.shape(g)}, moment {m.shape}")
    moments.t += 1
    b1, b2 = moments.beta1, moments.beta2
    c1 = 1 - b1 ** moments.t
    c2 = 1 - b2 ** moments.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        moments.m[i] = b1 * moments.m[i] + (1 - b1) * g
        moments.v[i] = b2 * moments.v[i] + (1 - b2) * g * g
        m_hat = moments.m[i] / c1
        v_hat = moments.v[i] / c2
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + moments.eps))
    return out


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3):
        self.params = list(params)
        self.lr = lr
        self.moments = AdamMoments.like(self.params)

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new = optimizer_update([p.data for p in self.params], grads, self.lr, self.moments)
        for p, d in zip(self.params, new):
            p.data = d

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- state -----------------------------------------------------------------------


@dataclass
class TrainState:
    iteration: int = 0
    phase: str = "warmup"
    warmup_iters: int = 0
    best_val_acc: float = -1.0
    best_iteration: int = -1
    patience_left: int = 0
    stopped_early: bool = False
    history: list[dict] = field(default_factory=list)
    isolation_checks: int = 0
    last_mask_parts: dict = field(default_factory=dict)
    last_clf_parts: dict = field(default_factory=dict)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0), repr=False)

    def advance(self) -> None:
        self.iteration += 1
        if self.phase == "warmup" and self.iteration >= self.warmup_iters:
            self.phase = "joint"


class BatchSampler:
    """Reshuffles the index set every epoch; order depends only on the seed."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng(seed)
        self._order = np.empty(0, dtype=int)

    def next(self) -> np.ndarray:
        if len(self._order) < self.batch_size:
            self._order = np.concatenate([self._order, self.rng.permutation(self.n)])
        idx, self._order = self._order[:self.batch_size], self._order[self.batch_size:]
        return idx


def _as_arrays(data):
    if isinstance(data, tuple):
        x, y = data[0], data[1]
        return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)
    from .data import stack
    x, y, _, _ = stack(data)
    return x, y


def _check_isolation(frozen_net, before: str, what: str) -> None:
    after = parameters_hash(frozen_net.params())
    if after != before:
        raise IsolationError(f"{what} changed parameters of the frozen network")


def _record(state: TrainState, parts: dict, val_acc=None) -> dict:
    row = {c: 0.0 for c in TRACE_COLUMNS[2:-1]}
    row.update({k: float(v) for k, v in parts.items() if k in row})
    row.update(iteration=state.iteration, phase=state.phase, val_acc=val_acc)
    state.history.append(row)
    return row


def warmup_step(state: TrainState, batch, classifier: ClassifierNet, cfg: LossConfig, opt: Adam,
                check_isolation: bool = False, masker: MaskerNet | None = None) -> TrainState:
    """Classifier-only step on L_cls + lambda4 * L_reg."""
    if state.phase != "warmup":
        raise PhaseError(f"warmup_step called in phase {state.phase!r}")
    before = parameters_hash(masker.params()) if check_isolation and masker is not None else None
    opt.zero_grad()
    total, parts = loss_clf_total(batch, classifier, None, cfg, state.rng, use_egl=False, return_parts=True)
    total.backward()
    opt.step()
    if before is not None:
        _check_isolation(masker, before, "warmup_step")
        state.isolation_checks += 1
    _record(state, parts)
    return state


def masker_step(state: TrainState, batch, classifier: ClassifierNet, masker: MaskerNet, cfg: LossConfig,
                opt: Adam, check_isolation: bool = False) -> TrainState:
    if state.phase != "joint":
        raise PhaseError(f"masker_step called in phase {state.phase!r}")
    x, y = batch
    before = parameters_hash(classifier.params()) if check_isolation else None
    classifier.zero_grad()  # so any gradient that shows up afterwards came from this step
    masker.train()
    opt.zero_grad()
    total, parts = loss_mask_total(Tensor(x) if not isinstance(x, Tensor) else x, y, classifier, masker,
                                   cfg, return_parts=True)
    total.backward()
    opt.step()
    if before is not None:
        _check_isolation(classifier, before, "masker_step")
        if any(p.grad is not None and np.any(p.grad) for p in classifier.params()):
            raise IsolationError("masker_step left gradients on the classifier")
        state.isolation_checks += 1
    state.last_mask_parts = parts
    return state


def classifier_step(state: TrainState, batch, classifier: ClassifierNet, masker: MaskerNet, cfg: LossConfig,
                    opt: Adam, check_isolation: bool = False) -> TrainState:
    if state.phase != "joint":
        raise PhaseError(f"classifier_step called in phase {state.phase!r}")
    before = parameters_hash(masker.params()) if check_isolation else None
    masker.zero_grad()
    opt.zero_grad()
    total, parts = loss_clf_total(batch, classifier, masker, cfg, state.rng, use_egl=True, return_parts=True)
    total.backward()
    opt.step()
    if before is not None:
        _check_isolation(masker, before, "classifier_step")
        if any(p.grad is not None and np.any(p.grad) for p in masker.params()):
            raise IsolationError("classifier_step left gradients on the masker")
        state.isolation_checks += 1
    state.last_clf_parts = parts
    return state


def validation_accuracy(classifier: ClassifierNet, x: np.ndarray, y: np.ndarray) -> float:
    probs = classifier.predict_proba(x)
    return float(np.mean(np.argmax(probs, axis=1) == y))


def train_align(train_data, val_data, schedule: TrainSchedule, cfg: LossConfig, num_classes: int = 4,
                check_isolation: bool = False, report: bool = True):
    """Run warm-up then joint training; return ``(classifier, masker, state, metrics)``.

    Validation accuracy is checked every ``eval_interval`` iterations. The best
    checkpoint (ties go to the later one) and the patience counter are tracked
    over the joint phase only; the returned networks are that checkpoint.
    """
    x_tr, y_tr = _as_arrays(train_data)
    x_va, y_va = _as_arrays(val_data)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("training and validation data must be non-empty")
    seed = schedule.seed
    classifier = init_classifier(seed, in_channels=x_tr.shape[1], num_classes=num_classes)
    masker = init_masker(seed + 1, in_channels=x_tr.shape[1])
    opt_c = Adam(classifier.params(), schedule.lr_classifier)
    opt_m = Adam(masker.params(), schedule.lr_masker)
    sampler = BatchSampler(len(x_tr), schedule.batch_size, seed + 2)
    state = TrainState(warmup_iters=schedule.warmup_iters, patience_left=schedule.early_stop_patience,
                       rng=np.random.default_rng(seed + 3))
    if schedule.warmup_iters == 0:
        state.phase = "joint"
    best = None
    total_iters = schedule.warmup_iters + schedule.joint_iters

    while state.iteration < total_iters:
        idx = sampler.next()
        batch = (x_tr[idx], y_tr[idx])
        if state.phase == "warmup":
            warmup_step(state, batch, classifier, cfg, opt_c, check_isolation, masker)
        else:
            mparts = {}
            for _ in range(schedule.masker_steps_per_iter):
                masker_step(state, batch, classifier, masker, cfg, opt_m, check_isolation)
                mparts = state.last_mask_parts
            classifier_step(state, batch, classifier, masker, cfg, opt_c, check_isolation)
            _record(state, {**state.last_clf_parts, **mparts})
        phase_was = state.phase
        state.advance()
        if state.iteration % schedule.eval_interval == 0 or state.iteration == total_iters:
            acc = validation_accuracy(classifier, x_va, y_va)
            state.history[-1]["val_acc"] = acc
            logger.info("iter %d (%s) val_acc=%.4f", state.iteration, phase_was, acc)
            if phase_was == "joint":
                if acc >= state.best_val_acc:
                    state.patience_left = schedule.early_stop_patience
                    state.best_val_acc = acc
                    state.best_iteration = state.iteration
                    best = (classifier.state_dict(), masker.state_dict())
                else:
                    state.patience_left -= 1
                    if state.patience_left <= 0:
                        state.stopped_early = True
                        logger.info("early stop at iteration %d", state.iteration)
                        break
    if best is not None:
        classifier.load_state_dict(best[0])
        masker.load_state_dict(best[1])
    masker.eval()
    metrics = None
    if report:
        from .metrics import evaluate
        metrics = evaluate(classifier, masker, x_va, y_va)
    return classifier, masker, state, metrics


def write_trace(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in history:
            w.writerow(["" if row[c] is None else (f"{row[c]:.17g}" if isinstance(row[c], float) else row[c])
                        for c in TRACE_COLUMNS])
