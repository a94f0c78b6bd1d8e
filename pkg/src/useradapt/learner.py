"""Online learner: SGD with momentum, label-window predictor, pretraining and
the prequential adaptation loop over one user stream."""
from __future__ import annotations

import logging
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

from .metrics import EvalLog, Evaluation, RfLog, RfTracker, evaluate
from .model import PARAM_NAMES, SCOPES, ModelParams, add_params, grad, loss, scope_names
from .replay import ReplayMemory
from .stream import LEVELS, ActionLabel, StreamCollection, UserStream, correlation_mask

log = logging.getLogger(__name__)


class AdaptationError(RuntimeError):
    """Raised when online learning produces non-finite values."""


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.0
    nesterov: bool = False
    updates_per_batch: int = 1
    scope: str = "FH"
    momentum_scope: str = "FH"  # parameters that receive momentum; others take plain steps
    # "sum": mean loss of the current batch plus mean loss of the replay draw;
    # "mean": mean over the concatenation, which halves the step on current samples
    replay_loss: str = "sum"

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.updates_per_batch < 1:
            raise ValueError("updates_per_batch must be >= 1")
        scope_names(self.scope)
        scope_names(self.momentum_scope)
        if self.replay_loss not in ("sum", "mean"):
            raise ValueError("replay_loss must be 'sum' or 'mean'")


@dataclass
class LearnerState:
    params: ModelParams
    velocity: ModelParams
    step: int = 0

    @classmethod
    def start(cls, params: ModelParams) -> "LearnerState":
        return cls(params.copy(), params.zeros_like(), 0)


def sgd_step(state: LearnerState, g: ModelParams, cfg: OptimConfig) -> LearnerState:
    """One (momentum / Nesterov) SGD step restricted to ``cfg.scope``."""
    for name in PARAM_NAMES:
        if not np.all(np.isfinite(getattr(g, name))):
            raise AdaptationError(f"non-finite gradient in {name} at update {state.step}")
    params = state.params.copy()
    velocity = state.velocity.copy()
    with_momentum = set(SCOPES[cfg.momentum_scope]) if cfg.momentum > 0 else set()
    for name in scope_names(cfg.scope):
        gi = getattr(g, name)
        if name in with_momentum:
            v = cfg.momentum * getattr(velocity, name) + gi
            setattr(velocity, name, v)
            direction = gi + cfg.momentum * v if cfg.nesterov else v
        else:
            direction = gi
        setattr(params, name, getattr(params, name) - cfg.lr * direction)
    return LearnerState(params, velocity, state.step + 1)


# -- label-window predictor ------------------------------------------------

class LwpState:
    """Window of the most recent labels; predicts the modal label per level.

    Ties go to the label observed most recently. ``window=None`` keeps every
    label seen so far.
    """

    def __init__(self, window: int | None = 1):
        if window is not None and window < 1:
            raise ValueError("window must be >= 1 or None")
        self.window = window
        self.labels: deque[ActionLabel] = deque()
        self.counts = {level: Counter() for level in LEVELS}
        self.last_seen = {level: {} for level in LEVELS}
        self.clock = 0

    def __len__(self):
        return len(self.labels)

    def update(self, labels) -> "LwpState":
        for lab in labels:
            self.labels.append(lab)
            self.clock += 1
            for level in LEVELS:
                key = lab.at(level)
                self.counts[level][key] += 1
                self.last_seen[level][key] = self.clock
            if self.window is not None and len(self.labels) > self.window:
                old = self.labels.popleft()
                for level in LEVELS:
                    key = old.at(level)
                    self.counts[level][key] -= 1
                    if self.counts[level][key] == 0:
                        del self.counts[level][key]
        return self

    def predict(self, level: str = "action"):
        counts = self.counts[level]
        if not counts:
            return None
        seen = self.last_seen[level]
        return max(counts, key=lambda k: (counts[k], seen[k]))

    def predict_pair(self) -> tuple[int, int]:
        """(verb, noun) prediction from independent per-level windows; -1 when empty."""
        v, n = self.predict("verb"), self.predict("noun")
        return (-1 if v is None else v), (-1 if n is None else n)


# -- population pretraining ------------------------------------------------

def select_epoch(val_losses) -> int:
    return int(np.argmin(val_losses))


@dataclass
class PretrainResult:
    params: ModelParams
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int | None = None


def pretrain(collection: StreamCollection, epochs: int, lr: float, holdout_frac: float = 0.1,
             hidden: int = 32, batch_size: int = 32, seed: int = 0, activation: str = "linear",
             init: ModelParams | None = None) -> PretrainResult:
    """Shuffled multi-epoch SGD on the pooled population streams.

    A random ``holdout_frac`` of the pooled samples is held out; the epoch with
    the lowest held-out action loss is returned.
    """
    if not collection.population or sum(len(s) for s in collection.population) == 0:
        raise ValueError("empty population")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x706F70]))
    x = np.concatenate([s.arrays()[0] for s in collection.population])
    v = np.concatenate([s.arrays()[1] for s in collection.population])
    n = np.concatenate([s.arrays()[2] for s in collection.population])
    if init is None:
        init = ModelParams.init(x.shape[1], hidden, collection.vocab.num_verbs, collection.vocab.num_nouns,
                                rng, activation)
    if epochs <= 0:
        return PretrainResult(init.copy())

    perm = rng.permutation(len(v))
    n_hold = int(round(holdout_frac * len(v)))
    if n_hold >= len(v):
        raise ValueError("holdout leaves no training samples")
    hold, train = perm[:n_hold], perm[n_hold:]
    if n_hold == 0:
        hold = train
    cfg = OptimConfig(lr=lr)
    state = LearnerState.start(init)
    checkpoints, val_losses = [], []
    for epoch in range(epochs):
        order = rng.permutation(train)
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            state = sgd_step(state, grad(state.params, x[idx], v[idx], n[idx]), cfg)
        val = loss(state.params, x[hold], v[hold], n[hold])
        log.debug("pretrain epoch %d: held-out loss %.4f", epoch, val)
        checkpoints.append(state.params)
        val_losses.append(val)
    best = select_epoch(val_losses)
    return PretrainResult(checkpoints[best], val_losses, best)


def pretrain_population(collection: StreamCollection, epochs: int, lr: float, holdout_frac: float = 0.1,
                        **kw) -> ModelParams:
    return pretrain(collection, epochs, lr, holdout_frac, **kw).params


# -- online adaptation -----------------------------------------------------

@dataclass
class GradLog:
    """Unit-normalized gradients per update, for the full model and F/H parts."""
    full: list[np.ndarray] = field(default_factory=list)
    F: list[np.ndarray] = field(default_factory=list)
    H: list[np.ndarray] = field(default_factory=list)

    def record(self, g: ModelParams) -> None:
        for part, names in (("full", PARAM_NAMES), ("F", SCOPES["F"]), ("H", SCOPES["H"])):
            vec = g.flat(names)
            norm = np.linalg.norm(vec)
            # zero-norm gradients are kept as zero vectors and skipped by the analysis
            getattr(self, part).append(vec / norm if norm > 0 else np.zeros_like(vec))

    def __len__(self):
        return len(self.full)


@dataclass
class AdaptResult:
    final: ModelParams
    log: EvalLog
    grads: GradLog | None
    rf: RfLog | None


def adapt_stream(init: ModelParams, stream: UserStream, cfg: OptimConfig,
                 memory: ReplayMemory | None = None, pop: ModelParams | None = None,
                 track_rf: bool = True, record_grads: bool = False) -> AdaptResult:
    """Prequential online adaptation on one user stream.

    Every batch is first scored by the current and the population model, then
    used for ``cfg.updates_per_batch`` updates (each on the batch plus an
    equally sized replay draw when a memory is given), and finally offered to
    the memory.
    """
    if len(stream) == 0:
        raise ValueError("empty stream")
    pop = init if pop is None else pop
    if pop.dims != init.dims:
        raise ValueError("population and initial model differ in shape")
    x, v, n = stream.arrays()
    state = LearnerState.start(init)
    rf = RfTracker(stream, cfg.updates_per_batch) if track_rf else None
    grads = GradLog() if record_grads else None
    adapted_parts, pop_parts, steps = [], [], []

    start = 0
    for batch in stream.batches:
        idx = np.arange(start, start + len(batch))
        start += len(batch)
        xb, vb, nb = x[idx], v[idx], n[idx]
        ev = evaluate(state.params, xb, vb, nb)
        if not (np.all(np.isfinite(ev.loss_verb)) and np.all(np.isfinite(ev.loss_noun))):
            raise AdaptationError(f"non-finite loss at batch step {batch.step} of user {stream.user_id}")
        adapted_parts.append(ev)
        pop_parts.append(evaluate(pop, xb, vb, nb))
        steps.append(np.full(len(idx), batch.step))
        if rf is not None:
            rf.before_update(batch.step, idx, state.params)

        for _ in range(cfg.updates_per_batch):
            replay = memory.draw(len(idx)) if memory is not None else []
            if not replay:
                g = grad(state.params, xb, vb, nb, cfg.scope)
            else:
                xr = np.stack([s.features for s in replay])
                vr = np.array([s.label.verb for s in replay])
                nr = np.array([s.label.noun for s in replay])
                if cfg.replay_loss == "mean":
                    g = grad(state.params, np.concatenate([xb, xr]), np.concatenate([vb, vr]),
                             np.concatenate([nb, nr]), cfg.scope)
                else:
                    g = add_params(grad(state.params, xb, vb, nb, cfg.scope),
                                   grad(state.params, xr, vr, nr, cfg.scope))
            if grads is not None:
                grads.record(g)
            try:
                state = sgd_step(state, g, cfg)
            except AdaptationError as exc:
                raise AdaptationError(f"{exc} (batch step {batch.step}, user {stream.user_id})") from None

        if memory is not None:
            memory.extend(batch.samples)
        if rf is not None:
            rf.after_update(batch.step, idx, state.params)

    eval_log = EvalLog(v.copy(), n.copy(), np.concatenate(steps), correlation_mask(stream),
                       Evaluation.concat(adapted_parts), Evaluation.concat(pop_parts))
    return AdaptResult(state.params, eval_log, grads, rf.log if rf is not None else None)

