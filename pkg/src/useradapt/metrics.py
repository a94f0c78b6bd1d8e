"""Adaptation-gain metrics, aggregation over users and re-exposure forgetting."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, per_sample_losses
from .stream import LEVELS, UserStream

MODES = ("acc", "loss")


@dataclass
class Evaluation:
    """Predictions and per-sample losses of one predictor over a sample sequence.

    Predictions of -1 mean "no prediction" and never count as correct. Losses
    are NaN for predictors without a likelihood (label-window, random).
    """
    verb_pred: np.ndarray
    noun_pred: np.ndarray
    loss_verb: np.ndarray
    loss_noun: np.ndarray

    def preds(self, level: str) -> np.ndarray:
        return _level_view(self.verb_pred, self.noun_pred, level)

    def losses(self, level: str) -> np.ndarray:
        if level == "verb":
            return self.loss_verb
        if level == "noun":
            return self.loss_noun
        if level == "action":
            return self.loss_verb + self.loss_noun
        raise ValueError(f"unknown level {level!r}")

    def subset(self, idx) -> "Evaluation":
        return Evaluation(self.verb_pred[idx], self.noun_pred[idx], self.loss_verb[idx], self.loss_noun[idx])

    @classmethod
    def concat(cls, parts) -> "Evaluation":
        parts = list(parts)
        if not parts:
            e = np.zeros(0)
            return cls(e.astype(np.int64), e.astype(np.int64), e, e)
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("verb_pred", "noun_pred", "loss_verb", "loss_noun")))


def _level_view(verbs, nouns, level):
    if level == "verb":
        return np.asarray(verbs)
    if level == "noun":
        return np.asarray(nouns)
    if level == "action":
        return np.stack([verbs, nouns], axis=-1)
    raise ValueError(f"unknown level {level!r}")


def evaluate(params: ModelParams, x, verbs, nouns) -> Evaluation:
    ce_v, ce_n, pv, pn = per_sample_losses(params, x, verbs, nouns)
    return Evaluation(pv, pn, ce_v, ce_n)


def evaluate_stream(params: ModelParams, stream: UserStream) -> Evaluation:
    x, v, n = stream.arrays()
    return evaluate(params, x, v, n)


@dataclass
class EvalLog:
    """Per-sample prequential record of the adapted and the population predictor."""
    verbs: np.ndarray
    nouns: np.ndarray
    step: np.ndarray
    correlated: np.ndarray
    adapted: Evaluation
    population: Evaluation

    def __len__(self):
        return len(self.verbs)

    def labels(self, level: str) -> np.ndarray:
        return _level_view(self.verbs, self.nouns, level)

    def masked(self, mask) -> "EvalLog":
        idx = np.flatnonzero(mask)
        return EvalLog(self.verbs[idx], self.nouns[idx], self.step[idx], self.correlated[idx],
                       self.adapted.subset(idx), self.population.subset(idx))


def macro_acc(preds, labels) -> float:
    """Class-balanced accuracy in percent over the classes present in ``labels``.

    Inputs are class ids of shape (n,) or (n, k) for composite classes such as
    (verb, noun) actions; a composite prediction is correct only if every
    component matches.
    """
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError("predictions and labels differ in shape")
    if labels.shape[0] == 0:
        raise ValueError("empty input")
    if labels.ndim == 1:
        correct = preds == labels
        _, cls = np.unique(labels, return_inverse=True)
    else:
        correct = np.all(preds == labels, axis=1)
        _, cls = np.unique(labels, axis=0, return_inverse=True)
    cls = cls.ravel()
    totals = np.bincount(cls)
    hits = np.bincount(cls, weights=correct.astype(np.float64), minlength=len(totals))
    return float(100.0 * np.mean(hits / totals))


def ag(phi_adapted: float, phi_pop: float) -> float:
    return phi_adapted - phi_pop


@dataclass
class OagResult:
    value: float
    curve: np.ndarray | None = None  # cumulative loss gain per sample, loss mode only


def oag(log: EvalLog, mode: str = "acc", level: str = "action", mask=None) -> OagResult:
    """Online adaptation gain of a prequential log.

    Loss mode returns the per-sample average gain (population loss minus
    adapted loss) together with its un-normalized running sum. Accuracy mode
    pools all online predictions into one class-balanced accuracy per model.
    """
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("mask selects no samples")
        log = log.masked(mask)
    if len(log) == 0:
        raise ValueError("empty log")
    if mode == "loss":
        gain = log.population.losses(level) - log.adapted.losses(level)
        curve = np.cumsum(gain)
        return OagResult(float(curve[-1] / len(gain)), curve)
    if mode == "acc":
        labels = log.labels(level)
        return OagResult(ag(macro_acc(log.adapted.preds(level), labels),
                            macro_acc(log.population.preds(level), labels)))
    raise ValueError(f"unknown mode {mode!r}")


def gain_between(adapted: Evaluation, pop: Evaluation, verbs, nouns, mode: str, level: str) -> float:
    """Adaptation gain of two evaluations on the same samples."""
    if mode == "acc":
        labels = _level_view(verbs, nouns, level)
        return ag(macro_acc(adapted.preds(level), labels), macro_acc(pop.preds(level), labels))
    if mode == "loss":
        return ag(-float(np.mean(adapted.losses(level))), -float(np.mean(pop.losses(level))))
    raise ValueError(f"unknown mode {mode!r}")


def hag(final: ModelParams, stream: UserStream, pop: ModelParams, mode: str = "acc",
        level: str = "action") -> float:
    """Hindsight adaptation gain of the end-of-stream model over the whole stream."""
    _, v, n = stream.arrays()
    return gain_between(evaluate_stream(final, stream), evaluate_stream(pop, stream), v, n, mode, level)


def aggregate(values) -> tuple[float, float]:
    """Mean and standard error (n-1 denominator) over users."""
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("nothing to aggregate")
    if vals.size == 1:
        return float(vals[0]), 0.0
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size))


# -- re-exposure forgetting ------------------------------------------------

@dataclass(frozen=True)
class RfEvent:
    action: tuple[int, int]
    t: int       # batch step of the earlier occurrence
    e: int       # batch step of the re-exposure
    gap: int     # update iterations between the two compared models
    rf: float


@dataclass
class RfLog:
    events: list[RfEvent] = field(default_factory=list)

    def __len__(self):
        return len(self.events)

    def values(self) -> np.ndarray:
        return np.array([ev.rf for ev in self.events], dtype=np.float64)

    def gaps(self) -> np.ndarray:
        return np.array([ev.gap for ev in self.events], dtype=np.int64)

    def average(self) -> float:
        return float(self.values().mean()) if self.events else float("nan")


class RfTracker:
    """Re-exposure forgetting bookkeeping interleaved with online updates.

    After the updates on a batch, the mean action loss over all samples seen so
    far of each action in that batch is stored. When the action re-occurs in a
    later, non-adjacent batch, the same samples are re-scored with the model
    just before that batch's update; the difference is one event.
    """

    def __init__(self, stream: UserStream, updates_per_batch: int = 1):
        self.x, self.v, self.n = stream.arrays()
        self.updates_per_batch = updates_per_batch
        self.history: dict[tuple[int, int], list[int]] = {}
        self.pending: dict[tuple[int, int], tuple[int, int, float]] = {}
        self.log = RfLog()

    def _mean_loss(self, params: ModelParams, idx) -> float:
        ce_v, ce_n, _, _ = per_sample_losses(params, self.x[idx], self.v[idx], self.n[idx])
        return float(np.mean(ce_v + ce_n))

    def before_update(self, step: int, sample_idx, params: ModelParams) -> None:
        for a in self._actions(sample_idx):
            if a not in self.pending:
                continue
            t, count, after = self.pending[a]
            if step <= t + 1:
                continue
            idx = self.history[a][:count]
            rf = self._mean_loss(params, idx) - after
            self.log.events.append(RfEvent(a, t, step, (step - t - 1) * self.updates_per_batch, rf))

    def after_update(self, step: int, sample_idx, params: ModelParams) -> None:
        for i in sample_idx:
            self.history.setdefault((int(self.v[i]), int(self.n[i])), []).append(int(i))
        for a in self._actions(sample_idx):
            idx = self.history[a]
            self.pending[a] = (step, len(idx), self._mean_loss(params, idx))

    def _actions(self, sample_idx):
        seen = {}
        for i in sample_idx:
            seen.setdefault((int(self.v[i]), int(self.n[i])), None)
        return list(seen)


def bin_rf(log: RfLog, n_bins: int = 10) -> list[dict]:
    """Mean and SE of RF over equal-width bins of log10(gap).

    Bins are closed on the right, the first one also on the left; empty bins
    are omitted. Bounds are reported in gap units.
    """
    if not log.events:
        raise ValueError("empty RF log")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    lg = np.log10(log.gaps().astype(np.float64))
    vals = log.values()
    lo, hi = float(lg.min()), float(lg.max())
    edges = np.linspace(lo, hi, n_bins + 1)
    which = np.digitize(lg, edges[1:-1], right=True) if hi > lo else np.zeros(len(lg), dtype=int)
    out = []
    for b in range(n_bins):
        sel = vals[which == b]
        if sel.size == 0:
            continue
        mean, se = aggregate(sel)
        out.append({"bin": b, "gap_lo": float(10 ** edges[b]), "gap_hi": float(10 ** edges[b + 1]),
                    "count": int(sel.size), "mean": mean, "se": se})
    return out


# -- reports ---------------------------------------------------------------

def user_report(log: EvalLog, final: Evaluation, pop_final: Evaluation, rf: RfLog | None = None) -> dict:
    """Flat per-user metric dictionary.

    ``final`` and ``pop_final`` score the end-of-stream and the population
    predictor on the whole stream (hindsight). Undefined entries are NaN.
    """
    rep: dict[str, float] = {"n_samples": float(len(log)), "frac_correlated": float(log.correlated.mean())}
    for level in LEVELS:
        labels = log.labels(level)
        rep[f"online_acc_{level}"] = macro_acc(log.adapted.preds(level), labels)
        rep[f"pop_online_acc_{level}"] = macro_acc(log.population.preds(level), labels)
        rep[f"oag_{level}"] = rep[f"online_acc_{level}"] - rep[f"pop_online_acc_{level}"]
        rep[f"hindsight_acc_{level}"] = macro_acc(final.preds(level), labels)
        rep[f"pop_hindsight_acc_{level}"] = macro_acc(pop_final.preds(level), labels)
        rep[f"hag_{level}"] = rep[f"hindsight_acc_{level}"] - rep[f"pop_hindsight_acc_{level}"]
        rep[f"oag_loss_{level}"] = oag(log, "loss", level).value
        rep[f"hag_loss_{level}"] = gain_between(final, pop_final, log.verbs, log.nouns, "loss", level)
        for name, mask in (("cor", log.correlated), ("decor", ~log.correlated)):
            if mask.any():
                rep[f"oag_{name}_{level}"] = oag(log, "acc", level, mask).value
                rep[f"oag_{name}_loss_{level}"] = oag(log, "loss", level, mask).value
            else:
                rep[f"oag_{name}_{level}"] = rep[f"oag_{name}_loss_{level}"] = float("nan")
    rep["avg_rf"] = rf.average() if rf is not None else float("nan")
    rep["n_rf"] = float(len(rf)) if rf is not None else 0.0
    return rep


def aggregate_reports(reports: list[dict]) -> dict[str, dict[str, float]]:
    """Mean and SE of every key over users, skipping NaN entries."""
    keys = list(reports[0]) if reports else []
    out = {}
    for k in keys:
        vals = [r[k] for r in reports if not math.isnan(r[k])]
        if vals:
            mean, se = aggregate(vals)
            out[k] = {"mean": mean, "se": se, "n": len(vals)}
        else:
            out[k] = {"mean": float("nan"), "se": float("nan"), "n": 0}
    return out
