"""Post-hoc studies on adapted models: user transfer, gradient alignment,
classifier norm changes and linear probing of the feature stage."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .learner import GradLog, LearnerState, OptimConfig, sgd_step
from .metrics import aggregate, hag, macro_acc
from .model import ModelParams, features, forward, grad
from .stream import LEVELS, UserStream


@dataclass
class TransferMatrix:
    user_ids: list[str]
    values: np.ndarray  # rows: adapted models, columns: evaluated streams
    level: str = "action"

    def diagonal_dominant(self) -> bool:
        """True if every diagonal entry strictly exceeds the rest of its row."""
        for i, row in enumerate(self.values):
            others = np.delete(row, i)
            if others.size and not np.all(row[i] > others):
                return False
        return True


def transfer_matrix(models: dict[str, ModelParams], streams: list[UserStream], pop: ModelParams,
                    level: str = "action") -> TransferMatrix:
    """Loss-mode hindsight gain of every user model on every user stream."""
    ids = [s.user_id for s in streams]
    if set(ids) != set(models):
        raise ValueError("models and streams cover different users")
    vocab = streams[0].vocab
    if any(s.vocab != vocab for s in streams):
        raise ValueError("streams use different vocabularies")
    vals = np.empty((len(ids), len(ids)))
    for i, u in enumerate(ids):
        if models[u].dims != pop.dims:
            raise ValueError(f"model of user {u} does not match the population model shape")
        for j, stream in enumerate(streams):
            vals[i, j] = hag(models[u], stream, pop, "loss", level)
    return TransferMatrix(ids, vals, level)


def grad_cosine(logs: list[GradLog], k_max: int = 10) -> dict[str, list[dict]]:
    """Cosine similarity between update gradients k steps apart.

    Averaged over all pairs within a user, then mean and SE over users, for the
    full model and the F and H parts. Pairs with a zero gradient are skipped
    and counted.
    """
    out = {}
    for part in ("full", "F", "H"):
        rows = []
        for k in range(1, k_max + 1):
            per_user, skipped = [], 0
            for glog in logs:
                g = np.asarray(getattr(glog, part))
                if len(g) <= k:
                    continue
                nz = np.linalg.norm(g, axis=1) > 0
                valid = nz[k:] & nz[:-k]
                skipped += int((~valid).sum())
                if valid.any():
                    cos = np.einsum("ij,ij->i", g[k:][valid], g[:-k][valid])
                    per_user.append(float(np.clip(cos, -1.0, 1.0).mean()))
            if per_user:
                mean, se = aggregate(per_user)
            else:
                mean, se = float("nan"), float("nan")
            rows.append({"k": k, "mean": mean, "se": se, "users": len(per_user), "skipped": skipped})
        out[part] = rows
    return out


def classifier_norm_delta(finals: list[ModelParams], pop: ModelParams, streams: list[UserStream],
                          level: str = "noun") -> dict[str, np.ndarray]:
    """Per-class change of classifier weight L2-norm and absolute bias.

    Classes are ordered by their label frequency averaged over the per-user
    distributions; deltas are mean and SE over users.
    """
    if level not in ("verb", "noun"):
        raise ValueError("level must be 'verb' or 'noun'")
    if len(finals) != len(streams) or not finals:
        raise ValueError("need one final model per stream")
    W0, b0 = (pop.Wv, pop.bv) if level == "verb" else (pop.Wn, pop.bn)
    n_cls = b0.shape[0]
    freq = np.zeros(n_cls)
    dw, db = [], []
    for final, stream in zip(finals, streams):
        W, b = (final.Wv, final.bv) if level == "verb" else (final.Wn, final.bn)
        if W.shape != W0.shape:
            raise ValueError("shape mismatch between final and population heads")
        labels = stream.arrays()[1 if level == "verb" else 2]
        freq += np.bincount(labels, minlength=n_cls) / max(len(labels), 1)
        dw.append(np.linalg.norm(W, axis=0) - np.linalg.norm(W0, axis=0))
        db.append(np.abs(b) - np.abs(b0))
    freq /= len(streams)
    order = np.argsort(-freq, kind="stable")
    dw, db = np.array(dw)[:, order], np.array(db)[:, order]
    n = len(finals)
    se = (lambda a: a.std(axis=0, ddof=1) / np.sqrt(n)) if n > 1 else (lambda a: np.zeros(a.shape[1]))
    return {"classes": order, "freq": freq[order], "dw_mean": dw.mean(axis=0), "dw_se": se(dw),
            "db_mean": db.mean(axis=0), "db_se": se(db)}


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.01
    seed: int = 0


def linear_probe(params: ModelParams, stream: UserStream, cfg: ProbeConfig = ProbeConfig()) -> dict[str, float]:
    """Macro accuracy of fresh linear heads trained on the frozen feature stage.

    Heads start at zero and are trained with shuffled mini-batch SGD on the
    whole stream, then evaluated on the same stream.
    """
    x, v, n = stream.arrays()
    d, h, nv, nn = params.dims
    probe = ModelParams.zeros(d, h, nv, nn, params.activation)
    probe.F_weight = params.F_weight.copy()
    probe.F_bias = params.F_bias.copy()
    # features are fixed, so train the heads on them directly
    z = features(probe, x)
    head = ModelParams(np.eye(h), np.zeros(h), probe.Wv, probe.bv, probe.Wn, probe.bn)
    state = LearnerState.start(head)
    opt = OptimConfig(lr=cfg.lr, scope="H")
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x70726F6265]))
    for _ in range(cfg.epochs):
        order = rng.permutation(len(v))
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            state = sgd_step(state, grad(state.params, z[idx], v[idx], n[idx], "H"), opt)
    lv, ln = forward(state.params, z)
    pv, pn = lv.argmax(axis=1), ln.argmax(axis=1)
    preds = {"verb": pv, "noun": pn, "action": np.stack([pv, pn], axis=1)}
    labels = {"verb": v, "noun": n, "action": np.stack([v, n], axis=1)}
    return {level: macro_acc(preds[level], labels[level]) for level in LEVELS}
