"""Synthetic user streams with long-tailed, temporally correlated actions.

Each user draws actions from a Zipf law over a private subset of the action
space and repeats the previous action with a fixed probability. Features are
class-conditional Gaussians around shared verb+noun prototypes, shifted by a
per-user offset and a linear drift along the stream, then rescaled to a fixed
RMS norm for population samples.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from .stream import ActionLabel, Sample, StreamCollection, UserStream, Vocab, make_stream


@dataclass(frozen=True)
class SynthConfig:
    num_verbs: int = 24
    num_nouns: int = 32
    actions_per_user: int = 30
    zipf_s: float = 1.1
    repeat_p: float = 0.8
    stream_len: int = 2000
    dim: int = 64
    feature_sigma: float = 7.0
    feature_norm: float = 3.0   # RMS norm of population features
    user_shift: float = 1.0
    user_mix: float = 0.0       # strength of a per-user linear feature distortion
    drift_rate: float = 0.0
    session_len: float = 100.0  # mean samples per activity session; 0 disables sessions
    session_actions: int = 8    # actions active within one session
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.num_verbs < 1 or self.num_nouns < 1:
            raise ValueError("vocabulary sizes must be >= 1")
        if not 1 <= self.actions_per_user <= self.num_verbs * self.num_nouns:
            raise ValueError(
                f"actions_per_user={self.actions_per_user} exceeds the "
                f"{self.num_verbs * self.num_nouns} available actions")
        if self.zipf_s < 0:
            raise ValueError("zipf_s must be >= 0")
        if not 0 <= self.repeat_p < 1:
            raise ValueError("repeat_p must lie in [0, 1)")
        if self.feature_norm <= 0:
            raise ValueError("feature_norm must be > 0")
        if self.session_len < 0 or self.session_actions < 2:
            raise ValueError("session_len >= 0 and session_actions >= 2 required")
        if self.stream_len < 0 or self.dim < 1 or self.batch_size < 1:
            raise ValueError("stream_len >= 0, dim >= 1 and batch_size >= 1 required")

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.num_verbs, self.num_nouns)

    def to_dict(self) -> dict:
        return asdict(self)


def derive_seed(seed: int, *keys) -> np.random.SeedSequence:
    """Seed sequence that depends only on ``seed`` and the given keys."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for key in keys:
        digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
        words.append(int.from_bytes(digest, "little"))
    return np.random.SeedSequence(words)


def rng_for(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))


def action_to_label(a: int, num_verbs: int) -> ActionLabel:
    return ActionLabel(int(a % num_verbs), int(a // num_verbs))


def prototypes(cfg: SynthConfig) -> np.ndarray:
    """Class means for the whole action space, shape (V*N, d).

    The mean of action ``a`` is the sum of its verb and noun prototypes, so
    verbs and nouns are each linearly decodable.
    """
    rng = rng_for(cfg.seed, "prototypes")
    verb_proto = rng.standard_normal((cfg.num_verbs, cfg.dim))
    noun_proto = rng.standard_normal((cfg.num_nouns, cfg.dim))
    a = np.arange(cfg.num_verbs * cfg.num_nouns)
    return verb_proto[a % cfg.num_verbs] + noun_proto[a // cfg.num_verbs]


def feature_scale(cfg: SynthConfig) -> float:
    """Factor giving population features (no offset, no drift) RMS norm ``cfg.feature_norm``."""
    return cfg.feature_norm / np.sqrt(cfg.dim * (2.0 + cfg.feature_sigma ** 2))


def zipf_weights(k: int, s: float) -> np.ndarray:
    w = np.arange(1, k + 1, dtype=np.float64) ** -s
    return w / w.sum()


def _draw_other(rng, cdf, prev):
    r = prev
    while r == prev:
        r = int(np.searchsorted(cdf, rng.random(), side="right"))
    return r


def _cdf(weights):
    cdf = np.cumsum(weights) / np.sum(weights)
    cdf[-1] = 1.0
    return cdf


def sample_actions(rng: np.random.Generator, weights: np.ndarray, n: int, repeat_p: float,
                   session_len: float = 0.0, session_actions: int = 4) -> np.ndarray:
    """Rank sequence of a repeat-or-redraw Markov chain.

    With probability ``repeat_p`` the previous rank is kept; otherwise a new
    rank is drawn from ``weights`` conditioned on differing from the previous
    one, so the repeat rate equals ``repeat_p`` exactly.

    With ``session_len > 0`` the stream is cut into activity sessions of
    geometric length; each session draws ``session_actions`` ranks from
    ``weights`` and redraws are restricted to them, so transitions mostly
    return to recently seen actions.
    """
    k = len(weights)
    out = np.empty(n, dtype=np.int64)
    if n == 0:
        return out
    if k == 1:
        out[:] = 0
        return out
    if session_len > 0 and session_actions < 2:
        raise ValueError("sessions need at least two actions")
    full_cdf = _cdf(weights)
    use_sessions = session_len > 0 and session_actions < k
    new_session = rng.random(n) < (1.0 / session_len if use_sessions else 0.0)
    active = None
    if use_sessions:
        active = np.sort(rng.choice(k, size=session_actions, replace=False, p=weights))
        cdf = _cdf(weights[active])
    out[0] = active[_draw_other(rng, cdf, -1)] if use_sessions else _draw_other(rng, full_cdf, -1)
    repeats = rng.random(n) < repeat_p
    for i in range(1, n):
        if use_sessions and new_session[i]:
            active = np.sort(rng.choice(k, size=session_actions, replace=False, p=weights))
            cdf = _cdf(weights[active])
        prev = out[i - 1]
        if repeats[i]:
            out[i] = prev
        elif not use_sessions:
            out[i] = _draw_other(rng, full_cdf, prev)
        else:
            pos = np.searchsorted(active, prev)
            local_prev = pos if pos < len(active) and active[pos] == prev else -1
            out[i] = active[_draw_other(rng, cdf, local_prev)]
    return out


def gen_user_stream(cfg: SynthConfig, user_id, actions=None, user_shift=None, user_mix=None) -> UserStream:
    """Generate one user's stream.

    ``actions`` overrides the user's action subset (ordered from most to least
    frequent); ``user_shift`` and ``user_mix`` override the config values.
    """
    rng = rng_for(cfg.seed, "user", user_id)
    n_actions = cfg.num_verbs * cfg.num_nouns
    # subset is always drawn so the remaining stream does not depend on the override
    subset = rng.permutation(n_actions)[:cfg.actions_per_user]
    if actions is not None:
        subset = np.asarray(actions, dtype=np.int64)
        if subset.size == 0 or subset.min() < 0 or subset.max() >= n_actions:
            raise ValueError("action subset outside the action space")
    shift = cfg.user_shift if user_shift is None else user_shift
    # offset and drift directions have per-coordinate RMS 1, like the prototypes
    offset_dir = rng.standard_normal(cfg.dim)
    offset_dir *= np.sqrt(cfg.dim) / np.linalg.norm(offset_dir)
    drift_dir = rng.standard_normal(cfg.dim)
    drift_dir *= np.sqrt(cfg.dim) / np.linalg.norm(drift_dir)

    ranks = sample_actions(rng, zipf_weights(len(subset), cfg.zipf_s), cfg.stream_len, cfg.repeat_p,
                           cfg.session_len, cfg.session_actions)
    acts = subset[ranks]
    noise = rng.standard_normal((cfg.stream_len, cfg.dim)) * cfg.feature_sigma
    t = np.arange(cfg.stream_len, dtype=np.float64)[:, None]
    x = prototypes(cfg)[acts] + shift * offset_dir + cfg.drift_rate * t * drift_dir + noise
    mix = cfg.user_mix if user_mix is None else user_mix
    if mix:
        # separate generator so the distortion leaves labels and noise unchanged
        r = rng_for(cfg.seed, "mix", user_id).standard_normal((cfg.dim, cfg.dim)) / np.sqrt(cfg.dim)
        x = x + mix * (x @ r)
    x *= feature_scale(cfg)

    samples = []
    for i, a in enumerate(acts):
        feats = x[i]
        feats.setflags(write=False)
        samples.append(Sample(feats, action_to_label(a, cfg.num_verbs), i))
    return make_stream(str(user_id), samples, cfg.vocab, cfg.batch_size)


def gen_collection(cfg: SynthConfig, n_population: int, n_train: int, n_test: int,
                   disjoint: bool = False) -> StreamCollection:
    """Population, tuning and evaluation users with disjoint ids.

    Population users carry no user offset or distortion, so those of the other
    users are the population-to-user shift. With ``disjoint`` the tuning and evaluation
    users get non-overlapping action subsets.
    """
    if min(n_population, n_train, n_test) < 0:
        raise ValueError("user counts must be >= 0")
    subsets = [None] * (n_train + n_test)
    if disjoint:
        need = (n_train + n_test) * cfg.actions_per_user
        if need > cfg.num_verbs * cfg.num_nouns:
            raise ValueError(f"{need} actions needed for disjoint subsets")
        perm = rng_for(cfg.seed, "disjoint").permutation(cfg.num_verbs * cfg.num_nouns)
        k = cfg.actions_per_user
        subsets = [perm[i * k:(i + 1) * k] for i in range(n_train + n_test)]
    pop = tuple(gen_user_stream(cfg, f"pop{i:03d}", user_shift=0.0, user_mix=0.0)
                for i in range(n_population))
    train = tuple(gen_user_stream(cfg, f"train{i:03d}", actions=subsets[i]) for i in range(n_train))
    test = tuple(gen_user_stream(cfg, f"test{i:03d}", actions=subsets[n_train + i]) for i in range(n_test))
    return StreamCollection(pop, train, test, vocab=cfg.vocab, dim=cfg.dim)

