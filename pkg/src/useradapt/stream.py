"""User streams: data model, JSONL ingestion, batching and label statistics."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

LEVELS = ("action", "verb", "noun")
SPLITS = ("population", "train", "test")


class StreamFormatError(ValueError):
    """Raised when a stream file does not conform to the JSONL schema."""


@dataclass(frozen=True, order=True)
class ActionLabel:
    verb: int
    noun: int

    def at(self, level: str):
        if level == "verb":
            return self.verb
        if level == "noun":
            return self.noun
        if level == "action":
            return (self.verb, self.noun)
        raise ValueError(f"unknown level {level!r}")


@dataclass(frozen=True)
class Vocab:
    num_verbs: int
    num_nouns: int

    def __post_init__(self):
        if self.num_verbs < 1 or self.num_nouns < 1:
            raise ValueError("vocabulary sizes must be >= 1")

    @property
    def num_actions(self) -> int:
        return self.num_verbs * self.num_nouns

    def check(self, label: ActionLabel):
        if not (0 <= label.verb < self.num_verbs and 0 <= label.noun < self.num_nouns):
            raise StreamFormatError(f"label out of vocabulary: {label}")


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: ActionLabel
    t: int


@dataclass(frozen=True)
class Batch:
    samples: tuple[Sample, ...]
    step: int

    def __len__(self):
        return len(self.samples)

    @property
    def features(self) -> np.ndarray:
        return np.stack([s.features for s in self.samples])

    @property
    def verbs(self) -> np.ndarray:
        return np.array([s.label.verb for s in self.samples], dtype=np.int64)

    @property
    def nouns(self) -> np.ndarray:
        return np.array([s.label.noun for s in self.samples], dtype=np.int64)


@dataclass(frozen=True)
class UserStream:
    user_id: str
    batches: tuple[Batch, ...]
    vocab: Vocab
    _cache: dict = field(default_factory=dict, repr=False, compare=False, hash=False)

    @property
    def batch_size(self) -> int:
        return len(self.batches[0]) if self.batches else 0

    @property
    def samples(self) -> list[Sample]:
        return [s for b in self.batches for s in b.samples]

    def __len__(self):
        return sum(len(b) for b in self.batches)

    def arrays(self):
        """Stacked (features, verbs, nouns) over the whole stream, cached."""
        if "arrays" not in self._cache:
            samples = self.samples
            if samples:
                x = np.stack([s.features for s in samples])
            else:
                x = np.zeros((0, 0))
            v = np.array([s.label.verb for s in samples], dtype=np.int64)
            n = np.array([s.label.noun for s in samples], dtype=np.int64)
            for a in (x, v, n):
                a.setflags(write=False)
            self._cache["arrays"] = (x, v, n)
        return self._cache["arrays"]

    def labels(self) -> list[ActionLabel]:
        return [s.label for s in self.samples]


@dataclass(frozen=True)
class StreamCollection:
    population: tuple[UserStream, ...]
    train_users: tuple[UserStream, ...]
    test_users: tuple[UserStream, ...]
    vocab: Vocab
    dim: int

    def __post_init__(self):
        groups = [{s.user_id for s in g} for g in (self.population, self.train_users, self.test_users)]
        if sum(map(len, groups)) != len(set().union(*groups)):
            raise StreamFormatError("user ids must be unique and splits disjoint")
        for s in self.all_streams():
            if s.vocab != self.vocab:
                raise StreamFormatError(f"user {s.user_id} uses a different vocabulary")

    def all_streams(self) -> list[UserStream]:
        return [*self.population, *self.train_users, *self.test_users]

    def split_of(self, user_id: str) -> str:
        for name, group in zip(SPLITS, (self.population, self.train_users, self.test_users)):
            if any(s.user_id == user_id for s in group):
                return name
        raise KeyError(user_id)


def batchify(samples: Sequence[Sample], batch_size: int) -> list[Batch]:
    """Group consecutive samples into batches; the final batch may be partial."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    return [
        Batch(tuple(samples[i:i + batch_size]), step)
        for step, i in enumerate(range(0, len(samples), batch_size))
    ]


def make_stream(user_id: str, samples: Sequence[Sample], vocab: Vocab, batch_size: int) -> UserStream:
    return UserStream(str(user_id), tuple(batchify(samples, batch_size)), vocab)


def rebatch(stream: UserStream, batch_size: int) -> UserStream:
    return make_stream(stream.user_id, stream.samples, stream.vocab, batch_size)


# -- JSONL ingestion -------------------------------------------------------

def load_streams(path, batch_size: int) -> StreamCollection:
    """Read a JSONL stream file into per-user, batched streams.

    The first line is a header ``{"vocab": {"verbs": V, "nouns": N}, "dim": d}``;
    every following line is one sample record.
    """
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    path = Path(path)
    per_user: dict[str, list[Sample]] = {}
    split_of: dict[str, str] = {}
    seen: set[tuple[str, int]] = set()
    vocab = None
    dim = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise StreamFormatError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if vocab is None:
                try:
                    vocab = Vocab(int(rec["vocab"]["verbs"]), int(rec["vocab"]["nouns"]))
                    dim = int(rec["dim"])
                except (KeyError, TypeError, ValueError) as exc:
                    raise StreamFormatError(f"line {lineno}: malformed header ({exc})") from None
                continue
            try:
                uid = str(rec["user_id"])
                split = rec["split"]
                t = int(rec["t"])
                label = ActionLabel(int(rec["verb"]), int(rec["noun"]))
                feats = np.asarray(rec["features"], dtype=np.float64)
            except (KeyError, TypeError, ValueError) as exc:
                raise StreamFormatError(f"line {lineno}: malformed record ({exc})") from None
            if split not in SPLITS:
                raise StreamFormatError(f"line {lineno}: unknown split {split!r}")
            try:
                vocab.check(label)
            except StreamFormatError as exc:
                raise StreamFormatError(f"line {lineno}: {exc}") from None
            if feats.shape != (dim,):
                raise StreamFormatError(
                    f"line {lineno}: inconsistent feature dimension {feats.shape} (expected {dim})")
            if (uid, t) in seen:
                raise StreamFormatError(f"line {lineno}: duplicate sample (user {uid}, t {t})")
            seen.add((uid, t))
            if split_of.setdefault(uid, split) != split:
                raise StreamFormatError(f"line {lineno}: user {uid} appears in two splits")
            feats.setflags(write=False)
            per_user.setdefault(uid, []).append(Sample(feats, label, t))
    if vocab is None:
        raise StreamFormatError(f"{path}: missing header line")

    groups = {name: [] for name in SPLITS}
    for uid, samples in per_user.items():
        samples.sort(key=lambda s: s.t)
        groups[split_of[uid]].append(make_stream(uid, samples, vocab, batch_size))
    return StreamCollection(*(tuple(groups[name]) for name in SPLITS), vocab=vocab, dim=dim)


def save_streams(collection: StreamCollection, path) -> None:
    """Write a collection in the JSONL format read by :func:`load_streams`."""
    path = Path(path)
    vocab = collection.vocab
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        header = {"vocab": {"verbs": vocab.num_verbs, "nouns": vocab.num_nouns}, "dim": collection.dim}
        fh.write(json.dumps(header) + "\n")
        for split, group in zip(SPLITS, (collection.population, collection.train_users, collection.test_users)):
            for stream in group:
                for s in stream.samples:
                    fh.write(json.dumps(sample_record(s, stream.user_id, split)) + "\n")


def sample_record(sample: Sample, user_id: str, split: str | None = None) -> dict:
    rec = {"user_id": user_id}
    if split is not None:
        rec["split"] = split
    # float repr round-trips exactly through json
    rec.update(t=sample.t, verb=sample.label.verb, noun=sample.label.noun,
               features=[float(v) for v in sample.features])
    return rec


# -- statistics ------------------------------------------------------------

def label_counts(labels: Iterable[ActionLabel], level: str = "action") -> Counter:
    return Counter(lab.at(level) for lab in labels)


def action_cdf(stream: UserStream) -> list[float]:
    """Cumulative mass of the action histogram sorted from most to least frequent."""
    labels = stream.labels()
    if not labels:
        raise ValueError("empty stream")
    counts = sorted(label_counts(labels).values(), reverse=True)
    cdf = np.cumsum(counts) / len(labels)
    return cdf.tolist()


def label_iou(a: UserStream, b: UserStream, level: str = "action") -> float:
    if a.vocab != b.vocab:
        raise ValueError("streams use different vocabularies")
    sa = {lab.at(level) for lab in a.labels()}
    sb = {lab.at(level) for lab in b.labels()}
    union = sa | sb
    if not union:
        return 0.0
    return len(sa & sb) / len(union)


def correlation_mask(stream: UserStream | Sequence[ActionLabel]) -> np.ndarray:
    """True where a sample's action equals the action of the sample before it."""
    labels = stream.labels() if isinstance(stream, UserStream) else list(stream)
    mask = np.zeros(len(labels), dtype=bool)
    for i in range(1, len(labels)):
        mask[i] = labels[i] == labels[i - 1]
    return mask
