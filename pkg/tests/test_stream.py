import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from useradapt.stream import (ActionLabel, Sample, StreamCollection, StreamFormatError, Vocab, action_cdf,
                              batchify, correlation_mask, label_counts, label_iou, load_streams, make_stream,
                              rebatch, save_streams)

from conftest import stream_from_labels


def _samples(n, dim=2):
    return [Sample(np.full(dim, float(t)), ActionLabel(0, 0), t) for t in range(n)]


@pytest.mark.parametrize("n,sizes", [(4, [4]), (0, []), (10, [4, 4, 2]), (8, [4, 4]), (9, [4, 4, 1])])
def test_batchify_sizes(n, sizes):
    batches = batchify(_samples(n), 4)
    assert [len(b) for b in batches] == sizes
    assert [b.step for b in batches] == list(range(len(sizes)))
    assert [s.t for b in batches for s in b.samples] == list(range(n))


def test_batchify_rejects_zero():
    with pytest.raises(ValueError):
        batchify(_samples(3), 0)


def test_label_and_vocab():
    lab = ActionLabel(2, 3)
    assert lab.at("verb") == 2 and lab.at("noun") == 3 and lab.at("action") == (2, 3)
    assert Vocab(3, 4).num_actions == 12
    with pytest.raises(StreamFormatError, match="label out of vocabulary"):
        Vocab(2, 4).check(lab)
    with pytest.raises(ValueError):
        Vocab(0, 3)


def test_collection_rejects_shared_ids():
    s = stream_from_labels([(0, 0)])
    with pytest.raises(ValueError):
        StreamCollection((s,), (s,), (), vocab=s.vocab, dim=3)


def test_action_cdf():
    assert action_cdf(stream_from_labels([(1, 1)] * 3)) == [1.0]
    assert action_cdf(stream_from_labels([(0, 0)] * 3 + [(1, 1)])) == [0.75, 1.0]
    with pytest.raises(ValueError):
        action_cdf(make_stream("e", [], Vocab(2, 2), 4))


def test_label_iou():
    a = stream_from_labels([(0, 0), (1, 1)])
    b = stream_from_labels([(1, 1), (0, 0)])
    c = stream_from_labels([(2, 2), (3, 3)])
    d = stream_from_labels([(0, 1)])
    assert label_iou(a, b) == 1.0
    assert label_iou(a, c) == 0.0
    assert label_iou(a, d, "verb") == 0.5
    assert label_iou(a, d, "noun") == 0.5
    assert label_iou(a, d) == 0.0
    empty = make_stream("e", [], Vocab(5, 5), 4)
    assert label_iou(empty, empty) == 0.0


def test_correlation_mask_examples():
    a, b = (0, 0), (1, 0)
    assert correlation_mask(stream_from_labels([a, a, b, b, b])).tolist() == [False, True, False, True, True]
    assert not correlation_mask(stream_from_labels([(i, 0) for i in range(5)])).any()


label_lists = st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=40)


@given(label_lists, st.integers(1, 7))
def test_mask_invariant_to_batch_size(labels, b):
    s = stream_from_labels(labels, batch_size=4)
    assert np.array_equal(correlation_mask(s), correlation_mask(rebatch(s, b)))


@given(label_lists)
def test_cdf_is_valid_and_histogram_sums(labels):
    s = stream_from_labels(labels)
    cdf = np.array(action_cdf(s))
    assert np.all(np.diff(cdf) >= 0) and cdf[0] > 0
    assert cdf[-1] == pytest.approx(1.0, abs=1e-9)
    assert sum(label_counts(s.labels()).values()) == len(labels)
    assert len(cdf) == len(set(labels))


def _collection(rng, n_users, dim, vocab):
    groups = [[], [], []]
    for u in range(n_users):
        n = int(rng.integers(0, 9))
        samples = [Sample(rng.standard_normal(dim) * 10 ** rng.uniform(-5, 5),
                          ActionLabel(int(rng.integers(vocab.num_verbs)), int(rng.integers(vocab.num_nouns))), t)
                   for t in range(n)]
        if n:
            groups[u % 3].append(make_stream(f"user{u}", samples, vocab, 3))
    return StreamCollection(*(tuple(g) for g in groups), vocab=vocab, dim=dim)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6), st.integers(1, 5))
def test_jsonl_round_trip(tmp_path_factory, seed, n_users, dim):
    rng = np.random.default_rng(seed)
    col = _collection(rng, n_users, dim, Vocab(3, 4))
    path = tmp_path_factory.mktemp("rt") / "s.jsonl"
    save_streams(col, path)
    back = load_streams(path, 3)
    assert back.vocab == col.vocab and back.dim == col.dim
    for a_group, b_group in ((col.population, back.population), (col.train_users, back.train_users),
                             (col.test_users, back.test_users)):
        assert [s.user_id for s in a_group] == [s.user_id for s in b_group]
        for a, b in zip(a_group, b_group):
            assert [len(x) for x in a.batches] == [len(x) for x in b.batches]
            for sa, sb in zip(a.samples, b.samples):
                assert sa.t == sb.t and sa.label == sb.label
                assert sa.features.tobytes() == sb.features.tobytes()


def _write(path, lines):
    path.write_text("".join(json.dumps(r) + "\n" if isinstance(r, dict) else r + "\n" for r in lines))


HEADER = {"vocab": {"verbs": 3, "nouns": 2}, "dim": 2}


def _rec(t, verb=0, noun=0, user="a", split="train", feats=(0.0, 1.0)):
    return {"user_id": user, "split": split, "t": t, "verb": verb, "noun": noun, "features": list(feats)}


def test_load_batches_and_sorting(tmp_path):
    p = tmp_path / "s.jsonl"
    _write(p, [HEADER] + [_rec(t) for t in reversed(range(9))] + [_rec(0, user="b", split="population")])
    col = load_streams(p, 4)
    (s,) = col.train_users
    assert [len(b) for b in s.batches] == [4, 4, 1]
    assert [x.t for x in s.samples] == list(range(9))
    assert col.split_of("b") == "population"


@pytest.mark.parametrize("bad,match", [
    ("{not json", "line 2: malformed"),
    (_rec(0, verb=3), "line 2: label out of vocabulary"),
    (_rec(0, noun=2), "line 2: label out of vocabulary"),
    (_rec(0, feats=(1.0,)), "line 2: inconsistent feature dimension"),
    (_rec(0, split="dev"), "line 2: unknown split"),
])
def test_load_errors(tmp_path, bad, match):
    p = tmp_path / "s.jsonl"
    _write(p, [HEADER, bad])
    with pytest.raises(StreamFormatError, match=match):
        load_streams(p, 4)


def test_load_duplicate_and_split_conflict(tmp_path):
    p = tmp_path / "s.jsonl"
    _write(p, [HEADER, _rec(0), _rec(0)])
    with pytest.raises(StreamFormatError, match="line 3: duplicate"):
        load_streams(p, 4)
    _write(p, [HEADER, _rec(0), _rec(1, split="test")])
    with pytest.raises(StreamFormatError, match="two splits"):
        load_streams(p, 4)
