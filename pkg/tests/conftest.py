import numpy as np
import pytest

from useradapt.model import ModelParams
from useradapt.stream import ActionLabel, Sample, Vocab, make_stream
from useradapt.synth import SynthConfig


def stream_from_labels(labels, dim=3, batch_size=4, vocab=Vocab(5, 5), seed=0, user_id="u"):
    """Stream with the given (verb, noun) labels and random features."""
    rng = np.random.default_rng(seed)
    samples = [Sample(rng.standard_normal(dim), ActionLabel(*lab), t) for t, lab in enumerate(labels)]
    return make_stream(user_id, samples, vocab, batch_size)


def random_params(d=4, h=3, V=5, N=6, seed=0, activation="linear", scale=1.0):
    rng = np.random.default_rng(seed)
    p = ModelParams.zeros(d, h, V, N, activation)
    for name, arr in p.arrays().items():
        setattr(p, name, scale * rng.standard_normal(arr.shape))
    return p


@pytest.fixture
def tiny_cfg():
    return SynthConfig(num_verbs=4, num_nouns=5, actions_per_user=6, stream_len=120, dim=8, seed=3)
