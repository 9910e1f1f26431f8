"""Shared fixtures: tiny corpus/model pairs sized for fast tests."""

import pytest

from mmcc import corpus as C
from mmcc import model as M
from mmcc import objective as O
from mmcc.rng import SplitMix64


def tiny_corpus_config(**overrides):
    base = dict(seed=7, num_videos=24, num_tasks=2, vocab_size=96, d_vis=12,
                steps_per_task=4, tokens_per_step=4, filler_pool_size=12,
                dwell_min=2, dwell_max=4, p_filler=0.1)
    base.update(overrides)
    return C.CorpusConfig(**base)


def tiny_model_config(**overrides):
    base = dict(d=8, d_vis=12, vocab_size=96)
    base.update(overrides)
    return M.ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus():
    return C.make_corpus(tiny_corpus_config())


@pytest.fixture
def tiny_params():
    return M.init_params(tiny_model_config(), seed=11)


@pytest.fixture
def tiny_segment(tiny_corpus):
    seg = C.sample_segment(tiny_corpus.train[0], max_len=64, rate_divisor=1,
                           rng=SplitMix64(3))
    assert seg is not None
    return seg


@pytest.fixture
def tiny_embedding(tiny_params, tiny_segment):
    return O.embed_segment(tiny_params, tiny_segment)
