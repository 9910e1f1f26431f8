"""Corpus generator, file round-trip and segment sampling tests."""

import dataclasses
import itertools

import numpy as np
import pytest
from scipy import stats

from mmcc import corpus as C
from mmcc.errors import DataError, ParameterError
from mmcc.rng import SplitMix64


def small_config(**overrides):
    base = dict(seed=42, num_videos=20, num_tasks=2, vocab_size=128, d_vis=16,
                steps_per_task=4, tokens_per_step=5, filler_pool_size=16)
    base.update(overrides)
    return C.CorpusConfig(**base)


def sequences_equal(a, b):
    if (a.video_id, a.task_id) != (b.video_id, b.task_id):
        return False
    if len(a.visual) != len(b.visual) or len(a.text) != len(b.text):
        return False
    for x, y in zip(a.visual, b.visual):
        if (x.t, x.label) != (y.t, y.label) or not np.array_equal(x.x, y.x):
            return False
    return all((x.t, x.label, x.tokens) == (y.t, y.label, y.tokens)
               for x, y in zip(a.text, b.text))


class TestTemplates:
    def test_same_seed_bit_identical(self):
        cfg = small_config()
        t1 = C.generate_templates(cfg)
        t2 = C.generate_templates(cfg)
        for a, b in zip(t1, t2):
            for sa, sb in zip(a.steps, b.steps):
                assert np.array_equal(sa.prototype, sb.prototype)
                assert sa.vocabulary == sb.vocabulary

    def test_vocabularies_pairwise_disjoint(self):
        cfg = small_config(num_tasks=2, steps_per_task=8, vocab_size=128)
        vocabs = [set(s.vocabulary)
                  for t in C.generate_templates(cfg) for s in t.steps]
        assert len(vocabs) == 16
        for a, b in itertools.combinations(vocabs, 2):
            assert not a & b
        filler = set(range(cfg.filler_pool_size))
        for v in vocabs:
            assert not v & filler

    def test_prototypes_unit_norm(self):
        for t in C.generate_templates(small_config()):
            for s in t.steps:
                assert np.linalg.norm(s.prototype) == pytest.approx(1.0)

    def test_prototype_cosines_near_zero(self):
        # Monte Carlo over >= 1000 pairs at d_vis=64
        cfg = small_config(num_tasks=6, steps_per_task=8, d_vis=64,
                           vocab_size=512, filler_pool_size=32)
        protos = [s.prototype for t in C.generate_templates(cfg) for s in t.steps]
        pairs = list(itertools.combinations(range(len(protos)), 2))
        assert len(pairs) >= 1000
        cosines = [abs(float(protos[i] @ protos[j])) for i, j in pairs]
        assert np.mean(cosines) < 0.15

    def test_vocab_too_small(self):
        with pytest.raises(ParameterError, match="vocab_size"):
            C.generate_templates(small_config(vocab_size=20))


class TestSynthesize:
    def test_noiseless_limit_emits_prototypes(self):
        cfg = small_config(sigma=0.0, jitter=0, p_filler=0.0)
        tpl = C.generate_templates(cfg)[0]
        seq = C.synthesize_sequence(tpl, cfg, video_id=0)
        for node in seq.visual:
            assert node.label != C.FILLER
            assert np.array_equal(node.x, tpl.steps[node.label].prototype)

    def test_zero_jitter_aligns_utterances_with_visual_times(self):
        cfg = small_config(jitter=0, p_filler=0.0)
        tpl = C.generate_templates(cfg)[0]
        seq = C.synthesize_sequence(tpl, cfg, video_id=3)
        visual_times = {n.t: n.label for n in seq.visual}
        for txt in seq.text:
            assert txt.t in visual_times
            # in-step text shares the label of the co-located visual node
            if visual_times[txt.t] != C.FILLER:
                assert txt.label == visual_times[txt.t]

    def test_filler_fraction_matches_probability(self):
        cfg = small_config(num_videos=100, p_filler=0.15)
        tpls = C.generate_templates(cfg)
        total = filler = 0
        for vid in range(100):
            seq = C.synthesize_sequence(tpls[vid % cfg.num_tasks], cfg, vid)
            nodes = [n.label for n in seq.visual] + [n.label for n in seq.text]
            total += len(nodes)
            filler += sum(1 for lab in nodes if lab == C.FILLER)
        assert filler / total == pytest.approx(0.15, abs=0.03)

    def test_labels_monotone_nondecreasing(self):
        cfg = small_config()
        tpls = C.generate_templates(cfg)
        for vid in range(20):
            seq = C.synthesize_sequence(tpls[vid % cfg.num_tasks], cfg, vid)
            for nodes in (seq.visual, seq.text):
                labs = [n.label for n in nodes if n.label != C.FILLER]
                assert labs == sorted(labs)
                times = [n.t for n in nodes]
                assert times == sorted(set(times))

    def test_tokens_come_from_step_vocab(self):
        cfg = small_config(p_filler=0.0)
        tpl = C.generate_templates(cfg)[1]
        seq = C.synthesize_sequence(tpl, cfg, video_id=7)
        for txt in seq.text:
            assert 4 <= len(txt.tokens) <= 8
            assert set(txt.tokens) <= set(tpl.steps[txt.label].vocabulary)


class TestSplits:
    def test_exact_default_split_of_100(self):
        corpus = C.make_corpus(small_config(num_videos=100))
        assert (len(corpus.train), len(corpus.val), len(corpus.test)) == (80, 15, 5)

    def test_all_train_fractions(self):
        corpus = C.make_corpus(small_config(num_videos=30, split_fractions=(1.0, 0.0, 0.0)))
        assert len(corpus.train) == 30
        assert not corpus.val and not corpus.test

    def test_splits_are_a_partition(self):
        corpus = C.make_corpus(small_config(num_videos=50))
        ids = [s.video_id for s in corpus.train + corpus.val + corpus.test]
        assert len(ids) == 50
        assert len(set(ids)) == 50

    def test_corpus_deterministic(self):
        c1 = C.make_corpus(small_config())
        c2 = C.make_corpus(small_config())
        for s1, s2 in zip(c1.train + c1.val + c1.test, c2.train + c2.val + c2.test):
            assert sequences_equal(s1, s2)


class TestFileRoundTrip:
    def test_round_trip_lossless(self, tmp_path):
        corpus = C.make_corpus(small_config(num_videos=12))
        C.write_corpus(corpus, tmp_path)
        loaded = C.read_corpus(tmp_path)
        for name in ("train", "val", "test"):
            for a, b in zip(corpus.split(name), loaded.split(name)):
                assert sequences_equal(a, b)

    def test_truncated_file_parse_error_with_line(self, tmp_path):
        corpus = C.make_corpus(small_config(num_videos=6))
        path = tmp_path / "seqs.jsonl"
        C.write_sequences(corpus.train, path)
        text = path.read_text()
        path.write_text(text[: len(text) // 2].rstrip("\n") + "\n")
        with pytest.raises(DataError, match=r":\d+:"):
            C.read_sequences(path)

    def test_empty_corpus_valid(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        C.write_sequences([], path)
        assert C.read_sequences(path) == []

    def test_missing_split_file(self, tmp_path):
        with pytest.raises(DataError, match="missing"):
            C.read_corpus(tmp_path)

    def test_byte_identical_rewrite(self, tmp_path):
        corpus = C.make_corpus(small_config(num_videos=8))
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        C.write_sequences(corpus.train, p1)
        C.write_sequences(C.read_sequences(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestSampleSegment:
    def _long_sequence(self):
        cfg = small_config(steps_per_task=12, dwell_min=6, dwell_max=10,
                           vocab_size=256, num_tasks=1, filler_pool_size=16)
        tpl = C.generate_templates(cfg)[0]
        return C.synthesize_sequence(tpl, cfg, video_id=1)

    def test_short_sequence_returned_whole(self):
        cfg = small_config()
        tpl = C.generate_templates(cfg)[0]
        seq = C.synthesize_sequence(tpl, cfg, video_id=2)
        seg = C.sample_segment(seq, max_len=500, rate_divisor=1, rng=SplitMix64(1))
        assert len(seg.visual) == len(seq.visual)
        assert len(seg.text) == len(seq.text)

    def test_rate_divisor_halves_visual_nodes(self):
        seq = self._long_sequence()
        rng = SplitMix64(5)
        full = C.sample_segment(seq, max_len=1000, rate_divisor=1, rng=rng)
        half = C.sample_segment(seq, max_len=1000, rate_divisor=2, rng=rng)
        assert abs(len(half.visual) - len(full.visual) / 2) <= 1
        assert len(half.text) == len(full.text)

    def test_window_length_bounded(self):
        seq = self._long_sequence()
        rng = SplitMix64(9)
        for _ in range(50):
            seg = C.sample_segment(seq, max_len=16, rate_divisor=1, rng=rng)
            times = seg.visual_times + seg.text_times
            assert max(times) - min(times) + 1 <= 16

    def test_start_positions_approximately_uniform(self):
        seq = self._long_sequence()
        tmin = min(seq.visual[0].t, seq.text[0].t)
        tmax = max(seq.visual[-1].t, seq.text[-1].t)
        max_len = 16
        n_starts = tmax - tmin + 1 - max_len + 1
        rng = SplitMix64(123)
        counts = np.zeros(n_starts)
        for _ in range(1000):
            seg = C.sample_segment(seq, max_len=max_len, rate_divisor=1, rng=rng)
            counts[seg.t0 - tmin] += 1
        # some windows lack 2 text nodes and are resampled; drop structural zeros
        observed = counts[counts > 0]
        _, p = stats.chisquare(observed)
        assert p > 0.01

    def test_too_short_sequence_skips(self):
        seq = C.NarratedSequence(video_id=0, task_id=0, visual=[], text=[])
        assert C.sample_segment(seq, 64, 1, SplitMix64(0)) is None

    def test_max_len_validation(self):
        seq = self._long_sequence()
        with pytest.raises(ParameterError):
            C.sample_segment(seq, max_len=3, rate_divisor=1, rng=SplitMix64(0))


def test_config_is_serializable_dataclass():
    cfg = small_config()
    assert dataclasses.asdict(cfg)["seed"] == 42
