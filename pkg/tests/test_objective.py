"""Objective tests: attention edges, losses, full cycles, contrastive loss."""

import math

import numpy as np
import pytest

from mmcc import corpus as C
from mmcc import model as M
from mmcc import objective as O
from mmcc import tensor as T
from mmcc.errors import ParameterError
from mmcc.rng import SplitMix64
from mmcc.tensor import Tensor

from conftest import tiny_corpus_config, tiny_model_config


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def first_trace(emb, params, cfg, rng, **kwargs):
    """Run cycles until one is not skipped (skips are legitimate under masks)."""
    for _ in range(50):
        trace = O.run_cycle(emb, params, cfg, rng, **kwargs)
        if isinstance(trace, O.CycleTrace):
            return trace
    raise AssertionError("no cycle produced a trace in 50 tries")


class TestAttend:
    def test_equal_scores_mean_of_values(self):
        keys = Tensor(np.tile(unit([1.0, 1.0, 0.0]), (4, 1)))
        values = Tensor(np.arange(8, dtype=float).reshape(4, 2))
        res = O.attend(Tensor(unit([0.0, 1.0, 1.0])), keys, values, tau=0.7)
        assert res.weights.data == pytest.approx(np.full(4, 0.25))
        assert res.output.data == pytest.approx(values.data.mean(axis=0))

    def test_low_temperature_selects_max_key(self):
        keys = Tensor(np.eye(3))
        values = Tensor(np.array([[10.0, 0.0], [0.0, 5.0], [-3.0, 2.0]]))
        res = O.attend(Tensor(unit([0.1, 0.9, 0.2])), keys, values, tau=0.001)
        assert np.abs(res.output.data - values.data[1]).max() < 1e-6

    def test_permutation_invariance(self):
        rng = SplitMix64(17)
        for trial in range(20):
            n, d = 8, 5
            q = Tensor(np.array(rng.gauss_vector(d)))
            kdata = np.array(rng.gauss_vector(n * d)).reshape(n, d)
            vdata = np.array(rng.gauss_vector(n * d)).reshape(n, d)
            base = O.attend(q, Tensor(kdata), Tensor(vdata), tau=0.3)
            perm = list(range(n))
            SplitMix64(trial).shuffle(perm)
            permuted = O.attend(q, Tensor(kdata[perm]), Tensor(vdata[perm]), tau=0.3)
            assert np.abs(base.output.data - permuted.output.data).max() < 1e-12
            assert np.abs(base.row[perm] - permuted.row).max() < 1e-12

    def test_row_sums_to_one_masked_exact_zero(self):
        rng = SplitMix64(19)
        keys = Tensor(np.array(rng.gauss_vector(30)).reshape(6, 5))
        q = Tensor(np.array(rng.gauss_vector(5)))
        res = O.attend(q, keys, None, tau=0.1, mask=[1, 3, 4])
        assert res.row.sum() == pytest.approx(1.0, abs=1e-9)
        assert res.row[0] == 0.0 and res.row[2] == 0.0 and res.row[5] == 0.0

    def test_empty_mask_rejected(self):
        keys = Tensor(np.eye(3))
        with pytest.raises(ParameterError, match="empty mask"):
            O.attend(Tensor(np.ones(3)), keys, None, tau=0.1, mask=[])

    def test_argmax_invariant_to_temperature(self):
        rng = SplitMix64(23)
        keys = Tensor(np.array(rng.gauss_vector(40)).reshape(8, 5))
        q = Tensor(np.array(rng.gauss_vector(5)))
        rows = [O.attend(q, keys, None, tau=t).row for t in (1.0, 0.1, 0.01)]
        assert len({int(np.argmax(r)) for r in rows}) == 1


class TestCrossModalEdge:
    def test_single_candidate_full_attention(self):
        pis = Tensor(unit([1.0, 2.0, 3.0]).reshape(1, 3))
        zs = Tensor(np.array([[5.0, 6.0, 7.0]]))
        res = O.cross_modal_edge(Tensor(unit([0.0, 1.0, 0.0])), pis, zs, tau=0.1)
        assert res.row == pytest.approx([1.0])
        assert np.array_equal(res.output.data, zs.data[0])

    def test_identical_candidates_uniform(self):
        pis = Tensor(np.tile(unit([1.0, 0.0]), (5, 1)))
        zs = Tensor(np.ones((5, 2)))
        res = O.cross_modal_edge(Tensor(unit([1.0, 1.0])), pis, zs, tau=0.1)
        assert res.row == pytest.approx(np.full(5, 0.2))


class TestForwardEdge:
    def test_mask_zeroes_past_and_self(self, tiny_params, tiny_embedding):
        emb = tiny_embedding
        i_alpha = 2
        z_state = T.row(emb.z_v, i_alpha)
        res, _ = O.forward_edge(tiny_params, z_state, emb.pi_v, emb.z_v,
                                tau=0.1, start_index=i_alpha)
        assert np.all(res.row[: i_alpha + 1] == 0.0)
        assert res.row.sum() == pytest.approx(1.0, abs=1e-9)

    def test_penultimate_start_selects_last_node(self, tiny_params, tiny_embedding):
        emb = tiny_embedding
        n = emb.pi_v.data.shape[0]
        res, _ = O.forward_edge(tiny_params, T.row(emb.z_v, n - 2), emb.pi_v,
                                emb.z_v, tau=0.1, start_index=n - 2)
        assert res.row[n - 1] == pytest.approx(1.0)
        assert np.array_equal(res.output.data, emb.z_v.data[n - 1])

    def test_last_node_start_skips(self, tiny_params, tiny_embedding):
        emb = tiny_embedding
        n = emb.pi_v.data.shape[0]
        with pytest.raises(O.SkipCycle):
            O.forward_edge(tiny_params, T.row(emb.z_v, n - 1), emb.pi_v,
                           emb.z_v, tau=0.1, start_index=n - 1)

    def test_untrained_rows_near_uniform(self):
        # statistical oracle at init, n=20 candidates, averaged over seeds:
        # unit temperature keeps rows close to flat (max < 3/n); the sharp
        # default tau=0.1 concentrates them more (oracle-measured ~0.25)
        ccfg = C.CorpusConfig(seed=5, num_videos=4, num_tasks=1, vocab_size=128,
                              steps_per_task=8, dwell_min=3, dwell_max=3,
                              filler_pool_size=16)
        corpus = C.make_corpus(ccfg)
        maxes = {0.1: [], 1.0: []}
        for seed in range(20):
            params = M.init_params(M.ModelConfig(), seed=seed)
            seg = C.sample_segment(corpus.train[0], max_len=20, rate_divisor=1,
                                   rng=SplitMix64(seed))
            emb = O.embed_segment(params, seg)
            assert emb.pi_v.data.shape[0] == 20
            for tau in maxes:
                res, _ = O.forward_edge(params, T.row(emb.z_v, 0), emb.pi_v,
                                        emb.z_v, tau=tau)
                maxes[tau].append(res.row.max())
        assert np.mean(maxes[1.0]) < 3 / 20
        assert np.mean(maxes[0.1]) < 0.35


class TestBackwardScores:
    def test_distribution_and_mask(self, tiny_params, tiny_embedding):
        emb = tiny_embedding
        z_future = T.row(emb.z_v, 4)
        res, _ = O.backward_scores(tiny_params, z_future, emb.pi_v, tau=0.1,
                                   est_index=4)
        assert res.row.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(res.row[4:] == 0.0)
        assert res.support == tuple(range(4))

    def test_eval_mode_full_support(self, tiny_params, tiny_embedding):
        emb = tiny_embedding
        n = emb.pi_v.data.shape[0]
        res, _ = O.backward_scores(tiny_params, T.row(emb.z_v, 0), emb.pi_v, tau=0.1)
        assert res.support == tuple(range(n))

    def test_first_node_estimate_skips(self, tiny_params, tiny_embedding):
        emb = tiny_embedding
        with pytest.raises(O.SkipCycle):
            O.backward_scores(tiny_params, T.row(emb.z_v, 0), emb.pi_v,
                              tau=0.1, est_index=0)


class TestCycleLoss:
    def test_one_hot_zero_loss(self):
        p = Tensor(np.array([0.0, 1.0, 0.0]))
        assert O.cycle_loss(p, 1).item() == pytest.approx(0.0, abs=1e-9)

    def test_uniform_log_n(self):
        p = Tensor(np.full(7, 1 / 7))
        assert O.cycle_loss(p, 3).item() == pytest.approx(math.log(7))

    def test_quarter_probability(self):
        p = Tensor(np.array([0.25, 0.75]))
        assert O.cycle_loss(p, 0).item() == pytest.approx(math.log(4))

    def test_floor_prevents_infinity(self):
        p = Tensor(np.array([0.0, 1.0]))
        assert O.cycle_loss(p, 0).item() == pytest.approx(-math.log(1e-12))


class TestSimilarityLoss:
    def test_identical_vectors(self):
        u = Tensor(unit([1.0, 2.0]))
        assert O.similarity_loss(u, u, u, 0.5).item() == pytest.approx(1.0)

    def test_orthogonal_vectors(self):
        a = Tensor(np.array([1.0, 0.0, 0.0]))
        b = Tensor(np.array([0.0, 1.0, 0.0]))
        c = Tensor(np.array([0.0, 0.0, 1.0]))
        assert O.similarity_loss(a, b, c, 0.5).item() == 0.0

    def test_hinge_arithmetic(self):
        # cos(a,b) = 0.7 and cos(b,c) = 0.2 -> max(0.2,0) + max(-0.3,0) = 0.2
        b = Tensor(np.array([1.0, 0.0, 0.0]))
        a = Tensor(np.array([0.7, math.sqrt(1 - 0.49), 0.0]))
        c = Tensor(np.array([0.2, 0.0, math.sqrt(1 - 0.04)]))
        assert O.similarity_loss(a, b, c, 0.5).item() == pytest.approx(0.2)


class TestConcreteness:
    def test_equal_similarities_uniform(self):
        pi_v = np.tile(unit([1.0, 1.0]), (6, 1))
        pi_t = np.tile(unit([1.0, 0.0]), (3, 1))
        conc_v, conc_t = O.concreteness(pi_v, pi_t, tau=0.1)
        assert conc_v.distribution == pytest.approx(np.full(6, 1 / 6))
        assert conc_t.distribution == pytest.approx(np.full(3, 1 / 3))

    def test_gap_concentration_softmax_oracle(self):
        # one node 0.5 above the rest: mass = e^5 / (e^5 + N - 1)
        for n in (4, 20):
            pi_v = np.tile(unit([1.0, 0.0]), (n, 1))
            pi_v[2] = unit([1.0, 1.0])
            pi_t = np.array([unit([1.0, 1.0]) * 0.0 + unit([1.0, 1.0])])
            # scores: node 2 -> 1.0, others -> cos(45deg) ~ 0.7071
            conc_v, _ = O.concreteness(pi_v, pi_t, tau=0.1)
            gap = 1.0 - unit([1.0, 0.0]) @ unit([1.0, 1.0])
            expect = math.exp(gap / 0.1) / (math.exp(gap / 0.1) + n - 1)
            assert conc_v.distribution[2] == pytest.approx(expect)
        # a 0.5 gap concentrates above 0.98 only for small candidate sets
        assert math.exp(5) / (math.exp(5) + 3) > 0.98

    def test_scores_bounded_by_cauchy_schwarz(self):
        rng = SplitMix64(29)
        pi_v = np.array([unit(rng.gauss_vector(6)) for _ in range(9)])
        pi_t = np.array([unit(rng.gauss_vector(6)) for _ in range(5)])
        conc_v, conc_t = O.concreteness(pi_v, pi_t)
        for conc in (conc_v, conc_t):
            assert np.all(conc.scores <= 1.0 + 1e-12)
            assert np.all(conc.scores >= -1.0 - 1e-12)
            assert conc.distribution.sum() == pytest.approx(1.0)


class TestCombinedLoss:
    def test_only_crossmodal(self):
        xm = Tensor(np.asarray(2.5))
        out = O.combined_loss(Tensor(np.asarray(9.0)), xm, None, 0.0, 1.0, 0.0)
        assert out.item() == 2.5

    def test_all_zero_weights(self):
        out = O.combined_loss(Tensor(np.asarray(1.0)), Tensor(np.asarray(2.0)),
                              Tensor(np.asarray(3.0)), 0.0, 0.0, 0.0)
        assert out.item() == 0.0

    def test_weighted_sum(self):
        out = O.combined_loss(Tensor(np.asarray(2.0)), Tensor(np.asarray(1.0)),
                              Tensor(np.asarray(0.5)), 1.0, 1.0, 3.0)
        assert out.item() == pytest.approx(4.5)


class TestRunCycle:
    def test_unimodal_flag_and_missing_xm_rows(self, tiny_params, tiny_embedding):
        cfg = tiny_model_config(p_unimodal=1.0)
        trace = first_trace(tiny_embedding, tiny_params, cfg, SplitMix64(5))
        assert trace.unimodal
        assert trace.xm_row_alpha is None and trace.xm_row_beta is None

    def test_fused_cycle_has_xm_rows(self, tiny_params, tiny_embedding):
        cfg = tiny_model_config(p_unimodal=0.0)
        trace = first_trace(tiny_embedding, tiny_params, cfg, SplitMix64(5))
        assert trace.xm_row_alpha is not None
        assert trace.xm_row_alpha.sum() == pytest.approx(1.0, abs=1e-9)

    def test_deterministic_given_rng(self, tiny_params, tiny_embedding):
        cfg = tiny_model_config()
        t1 = O.run_cycle(tiny_embedding, tiny_params, cfg, SplitMix64(42))
        t2 = O.run_cycle(tiny_embedding, tiny_params, cfg, SplitMix64(42))
        assert isinstance(t1, O.CycleTrace) and isinstance(t2, O.CycleTrace)
        assert (t1.start_modality, t1.i_alpha, t1.unimodal) == \
               (t2.start_modality, t2.i_alpha, t2.unimodal)
        assert np.array_equal(t1.back_row, t2.back_row)
        assert t1.loss_cycle.item() == t2.loss_cycle.item()

    def test_mask_soundness_over_many_cycles(self, tiny_params, tiny_embedding):
        cfg = tiny_model_config()
        rng = SplitMix64(77)
        seen = 0
        for _ in range(100):
            trace = O.run_cycle(tiny_embedding, tiny_params, cfg, rng,
                                constrained=True)
            if isinstance(trace, O.CycleSkip):
                continue
            seen += 1
            assert np.all(trace.fwd_row[: trace.i_alpha + 1] == 0.0)
            assert np.all(trace.back_row[trace.est_index:] == 0.0)
            assert trace.i_alpha in trace.back_support
        assert seen > 30

    def test_across_path_runs(self, tiny_params, tiny_embedding):
        cfg = tiny_model_config(cycle_path="across")
        rng = SplitMix64(9)
        traces = [O.run_cycle(tiny_embedding, tiny_params, cfg, rng)
                  for _ in range(20)]
        ok = [t for t in traces if isinstance(t, O.CycleTrace)]
        assert ok
        for t in ok:
            assert t.back_row.sum() == pytest.approx(1.0, abs=1e-9)

    def test_forced_cycle_from_edge_primitives(self):
        # 4 orthogonal nodes; a query aimed at the start index at tau=0.1
        # concentrates the score vector there: loss < 0.01
        keys = Tensor(np.eye(4))
        res = O.attend(Tensor(np.eye(4)[1]), keys, None, tau=0.1)
        loss = O.cycle_loss(res.weights, 1)
        expect = -math.log(math.exp(10) / (math.exp(10) + 3))
        assert loss.item() == pytest.approx(expect, rel=1e-9)
        assert loss.item() < 0.01

    def test_gradients_reach_every_block(self, tiny_params, tiny_embedding):
        cfg = tiny_model_config(p_unimodal=0.0)
        trace = first_trace(tiny_embedding, tiny_params, cfg, SplitMix64(4),
                            constrained=True)
        tiny_params.zero_grads()
        T.backward(trace.loss_cycle)
        for block in ("phi_v.0.w", "phi_t.embed", "pi_v.0.w", "pi_t.0.w",
                      "fuse.0.w", "g_trunk.0.w", "g_fwd.1.w", "g_back.1.w"):
            grad = tiny_params[block].grad
            assert grad is not None and np.abs(grad).max() > 0, block


class TestCrossModalLoss:
    def test_all_logits_equal_closed_form(self):
        # every similarity equal: each anchor term is -log(sum of its
        # window weights / candidate count); oracle enumerates windows
        u = unit([1.0, 0.0])
        tv, tt = [0, 1, 2], [0, 2]
        pi_v = Tensor(np.tile(u, (3, 1)))
        pi_t = Tensor(np.tile(u, (2, 1)))
        k = 1
        loss = O.crossmodal_loss_from_embeddings([pi_v], [pi_t], [tv], [tt], k).item()

        def window_sum(anchors, cands):
            sums = []
            for t in anchors:
                g = min(range(len(cands)), key=lambda j: (abs(cands[j] - t), j))
                lo, hi = max(0, g - k), min(len(cands), g + k + 1)
                sums.append(sum(math.exp(-0.5 * (t - cands[j]) ** 2)
                                for j in range(lo, hi)))
            return sums

        terms = [-math.log(s / len(tt)) for s in window_sum(tv, tt)]
        terms += [-math.log(s / len(tv)) for s in window_sum(tt, tv)]
        assert loss == pytest.approx(sum(terms) / len(terms))

    def test_gaussian_weight_at_unit_gap(self):
        # one pair one step apart: both anchor terms are exactly delta^2/2
        u = unit([1.0, 1.0])
        loss = O.crossmodal_loss_from_embeddings(
            [Tensor(u.reshape(1, 2))], [Tensor(u.reshape(1, 2))], [[0]], [[1]], 0)
        assert loss.item() == pytest.approx(0.5)
        assert math.exp(-0.5) == pytest.approx(0.6065, abs=1e-4)

    def test_dominant_logit_limit(self):
        # scaled embeddings make the aligned pair dominate: loss -> 0
        u1, u2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        for s, bound in ((1.0, 0.35), (10.0, 1e-8)):
            pi_v = Tensor(np.stack([u1, u2]) * s)
            pi_t = Tensor(np.stack([u1, u2]) * s)
            loss = O.crossmodal_loss_from_embeddings(
                [pi_v], [pi_t], [[0, 1]], [[0, 1]], 0).item()
            expect = math.log(1 + math.exp(-s * s))
            assert loss == pytest.approx(expect, rel=1e-6)
            assert loss < bound

    def test_batch_negatives_increase_loss(self, tiny_params, tiny_corpus):
        rng = SplitMix64(31)
        segs = [C.sample_segment(s, 64, 1, rng) for s in tiny_corpus.train[:4]]
        one = O.crossmodal_loss(segs[:1], tiny_params, k=1).item()
        batched = O.crossmodal_loss(segs, tiny_params, k=1).item()
        assert batched > one  # more negatives in every denominator

    def test_gradient_matches_finite_differences(self, tiny_params, tiny_corpus):
        rng = SplitMix64(37)
        segs = [C.sample_segment(s, 64, 1, rng) for s in tiny_corpus.train[:2]]

        def fn():
            return O.crossmodal_loss(segs, tiny_params, k=1)

        blocks = {k: tiny_params[k] for k in ("phi_v.0.w", "pi_t.0.w", "phi_t.embed")}
        assert T.grad_check(fn, blocks, max_entries=10).max_error < 1e-4


def test_full_cycle_loss_gradcheck_toy_segment(tiny_params, tiny_corpus):
    seg = C.sample_segment(tiny_corpus.train[1], max_len=12, rate_divisor=1,
                           rng=SplitMix64(8))
    cfg = tiny_model_config(p_unimodal=0.0)
    # pick a start seed whose constrained cycle is not skipped
    inner_seed = next(s for s in range(100) if isinstance(
        O.run_cycle(seg, tiny_params, cfg, SplitMix64(s), constrained=True),
        O.CycleTrace))

    def fn():
        trace = O.run_cycle(seg, tiny_params, cfg, SplitMix64(inner_seed),
                            constrained=True)
        assert isinstance(trace, O.CycleTrace)
        return O.combined_loss(trace.loss_cycle, None, trace.loss_sim, 1.0, 0.0, 3.0)

    blocks = {k: tiny_params[k] for k in
              ("phi_v.0.w", "phi_t.embed", "pi_v.0.w", "fuse.0.w",
               "g_trunk.0.w", "g_fwd.0.w", "g_back.1.w")}
    report = T.grad_check(fn, blocks, max_entries=8)
    assert report.max_error < 1e-4
