"""Cycle-consistency objective: soft-attention edges and all loss terms.

A cycle starts at a node in one modality, optionally retrieves its
counterpart in the other modality (soft cross-modal attention), predicts
a latent future, retrieves the future node (forward temporal attention),
builds the future state the same way, then predicts backward. The
backward attention distribution over the start modality's nodes is the
score vector; the loss is the negative log score of the start node.

Temporal masks (training only): the forward edge may only attend to
nodes after the start index, the backward edge only to nodes before the
estimated future index. Masked entries are exactly zero. Cycles whose
support becomes empty, or whose start falls outside the backward
support, are skipped and counted rather than silently dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T
from .corpus import Segment
from .errors import ParameterError
from .model import ModelParams
from .rng import SplitMix64
from .tensor import Tensor


class SkipCycle(Exception):
    """Raised when a cycle cannot be formed; carries the exclusion reason."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def np_softmax(scores: np.ndarray, tau: float) -> np.ndarray:
    z = scores / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

@dataclass
class AttendResult:
    output: Tensor | None      # value-space vector, None when values is None
    weights: Tensor            # attention over the support, shape (len(support),)
    support: tuple[int, ...]   # kept key indices, ascending
    row: np.ndarray            # full-length row; exactly 0 off support


def attend(query: Tensor, keys: Tensor, values: Tensor | None, tau: float,
           mask=None) -> AttendResult:
    """Soft retrieval: temperature softmax of query-key dot products.

    ``mask`` restricts keys/values to the given indices; entries outside
    the mask get exactly zero attention. Key/value row order does not
    affect the output vector (the row permutes with it).
    """
    n = keys.data.shape[0]
    if values is not None and values.data.shape[0] != n:
        raise ParameterError(
            f"attend: {n} keys but {values.data.shape[0]} values")
    support = tuple(range(n)) if mask is None else tuple(sorted(mask))
    if not support:
        raise ParameterError("attend: empty mask")
    if support[0] < 0 or support[-1] >= n:
        raise ParameterError(f"attend: mask indices out of range for {n} keys")

    keys_sel = keys if len(support) == n else T.gather_rows(keys, list(support))
    logits = T.matmul(T.as_row_matrix(query), T.transpose(keys_sel))
    weights = T.as_vector(T.softmax_temp(logits, tau))
    output = None
    if values is not None:
        vals_sel = values if len(support) == n else T.gather_rows(values, list(support))
        output = T.as_vector(T.matmul(T.as_row_matrix(weights), vals_sel))
    row = np.zeros(n)
    row[list(support)] = weights.data
    return AttendResult(output=output, weights=weights, support=support, row=row)


# ---------------------------------------------------------------------------
# Cycle edges
# ---------------------------------------------------------------------------

def cross_modal_edge(query_pi: Tensor, other_pis: Tensor, other_zs: Tensor,
                     tau: float) -> AttendResult:
    """Retrieve the other modality's counterpart of a node (soft)."""
    if other_pis.data.shape[0] == 0:
        raise SkipCycle("empty other modality")
    return attend(query_pi, other_pis, other_zs, tau)


def forward_edge(params: ModelParams, z_state: Tensor, node_pis: Tensor,
                 node_zs: Tensor, tau: float,
                 start_index: int | None = None) -> tuple[AttendResult, Tensor]:
    """Predict a latent future from the state and retrieve the future node.

    With ``start_index`` given (training-time mask) only nodes strictly
    after it are candidates. Returns the attention result and the query.
    """
    n = node_pis.data.shape[0]
    query = M.predict_forward(params, z_state)
    mask = None
    if start_index is not None:
        if start_index >= n - 1:
            raise SkipCycle("forward support empty: start is the last node")
        mask = range(start_index + 1, n)
    return attend(query, node_pis, node_zs, tau, mask=mask), query


def backward_scores(params: ModelParams, z_future: Tensor, node_pis: Tensor,
                    tau: float, est_index: int | None = None) -> tuple[AttendResult, Tensor]:
    """Normalized similarity of the past prediction against all nodes.

    Values are the identity, so the attention weights themselves are the
    score vector. With ``est_index`` given (training-time mask) only
    nodes strictly before the estimated future index are candidates.
    """
    mask = None
    if est_index is not None:
        if est_index <= 0:
            raise SkipCycle("backward support empty: estimated index is the first node")
        mask = range(0, est_index)
    query = M.predict_backward(params, z_future)
    return attend(query, node_pis, None, tau, mask=mask), query


def estimate_future_index(query_fwd: np.ndarray, node_pis: np.ndarray) -> int:
    """Index of the node most similar to the latent future prediction.

    Ties break to the lowest index. The argmax runs over all nodes,
    regardless of any forward-edge mask.
    """
    return int(np.argmax(node_pis @ query_fwd))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def cycle_loss(p: Tensor, index_in_p: int) -> Tensor:
    """-log p[index], with p floored at 1e-12 before the log."""
    return T.neg(T.log(T.clamp_min(T.index_element(p, index_in_p), 1e-12)))


def similarity_loss(z_a: Tensor, z_b: Tensor, z_back: Tensor, margin: float) -> Tensor:
    """Hinge penalty on embedding similarity along the temporal edges."""
    if not 0.0 <= margin <= 1.0:
        raise ParameterError(f"margin must be in [0,1], got {margin}")
    m = Tensor(np.asarray(margin))
    first = T.relu(T.sub(T.cosine(z_a, z_b), m))
    second = T.relu(T.sub(T.cosine(z_b, z_back), m))
    return T.add(first, second)


@dataclass
class ConcretenessScores:
    scores: np.ndarray         # per node: highest cross-modal similarity, in [-1, 1]
    distribution: np.ndarray   # tau-softmax of the scores


def concreteness(pi_v: np.ndarray, pi_t: np.ndarray,
                 tau: float = 0.1) -> tuple[ConcretenessScores, ConcretenessScores]:
    """Start-sampling prior per modality: row/column max of the similarity
    matrix, softened by a temperature softmax. Numpy-level (not differentiated)."""
    if pi_v.shape[0] == 0 or pi_t.shape[0] == 0:
        raise ParameterError("concreteness needs nodes in both modalities")
    sims = pi_v @ pi_t.T
    s_v = sims.max(axis=1)
    s_t = sims.max(axis=0)
    return (ConcretenessScores(s_v, np_softmax(s_v, tau)),
            ConcretenessScores(s_t, np_softmax(s_t, tau)))


def combined_loss(loss_cycle: Tensor | None, loss_xm: Tensor | None,
                  loss_sim: Tensor | None, lambda1: float, lambda2: float,
                  lambda3: float) -> Tensor:
    """Weighted sum of the three loss terms; None terms count as zero."""
    if min(lambda1, lambda2, lambda3) < 0:
        raise ParameterError("loss weights must be nonnegative")
    total = Tensor(np.asarray(0.0))
    for weight, term in ((lambda1, loss_cycle), (lambda2, loss_xm), (lambda3, loss_sim)):
        if weight != 0.0 and term is not None:
            total = T.add(total, T.scale(term, weight))
    return total


# ---------------------------------------------------------------------------
# Full cycle
# ---------------------------------------------------------------------------

@dataclass
class SegmentEmbedding:
    """One segment's embeddings, shared by cycle and contrastive losses."""
    segment: Segment
    z_v: Tensor
    z_t: Tensor
    pi_v: Tensor
    pi_t: Tensor


def embed_segment(params: ModelParams, segment: Segment) -> SegmentEmbedding:
    z_v = M.embed_visual(params, segment.visual_matrix)
    z_t = M.embed_text_batch(params, [n.tokens for n in segment.text])
    return SegmentEmbedding(segment=segment, z_v=z_v, z_t=z_t,
                            pi_v=M.project(params, z_v, "V"),
                            pi_t=M.project(params, z_t, "T"))


@dataclass
class CycleTrace:
    start_modality: str            # "V" or "T"
    i_alpha: int                   # start index within the start modality
    unimodal: bool
    constrained: bool
    xm_row_alpha: np.ndarray | None
    xm_row_beta: np.ndarray | None
    fwd_row: np.ndarray
    est_index: int
    back_row: np.ndarray           # the score vector p over start-modality nodes
    back_support: tuple[int, ...]
    loss_cycle: Tensor
    loss_sim: Tensor | None


@dataclass
class CycleSkip:
    reason: str


def _sample_start(emb: SegmentEmbedding, modality: str, config,
                  rng: SplitMix64) -> int:
    n = emb.pi_v.data.shape[0] if modality == "V" else emb.pi_t.data.shape[0]
    if config.start_sampling == "random":
        return rng.randint(n)
    conc_v, conc_t = concreteness(emb.pi_v.data, emb.pi_t.data, config.tau_start)
    dist = conc_v.distribution if modality == "V" else conc_t.distribution
    return rng.sample_distribution(dist)


def run_cycle(segment, params: ModelParams, config, rng: SplitMix64,
              constrained: bool | None = None,
              start: tuple[str, int] | None = None) -> CycleTrace | CycleSkip:
    """One full cycle on a segment.

    Draw order: start modality (uniform coin), start node (concreteness
    or uniform), then one unimodal coin for the whole cycle. Temporal
    masks apply when ``constrained`` (default: the config's max_index
    flag); evaluation passes constrained=False. ``start`` overrides the
    sampled start (used by deterministic evaluations).
    """
    emb = segment if isinstance(segment, SegmentEmbedding) else \
        embed_segment(params, segment)
    seg = emb.segment
    if len(seg.visual) < 2 or len(seg.text) < 2:
        return CycleSkip("segment needs at least 2 nodes per modality")
    if constrained is None:
        constrained = config.max_index
    tau = config.tau_attn

    if start is None:
        modality = "V" if rng.coin(0.5) else "T"
        i_alpha = _sample_start(emb, modality, config, rng)
        unimodal = rng.coin(config.p_unimodal)
    else:
        modality, i_alpha = start
        unimodal = config.p_unimodal >= 1.0

    if modality == "V":
        z_m, pi_m, t_m = emb.z_v, emb.pi_v, seg.visual_times
        z_o, pi_o, t_o = emb.z_t, emb.pi_t, seg.text_times
    else:
        z_m, pi_m, t_m = emb.z_t, emb.pi_t, seg.text_times
        z_o, pi_o, t_o = emb.z_v, emb.pi_v, seg.visual_times
    other = "T" if modality == "V" else "V"

    z_start = T.row(z_m, i_alpha)
    try:
        if config.cycle_path == "within":
            return _cycle_within(params, config, tau, constrained, modality,
                                 i_alpha, unimodal, z_start, z_m, pi_m, z_o, pi_o)
        return _cycle_across(params, config, tau, constrained, modality, other,
                             i_alpha, unimodal, z_start, z_m, pi_m, t_m,
                             z_o, pi_o, t_o)
    except SkipCycle as skip:
        return CycleSkip(skip.reason)


def _retrieved_back_state(z_m: Tensor, back: AttendResult) -> Tensor:
    """Backward retrieval in embedding space: reuse the score weights as
    attention over the node embeddings (values replaced by z)."""
    vals = z_m if len(back.support) == z_m.data.shape[0] else \
        T.gather_rows(z_m, list(back.support))
    return T.as_vector(T.matmul(T.as_row_matrix(back.weights), vals))


def _finish_cycle(config, i_alpha: int, back: AttendResult, z_a: Tensor,
                  z_b: Tensor, z_m: Tensor) -> tuple[Tensor, Tensor | None]:
    if i_alpha not in back.support:
        raise SkipCycle("start node outside backward support")
    loss = cycle_loss(back.weights, back.support.index(i_alpha))
    sim = None
    if config.sim_loss:
        sim = similarity_loss(z_a, z_b, _retrieved_back_state(z_m, back),
                              config.margin)
    return loss, sim


def _cycle_within(params, config, tau, constrained, modality, i_alpha, unimodal,
                  z_start, z_m, pi_m, z_o, pi_o) -> CycleTrace:
    xm_row_a = xm_row_b = None
    if unimodal:
        z_alpha = z_start
    else:
        xm_a = cross_modal_edge(T.row(pi_m, i_alpha), pi_o, z_o, tau)
        xm_row_a = xm_a.row
        z_alpha = M.fuse(params, z_start, xm_a.output)

    fwd, q_fwd = forward_edge(params, z_alpha, pi_m, z_m, tau,
                              start_index=i_alpha if constrained else None)
    z_m_beta = fwd.output
    est = estimate_future_index(q_fwd.data, pi_m.data)

    if unimodal:
        z_beta = z_m_beta
    else:
        pi_beta = M.project(params, z_m_beta, modality)
        xm_b = cross_modal_edge(pi_beta, pi_o, z_o, tau)
        xm_row_b = xm_b.row
        z_beta = M.fuse(params, z_m_beta, xm_b.output)

    back, _ = backward_scores(params, z_beta, pi_m, tau,
                              est_index=est if constrained else None)
    loss, sim = _finish_cycle(config, i_alpha, back, z_start, z_m_beta, z_m)
    return CycleTrace(start_modality=modality, i_alpha=i_alpha, unimodal=unimodal,
                      constrained=constrained, xm_row_alpha=xm_row_a,
                      xm_row_beta=xm_row_b, fwd_row=fwd.row, est_index=est,
                      back_row=back.row, back_support=back.support,
                      loss_cycle=loss, loss_sim=sim)


def _cycle_across(params, config, tau, constrained, modality, other, i_alpha,
                  unimodal, z_start, z_m, pi_m, t_m, z_o, pi_o, t_o) -> CycleTrace:
    """Edge order M -> M': future sought in the other modality, cycle closed
    back through M. Temporal masks use node times (the modalities' index
    axes are not aligned)."""
    xm_row_a = xm_row_b = None
    if unimodal:
        z_alpha = z_start
    else:
        xm_a = cross_modal_edge(T.row(pi_m, i_alpha), pi_o, z_o, tau)
        xm_row_a = xm_a.row
        z_alpha = M.fuse(params, z_start, xm_a.output)

    mask = None
    if constrained:
        t_start = t_m[i_alpha]
        mask = [j for j, tj in enumerate(t_o) if tj > t_start]
        if not mask:
            raise SkipCycle("forward support empty: no later node in other modality")
    q_fwd = M.predict_forward(params, z_alpha)
    fwd = attend(q_fwd, pi_o, z_o, tau, mask=mask)
    z_o_beta = fwd.output
    est = estimate_future_index(q_fwd.data, pi_o.data)

    if unimodal:
        z_beta = z_o_beta
    else:
        pi_beta = M.project(params, z_o_beta, other)
        xm_b = cross_modal_edge(pi_beta, pi_m, z_m, tau)
        xm_row_b = xm_b.row
        z_beta = M.fuse(params, z_o_beta, xm_b.output)

    back_mask = None
    if constrained:
        t_est = t_o[est]
        back_mask = [i for i, ti in enumerate(t_m) if ti < t_est]
        if not back_mask:
            raise SkipCycle("backward support empty: no node before estimated future")
    q_back = M.predict_backward(params, z_beta)
    back = attend(q_back, pi_m, None, tau, mask=back_mask)
    loss, sim = _finish_cycle(config, i_alpha, back, z_start, z_o_beta, z_m)
    return CycleTrace(start_modality=modality, i_alpha=i_alpha, unimodal=unimodal,
                      constrained=constrained, xm_row_alpha=xm_row_a,
                      xm_row_beta=xm_row_b, fwd_row=fwd.row, est_index=est,
                      back_row=back.row, back_support=back.support,
                      loss_cycle=loss, loss_sim=sim)


# ---------------------------------------------------------------------------
# Cross-modal contrastive loss
# ---------------------------------------------------------------------------

def _nearest_index(times: list[int], t: int) -> int:
    """Index whose time is nearest to t (ties to the earlier node)."""
    return min(range(len(times)), key=lambda i: (abs(times[i] - t), i))


def _window_weights(anchor_times, cand_times, k: int) -> np.ndarray:
    """Positive-pair weight matrix for one video: Gaussian kernel of the
    time gap, over a +/-k node window around each anchor's nearest
    counterpart; zero elsewhere. weight(0) would be 1."""
    w = np.zeros((len(anchor_times), len(cand_times)))
    for i, t in enumerate(anchor_times):
        g = _nearest_index(cand_times, t)
        for j in range(max(0, g - k), min(len(cand_times), g + k + 1)):
            dt = t - cand_times[j]
            w[i, j] = np.exp(-0.5 * dt * dt)
    return w


def crossmodal_loss_from_embeddings(pi_v_list: list[Tensor], pi_t_list: list[Tensor],
                                    tv_list, tt_list, k: int) -> Tensor:
    """Contrastive alignment over a batch of videos.

    Per anchor node (every node, both directions): the positives are the
    Gaussian-weighted window around its temporally nearest counterpart in
    the same video; the denominator spans all vision-text pairs in the
    whole batch (same-video and cross-video negatives). Returns the mean
    of -log(weighted positives / all pairs) over anchors.
    """
    pv = pi_v_list[0] if len(pi_v_list) == 1 else T.concat_rows(pi_v_list)
    pt = pi_t_list[0] if len(pi_t_list) == 1 else T.concat_rows(pi_t_list)

    nv_total, nt_total = pv.data.shape[0], pt.data.shape[0]
    wv = np.zeros((nv_total, nt_total))
    wt = np.zeros((nv_total, nt_total))
    iv = it = 0
    for pi_v, pi_t, tv, tt in zip(pi_v_list, pi_t_list, tv_list, tt_list):
        nv, nt = pi_v.data.shape[0], pi_t.data.shape[0]
        wv[iv:iv + nv, it:it + nt] = _window_weights(tv, tt, k)
        wt[iv:iv + nv, it:it + nt] = _window_weights(tt, tv, k).T
        iv += nv
        it += nt

    sims = T.matmul(pv, T.transpose(pt))
    e = T.exp(sims)
    ones_t = Tensor(np.ones((nt_total, 1)))
    ones_v = Tensor(np.ones((nv_total, 1)))

    den_v = T.as_vector(T.matmul(e, ones_t))                      # per V anchor
    den_t = T.as_vector(T.matmul(T.transpose(e), ones_v))         # per T anchor
    num_v = T.as_vector(T.matmul(T.mul_const(e, wv), ones_t))
    num_t = T.as_vector(T.matmul(T.transpose(T.mul_const(e, wt)), ones_v))

    total = T.add(T.sum_all(T.sub(T.log(den_v), T.log(num_v))),
                  T.sum_all(T.sub(T.log(den_t), T.log(num_t))))
    return T.scale(total, 1.0 / (nv_total + nt_total))


def crossmodal_loss(segments, params: ModelParams, k: int) -> Tensor:
    """Batch contrastive loss from segments or pre-embedded segments."""
    embs = [s if isinstance(s, SegmentEmbedding) else embed_segment(params, s)
            for s in segments]
    return crossmodal_loss_from_embeddings(
        [e.pi_v for e in embs], [e.pi_t for e in embs],
        [e.segment.visual_times for e in embs],
        [e.segment.text_times for e in embs], k)
