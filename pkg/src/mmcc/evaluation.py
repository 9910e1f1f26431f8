"""Zero-shot evaluation suite over trained checkpoints.

Everything here is read-only over the parameters and deterministic given
(checkpoint, split, seed). Transition scoring composes the learned
future/past queries into P(u->v) = P_fwd(v|u) * P_back(u|v) * P(u) * P(v),
evaluated in log space with a 1e-12 floor; baseline variants substitute
their predictive head for the future query and carry no backward term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import objective as O
from . import ordering as ORD
from . import tensor as T
from .corpus import FILLER, NarratedSequence, sample_segment
from .errors import DataError, ParameterError
from .model import ModelConfig, ModelParams
from .objective import np_softmax
from .rng import SplitMix64, derive_seed
from .tensor import Tensor

_EVAL_STREAM = 0xE7A10A7E
_PROBE_STREAM = 0x9B0BE5


def percentile_rank(scores, gt_index: int) -> float:
    """Rank of the ground-truth candidate mapped to [0, 100].

    100 = ranked first, 0 = ranked last; ties take the average rank.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    if n < 2:
        raise ParameterError("percentile_rank needs at least 2 candidates")
    s = scores[gt_index]
    greater = int((scores > s).sum())
    ties = int((scores == s).sum())
    rank = greater + (ties + 1) / 2
    return 100.0 * (n - rank) / (n - 1)


def _np_softmax_rows(scores: np.ndarray, tau: float) -> np.ndarray:
    z = scores / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def _nearest_index(times, t) -> int:
    return min(range(len(times)), key=lambda i: (abs(times[i] - t), i))


# ---------------------------------------------------------------------------
# Cycle / cross-modal percentile ranks
# ---------------------------------------------------------------------------

@dataclass
class CycleEvalReport:
    cycle_rank: float
    crossmodal_rank: float
    cycle_back_accuracy: float
    fwd_self_attention: float          # mass on the start node (collapse probe)
    per_modality: dict
    n_cycles: int
    excluded: int

    def to_dict(self) -> dict:
        return {"cycle_rank": self.cycle_rank,
                "crossmodal_rank": self.crossmodal_rank,
                "cycle_back_accuracy": self.cycle_back_accuracy,
                "fwd_self_attention": self.fwd_self_attention,
                "per_modality": self.per_modality,
                "n_cycles": self.n_cycles, "excluded": self.excluded}


def _aligned_gt(nodes_m, nodes_o, i: int) -> int | None:
    """Ground-truth counterpart of node i: the temporally nearest node of
    the other modality with the same step label. Filler nodes (and nodes
    whose step never reached the other modality) have no counterpart."""
    label = nodes_m[i].label
    if label == FILLER:
        return None
    cands = [j for j, n in enumerate(nodes_o) if n.label == label]
    if not cands:
        return None
    t = nodes_m[i].t
    return min(cands, key=lambda j: (abs(nodes_o[j].t - t), j))


def eval_cycle(sequences: list[NarratedSequence], params: ModelParams,
               config: ModelConfig, seed: int, n_cycles: int = 500,
               max_len: int = 64, rate_divisor: int = 1) -> CycleEvalReport:
    """Unconstrained cycles from uniformly sampled start nodes.

    Cycle rank scores the start node under the backward score vector
    (label-free). Cross-modal rank scores the aligned other-modality
    node (nearest with the same step label) under the projection
    similarities; anchors without an aligned counterpart are skipped.
    """
    if not sequences:
        raise DataError("eval_cycle: empty split")
    rng = SplitMix64(derive_seed(seed, _EVAL_STREAM))
    stats = {"V": {"cycle": [], "xm": [], "back": [], "self": []},
             "T": {"cycle": [], "xm": [], "back": [], "self": []}}
    excluded = 0
    with T.no_grad():
        while sum(len(s["cycle"]) for s in stats.values()) < n_cycles:
            seq = sequences[rng.randint(len(sequences))]
            seg = sample_segment(seq, max_len, rate_divisor, rng)
            if seg is None:
                excluded += 1
                continue
            emb = O.embed_segment(params, seg)
            modality = "V" if rng.coin(0.5) else "T"
            pi_m, pi_o = ((emb.pi_v, emb.pi_t) if modality == "V"
                          else (emb.pi_t, emb.pi_v))
            nodes_m, nodes_o = ((seg.visual, seg.text) if modality == "V"
                                else (seg.text, seg.visual))
            i_alpha = rng.randint(pi_m.data.shape[0])
            trace = O.run_cycle(emb, params, config, rng, constrained=False,
                                start=(modality, i_alpha))
            if isinstance(trace, O.CycleSkip):
                excluded += 1
                continue
            bucket = stats[modality]
            bucket["cycle"].append(percentile_rank(trace.back_row, i_alpha))
            bucket["back"].append(float(np.argmax(trace.back_row) == i_alpha))
            bucket["self"].append(float(trace.fwd_row[i_alpha])
                                  if config.cycle_path == "within" else 0.0)
            gt = _aligned_gt(nodes_m, nodes_o, i_alpha)
            if gt is not None:
                xm_scores = pi_m.data[i_alpha] @ pi_o.data.T
                bucket["xm"].append(percentile_rank(xm_scores, gt))
            else:
                excluded += 1

    def agg(key):
        vals = stats["V"][key] + stats["T"][key]
        return float(np.mean(vals)) if vals else float("nan")

    per_modality = {m: {k: (float(np.mean(v)) if v else float("nan"))
                        for k, v in stats[m].items()} for m in ("V", "T")}
    return CycleEvalReport(cycle_rank=agg("cycle"), crossmodal_rank=agg("xm"),
                           cycle_back_accuracy=agg("back"),
                           fwd_self_attention=agg("self"),
                           per_modality=per_modality,
                           n_cycles=sum(len(s["cycle"]) for s in stats.values()),
                           excluded=excluded)


# ---------------------------------------------------------------------------
# Transition graph
# ---------------------------------------------------------------------------

@dataclass
class TransitionGraph:
    node_ids: list
    node_times: list[int]
    log_p: np.ndarray            # (n,n) log P(u->v)
    p_fwd: np.ndarray            # row u: distribution of futures v
    p_back: np.ndarray | None    # row v: distribution of pasts u (mmcc only)
    priors: np.ndarray

    @property
    def n(self) -> int:
        return len(self.node_ids)


def _assemble_graph(p_fwd, p_back, priors, node_ids, node_times) -> TransitionGraph:
    floor = 1e-12
    lp = np.log(np.maximum(p_fwd, floor))
    if p_back is not None:
        lp = lp + np.log(np.maximum(p_back, floor)).T
    logpri = np.log(np.maximum(priors, floor))
    lp = lp + logpri[:, None] + logpri[None, :]
    return TransitionGraph(node_ids=list(node_ids), node_times=list(node_times),
                           log_p=lp, p_fwd=p_fwd, p_back=p_back, priors=priors)


def _mmcc_graph(params, config, states: np.ndarray, keys_pi: np.ndarray,
                priors: np.ndarray, node_ids, node_times) -> TransitionGraph:
    with T.no_grad():
        q_fwd = M.predict_forward(params, Tensor(states)).data
        q_back = M.predict_backward(params, Tensor(states)).data
    p_fwd = _np_softmax_rows(q_fwd @ keys_pi.T, config.tau_attn)
    p_back = _np_softmax_rows(q_back @ keys_pi.T, config.tau_attn)
    return _assemble_graph(p_fwd, p_back, priors, node_ids, node_times)


def _baseline_graph(params, config, states: np.ndarray, keys: np.ndarray,
                    priors: np.ndarray, node_ids, node_times) -> TransitionGraph:
    """RA/TAP graphs: forward likelihood from the predictive head against
    frozen-target keys; no backward model exists for these baselines."""
    with T.no_grad():
        pred = M.predict_next(params, Tensor(states)).data
    p_fwd = _np_softmax_rows(_unit_rows(pred) @ _unit_rows(keys).T, config.tau_attn)
    return _assemble_graph(p_fwd, None, priors, node_ids, node_times)


def _concreteness_priors(pi_nodes: np.ndarray,
                         pi_text: np.ndarray | None) -> np.ndarray:
    """Node priors for transition scoring: the raw concreteness score (the
    node's highest cross-modal similarity), floored to stay positive.
    The softmax form is only used for sampling cycle starts."""
    if pi_text is None or pi_text.shape[0] == 0:
        return np.ones(pi_nodes.shape[0])
    return np.maximum((pi_nodes @ pi_text.T).max(axis=1), 1e-6)


def transition_graph_for_sequence(seq: NarratedSequence, params: ModelParams,
                                  config: ModelConfig,
                                  use_text: bool = True) -> TransitionGraph:
    """Graph over a sequence's visual nodes.

    use_text fuses each node with its soft-attended text counterpart;
    vision-only passes the projected visual representation directly into
    the predictive heads. Priors always come from the concreteness score
    when utterances exist.
    """
    if len(seq.visual) < 2:
        raise DataError("transition graph needs at least 2 visual nodes")
    features = np.stack([n.x for n in seq.visual])
    node_ids = list(range(len(seq.visual)))
    node_times = [n.t for n in seq.visual]
    with T.no_grad():
        if params.variant in ("ra", "tap"):
            states = M.embed_visual(params, features).data
            frozen = _require_frozen(params)
            keys = M.embed_visual(frozen, features).data
            pi_nodes = M.project(frozen, Tensor(keys), "V").data
            pi_text = _text_pis(frozen, seq)
            priors = _concreteness_priors(pi_nodes, pi_text)
            return _baseline_graph(params, config, states, keys, priors,
                                   node_ids, node_times)

        z_v = M.embed_visual(params, features)
        pi_v = M.project(params, z_v, "V").data
        pi_text = _text_pis(params, seq)
        priors = _concreteness_priors(pi_v, pi_text)
        if use_text and seq.text:
            z_t = M.embed_text_batch(params, [n.tokens for n in seq.text])
            attn = _np_softmax_rows(pi_v @ M.project(params, z_t, "T").data.T,
                                    config.tau_attn)
            z_xm = Tensor(attn @ z_t.data)
            states = M._affine(T.concat_features(z_v, z_xm), params, "fuse.0").data
        else:
            states = pi_v
    return _mmcc_graph(params, config, states, pi_v, priors, node_ids, node_times)


def _text_pis(params: ModelParams, seq: NarratedSequence) -> np.ndarray | None:
    if not seq.text:
        return None
    z_t = M.embed_text_batch(params, [n.tokens for n in seq.text])
    return M.project(params, z_t, "T").data


def _require_frozen(params: ModelParams) -> ModelParams:
    from .trainer import frozen_submodel
    frozen = frozen_submodel(params)
    if frozen is None:
        raise DataError("baseline checkpoint lacks frozen target blocks")
    return frozen


def transition_prob(graph: TransitionGraph, u: int, v: int) -> dict:
    """Components and total for one ordered pair of graph nodes."""
    comp = {"p_fwd": float(graph.p_fwd[u, v]),
            "p_back": float(graph.p_back[v, u]) if graph.p_back is not None else None,
            "prior_u": float(graph.priors[u]),
            "prior_v": float(graph.priors[v]),
            "log_p": float(graph.log_p[u, v])}
    return comp


def mine_top_transitions(seq: NarratedSequence, params: ModelParams,
                         config: ModelConfig, top_n: int,
                         use_text: bool = True) -> list[dict]:
    """All ordered node pairs (self-pairs excluded) ranked by log P(u->v),
    ties broken by (u, v) index."""
    if len(seq.visual) < 2:
        raise DataError("mine_top_transitions needs at least 2 visual nodes")
    graph = transition_graph_for_sequence(seq, params, config, use_text=use_text)
    pairs = [(u, v) for u in range(graph.n) for v in range(graph.n) if u != v]
    pairs.sort(key=lambda uv: (-graph.log_p[uv[0], uv[1]], uv[0], uv[1]))
    out = []
    for u, v in pairs[:top_n]:
        comp = transition_prob(graph, u, v)
        out.append({"video_id": seq.video_id,
                    "u_t": graph.node_times[u], "v_t": graph.node_times[v],
                    "u_index": u, "v_index": v,
                    "logP": comp.pop("log_p"), "components": comp})
    return out


# ---------------------------------------------------------------------------
# Future-action anticipation
# ---------------------------------------------------------------------------

def derive_subtask_descriptions(sequences: list[NarratedSequence],
                                tokens_per_description: int = 4) -> dict:
    """Canonical token description per (task, step): the step's most
    frequent utterance tokens in the split (ties to the lower token id)."""
    counts: dict[tuple[int, int], dict[int, int]] = {}
    for seq in sequences:
        for node in seq.text:
            if node.label == FILLER:
                continue
            bucket = counts.setdefault((seq.task_id, node.label), {})
            for tok in node.tokens:
                bucket[tok] = bucket.get(tok, 0) + 1
    out = {}
    for key, bucket in sorted(counts.items()):
        ranked = sorted(bucket.items(), key=lambda kv: (-kv[1], kv[0]))
        out[key] = tuple(tok for tok, _ in ranked[:tokens_per_description])
    return out


@dataclass
class AnticipationReport:
    recall_at: dict              # {1: .., 5: .., 10: ..}
    rank_worst: float
    rank_mean: float
    rank_best: float
    baseline_recall_at: dict     # cross-modal similarity scoring
    baseline_rank_mean: float
    n_queries: int
    n_candidates: int
    chance_recall1: float
    excluded: int

    def to_dict(self) -> dict:
        return {"recall_at": {str(k): v for k, v in self.recall_at.items()},
                "rank_worst": self.rank_worst, "rank_mean": self.rank_mean,
                "rank_best": self.rank_best,
                "baseline_recall_at": {str(k): v for k, v in self.baseline_recall_at.items()},
                "baseline_rank_mean": self.baseline_rank_mean,
                "n_queries": self.n_queries, "n_candidates": self.n_candidates,
                "chance_recall1": self.chance_recall1, "excluded": self.excluded}


def eval_anticipation(sequences: list[NarratedSequence], params: ModelParams,
                      config: ModelConfig, candidate_scope: str = "all",
                      recall_ks: tuple[int, ...] = (1, 5, 10)) -> AnticipationReport:
    """Score future subtask descriptions from a step's mean visual state.

    The query is g_fwd of the mean embedding of one step's visual nodes;
    candidates are all subtask descriptions in the split (or only the
    query task's with candidate_scope='task'). A query counts as correct
    at k when any strictly-future step of its task ranks in the top k.
    The cross-modal similarity score (mean projected visual embedding
    against the description projections) is reported as a baseline.
    """
    if candidate_scope not in ("all", "task"):
        raise ParameterError(f"candidate_scope must be 'all' or 'task', got {candidate_scope!r}")
    descriptions = derive_subtask_descriptions(sequences)
    if not descriptions:
        raise DataError("no labeled utterances to derive subtask descriptions from")
    cand_keys = sorted(descriptions)
    with T.no_grad():
        cand_pi = np.stack([
            M.project(params, M.embed_text(params, descriptions[k]), "T").data
            for k in cand_keys])

    max_step = {}
    for task_id, step in cand_keys:
        max_step[task_id] = max(max_step.get(task_id, -1), step)

    hits = {k: [] for k in recall_ks}
    base_hits = {k: [] for k in recall_ks}
    worst, mean_, best, base_mean = [], [], [], []
    n_queries = excluded = 0
    chance = []

    for seq in sequences:
        steps_present = sorted({n.label for n in seq.visual if n.label != FILLER})
        if not steps_present:
            excluded += 1
            continue
        features = np.stack([n.x for n in seq.visual])
        labels = np.array([n.label for n in seq.visual])
        with T.no_grad():
            z_all = M.embed_visual(params, features)
            pi_all = M.project(params, z_all, "V").data
        for step in steps_present:
            futures = [idx for idx, key in enumerate(cand_keys)
                       if key[0] == seq.task_id and key[1] > step]
            if not futures:
                excluded += 1
                continue
            if candidate_scope == "task":
                scope = [idx for idx, key in enumerate(cand_keys)
                         if key[0] == seq.task_id]
            else:
                scope = list(range(len(cand_keys)))
            scope_set = set(scope)
            futures = [i for i in futures if i in scope_set]
            node_mask = labels == step
            zbar = z_all.data[node_mask].mean(axis=0)
            pibar = pi_all[node_mask].mean(axis=0)
            with T.no_grad():
                q = M.predict_forward(params, Tensor(zbar)).data
            scores = cand_pi[scope] @ q
            base_scores = cand_pi[scope] @ pibar
            fut_local = [scope.index(i) for i in futures]
            _score_query(scores, fut_local, recall_ks, hits, worst, mean_, best)
            _score_query(base_scores, fut_local, recall_ks, base_hits,
                         None, base_mean, None)
            chance.append(1.0 / len(scope))
            n_queries += 1

    if n_queries == 0:
        raise DataError("no anticipation queries could be formed")
    return AnticipationReport(
        recall_at={k: float(np.mean(hits[k])) for k in recall_ks},
        rank_worst=float(np.mean(worst)), rank_mean=float(np.mean(mean_)),
        rank_best=float(np.mean(best)),
        baseline_recall_at={k: float(np.mean(base_hits[k])) for k in recall_ks},
        baseline_rank_mean=float(np.mean(base_mean)),
        n_queries=n_queries, n_candidates=len(cand_keys),
        chance_recall1=float(np.mean(chance)), excluded=excluded)


def _score_query(scores, futures, recall_ks, hits, worst, mean_, best):
    order = np.argsort(-scores, kind="stable")
    ranks_of_futures = {int(np.where(order == f)[0][0]) for f in futures}
    for k in recall_ks:
        hits[k].append(float(min(ranks_of_futures) < k))
    prs = [percentile_rank(scores, f) for f in futures]
    if worst is not None:
        worst.append(min(prs))
    if mean_ is not None:
        mean_.append(float(np.mean(prs)))
    if best is not None:
        best.append(max(prs))


# ---------------------------------------------------------------------------
# Unshuffling
# ---------------------------------------------------------------------------

@dataclass
class OrderingResult:
    video_id: int
    predicted: list[int]       # step ids in predicted order
    ground_truth: list[int]    # step ids in true order
    kendall: float
    spearman: float
    edit: int
    solver: str


@dataclass
class UnshuffleReport:
    mean_kendall: float
    mean_spearman: float
    mean_edit: float
    chance_kendall: float
    chance_edit: float
    n_videos: int
    results: list[OrderingResult] = field(repr=False, default_factory=list)

    def to_dict(self) -> dict:
        return {"mean_kendall": self.mean_kendall,
                "mean_spearman": self.mean_spearman,
                "mean_edit": self.mean_edit,
                "chance_kendall": self.chance_kendall,
                "chance_edit": self.chance_edit,
                "n_videos": self.n_videos}


def tsp_order(graph: TransitionGraph, mode: str = "auto") -> ORD.PathSolution:
    """Order the graph's nodes by the cheapest -log P path. The zero-cost
    null node of the tour formulation is implicit: solving the open path
    with free endpoints is exactly the tour cut at the null node."""
    weights = -graph.log_p.copy()
    np.fill_diagonal(weights, 0.0)
    return ORD.solve_open_path(weights, mode=mode)


def _step_groups(seq: NarratedSequence) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for idx, node in enumerate(seq.visual):
        if node.label != FILLER:
            groups.setdefault(node.label, []).append(idx)
    return groups


def eval_unshuffle(sequences: list[NarratedSequence], params: ModelParams,
                   config: ModelConfig, seed: int, use_text: bool = True,
                   min_steps: int = 3, solver_mode: str = "auto",
                   chance_permutations: int = 50) -> UnshuffleReport:
    """Shuffle each video's step segments, rebuild the order by transition
    probability, and score against the annotated order."""
    rng = SplitMix64(derive_seed(seed, _EVAL_STREAM))
    results = []
    chance_taus, chance_edits = [], []
    for seq in sequences:
        groups = _step_groups(seq)
        if len(groups) < min_steps:
            continue
        step_ids = sorted(groups)
        perm = list(range(len(step_ids)))
        rng.shuffle(perm)
        shuffled_steps = [step_ids[i] for i in perm]
        graph = _step_graph(seq, groups, shuffled_steps, params, config, use_text)
        solution = tsp_order(graph, mode=solver_mode)
        predicted = [shuffled_steps[i] for i in solution.order]
        gt = step_ids
        results.append(OrderingResult(
            video_id=seq.video_id, predicted=predicted, ground_truth=gt,
            kendall=ORD.kendall_tau(predicted, gt),
            spearman=ORD.spearman_rho(
                [gt.index(s) for s in predicted], list(range(len(gt)))),
            edit=ORD.edit_distance(predicted, gt), solver=solution.solver))
        for _ in range(chance_permutations):
            rand = list(step_ids)
            rng.shuffle(rand)
            chance_taus.append(ORD.kendall_tau(rand, gt))
            chance_edits.append(ORD.edit_distance(rand, gt))
    if not results:
        raise DataError(f"no sequence has >= {min_steps} labeled steps")
    return UnshuffleReport(
        mean_kendall=float(np.mean([r.kendall for r in results])),
        mean_spearman=float(np.mean([r.spearman for r in results])),
        mean_edit=float(np.mean([r.edit for r in results])),
        chance_kendall=float(np.mean(chance_taus)),
        chance_edit=float(np.mean(chance_edits)),
        n_videos=len(results), results=results)


def _step_graph(seq, groups, shuffled_steps, params, config, use_text) -> TransitionGraph:
    """One node per step segment: its mean visual representation, with the
    segment's own utterances as the ground-truth text pairing."""
    features = np.stack([n.x for n in seq.visual])
    with T.no_grad():
        if params.variant in ("ra", "tap"):
            return _baseline_step_graph(seq, groups, shuffled_steps, params,
                                        config, features)
        z_all = M.embed_visual(params, features).data
        z_means = np.stack([z_all[groups[s]].mean(axis=0) for s in shuffled_steps])
        pi_keys = M.project(params, Tensor(z_means), "V").data
        pi_text = _text_pis(params, seq)
        priors = _concreteness_priors(pi_keys, pi_text)
        if use_text:
            states = np.stack([
                _fused_step_state(params, seq, z_means[i], shuffled_steps[i])
                for i in range(len(shuffled_steps))])
        else:
            states = pi_keys
    times = [min(seq.visual[i].t for i in groups[s]) for s in shuffled_steps]
    return _mmcc_graph(params, config, states, pi_keys, priors,
                       shuffled_steps, times)


def _fused_step_state(params, seq, z_mean, step) -> np.ndarray:
    tokens = [n.tokens for n in seq.text if n.label == step]
    if not tokens:
        return z_mean  # no paired narration: unimodal state
    z_t = M.embed_text_batch(params, tokens).data.mean(axis=0)
    return M.fuse(params, Tensor(z_mean), Tensor(z_t)).data


def _baseline_step_graph(seq, groups, shuffled_steps, params, config,
                         features) -> TransitionGraph:
    frozen = _require_frozen(params)
    z_all = M.embed_visual(params, features).data
    psi_all = M.embed_visual(frozen, features).data
    states = np.stack([z_all[groups[s]].mean(axis=0) for s in shuffled_steps])
    keys = np.stack([psi_all[groups[s]].mean(axis=0) for s in shuffled_steps])
    pi_keys = M.project(frozen, Tensor(keys), "V").data
    priors = _concreteness_priors(pi_keys, _text_pis(frozen, seq))
    times = [min(seq.visual[i].t for i in groups[s]) for s in shuffled_steps]
    return _baseline_graph(params, config, states, keys, priors,
                           shuffled_steps, times)


# ---------------------------------------------------------------------------
# Arrow of time
# ---------------------------------------------------------------------------

SAMPLINGS = ("random", "cos_sim", "tap", "ra", "model")
PROBES = ("linear", "scratch")


@dataclass
class ArrowReport:
    accuracy: float
    sampling: str
    probe: str
    n_pairs: int

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "sampling": self.sampling,
                "probe": self.probe, "n_pairs": self.n_pairs}


def _mine_pairs(sequences, params, config, sampling, rng, n_pairs,
                sampler_params) -> list[tuple[int, int, int]]:
    """(sequence index, earlier node index, later node index) triples."""
    pairs: list[tuple[int, int, int]] = []
    seen = set()

    def push(si, i, j):
        if i == j:
            return
        seq = sequences[si]
        if seq.visual[i].t > seq.visual[j].t:
            i, j = j, i
        if (si, i, j) not in seen:
            seen.add((si, i, j))
            pairs.append((si, i, j))

    eligible = [si for si, s in enumerate(sequences) if len(s.visual) >= 2]
    if not eligible:
        raise DataError("arrow_of_time: no sequence has 2 visual nodes")

    if sampling == "random":
        tries = 0
        while len(pairs) < n_pairs and tries < 50 * n_pairs:
            tries += 1
            si = eligible[rng.randint(len(eligible))]
            n = len(sequences[si].visual)
            push(si, rng.randint(n), rng.randint(n))
    elif sampling == "cos_sim":
        scored = []
        with T.no_grad():
            for si in eligible:
                seq = sequences[si]
                feats = np.stack([n.x for n in seq.visual])
                pi = M.project(params, M.embed_visual(params, feats), "V").data
                sims = pi @ pi.T
                for i in range(len(seq.visual)):
                    for j in range(i + 1, len(seq.visual)):
                        scored.append((-sims[i, j], si, i, j))
        scored.sort()
        for _, si, i, j in scored[: n_pairs]:
            push(si, i, j)
    elif sampling == "model":
        graphs: dict[int, TransitionGraph] = {}
        tries = 0
        while len(pairs) < n_pairs and tries < 50 * n_pairs:
            tries += 1
            si = eligible[rng.randint(len(eligible))]
            if si not in graphs:
                graphs[si] = transition_graph_for_sequence(
                    sequences[si], params, config, use_text=True)
            graph = graphs[si]
            u = rng.sample_distribution(graph.priors / graph.priors.sum())
            scores = graph.log_p[u].copy()
            scores[u] = -np.inf
            push(si, u, int(np.argmax(scores)))
    elif sampling in ("ra", "tap"):
        if sampler_params is None or sampler_params.variant not in ("ra", "tap"):
            raise ParameterError(f"sampling={sampling!r} needs a baseline sampler checkpoint")
        frozen = _require_frozen(sampler_params)
        cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        tries = 0
        while len(pairs) < n_pairs and tries < 50 * n_pairs:
            tries += 1
            si = eligible[rng.randint(len(eligible))]
            seq = sequences[si]
            if si not in cache:
                feats = np.stack([n.x for n in seq.visual])
                with T.no_grad():
                    pred = M.predict_next(
                        sampler_params, M.embed_visual(sampler_params, feats)).data
                    psi = M.embed_visual(frozen, feats).data
                cache[si] = (_unit_rows(pred), _unit_rows(psi))
            pred_u, psi_u = cache[si]
            u = rng.randint(len(seq.visual))
            sims = psi_u @ pred_u[u]
            sims[u] = -np.inf
            push(si, u, int(np.argmax(sims)))
    else:
        raise ParameterError(f"sampling must be one of {SAMPLINGS}, got {sampling!r}")
    return pairs


def arrow_of_time(sequences: list[NarratedSequence], params: ModelParams,
                  config: ModelConfig, sampling: str, probe: str, seed: int,
                  sampler_params: ModelParams | None = None,
                  n_pairs: int = 400, train_frac: float = 0.7,
                  probe_steps: int = 300, shuffled_labels: bool = False) -> ArrowReport:
    """Binary which-comes-first probe on mined frame pairs.

    Pairs are presented in shuffled order with an exactly balanced label
    split. probe='linear' trains one affine layer on frozen embeddings;
    probe='scratch' trains a fresh 2-layer embedder plus affine head on
    the raw feature vectors. shuffled_labels destroys the signal as a
    chance control.
    """
    if probe not in PROBES:
        raise ParameterError(f"probe must be one of {PROBES}, got {probe!r}")
    rng = SplitMix64(derive_seed(seed, _PROBE_STREAM))
    pairs = _mine_pairs(sequences, params, config, sampling, rng, n_pairs,
                        sampler_params)
    if len(pairs) < 100:
        raise DataError(f"arrow_of_time needs at least 100 pairs, mined {len(pairs)}")

    if probe == "linear":
        feats = {}
        with T.no_grad():
            for si in {p[0] for p in pairs}:
                seq = sequences[si]
                feats[si] = M.embed_visual(
                    params, np.stack([n.x for n in seq.visual])).data
        side = lambda si, i: feats[si][i]
        side_dim = params.config.d
    else:
        side = lambda si, i: sequences[si].visual[i].x
        side_dim = params.config.d_vis

    flips = [True] * (len(pairs) // 2) + [False] * (len(pairs) - len(pairs) // 2)
    rng.shuffle(flips)
    x = np.zeros((len(pairs), 2 * side_dim))
    y = np.zeros(len(pairs))
    for row, ((si, i, j), flip) in enumerate(zip(pairs, flips)):
        a, b = (j, i) if flip else (i, j)
        x[row, :side_dim] = side(si, a)
        x[row, side_dim:] = side(si, b)
        y[row] = -1.0 if flip else 1.0      # +1: first-presented is earlier

    if shuffled_labels:
        perm = list(range(len(y)))
        rng.shuffle(perm)
        y = y[perm]

    order = list(range(len(pairs)))
    rng.shuffle(order)
    n_train = max(1, int(train_frac * len(order)))
    tr, te = order[:n_train], order[n_train:]
    acc = _train_probe(x[tr], y[tr], x[te], y[te], probe, side_dim,
                       params.config.d, seed, probe_steps)
    return ArrowReport(accuracy=acc, sampling=sampling, probe=probe,
                       n_pairs=len(pairs))


def _train_probe(x_tr, y_tr, x_te, y_te, probe, side_dim, d, seed, steps) -> float:
    init_rng = SplitMix64(derive_seed(seed, 0xF17))

    def uniform(shape, bound):
        flat = np.array([init_rng.uniform() * 2 - 1 for _ in range(int(np.prod(shape)))])
        return flat.reshape(shape) * bound

    if probe == "linear":
        w = Tensor(uniform((2 * side_dim, 1), np.sqrt(6.0 / (2 * side_dim))),
                   requires_grad=True)
        b = Tensor(np.zeros(1), requires_grad=True)
        train_params = [w, b]

        def logits(xs):
            return T.as_vector(T.add(T.matmul(Tensor(xs), w), b))
    else:
        w1 = Tensor(uniform((side_dim, d), np.sqrt(6.0 / side_dim)), requires_grad=True)
        b1 = Tensor(np.zeros(d), requires_grad=True)
        w2 = Tensor(uniform((d, d), np.sqrt(6.0 / d)), requires_grad=True)
        b2 = Tensor(np.zeros(d), requires_grad=True)
        w = Tensor(uniform((2 * d, 1), np.sqrt(6.0 / (2 * d))), requires_grad=True)
        b = Tensor(np.zeros(1), requires_grad=True)
        train_params = [w1, b1, w2, b2, w, b]

        def embed(xs):
            h = T.relu(T.add(T.matmul(Tensor(xs), w1), b1))
            return T.add(T.matmul(h, w2), b2)

        def logits(xs):
            left = embed(xs[:, :side_dim])
            right = embed(xs[:, side_dim:])
            return T.as_vector(T.add(T.matmul(T.concat_features(left, right), w), b))

    opt = T.Adam(train_params, lr=0.01)
    for _ in range(steps):
        loss = T.logistic_loss(logits(x_tr), y_tr)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
    with T.no_grad():
        z = logits(x_te).data
    return float(np.mean((z > 0) == (y_te > 0)))


# ---------------------------------------------------------------------------
# Neuron-word dissection
# ---------------------------------------------------------------------------

@dataclass
class NeuronWordPair:
    neuron: int
    token: int
    rho: float
    degenerate: bool
    top_nodes: list[tuple[int, int]]   # (video_id, t) of strongest activations


def neuron_word_correlation(sequences: list[NarratedSequence], params: ModelParams,
                            config: ModelConfig, top_pairs: int = 10,
                            top_nodes: int = 5) -> list[NeuronWordPair]:
    """Rank-correlate each embedding neuron with each token's presence in
    the temporally nearest utterance; constant columns score 0 with a
    degenerate flag. Returns the strongest pairs with exemplar node ids."""
    if not sequences:
        raise DataError("neuron_word_correlation: empty split")
    acts, presence, node_ids = [], [], []
    vocab = params.config.vocab_size
    with T.no_grad():
        for seq in sequences:
            if not seq.visual or not seq.text:
                continue
            feats = np.stack([n.x for n in seq.visual])
            a = M.embed_visual(params, feats).data
            text_times = [n.t for n in seq.text]
            for idx, node in enumerate(seq.visual):
                nearest = seq.text[_nearest_index(text_times, node.t)]
                row = np.zeros(vocab)
                row[list(nearest.tokens)] = 1.0
                acts.append(a[idx])
                presence.append(row)
                node_ids.append((seq.video_id, node.t))
    a = np.stack(acts)
    p = np.stack(presence)
    n = a.shape[0]

    ranks_a = np.apply_along_axis(ORD.rankdata_average, 0, a)
    ranks_p = np.apply_along_axis(ORD.rankdata_average, 0, p)
    za = ranks_a - ranks_a.mean(axis=0)
    zp = ranks_p - ranks_p.mean(axis=0)
    sa = np.sqrt((za * za).sum(axis=0))
    sp = np.sqrt((zp * zp).sum(axis=0))
    degenerate_a = sa == 0
    degenerate_p = sp == 0
    denom = np.outer(np.where(degenerate_a, 1.0, sa), np.where(degenerate_p, 1.0, sp))
    rho = (za.T @ zp) / denom
    rho[degenerate_a, :] = 0.0
    rho[:, degenerate_p] = 0.0

    flat = [(float(rho[i, j]), i, j) for i in range(rho.shape[0])
            for j in range(rho.shape[1]) if p[:, j].sum() > 0]
    flat.sort(key=lambda t: (-t[0], t[1], t[2]))
    out = []
    for val, i, j in flat[:top_pairs]:
        strongest = np.argsort(-a[:, i], kind="stable")[:top_nodes]
        out.append(NeuronWordPair(
            neuron=i, token=j, rho=val,
            degenerate=bool(degenerate_a[i] or degenerate_p[j]),
            top_nodes=[node_ids[s] for s in strongest]))
    return out
