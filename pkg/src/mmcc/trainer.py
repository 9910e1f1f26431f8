"""Training loops: the cycle objective, a crossmodal-only phase, and the
representation-anticipation (fixed next-node) and time-agnostic (min over
futures) baselines.

The loss-weight schedule keeps the contrastive weight at 1 while the
cycle weight ramps exponentially from a small epsilon to its final value
over the first 30 epochs; the similarity weight is pegged to 3x the
cycle weight when enabled. Training is bit-reproducible given (corpus,
configs, seed): all sampling runs on SplitMix64 streams derived from the
run seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import objective as O
from . import tensor as T
from .corpus import Corpus, NarratedSequence, Segment, sample_segment
from .errors import NumericalError, ParameterError
from .model import ModelConfig, ModelParams
from .rng import SplitMix64, derive_seed

_TRAIN_STREAM = 0x7A51C0DE
_VAL_STREAM = 0x7A11DA7E

OBJECTIVES = ("mmcc", "crossmodal-only", "ra", "tap")


@dataclass
class Schedule:
    epsilon: float = 1e-3        # cycle-weight start
    lambda1_final: float = 1.0   # cycle-weight plateau (main text uses 1)
    ramp_epochs: int = 30
    lambda2: float = 1.0         # contrastive weight, constant
    sim_ratio: float = 3.0       # lambda3 = ratio * lambda1 when sim loss is on

    def validate(self) -> None:
        if self.epsilon <= 0 or self.lambda1_final < 0:
            raise ParameterError("schedule weights must be positive")
        if self.ramp_epochs < 1:
            raise ParameterError("ramp_epochs must be >= 1")


def lambda_schedule(schedule: Schedule, epoch: int,
                    sim_enabled: bool) -> tuple[float, float, float]:
    """(lambda1, lambda2, lambda3) at the given epoch."""
    if epoch < 0:
        raise ParameterError(f"epoch must be >= 0, got {epoch}")
    schedule.validate()
    if schedule.lambda1_final == 0.0:
        l1 = 0.0
    else:
        frac = min(epoch, schedule.ramp_epochs) / schedule.ramp_epochs
        l1 = schedule.epsilon * (schedule.lambda1_final / schedule.epsilon) ** frac
    l3 = schedule.sim_ratio * l1 if sim_enabled else 0.0
    return l1, schedule.lambda2, l3


@dataclass
class TrainConfig:
    objective: str = "mmcc"
    epochs: int = 60                     # cap; convergence may stop earlier
    batch_size: int = 8
    lr: float = 1e-3                     # desk-scale default; see config docs
    segment_max_len: int = 64
    rate_divisors: tuple[int, ...] = (1, 2, 4)
    check_convergence: bool = True
    convergence_patience: int = 5
    convergence_min_delta: float = 0.5   # percentile points of val cycle rank
    convergence_cycles: int = 100

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ParameterError(f"objective must be one of {OBJECTIVES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ParameterError("lr must be positive")


@dataclass
class EpochMetrics:
    epoch: int
    lambda1: float
    lambda2: float
    lambda3: float
    loss_cycle: float
    loss_xm: float
    loss_sim: float
    excluded_samples: int
    wall_seconds: float


METRICS_COLUMNS = ("epoch", "lambda1", "lambda2", "lambda3", "loss_cycle",
                   "loss_xm", "loss_sim", "excluded_samples", "wall_seconds")


def write_metrics_csv(rows: list[EpochMetrics], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        for r in rows:
            fh.write(f"{r.epoch},{r.lambda1!r},{r.lambda2!r},{r.lambda3!r},"
                     f"{r.loss_cycle!r},{r.loss_xm!r},{r.loss_sim!r},"
                     f"{r.excluded_samples},{r.wall_seconds:.3f}\n")


@dataclass
class TrainResult:
    params: ModelParams
    adam: T.AdamState
    metrics: list[EpochMetrics]
    aborted: bool = False
    stopped_epoch: int | None = None
    excluded_total: int = 0


# ---------------------------------------------------------------------------
# Frozen targets
# ---------------------------------------------------------------------------

class FrozenTargets:
    """Immutable snapshot of embedders/projectors used as baseline targets."""

    def __init__(self, params: ModelParams):
        tensors = {k: T.Tensor(t.data.copy(), requires_grad=False)
                   for k, t in params.tensors.items()}
        self.params = ModelParams(params.config, tensors, params.variant)

    def embed_visual(self, x) -> np.ndarray:
        return M.embed_visual(self.params, x).data

    def embed_text(self, tokens) -> np.ndarray:
        return M.embed_text(self.params, tokens).data


def snapshot_frozen_targets(params: ModelParams) -> FrozenTargets:
    return FrozenTargets(params)


_FROZEN_PREFIX = "frozen."


def attach_frozen(params: ModelParams, targets: FrozenTargets) -> None:
    """Embed the target snapshot inside a baseline's parameter set so its
    checkpoint is self-contained."""
    for name, t in targets.params.tensors.items():
        params.add_frozen(_FROZEN_PREFIX + name, t.data)


def frozen_submodel(params: ModelParams) -> ModelParams | None:
    """Reconstruct the frozen target model stored under the 'frozen.' prefix."""
    sub = {name[len(_FROZEN_PREFIX):]: t for name, t in params.tensors.items()
           if name.startswith(_FROZEN_PREFIX)}
    if not sub:
        return None
    return ModelParams(params.config, sub, "mmcc")


# ---------------------------------------------------------------------------
# Batching helpers
# ---------------------------------------------------------------------------

def _epoch_batches(train_seqs: list[NarratedSequence], cfg: TrainConfig,
                   rng: SplitMix64):
    order = list(range(len(train_seqs)))
    rng.shuffle(order)
    for i in range(0, len(order), cfg.batch_size):
        yield [train_seqs[j] for j in order[i:i + cfg.batch_size]]


def _sample_batch_segments(batch, cfg: TrainConfig, rng: SplitMix64):
    segments, skipped = [], 0
    for seq in batch:
        divisor = rng.choice(cfg.rate_divisors)
        seg = sample_segment(seq, cfg.segment_max_len, divisor, rng)
        if seg is None:
            skipped += 1
        else:
            segments.append(seg)
    return segments, skipped


def _mean(tensors: list[T.Tensor]) -> T.Tensor:
    total = tensors[0]
    for t in tensors[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / len(tensors))


def _snapshot(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in params.tensors.items()}


def _restore(params: ModelParams, snap: dict[str, np.ndarray]) -> None:
    for k, data in snap.items():
        params.tensors[k].data = data.copy()


# ---------------------------------------------------------------------------
# MMCC / crossmodal-only training
# ---------------------------------------------------------------------------

def train(corpus: Corpus, model_config: ModelConfig, train_config: TrainConfig,
          schedule: Schedule, seed: int) -> TrainResult:
    """Train the cycle model (or its crossmodal-only phase).

    Per step: a batch of segments, one cycle per segment (loss within
    each video), one contrastive loss across the whole batch, one Adam
    update. A non-finite loss aborts and restores the last epoch-end
    snapshot.
    """
    train_config.validate()
    if train_config.objective in ("ra", "tap"):
        raise ParameterError("use train_baseline for ra/tap objectives")
    if not corpus.train:
        raise ParameterError("empty train split")
    crossmodal_only = train_config.objective == "crossmodal-only"

    params = M.init_params(model_config, seed)
    trainable = params.trainable()
    opt = T.Adam(trainable, lr=train_config.lr)
    rng = SplitMix64(derive_seed(seed, _TRAIN_STREAM))
    metrics: list[EpochMetrics] = []
    good = _snapshot(params)
    excluded_total = 0
    best_val_rank = -np.inf
    stale_epochs = 0
    stopped_epoch = None

    for epoch in range(train_config.epochs):
        t_start = time.perf_counter()
        l1, l2, l3 = lambda_schedule(schedule, epoch, model_config.sim_loss)
        if crossmodal_only:
            l1 = l3 = 0.0
        sums = {"cycle": 0.0, "xm": 0.0, "sim": 0.0}
        counts = {"cycle": 0, "xm": 0, "sim": 0}
        excluded = 0
        try:
            for batch in _epoch_batches(corpus.train, train_config, rng):
                segments, skipped = _sample_batch_segments(batch, train_config, rng)
                excluded += skipped
                if not segments:
                    continue
                embs = [O.embed_segment(params, s) for s in segments]

                loss_cycle = loss_sim = None
                if not crossmodal_only:
                    cycle_terms, sim_terms = [], []
                    for emb in embs:
                        trace = O.run_cycle(emb, params, model_config, rng)
                        if isinstance(trace, O.CycleSkip):
                            excluded += 1
                            continue
                        cycle_terms.append(trace.loss_cycle)
                        if trace.loss_sim is not None:
                            sim_terms.append(trace.loss_sim)
                    if cycle_terms:
                        loss_cycle = _mean(cycle_terms)
                        sums["cycle"] += loss_cycle.item()
                        counts["cycle"] += 1
                    if sim_terms:
                        loss_sim = _mean(sim_terms)
                        sums["sim"] += loss_sim.item()
                        counts["sim"] += 1

                loss_xm = None
                if l2 != 0.0:
                    loss_xm = O.crossmodal_loss(embs, params, model_config.crossmodal_window)
                    sums["xm"] += loss_xm.item()
                    counts["xm"] += 1

                total = O.combined_loss(loss_cycle, loss_xm, loss_sim, l1, l2, l3)
                if not np.isfinite(total.item()):
                    raise NumericalError(f"non-finite loss at epoch {epoch}")
                params.zero_grads()
                T.backward(total)
                opt.step()
        except NumericalError:
            _restore(params, good)
            metrics.append(EpochMetrics(epoch, l1, l2, l3, float("nan"),
                                        float("nan"), float("nan"), excluded,
                                        time.perf_counter() - t_start))
            return TrainResult(params, opt.state, metrics, aborted=True,
                               stopped_epoch=epoch, excluded_total=excluded_total)

        good = _snapshot(params)
        excluded_total += excluded
        metrics.append(EpochMetrics(
            epoch, l1, l2, l3,
            sums["cycle"] / counts["cycle"] if counts["cycle"] else 0.0,
            sums["xm"] / counts["xm"] if counts["xm"] else 0.0,
            sums["sim"] / counts["sim"] if counts["sim"] else 0.0,
            excluded, time.perf_counter() - t_start))

        if (train_config.check_convergence and corpus.val
                and not crossmodal_only
                and epoch >= schedule.ramp_epochs):
            from . import evaluation as E
            report = E.eval_cycle(corpus.val, params, model_config,
                                  seed=derive_seed(seed, _VAL_STREAM),
                                  n_cycles=train_config.convergence_cycles)
            if report.cycle_rank > best_val_rank + train_config.convergence_min_delta:
                best_val_rank = report.cycle_rank
                stale_epochs = 0
            else:
                stale_epochs += 1
                if stale_epochs >= train_config.convergence_patience:
                    stopped_epoch = epoch
                    break

    return TrainResult(params, opt.state, metrics, aborted=False,
                       stopped_epoch=stopped_epoch, excluded_total=excluded_total)


# ---------------------------------------------------------------------------
# RA / TAP baselines
# ---------------------------------------------------------------------------

def _baseline_segment_loss(params: ModelParams, targets: FrozenTargets,
                           seg: Segment, objective: str) -> tuple[T.Tensor | None, int]:
    """Cosine regression to frozen targets.

    ra: each node predicts the next node's frozen embedding.
    tap: each node takes its best (min-loss) strictly-future node.
    Returns (mean loss over anchors, number of anchors).
    """
    terms: list[T.Tensor] = []
    for modality in ("V", "T"):
        if modality == "V":
            n = len(seg.visual)
            if n < 2:
                continue
            z = M.embed_visual(params, seg.visual_matrix)
            psi = M.embed_visual(targets.params, seg.visual_matrix).data
        else:
            n = len(seg.text)
            if n < 2:
                continue
            tokens = [node.tokens for node in seg.text]
            z = M.embed_text_batch(params, tokens)
            psi = M.embed_text_batch(targets.params, tokens).data
        norms = np.linalg.norm(psi, axis=1, keepdims=True)
        psi_unit = psi / np.maximum(norms, 1e-12)
        pred_unit = T.l2_normalize(M.predict_next(params, z))
        cos_matrix = T.matmul(pred_unit, T.Tensor(psi_unit.T))  # (n, n)
        for i in range(n - 1):
            cos_row = T.as_vector(T.gather_rows(cos_matrix, [i]))
            if objective == "ra":
                terms.append(T.neg(T.index_element(cos_row, i + 1)))
            else:
                terms.append(T.neg(T.vec_max(T.slice_vec(cos_row, i + 1, n))))
    if not terms:
        return None, 0
    return _mean(terms), len(terms)


def train_baseline(corpus: Corpus, targets: FrozenTargets,
                   model_config: ModelConfig, train_config: TrainConfig,
                   seed: int) -> TrainResult:
    """Train an RA or TAP baseline against frozen targets. The predictive
    head mirrors the cycle model's 4-layer architecture."""
    train_config.validate()
    if train_config.objective not in ("ra", "tap"):
        raise ParameterError("train_baseline handles only ra/tap objectives")
    if not corpus.train:
        raise ParameterError("empty train split")

    params = M.init_params(model_config, seed, variant=train_config.objective)
    opt = T.Adam(params.trainable(), lr=train_config.lr)
    rng = SplitMix64(derive_seed(seed, _TRAIN_STREAM))
    metrics: list[EpochMetrics] = []
    good = _snapshot(params)
    excluded_total = 0

    for epoch in range(train_config.epochs):
        t_start = time.perf_counter()
        loss_sum, loss_count, excluded = 0.0, 0, 0
        try:
            for batch in _epoch_batches(corpus.train, train_config, rng):
                segments, skipped = _sample_batch_segments(batch, train_config, rng)
                excluded += skipped
                terms = []
                for seg in segments:
                    loss, n_anchors = _baseline_segment_loss(
                        params, targets, seg, train_config.objective)
                    if loss is None:
                        excluded += 1
                    else:
                        terms.append(loss)
                if not terms:
                    continue
                total = _mean(terms)
                if not np.isfinite(total.item()):
                    raise NumericalError(f"non-finite loss at epoch {epoch}")
                loss_sum += total.item()
                loss_count += 1
                params.zero_grads()
                T.backward(total)
                opt.step()
        except NumericalError:
            _restore(params, good)
            metrics.append(EpochMetrics(epoch, 0.0, 0.0, 0.0, float("nan"), 0.0,
                                        0.0, excluded, time.perf_counter() - t_start))
            attach_frozen(params, targets)
            return TrainResult(params, opt.state, metrics, aborted=True,
                               stopped_epoch=epoch, excluded_total=excluded_total)
        good = _snapshot(params)
        excluded_total += excluded
        metrics.append(EpochMetrics(
            epoch, 0.0, 0.0, 0.0,
            loss_sum / loss_count if loss_count else 0.0,
            0.0, 0.0, excluded, time.perf_counter() - t_start))

    attach_frozen(params, targets)
    return TrainResult(params, opt.state, metrics, aborted=False,
                       excluded_total=excluded_total)
