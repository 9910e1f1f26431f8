"""Deterministic synthetic narrated-sequence corpus.

Each "video" walks the ordered steps of a task template. Every step emits
a handful of visual nodes (noisy copies of the step's unit-norm prototype
vector) and periodic text utterances drawn from the step's private token
vocabulary. Timing jitter, filler nodes and visual noise mimic the loose
vision/text alignment of real narrated video while keeping ground-truth
step labels available for evaluation only.

All randomness flows through SplitMix64 (one derived stream per video),
so a (config, seed) pair yields a bit-identical corpus on any platform.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError
from .rng import SplitMix64, derive_seed, mix64

FILLER = -1

_TEMPLATE_STREAM = 0x7E3A11A7E5
_SEQUENCE_STREAM = 0x5EC0E2CE


@dataclass(frozen=True)
class StepSpec:
    """One high-level step: a visual prototype and a private vocabulary."""
    prototype: np.ndarray          # unit-norm, shape (d_vis,)
    vocabulary: tuple[int, ...]    # token ids, disjoint across all steps


@dataclass(frozen=True)
class TaskTemplate:
    task_id: int
    steps: tuple[StepSpec, ...]


@dataclass(frozen=True)
class VisualNode:
    t: int
    label: int                     # step index within task, or FILLER
    x: np.ndarray                  # shape (d_vis,)


@dataclass(frozen=True)
class TextNode:
    t: int
    label: int
    tokens: tuple[int, ...]


@dataclass
class NarratedSequence:
    video_id: int
    task_id: int
    visual: list[VisualNode]
    text: list[TextNode]


@dataclass
class Corpus:
    train: list[NarratedSequence]
    val: list[NarratedSequence]
    test: list[NarratedSequence]

    def split(self, name: str) -> list[NarratedSequence]:
        try:
            return getattr(self, name)
        except AttributeError:
            raise ParameterError(f"unknown split {name!r}") from None


@dataclass
class CorpusConfig:
    seed: int = 0
    num_videos: int = 250
    num_tasks: int = 3
    vocab_size: int = 256
    d_vis: int = 64
    steps_per_task: int = 8
    tokens_per_step: int = 5
    filler_pool_size: int = 32
    dwell_min: int = 2
    dwell_max: int = 6
    utterance_period: int = 3
    jitter: int = 1
    p_filler: float = 0.15
    sigma: float = 0.3
    step_smoothness: float = 0.5   # cos between consecutive step prototypes
    gap_min: int = 0               # filler-only stretch between steps
    gap_max: int = 0
    split_fractions: tuple[float, float, float] = (0.80, 0.15, 0.05)

    def validate(self) -> None:
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ParameterError(f"split fractions must sum to 1, got {self.split_fractions}")
        needed = self.num_tasks * self.steps_per_task * self.tokens_per_step + self.filler_pool_size
        if self.vocab_size < needed:
            raise ParameterError(
                f"vocab_size {self.vocab_size} too small: need at least {needed} "
                f"({self.num_tasks} tasks x {self.steps_per_task} steps x "
                f"{self.tokens_per_step} tokens + {self.filler_pool_size} filler)")
        if self.steps_per_task < 2:
            raise ParameterError("steps_per_task must be at least 2")
        if not (1 <= self.dwell_min <= self.dwell_max):
            raise ParameterError(f"bad dwell range [{self.dwell_min}, {self.dwell_max}]")
        if self.utterance_period <= 2 * self.jitter:
            raise ParameterError(
                f"utterance_period {self.utterance_period} must exceed twice the "
                f"jitter {self.jitter} to keep utterance times strictly increasing")
        if not 0.0 <= self.p_filler < 1.0:
            raise ParameterError(f"p_filler must be in [0, 1), got {self.p_filler}")
        if not 0.0 <= self.step_smoothness < 1.0:
            raise ParameterError(
                f"step_smoothness must be in [0, 1), got {self.step_smoothness}")
        if not 0 <= self.gap_min <= self.gap_max:
            raise ParameterError(f"bad gap range [{self.gap_min}, {self.gap_max}]")


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def generate_templates(config: CorpusConfig) -> list[TaskTemplate]:
    """Task templates with pairwise-disjoint step vocabularies.

    Token ids [0, filler_pool_size) form the shared filler pool; the rest
    are partitioned across (task, step) in order. Prototypes follow a
    random walk on the unit sphere: consecutive steps of one task keep a
    cosine of step_smoothness (natural video changes gradually), while
    steps of different tasks stay uncorrelated. Each walk starts from a
    unit-normalized isotropic Gaussian draw.
    """
    config.validate()
    rng = SplitMix64(derive_seed(config.seed, _TEMPLATE_STREAM))
    rho = config.step_smoothness
    templates = []
    next_token = config.filler_pool_size
    for task_id in range(config.num_tasks):
        steps = []
        prev = None
        for _ in range(config.steps_per_task):
            fresh = np.array(rng.gauss_vector(config.d_vis))
            fresh /= np.linalg.norm(fresh)
            if prev is None or rho == 0.0:
                proto = fresh
            else:
                # project the innovation orthogonal to the previous step so
                # cos(prev, proto) == rho exactly
                ortho = fresh - (fresh @ prev) * prev
                ortho /= np.linalg.norm(ortho)
                proto = rho * prev + np.sqrt(1.0 - rho * rho) * ortho
                proto /= np.linalg.norm(proto)
            prev = proto
            vocab = tuple(range(next_token, next_token + config.tokens_per_step))
            next_token += config.tokens_per_step
            steps.append(StepSpec(prototype=proto, vocabulary=vocab))
        templates.append(TaskTemplate(task_id=task_id, steps=tuple(steps)))
    return templates


def synthesize_sequence(template: TaskTemplate, config: CorpusConfig,
                        video_id: int) -> NarratedSequence:
    """One narrated sequence walking the template's steps in order.

    Consecutive steps are optionally separated by filler-only stretches
    (gap_min..gap_max nodes), mirroring the irrelevant footage between
    annotated subtask segments in real instructional video.
    """
    rng = SplitMix64(derive_seed(config.seed ^ mix64(_SEQUENCE_STREAM), video_id))
    visual: list[VisualNode] = []
    text: list[TextNode] = []
    filler_pool = range(config.filler_pool_size)
    t = 0

    def emit_filler_visual(t):
        x = np.array(rng.gauss_vector(config.d_vis))
        x /= np.linalg.norm(x)
        visual.append(VisualNode(t=t, label=FILLER, x=x))

    def emit_utterance(t, step_idx, vocab):
        count = rng.randrange(4, 8)
        tokens = tuple(vocab[rng.randint(len(vocab))] for _ in range(count))
        jit = rng.randrange(-config.jitter, config.jitter) if config.jitter else 0
        text.append(TextNode(t=max(0, t + jit), label=step_idx, tokens=tokens))

    for step_idx, step in enumerate(template.steps):
        if step_idx > 0 and config.gap_max > 0:
            for _ in range(rng.randrange(config.gap_min, config.gap_max)):
                emit_filler_visual(t)
                if t % config.utterance_period == 0:
                    emit_utterance(t, FILLER, filler_pool)
                t += 1
        dwell = rng.randrange(config.dwell_min, config.dwell_max)
        for _ in range(dwell):
            if rng.coin(config.p_filler):
                emit_filler_visual(t)
            elif config.sigma == 0.0:
                # noiseless limit: emit the prototype bit-exactly
                visual.append(VisualNode(t=t, label=step_idx, x=step.prototype.copy()))
            else:
                # sigma is the noise norm relative to the unit prototype
                noise = np.array(rng.gauss_vector(config.d_vis))
                x = step.prototype + config.sigma * noise / np.linalg.norm(noise)
                x /= np.linalg.norm(x)
                visual.append(VisualNode(t=t, label=step_idx, x=x))

            if t % config.utterance_period == 0:
                if rng.coin(config.p_filler):
                    emit_utterance(t, FILLER, filler_pool)
                else:
                    emit_utterance(t, step_idx, step.vocabulary)
            t += 1
    return NarratedSequence(video_id=video_id, task_id=template.task_id,
                            visual=visual, text=text)


def _split_counts(n: int, fractions) -> list[int]:
    """Largest-remainder apportionment so counts are exact and sum to n."""
    raw = [f * n for f in fractions]
    counts = [int(x) for x in raw]
    remainders = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in range(n - sum(counts)):
        counts[remainders[i]] += 1
    return counts


def make_corpus(config: CorpusConfig) -> Corpus:
    """Generate all videos and split them by video_id hash (exact quotas)."""
    config.validate()
    templates = generate_templates(config)
    seqs = [synthesize_sequence(templates[vid % config.num_tasks], config, vid)
            for vid in range(config.num_videos)]
    order = sorted(range(len(seqs)), key=lambda vid: (mix64(seqs[vid].video_id), vid))
    n_train, n_val, n_test = _split_counts(len(seqs), config.split_fractions)
    train = [seqs[i] for i in sorted(order[:n_train])]
    val = [seqs[i] for i in sorted(order[n_train:n_train + n_val])]
    test = [seqs[i] for i in sorted(order[n_train + n_val:])]
    return Corpus(train=train, val=val, test=test)


# ---------------------------------------------------------------------------
# File I/O: line-delimited JSON, one sequence per line
# ---------------------------------------------------------------------------

def _sequence_to_json(seq: NarratedSequence) -> str:
    obj = {
        "video_id": seq.video_id,
        "task_id": seq.task_id,
        "V": [[n.t, n.label, n.x.tolist()] for n in seq.visual],
        "T": [[n.t, n.label, list(n.tokens)] for n in seq.text],
    }
    return json.dumps(obj, allow_nan=False, separators=(",", ":"))


def _sequence_from_json(obj, where: str) -> NarratedSequence:
    try:
        visual = [VisualNode(t=int(t), label=int(lab),
                             x=np.array(xs, dtype=np.float64))
                  for t, lab, xs in obj["V"]]
        text = [TextNode(t=int(t), label=int(lab),
                         tokens=tuple(int(tok) for tok in toks))
                for t, lab, toks in obj["T"]]
        return NarratedSequence(video_id=int(obj["video_id"]),
                                task_id=int(obj["task_id"]),
                                visual=visual, text=text)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{where}: malformed sequence record ({exc})") from exc


def write_sequences(seqs: list[NarratedSequence], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in seqs:
            fh.write(_sequence_to_json(seq))
            fh.write("\n")


def read_sequences(path) -> list[NarratedSequence]:
    seqs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            seqs.append(_sequence_from_json(obj, f"{path}:{lineno}"))
    return seqs


_SPLIT_FILES = {"train": "train.jsonl", "val": "val.jsonl", "test": "test.jsonl"}


def write_corpus(corpus: Corpus, directory) -> None:
    """Write one JSONL file per split into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, fname in _SPLIT_FILES.items():
        write_sequences(corpus.split(name), directory / fname)


def read_corpus(directory) -> Corpus:
    directory = Path(directory)
    parts = {}
    for name, fname in _SPLIT_FILES.items():
        path = directory / fname
        if not path.exists():
            raise DataError(f"missing corpus split file {path}")
        parts[name] = read_sequences(path)
    return Corpus(**parts)


# ---------------------------------------------------------------------------
# Segment sampling
# ---------------------------------------------------------------------------

@dataclass
class Segment:
    """A contiguous time window of one sequence, optionally subsampled."""
    video_id: int
    task_id: int
    t0: int
    t1: int
    visual: list[VisualNode]
    text: list[TextNode]

    visual_matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.visual_matrix = np.stack([n.x for n in self.visual]) if self.visual else \
            np.zeros((0, 0))

    @property
    def visual_times(self) -> list[int]:
        return [n.t for n in self.visual]

    @property
    def text_times(self) -> list[int]:
        return [n.t for n in self.text]


def sample_segment(seq: NarratedSequence, max_len: int, rate_divisor: int,
                   rng: SplitMix64, max_tries: int = 20) -> Segment | None:
    """Contiguous window of at most ``max_len`` time steps.

    Visual nodes keep every ``rate_divisor``-th in-window node; all
    in-window text nodes are retained. Returns None (skip signal) when no
    window with at least 2 nodes per modality is found.
    """
    if max_len < 4:
        raise ParameterError(f"max_len must be at least 4, got {max_len}")
    if rate_divisor < 1:
        raise ParameterError(f"rate_divisor must be at least 1, got {rate_divisor}")
    if len(seq.visual) < 2 or len(seq.text) < 2:
        return None
    tmin = min(seq.visual[0].t, seq.text[0].t)
    tmax = max(seq.visual[-1].t, seq.text[-1].t)
    span = tmax - tmin + 1
    n_starts = max(1, span - max_len + 1)
    for _ in range(max_tries):
        t0 = tmin + (rng.randint(n_starts) if n_starts > 1 else 0)
        t1 = t0 + max_len - 1
        vis = [n for n in seq.visual if t0 <= n.t <= t1][::rate_divisor]
        txt = [n for n in seq.text if t0 <= n.t <= t1]
        if len(vis) >= 2 and len(txt) >= 2:
            return Segment(video_id=seq.video_id, task_id=seq.task_id,
                           t0=t0, t1=t1, visual=vis, text=txt)
    return None
