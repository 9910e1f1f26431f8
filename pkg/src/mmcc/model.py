"""Learnable components and their (de)serialization.

Architecture (all MLPs; hidden layers are Linear -> ReLU -> LayerNorm,
final layers are plain Linear, l2-normalized only when the output lives
in the shared similarity space):

  visual embedder   2 layers, d_vis -> d -> d            (z-space)
  text embedder     token matrix -> w1 -> ReLU -> max-pool -> w2  (z-space)
  projectors        1 layer per modality, d -> d, unit-norm outputs
  fusion            1 layer, 2d -> d                     (z-space)
  future/past heads 4 layers each, first two shared (one trunk object,
                    referenced by both heads), unit-norm outputs

Baseline variants ("ra", "tap") reuse the embedders and carry a single
4-layer predictive head instead of the trunk/head pair.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DataError, ParameterError, ShapeError
from .rng import SplitMix64, derive_seed
from .tensor import Tensor

CHECKPOINT_MAGIC = b"MMCC-CKPT"
CHECKPOINT_VERSION = 1

_INIT_STREAM = 0x1417A2B5


@dataclass
class ModelConfig:
    d: int = 64
    d_vis: int = 64
    vocab_size: int = 256
    tau_attn: float = 0.1
    tau_start: float = 0.1
    p_unimodal: float = 0.5
    cycle_path: str = "within"       # "within" | "across"
    max_index: bool = True           # temporal masking of cycle edges
    sim_loss: bool = True            # visual-diversity hinge penalty
    margin: float = 0.5
    crossmodal_window: int = 2       # k: +/- node window of positives
    start_sampling: str = "concreteness"  # "concreteness" | "random"

    def validate(self) -> None:
        if self.d < 8:
            raise ParameterError(f"embedding dim d must be >= 8, got {self.d}")
        if self.tau_attn <= 0 or self.tau_start <= 0:
            raise ParameterError("temperatures must be positive")
        if not 0.0 <= self.p_unimodal <= 1.0:
            raise ParameterError(f"p_unimodal must be in [0,1], got {self.p_unimodal}")
        if self.cycle_path not in ("within", "across"):
            raise ParameterError(f"cycle_path must be 'within' or 'across', got {self.cycle_path!r}")
        if self.start_sampling not in ("concreteness", "random"):
            raise ParameterError(f"unknown start_sampling {self.start_sampling!r}")
        if not 0.0 <= self.margin <= 1.0:
            raise ParameterError(f"margin must be in [0,1], got {self.margin}")
        if self.crossmodal_window < 0:
            raise ParameterError("crossmodal_window must be >= 0")


def _mlp_blocks(prefix: str, dims: list[tuple[int, int]], final_plain: bool):
    """(name, shape, kind) triples for an MLP; hidden layers carry LayerNorm."""
    blocks = []
    last = len(dims) - 1
    for i, (fan_in, fan_out) in enumerate(dims):
        blocks.append((f"{prefix}.{i}.w", (fan_in, fan_out), "weight"))
        blocks.append((f"{prefix}.{i}.b", (fan_out,), "bias"))
        if not (final_plain and i == last):
            blocks.append((f"{prefix}.{i}.ln_g", (fan_out,), "ln_gain"))
            blocks.append((f"{prefix}.{i}.ln_b", (fan_out,), "ln_bias"))
    return blocks


def _block_plan(config: ModelConfig, variant: str):
    d, dv, v = config.d, config.d_vis, config.vocab_size
    plan = []
    plan += _mlp_blocks("phi_v", [(dv, d), (d, d)], final_plain=True)
    plan.append(("phi_t.embed", (v, d), "embed"))
    plan += _mlp_blocks("phi_t.w1", [(d, d)], final_plain=True)
    plan += _mlp_blocks("phi_t.w2", [(d, d)], final_plain=True)
    if variant == "mmcc":
        plan += _mlp_blocks("pi_v", [(d, d)], final_plain=True)
        plan += _mlp_blocks("pi_t", [(d, d)], final_plain=True)
        plan += _mlp_blocks("fuse", [(2 * d, d)], final_plain=True)
        plan += _mlp_blocks("g_trunk", [(d, d), (d, d)], final_plain=False)
        plan += _mlp_blocks("g_fwd", [(d, d), (d, d)], final_plain=True)
        plan += _mlp_blocks("g_back", [(d, d), (d, d)], final_plain=True)
    elif variant in ("ra", "tap"):
        plan += _mlp_blocks("pred", [(d, d), (d, d), (d, d), (d, d)], final_plain=True)
    else:
        raise ParameterError(f"unknown model variant {variant!r}")
    return plan


class ModelParams:
    """Named parameter tensors. The g heads share one trunk by reference:
    there is a single set of ``g_trunk.*`` tensors in ``tensors``."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor],
                 variant: str = "mmcc"):
        self.config = config
        self.tensors = tensors
        self.variant = variant

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def trainable(self) -> list[Tensor]:
        return [t for t in self.tensors.values() if t.requires_grad]

    def trainable_named(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if t.requires_grad}

    def zero_grads(self) -> None:
        T.zero_grads(self.tensors.values())

    def add_frozen(self, name: str, data: np.ndarray) -> None:
        self.tensors[name] = Tensor(data.copy(), requires_grad=False)


def init_params(config: ModelConfig, seed: int, variant: str = "mmcc") -> ModelParams:
    """Fan-in-scaled uniform weights (bound sqrt(6/fan_in)), zero biases,
    unit LayerNorm gains. Deterministic per seed."""
    config.validate()
    rng = SplitMix64(derive_seed(seed, _INIT_STREAM))
    tensors: dict[str, Tensor] = {}
    for name, shape, kind in _block_plan(config, variant):
        if kind == "weight":
            bound = np.sqrt(6.0 / shape[0])
            data = np.array([rng.uniform() * 2 - 1 for _ in range(int(np.prod(shape)))])
            data = data.reshape(shape) * bound
        elif kind == "embed":
            bound = np.sqrt(6.0 / shape[1])
            data = np.array([rng.uniform() * 2 - 1 for _ in range(int(np.prod(shape)))])
            data = data.reshape(shape) * bound
        elif kind == "ln_gain":
            data = np.ones(shape)
        else:  # bias, ln_bias
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(config, tensors, variant)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _affine(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return T.add(T.matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def _hidden_layer(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    h = T.relu(_affine(x, params, prefix))
    return T.layer_norm(h, params[f"{prefix}.ln_g"], params[f"{prefix}.ln_b"])


def embed_visual(params: ModelParams, x) -> Tensor:
    """Feature rows (N, d_vis) -> z-space rows (N, d)."""
    if not isinstance(x, Tensor):
        x = Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if x.data.ndim != 2 or x.data.shape[1] != params.config.d_vis:
        raise ShapeError(
            f"embed_visual expects (N, {params.config.d_vis}), got {x.data.shape}")
    h = _hidden_layer(x, params, "phi_v.0")
    return _affine(h, params, "phi_v.1")


def embed_text(params: ModelParams, token_ids) -> Tensor:
    """Token ids -> one z-space vector (d,) via max-pool over token channels."""
    ids = list(token_ids)
    if not ids:
        raise DataError("embed_text needs at least one token")
    if min(ids) < 0 or max(ids) >= params.config.vocab_size:
        raise DataError(
            f"token id out of range [0, {params.config.vocab_size}): {ids}")
    rows = T.gather_rows(params["phi_t.embed"], ids)
    h = T.relu(_affine(rows, params, "phi_t.w1.0"))
    pooled = T.max_pool_rows(h)
    out = _affine(T.as_row_matrix(pooled), params, "phi_t.w2.0")
    return T.as_vector(out)


def embed_text_batch(params: ModelParams, utterances) -> Tensor:
    """List of token-id sequences -> (N, d) matrix."""
    return T.stack_rows([embed_text(params, u) for u in utterances])


def _rows_in_rows_out(fn, z: Tensor) -> Tensor:
    if z.data.ndim == 1:
        return T.as_vector(fn(T.as_row_matrix(z)))
    return fn(z)


def project(params: ModelParams, z: Tensor, modality: str) -> Tensor:
    """z-space -> unit-norm similarity space. modality is 'V' or 'T'."""
    prefix = {"V": "pi_v", "T": "pi_t"}.get(modality)
    if prefix is None:
        raise ParameterError(f"modality must be 'V' or 'T', got {modality!r}")
    return _rows_in_rows_out(
        lambda m: T.l2_normalize(_affine(m, params, f"{prefix}.0")), z)


def fuse(params: ModelParams, z_state: Tensor, z_other: Tensor) -> Tensor:
    """Combine the navigated modality's vector with its cross-modal partner."""
    if z_state.data.ndim != 1 or z_other.data.ndim != 1:
        raise ShapeError("fuse expects two (d,) vectors")
    joint = T.as_row_matrix(T.concat_features(z_state, z_other))
    return T.as_vector(_affine(joint, params, "fuse.0"))


def _g_trunk(params: ModelParams, z: Tensor) -> Tensor:
    h = _hidden_layer(z, params, "g_trunk.0")
    return _hidden_layer(h, params, "g_trunk.1")


def _g_head(params: ModelParams, head: str, z: Tensor) -> Tensor:
    def fn(m):
        h = _g_trunk(params, m)
        h = _hidden_layer(h, params, f"{head}.0")
        return T.l2_normalize(_affine(h, params, f"{head}.1"))
    return _rows_in_rows_out(fn, z)


def predict_forward(params: ModelParams, z: Tensor) -> Tensor:
    """Future query in similarity space (unit norm)."""
    return _g_head(params, "g_fwd", z)


def predict_backward(params: ModelParams, z: Tensor) -> Tensor:
    """Past query in similarity space (unit norm)."""
    return _g_head(params, "g_back", z)


def predict_next(params: ModelParams, z: Tensor) -> Tensor:
    """Baseline 4-layer predictive head (ra/tap variants)."""
    def fn(m):
        h = _hidden_layer(m, params, "pred.0")
        h = _hidden_layer(h, params, "pred.1")
        h = _hidden_layer(h, params, "pred.2")
        return _affine(h, params, "pred.3")
    return _rows_in_rows_out(fn, z)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: ModelParams
    adam: T.AdamState | None
    epoch: int
    corpus_seed: int
    meta: dict


def save_checkpoint(path, params: ModelParams, adam: T.AdamState | None = None,
                    epoch: int = 0, corpus_seed: int = 0,
                    meta: dict | None = None) -> None:
    """Binary layout: magic, version u32, header-length u64, JSON header,
    then raw little-endian float64 blocks in header order."""
    names = list(params.tensors.keys())
    header = {
        "model_config": dataclasses.asdict(params.config),
        "variant": params.variant,
        "epoch": epoch,
        "corpus_seed": corpus_seed,
        "meta": meta or {},
        "blocks": [{"name": n,
                    "shape": list(params.tensors[n].data.shape),
                    "requires_grad": params.tensors[n].requires_grad}
                   for n in names],
    }
    if adam is not None:
        trainable = [n for n in names if params.tensors[n].requires_grad]
        header["optimizer"] = {"t": adam.t, "beta1": adam.beta1,
                               "beta2": adam.beta2, "eps": adam.eps,
                               "blocks": trainable}
    else:
        header["optimizer"] = None
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(params.tensors[n].data.astype("<f8").tobytes(order="C"))
        if adam is not None:
            for arr in adam.m:
                fh.write(arr.astype("<f8").tobytes(order="C"))
            for arr in adam.v:
                fh.write(arr.astype("<f8").tobytes(order="C"))


def _read_exact(fh, n: int, what: str, path) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"{path}: truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint file not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint (bad magic {magic!r})")
        version = struct.unpack("<I", _read_exact(fh, 4, "version", path))[0]
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        hlen = struct.unpack("<Q", _read_exact(fh, 8, "header length", path))[0]
        try:
            header = json.loads(_read_exact(fh, hlen, "header", path))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: corrupt header ({exc.msg})") from exc

        try:
            config = ModelConfig(**header["model_config"])
        except TypeError as exc:
            raise DataError(f"{path}: unknown model config fields ({exc})") from exc
        config.validate()
        variant = header.get("variant", "mmcc")

        declared = {b["name"]: b for b in header["blocks"]}
        expected = {name: shape for name, shape, _ in _block_plan(config, variant)}
        for name, shape in expected.items():
            if name not in declared:
                raise DataError(f"{path}: missing parameter block {name}")
            if tuple(declared[name]["shape"]) != shape:
                raise DataError(
                    f"{path}: shape mismatch for {name}: header says "
                    f"{declared[name]['shape']}, config implies {list(shape)}")

        tensors: dict[str, Tensor] = {}
        for blk in header["blocks"]:
            shape = tuple(int(s) for s in blk["shape"])
            nbytes = int(np.prod(shape)) * 8
            raw = _read_exact(fh, nbytes, f"block {blk['name']}", path)
            data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            tensors[blk["name"]] = Tensor(data, requires_grad=bool(blk["requires_grad"]))

        params = ModelParams(config, tensors, variant)
        adam = None
        opt = header.get("optimizer")
        if opt is not None:
            trainable = [tensors[n] for n in opt["blocks"]]
            adam = T.AdamState(trainable, beta1=opt["beta1"], beta2=opt["beta2"],
                               eps=opt["eps"])
            adam.t = int(opt["t"])
            adam.m = [np.frombuffer(
                _read_exact(fh, t.data.size * 8, "adam m", path),
                dtype="<f8").reshape(t.data.shape).copy() for t in trainable]
            adam.v = [np.frombuffer(
                _read_exact(fh, t.data.size * 8, "adam v", path),
                dtype="<f8").reshape(t.data.shape).copy() for t in trainable]
    return Checkpoint(params=params, adam=adam, epoch=int(header["epoch"]),
                      corpus_seed=int(header["corpus_seed"]),
                      meta=header.get("meta", {}))
