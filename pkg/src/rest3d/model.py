"""Small referring-segmentation network with hand-written reverse mode.

Pipeline per sample:

    points (N, 6) -> tanh MLP -> point features (N, d)
    mean-pool per superpoint -> S (N_s, d)
    token ids -> embedding table -> E (T, d)
    F = softmax(S E^T / sqrt(d)) E                       attention features (N_s, d)
    logit = w4 . tanh([S, F] W3 + b3) + b4               one logit per superpoint
    score = sigmoid(w5 . mean_s F + b5)

Everything is computed for a whole batch of samples at once. Superpoints of
all samples are stacked; token lists are right-padded and masked.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

INPUT_SCALE = 3.0


@dataclass(frozen=True)
class ModelConfig:
    d: int = 16
    hidden: int = 32
    vocab: int = 64
    seed: int = 0

    def validate(self) -> None:
        if min(self.d, self.hidden, self.vocab) < 1:
            raise ValueError("d, hidden and vocab must all be >= 1")


def segment_shapes(config: ModelConfig) -> dict:
    d, h = config.d, config.hidden
    return {
        "point_w1": (6, h),
        "point_b1": (h,),
        "point_w2": (h, d),
        "point_b2": (d,),
        "tok_emb": (config.vocab, d),
        "mask_w1": (2 * d, h),
        "mask_b1": (h,),
        "mask_w2": (h,),
        "mask_b2": (1,),
        "score_w": (d,),
        "score_b": (1,),
    }


@dataclass
class ParamVector:
    """Flat parameter array plus a named segment table."""

    values: np.ndarray
    layout: dict  # name -> (offset, shape)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ParamVector":
        layout, offset = {}, 0
        for name, shape in segment_shapes(config).items():
            layout[name] = (offset, shape)
            offset += int(np.prod(shape))
        return cls(np.zeros(offset), layout)

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, name: str) -> np.ndarray:
        offset, shape = self.layout[name]
        return self.values[offset : offset + int(np.prod(shape))].reshape(shape)

    def segment_of(self, index: int) -> str:
        for name, (offset, shape) in self.layout.items():
            if offset <= index < offset + int(np.prod(shape)):
                return name
        raise IndexError(index)

    def like(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=float), self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


def init_params(config: ModelConfig) -> ParamVector:
    """Fan-in scaled uniform weights, zero biases."""
    config.validate()
    params = ParamVector.zeros(config)
    rng = np.random.default_rng(config.seed)
    fan_in = {
        "point_w1": 6,
        "point_w2": config.hidden,
        "tok_emb": 1,
        "mask_w1": 2 * config.d,
        "mask_w2": config.hidden,
        "score_w": config.d,
    }
    for name, fan in fan_in.items():
        w = params[name]
        bound = 1.0 / math.sqrt(fan)
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return params


@dataclass
class Prediction:
    superpoint_logits: np.ndarray
    point_probs: np.ndarray
    hard_mask: np.ndarray
    attn_features: np.ndarray
    score: float


@dataclass
class _Batch:
    """Stacked inputs plus every intermediate needed by the reverse pass."""

    x: np.ndarray
    pool: sp.csr_matrix
    sp_sample: np.ndarray
    sp_offsets: np.ndarray
    pt_offsets: np.ndarray
    point_sp: np.ndarray
    tok: np.ndarray
    tok_valid: np.ndarray
    cache: dict = field(default_factory=dict)


def _stack_inputs(items: Sequence) -> _Batch:
    xs, sps, rows, cols, vals, sp_sample = [], [], [], [], [], []
    sp_offsets, pt_offsets = [0], [0]
    toks = []
    for b, (points, superpoint_id, tokens) in enumerate(items):
        points = np.asarray(points, dtype=float)
        superpoint_id = np.asarray(superpoint_id)
        tokens = np.asarray(tokens)
        if len(tokens) == 0:
            raise ValueError("token sequence must be non-empty")
        if len(points) != len(superpoint_id):
            raise ValueError("points and superpoint_id lengths differ")
        n_sp = int(superpoint_id.max()) + 1
        counts = np.bincount(superpoint_id, minlength=n_sp)
        if np.any(counts == 0):
            raise ValueError("superpoint ids must be dense (no empty superpoints)")
        x = points.copy()
        x[:, :2] -= x[:, :2].mean(axis=0)
        x[:, :3] /= INPUT_SCALE
        x[:, 3:] -= 0.5
        xs.append(x)
        gsp = superpoint_id + sp_offsets[-1]
        sps.append(gsp)
        rows.append(gsp)
        cols.append(np.arange(len(points)) + pt_offsets[-1])
        vals.append(1.0 / counts[superpoint_id])
        sp_sample.append(np.full(n_sp, b))
        sp_offsets.append(sp_offsets[-1] + n_sp)
        pt_offsets.append(pt_offsets[-1] + len(points))
        toks.append(tokens)
    n_sp_total, n_pt_total = sp_offsets[-1], pt_offsets[-1]
    pool = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_sp_total, n_pt_total)
    )
    t_max = max(len(t) for t in toks)
    tok = np.zeros((len(toks), t_max), dtype=np.int64)
    valid = np.zeros((len(toks), t_max), dtype=bool)
    for b, t in enumerate(toks):
        tok[b, : len(t)] = t
        valid[b, : len(t)] = True
    return _Batch(
        x=np.concatenate(xs),
        pool=pool,
        sp_sample=np.concatenate(sp_sample),
        sp_offsets=np.array(sp_offsets),
        pt_offsets=np.array(pt_offsets),
        point_sp=np.concatenate(sps),
        tok=tok,
        tok_valid=valid,
    )


def _as_item(source, tokens=None):
    if tokens is None:
        source, tokens = source
    return source.points, source.superpoint_id, tokens


def _check_layout(params: ParamVector) -> None:
    total = sum(int(np.prod(shape)) for _, shape in params.layout.values())
    if total != len(params.values):
        raise ValueError(f"parameter layout covers {total} values but vector has {len(params.values)}")


def forward_batch(params: ParamVector, items: Sequence) -> tuple[list, _Batch]:
    """Run the network on ``items``: a sequence of ``(view, tokens)`` pairs.

    A view is anything with ``points`` and ``superpoint_id`` attributes (a
    Scene or an AugmentedView). Returns per-sample predictions and the batch
    cache for :func:`backward_batch`.
    """
    _check_layout(params)
    batch = _stack_inputs([_as_item(it) for it in items])
    d = params["point_w2"].shape[1]
    if params["tok_emb"].shape[1] != d or params["mask_w1"].shape[0] != 2 * d:
        raise ValueError("parameter layout does not match model dimensions")
    if batch.tok.max() >= params["tok_emb"].shape[0]:
        raise ValueError("token id out of vocabulary range")

    h1 = np.tanh(batch.x @ params["point_w1"] + params["point_b1"])
    pf = h1 @ params["point_w2"] + params["point_b2"]
    s = batch.pool @ pf

    emb = params["tok_emb"][batch.tok]  # (B, T, d)
    k = emb[batch.sp_sample]  # (NS, T, d)
    valid = batch.tok_valid[batch.sp_sample]
    scale = 1.0 / math.sqrt(d)
    att_logits = np.einsum("sd,std->st", s, k) * scale
    att_logits = np.where(valid, att_logits, -np.inf)
    att_logits -= att_logits.max(axis=1, keepdims=True)
    a = np.exp(att_logits)
    a /= a.sum(axis=1, keepdims=True)
    f = np.einsum("st,std->sd", a, k)

    z = np.concatenate([s, f], axis=1)
    g = np.tanh(z @ params["mask_w1"] + params["mask_b1"])
    logits = g @ params["mask_w2"] + params["mask_b2"][0]

    n_b = len(batch.sp_offsets) - 1
    sp_count = np.diff(batch.sp_offsets)
    f_mean = np.stack([np.bincount(batch.sp_sample, f[:, j], minlength=n_b) for j in range(d)], axis=1)
    f_mean /= sp_count[:, None]
    score = 1.0 / (1.0 + np.exp(-(f_mean @ params["score_w"] + params["score_b"][0])))

    batch.cache = dict(h1=h1, s=s, k=k, a=a, f=f, z=z, g=g, f_mean=f_mean, score=score, scale=scale)

    preds = []
    for b in range(n_b):
        lo, hi = batch.sp_offsets[b], batch.sp_offsets[b + 1]
        plo, phi = batch.pt_offsets[b], batch.pt_offsets[b + 1]
        sl = logits[lo:hi]
        probs = 1.0 / (1.0 + np.exp(-sl))
        local_sp = batch.point_sp[plo:phi] - lo
        point_probs = probs[local_sp]
        preds.append(
            Prediction(
                superpoint_logits=sl,
                point_probs=point_probs,
                hard_mask=point_probs > 0.5,
                attn_features=f[lo:hi],
                score=float(score[b]),
            )
        )
    return preds, batch


def forward(params: ParamVector, scene, tokens) -> Prediction:
    preds, _ = forward_batch(params, [(scene, tokens)])
    return preds[0]


@dataclass
class OutputGrad:
    """Upstream gradient for one sample's prediction."""

    superpoint_logits: np.ndarray
    attn_features: Optional[np.ndarray] = None
    score: float = 0.0


def backward_batch(params: ParamVector, batch: _Batch, upstream: Sequence[OutputGrad]) -> ParamVector:
    """Gradient of ``sum_b <upstream_b, prediction_b>`` w.r.t. the parameters."""
    c = batch.cache
    n_b = len(batch.sp_offsets) - 1
    if len(upstream) != n_b:
        raise ValueError(f"expected {n_b} upstream gradients, got {len(upstream)}")
    n_sp = batch.sp_offsets[-1]
    d = c["f"].shape[1]
    dlogit = np.zeros(n_sp)
    df = np.zeros((n_sp, d))
    dscore = np.zeros(n_b)
    for b, up in enumerate(upstream):
        lo, hi = batch.sp_offsets[b], batch.sp_offsets[b + 1]
        if np.shape(up.superpoint_logits) != (hi - lo,):
            raise ValueError("upstream superpoint_logits shape mismatch")
        dlogit[lo:hi] = up.superpoint_logits
        if up.attn_features is not None:
            if np.shape(up.attn_features) != (hi - lo, d):
                raise ValueError("upstream attn_features shape mismatch")
            df[lo:hi] = up.attn_features
        dscore[b] = up.score

    grad = ParamVector(np.zeros_like(params.values), params.layout)

    # score head
    score = c["score"]
    dpre = dscore * score * (1.0 - score)
    grad["score_w"][...] = dpre @ c["f_mean"]
    grad["score_b"][0] = dpre.sum()
    sp_count = np.diff(batch.sp_offsets)
    df += np.outer(dpre / sp_count, params["score_w"])[batch.sp_sample]

    # mask head
    g = c["g"]
    grad["mask_w2"][...] = g.T @ dlogit
    grad["mask_b2"][0] = dlogit.sum()
    dgpre = np.outer(dlogit, params["mask_w2"]) * (1.0 - g * g)
    grad["mask_w1"][...] = c["z"].T @ dgpre
    grad["mask_b1"][...] = dgpre.sum(axis=0)
    dz = dgpre @ params["mask_w1"].T
    ds = dz[:, :d].copy()
    df += dz[:, d:]

    # attention
    a, k, s, scale = c["a"], c["k"], c["s"], c["scale"]
    da = np.einsum("sd,std->st", df, k)
    dk = a[:, :, None] * df[:, None, :]
    dlog = a * (da - (a * da).sum(axis=1, keepdims=True))
    ds += np.einsum("st,std->sd", dlog, k) * scale
    dk += dlog[:, :, None] * s[:, None, :] * scale
    # scatter superpoint-level key grads back to (sample, token) then to vocab rows
    t_max = batch.tok.shape[1]
    demb = np.zeros((n_b, t_max, d))
    np.add.at(demb, batch.sp_sample, dk)
    demb[~batch.tok_valid] = 0.0
    np.add.at(grad["tok_emb"], batch.tok[batch.tok_valid], demb[batch.tok_valid])

    # point MLP
    dpf = batch.pool.T @ ds
    h1 = c["h1"]
    grad["point_w2"][...] = h1.T @ dpf
    grad["point_b2"][...] = dpf.sum(axis=0)
    dh = (dpf @ params["point_w2"].T) * (1.0 - h1 * h1)
    grad["point_w1"][...] = batch.x.T @ dh
    grad["point_b1"][...] = dh.sum(axis=0)
    return grad


def backward(params: ParamVector, scene, tokens, upstream: OutputGrad) -> ParamVector:
    _, batch = forward_batch(params, [(scene, tokens)])
    return backward_batch(params, batch, [upstream])


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, params: ParamVector) -> "AdamState":
        return cls(np.zeros_like(params.values), np.zeros_like(params.values), 0)


def adamw_step(
    params: ParamVector,
    grad: ParamVector,
    state: AdamState,
    lr: float = 1e-3,
    weight_decay: float = 1e-4,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[ParamVector, AdamState]:
    """One AdamW step with decoupled weight decay. Inputs are not modified."""
    g = grad.values
    if g.shape != params.values.shape:
        raise ValueError("gradient and parameter shapes differ")
    bad = np.flatnonzero(~np.isfinite(g))
    if len(bad):
        raise FloatingPointError(f"non-finite gradient in segment {params.segment_of(int(bad[0]))!r}")
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * g
    v = b2 * state.v + (1 - b2) * g * g
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    new = params.values * (1 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params.like(new), AdamState(m, v, t)


# ---------------------------------------------------------------------------
# Checkpoints: one JSON header line, then raw little-endian float64 values.

_MAGIC = b"REST3DCKPT1\n"


def save_checkpoint(path, params: ParamVector, config: ModelConfig, extra: Optional[dict] = None) -> None:
    header = {
        "config": asdict(config),
        "segments": {k: [off, list(shape)] for k, (off, shape) in params.layout.items()},
        "length": len(params.values),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode() + b"\n"
    raw = params.values.astype("<f8").tobytes()
    Path(path).write_bytes(_MAGIC + struct.pack("<Q", len(blob)) + blob + raw)


def load_checkpoint(path) -> tuple[ParamVector, ModelConfig, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a checkpoint")
    pos = len(_MAGIC)
    (n,) = struct.unpack("<Q", data[pos : pos + 8])
    header = json.loads(data[pos + 8 : pos + 8 + n])
    values = np.frombuffer(data[pos + 8 + n :], dtype="<f8").astype(float)
    if len(values) != header["length"]:
        raise ValueError(f"{path}: truncated checkpoint")
    layout = {k: (off, tuple(shape)) for k, (off, shape) in header["segments"].items()}
    return ParamVector(values, layout), ModelConfig(**header["config"]), header["extra"]
