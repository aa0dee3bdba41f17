"""Octree attention and the Octree Transformer Block (OTB).

Self-attention runs only at the coarsest pyramid level.  Each query there
keeps its top-k most attended tokens; one level down, the children of those
tokens (at most K of them) form the key set shared by all children of the
query, and cross-attention over that small set replaces full self-attention.
The recursion continues to level 0, after which every level's output is
upsampled, concatenated, projected and combined with a LePE residual and an
FFN.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import macs
from . import tensor as T
from .grid import EMPTY, DenseTokenBatch, SparseVoxelGrid, dense_slots, from_dense_batch, to_dense_batch
from .pyramid import FeaturePyramid, IndexBank, build_pyramid, level_stats, upsample
from .semantic import SamConfig, sam_mask, sape
from .sparse_conv import SubmConvParams, subm_conv
from .tensor import Tensor

logger = logging.getLogger(__name__)

TRAIN = "train"
INFER = "infer"


@dataclass(frozen=True)
class OTBConfig:
    """Shape and sampling hyperparameters of one Octree Transformer Block.

    ``k=None`` keeps every valid token and ``keys=None`` disables key-set
    truncation; together (in infer mode) they make octree attention
    exhaustive, i.e. plain self-attention on every level.
    """

    d: int = 64
    heads: int = 2
    head_dim: int = 32
    height: int = 4
    k: Optional[int] = 8
    keys: Optional[int] = 32
    tau: float = 1.0
    ffn_hidden: Optional[int] = None
    bn_eps: float = 1e-5
    sam: SamConfig = field(default_factory=SamConfig)
    chunk_size: int = 4096
    top_padding: int = 0  # extra empty token slots at the top level, for padding checks

    def __post_init__(self):
        if self.heads * self.head_dim != self.d:
            raise ValueError(f"heads * head_dim ({self.heads}*{self.head_dim}) must equal d={self.d}")
        if self.height < 1:
            raise ValueError("pyramid height must be >= 1")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")
        if self.keys is not None and self.keys < 1:
            raise ValueError("K must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @property
    def hidden(self) -> int:
        return self.ffn_hidden or 2 * self.d

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.d)


@dataclass
class LevelTrace:
    level: int
    scores: np.ndarray  # head-summed attention, B x m x m at the top, m_n x K below
    selection: np.ndarray  # O_n: m_n x k global level-n rows, EMPTY padded
    key_index: Optional[np.ndarray] = None  # m_n x K level-n rows per query (lower levels)
    parent_keys: Optional[np.ndarray] = None  # m_{n+1} x K sampled octants before broadcast


@dataclass
class OctreeSelection:
    """Everything the forward pass selected, coarsest level first."""

    levels: list = field(default_factory=list)

    def at(self, level: int) -> LevelTrace:
        for t in self.levels:
            if t.level == level:
                return t
        raise KeyError(level)


# ---------------------------------------------------------------------------
# parameters


def init_otb_params(cfg: OTBConfig, rng: np.random.Generator, prefix: str = "", requires_grad: bool = False) -> dict:
    d, h, hd = cfg.d, cfg.heads, cfg.head_dim

    def w(shape, fan_in):
        return Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), shape), requires_grad)

    p: dict = {}
    for n in range(cfg.height):
        p[f"{prefix}level{n}.wq"] = w((h, d, hd), d)
        p[f"{prefix}level{n}.wk"] = w((h, d, hd), d)
        p[f"{prefix}level{n}.wv"] = w((h, d, hd), d)
        p[f"{prefix}level{n}.wh"] = w((h, hd, d), hd)
        p[f"{prefix}level{n}.sape"] = w((d + 4, d), d + 4)
        p[f"{prefix}pyramid.{n}.gamma"] = Tensor(np.ones(d), requires_grad)
        p[f"{prefix}pyramid.{n}.beta"] = Tensor(np.zeros(d), requires_grad)
    p[f"{prefix}fc.weight"] = w((cfg.height * d, d), cfg.height * d)
    p[f"{prefix}fc.bias"] = Tensor(np.zeros(d), requires_grad)
    lepe = SubmConvParams.init(d, d, rng, requires_grad)
    p[f"{prefix}lepe.kernel"] = lepe.kernel
    p[f"{prefix}lepe.bias"] = lepe.bias
    p[f"{prefix}ffn.w1"] = w((d, cfg.hidden), d)
    p[f"{prefix}ffn.b1"] = Tensor(np.zeros(cfg.hidden), requires_grad)
    p[f"{prefix}ffn.w2"] = w((cfg.hidden, d), cfg.hidden)
    p[f"{prefix}ffn.b2"] = Tensor(np.zeros(d), requires_grad)
    p[f"{prefix}ffn.bn.gamma"] = Tensor(np.ones(d), requires_grad)
    p[f"{prefix}ffn.bn.beta"] = Tensor(np.zeros(d), requires_grad)
    return p


def subparams(params: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# attention kernels


def mhsa_top(
    tokens,
    params: dict,
    cfg: OTBConfig,
    additive_mask: Optional[np.ndarray] = None,
):
    """Multi-head self-attention over a padded B x m x d token batch.

    ``params`` holds ``wq``, ``wk``, ``wv`` (H x d x hd) and ``wh`` (H x hd x d).
    ``additive_mask`` (B x m x m) is added to every head's logits before the
    softmax.  Returns ``(scores, feats)``: the head-summed post-softmax matrix
    (valid rows sum to H) and the B x m x d attentive features.
    """
    x = tokens.tokens
    valid = tokens.validity
    b, m, d = x.shape
    h, hd = cfg.heads, cfg.head_dim
    xb = T.reshape(x, (b, 1, m, d))
    q = T.matmul(xb, params["wq"])  # B x H x m x hd
    k = T.matmul(xb, params["wk"])
    v = T.matmul(xb, params["wv"])
    logits = T.scale(T.matmul(q, T.transpose(k)), cfg.scale)
    if additive_mask is not None:
        logits = T.add(logits, Tensor(np.asarray(additive_mask)[:, None, :, :]))
    mask = (valid[:, :, None] & valid[:, None, :])[:, None, :, :]
    attn = T.softmax_rows(logits, mask)
    out = T.matmul(T.matmul(attn, v), params["wh"])  # B x H x m x d
    feats = T.sum(out, axis=1)
    macs.record(macs.PROJECTION, b * h * m * d * hd * 4)
    macs.record(macs.SCORE, b * h * m * m * hd)
    macs.record(macs.VALUE, b * h * m * m * hd)
    scores = T.sum(attn, axis=1)
    return scores, feats


def cross_attention(
    queries: Tensor,
    key_index: np.ndarray,
    params: dict,
    cfg: OTBConfig,
    additive_mask: Optional[np.ndarray] = None,
    keys: Optional[Tensor] = None,
):
    """Each query row attends only to its own key rows ``key_index[i]`` (EMPTY = padding).

    Keys and values are taken from ``keys`` (default: ``queries``).  Returns the
    head-summed scores (m x K) and attentive features (m x d).
    """
    src = queries if keys is None else keys
    key_index = np.asarray(key_index, dtype=np.int64)
    m, width = key_index.shape
    h, hd, d = cfg.heads, cfg.head_dim, cfg.d
    q = T.transpose(T.matmul(T.reshape(queries, (1, m, d)), params["wq"]), (1, 0, 2))  # m x H x hd
    kp = T.transpose(T.matmul(T.reshape(src, (1, -1, d)), params["wk"]), (1, 0, 2))  # n x H x hd
    vp = T.transpose(T.matmul(T.reshape(src, (1, -1, d)), params["wv"]), (1, 0, 2))
    macs.record(macs.PROJECTION, h * d * hd * (m + 2 * src.shape[0]))

    score_parts, feat_parts = [], []
    step = max(1, cfg.chunk_size)
    for lo in range(0, m, step):
        hi = min(m, lo + step)
        idx = key_index[lo:hi]
        rows = hi - lo
        kg = T.transpose(T.gather(kp, idx), (0, 2, 3, 1))  # r x H x hd x K
        vg = T.transpose(T.gather(vp, idx), (0, 2, 1, 3))  # r x H x K x hd
        qr = T.reshape(T.gather(q, np.arange(lo, hi)), (rows, h, 1, hd))
        logits = T.scale(T.matmul(qr, kg), cfg.scale)  # r x H x 1 x K
        if additive_mask is not None:
            logits = T.add(logits, Tensor(np.asarray(additive_mask)[lo:hi, None, None, :]))
        attn = T.softmax_rows(logits, (idx != EMPTY)[:, None, None, :])
        ctx = T.reshape(T.matmul(attn, vg), (rows, h, hd))
        score_parts.append(T.reshape(T.sum(attn, axis=1), (rows, width)))
        feat_parts.append(T.transpose(ctx, (1, 0, 2)))
        macs.record(macs.SCORE, rows * h * width * hd)
        macs.record(macs.VALUE, rows * h * width * hd)
    if not score_parts:
        return Tensor(np.zeros((0, width))), Tensor(np.zeros((0, d)))
    scores = score_parts[0] if len(score_parts) == 1 else T.concat(score_parts, axis=0)
    ctx = feat_parts[0] if len(feat_parts) == 1 else T.concat(feat_parts, axis=1)  # H x m x hd
    feats = T.sum(T.matmul(ctx, params["wh"]), axis=0)
    macs.record(macs.PROJECTION, h * m * hd * d)
    return scores, feats


# ---------------------------------------------------------------------------
# selection


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)
    return -np.log(-np.log(u))


def topk_select(
    scores: np.ndarray,
    k: Optional[int],
    valid: Optional[np.ndarray] = None,
    mode: str = INFER,
    rng: Optional[np.random.Generator] = None,
    tau: float = 1.0,
) -> np.ndarray:
    """Row-wise top-k column indices over the last axis, best first.

    Infer mode ranks raw scores; train mode ranks ``(score + g) / tau`` with
    Gumbel noise ``g``.  Ties go to the lowest index.  Rows with fewer than k
    valid entries are padded with EMPTY.  ``k=None`` keeps every valid entry.
    """
    scores = np.asarray(scores, dtype=np.float64)
    m = scores.shape[-1]
    if k is None:
        k = m
    if k <= 0:
        raise ValueError(f"k must be >= 1, got {k}")
    if valid is None:
        valid = np.ones(scores.shape, dtype=bool)
    valid = np.broadcast_to(valid, scores.shape)
    key = scores
    if mode == TRAIN:
        if rng is None:
            raise ValueError("train-mode selection needs an rng")
        key = (scores + gumbel_noise(rng, scores.shape)) / tau
    elif mode != INFER:
        raise ValueError(f"unknown mode {mode!r}")
    key = np.where(valid, key, -np.inf)
    order = np.argsort(-key, axis=-1, kind="stable")
    width = min(k, m)
    top = order[..., :width]
    ok = np.take_along_axis(valid, top, axis=-1)
    top = np.where(ok, top, EMPTY)
    if width < k:
        pad = np.full(top.shape[:-1] + (k - width,), EMPTY, dtype=np.int64)
        top = np.concatenate([top, pad], axis=-1)
    return top.astype(np.int64)


def sample_octants(
    selection: np.ndarray,
    bank: IndexBank,
    keys: Optional[int],
    mode: str = INFER,
    rng: Optional[np.random.Generator] = None,
):
    """Key sets for every parent query: children of its selected parents, at most K.

    ``selection`` (m_{n+1} x k, parent-level rows) comes from ``topk_select``.
    Candidates are laid out as [k, 8] (selection rank, then child row) and
    compacted; infer mode keeps the first K, train mode draws K uniformly
    without replacement and keeps them in candidate order.  Returns
    ``(key_sets, validity)``, both m_{n+1} x K; ``keys=None`` keeps every candidate.
    """
    selection = np.asarray(selection, dtype=np.int64)
    rows = selection.shape[0]
    cand = np.where(selection[:, :, None] >= 0, bank.children[np.maximum(selection, 0)], EMPTY)
    cand = cand.reshape(rows, -1)
    ok = cand != EMPTY
    # stable compaction: valid candidates first, original order kept
    order = np.argsort(~ok, axis=1, kind="stable")
    cand = np.take_along_axis(cand, order, axis=1)
    counts = ok.sum(axis=1)
    width = int(counts.max()) if keys is None else keys
    width = max(width, 1)
    if cand.shape[1] < width:
        cand = np.concatenate([cand, np.full((rows, width - cand.shape[1]), EMPTY, dtype=np.int64)], axis=1)
    if mode == TRAIN and keys is not None:
        if rng is None:
            raise ValueError("train-mode sampling needs an rng")
        r = rng.random(cand.shape)
        r[cand == EMPTY] = 2.0
        picked = np.sort(np.argsort(r, axis=1, kind="stable")[:, :width], axis=1)
        out = np.take_along_axis(cand, picked, axis=1)
    elif mode in (TRAIN, INFER):
        out = cand[:, :width]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return out, out != EMPTY


# ---------------------------------------------------------------------------
# block components


def lepe(grid: SparseVoxelGrid, params: dict, neighbors: Optional[np.ndarray] = None) -> Tensor:
    """Locally enhanced positional embedding: a submanifold conv over level-0 features."""
    return subm_conv(grid, SubmConvParams(params["lepe.kernel"], params["lepe.bias"]), neighbors=neighbors)


def ffn(x: Tensor, params: dict) -> Tensor:
    """Linear d -> hidden, ReLU, linear hidden -> d (no normalization or residual)."""
    h = T.relu(T.linear(x, params["ffn.w1"], params["ffn.b1"]))
    return T.linear(h, params["ffn.w2"], params["ffn.b2"])


def _level_params(params: dict, n: int) -> dict:
    return {name: params[f"level{n}.{name}"] for name in ("wq", "wk", "wv", "wh")}


def _top_level(grid: SparseVoxelGrid, feats: Tensor, params: dict, cfg: OTBConfig, scores, mode, rng):
    m_max = int(grid.scene_counts().max()) + cfg.top_padding
    row_map = dense_slots(grid, m_max)
    batch = to_dense_batch(grid.with_features(feats), m_max)
    additive = None
    if scores is not None:
        s = np.where(row_map != EMPTY, scores.data[np.maximum(row_map, 0)], 0.0)
        additive = np.stack([sam_mask(s[b], s[b], cfg.sam) for b in range(s.shape[0])])
    attn, out = mhsa_top(batch, _level_params(params, cfg.height - 1), cfg, additive)
    compact = from_dense_batch(DenseTokenBatch(out, batch.validity, batch.row_map), len(grid))

    # O_{N-1}: slot indices of each query row's best keys, mapped to grid rows
    q_b = np.zeros(len(grid), dtype=np.int64)
    q_slot = np.zeros(len(grid), dtype=np.int64)
    bb, ss = np.nonzero(row_map != EMPTY)
    q_b[row_map[bb, ss]] = bb
    q_slot[row_map[bb, ss]] = ss
    a = attn.data[q_b, q_slot]  # m x m_max
    slots = topk_select(a, cfg.k, batch.validity[q_b], mode, rng, cfg.tau)
    sel = np.where(slots != EMPTY, row_map[q_b[:, None], np.maximum(slots, 0)], EMPTY)
    return compact, LevelTrace(cfg.height - 1, attn.data, sel)


def octree_attention(
    pyramid: FeaturePyramid,
    params: dict,
    cfg: OTBConfig,
    seg_scores: Optional[Tensor] = None,
    mode: str = INFER,
    rng: Optional[np.random.Generator] = None,
):
    """Per-level attentive features F'_n (compact, level-n rows) plus the selection trace."""
    if mode == TRAIN and rng is None:
        rng = np.random.default_rng(0)
    top = cfg.height - 1
    if pyramid.height != cfg.height:
        raise ValueError(f"pyramid height {pyramid.height} != configured height {cfg.height}")

    tokens, level_scores = [], []
    for n, grid in enumerate(pyramid.levels):
        x = grid.features
        s_n = None
        if seg_scores is not None:
            centers, s_n = level_stats(pyramid, n, seg_scores)
            x = sape(x, centers, s_n, params[f"level{n}.sape"])
        tokens.append(x)
        level_scores.append(s_n)

    outputs: list = [None] * cfg.height
    trace = OctreeSelection()
    outputs[top], top_trace = _top_level(
        pyramid.levels[top], tokens[top], params, cfg, level_scores[top], mode, rng
    )
    trace.levels.append(top_trace)
    selection = top_trace.selection

    for n in range(top - 1, -1, -1):
        bank = pyramid.banks[n]
        parent_keys, _ = sample_octants(selection, bank, cfg.keys, mode, rng)
        key_index = parent_keys[bank.child_to_parent]
        additive = None
        if level_scores[n] is not None:
            s = level_scores[n].data
            additive = sam_mask(s, s[np.maximum(key_index, 0)], cfg.sam)
        attn, outputs[n] = cross_attention(tokens[n], key_index, _level_params(params, n), cfg, additive)
        cols = topk_select(attn.data, cfg.k, key_index != EMPTY, mode, rng, cfg.tau)
        selection = np.where(cols != EMPTY, np.take_along_axis(key_index, np.maximum(cols, 0), axis=1), EMPTY)
        trace.levels.append(LevelTrace(n, attn.data, selection, key_index, parent_keys))
    return outputs, trace


def otb_forward(
    pyramid: FeaturePyramid,
    params: dict,
    cfg: OTBConfig,
    seg_scores: Optional[Tensor] = None,
    mode: str = INFER,
    rng: Optional[np.random.Generator] = None,
    return_trace: bool = False,
    return_levels: bool = False,
):
    """Octree Transformer Block on level-0 rows.

    F~ = FC(concat of upsampled F'_{N-1} ... F'_0) + LePE(F_0) and the block
    returns BN(FFN(F~)) + F~.  ``seg_scores`` (one per level-0 voxel) switches
    on the semantic embedding and the semantic attention mask.  The optional
    extras are appended to the return value in order: the selection trace,
    then the list of upsampled per-level outputs indexed by level.
    """
    outputs, trace = octree_attention(pyramid, params, cfg, seg_scores, mode, rng)
    ups = [upsample(outputs[n], pyramid, n) for n in range(cfg.height)]
    fused = T.linear(T.concat(ups[::-1], axis=1), params["fc.weight"], params["fc.bias"])
    mixed = T.add(fused, lepe(pyramid.base, params))
    out = T.add(
        T.batch_norm(ffn(mixed, params), params["ffn.bn.gamma"], params["ffn.bn.beta"], cfg.bn_eps),
        mixed,
    )
    extras = ([trace] if return_trace else []) + ([ups] if return_levels else [])
    return (out, *extras) if extras else out


def otb_apply(
    grid: SparseVoxelGrid,
    params: dict,
    cfg: OTBConfig,
    seg_scores: Optional[Tensor] = None,
    mode: str = INFER,
    rng: Optional[np.random.Generator] = None,
    prefix: str = "",
    return_trace: bool = False,
    return_levels: bool = False,
):
    """Build the pyramid with the block's own BN parameters, then run ``otb_forward``."""
    p = subparams(params, prefix) if prefix else params
    pyramid = build_pyramid(grid, cfg.height, p, cfg.bn_eps)
    return otb_forward(pyramid, p, cfg, seg_scores, mode, rng, return_trace, return_levels)
