"""Straight-line dense reference for the Octree Transformer Block.

Written with plain numpy loops and dictionaries, sharing no code with the
tape-based path, so it can serve as an independent check: every level runs
full per-scene self-attention, which is what octree attention reduces to
when selection is exhaustive.
"""

from __future__ import annotations

import itertools
from typing import Optional

import numpy as np


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _bn(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float) -> np.ndarray:
    mu = x.mean(axis=0)
    var = ((x - mu) ** 2).mean(axis=0)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def dense_mhsa(
    x: np.ndarray,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    wh: np.ndarray,
    scale: float,
    additive: Optional[np.ndarray] = None,
):
    """Full multi-head self-attention over one scene's m x d tokens.

    Returns (head-summed softmax matrix, output features).
    """
    m, d = x.shape
    scores = np.zeros((m, m))
    out = np.zeros((m, wh.shape[2]))
    for h in range(wq.shape[0]):
        q = x @ wq[h]
        k = x @ wk[h]
        v = x @ wv[h]
        logits = (q @ k.T) * scale
        if additive is not None:
            logits = logits + additive
        a = _softmax(logits)
        scores += a
        out += (a @ v) @ wh[h]
    return scores, out


def dense_subm_conv(coords, batch_ids, feats, kernel, bias) -> np.ndarray:
    """Submanifold 3x3x3 convolution by explicit neighbour enumeration."""
    where = {(int(b), *map(int, c)): i for i, (b, c) in enumerate(zip(batch_ids, coords))}
    out = np.tile(np.asarray(bias, dtype=np.float64), (len(coords), 1))
    for i, (b, c) in enumerate(zip(batch_ids, coords)):
        for dx, dy, dz in itertools.product((-1, 0, 1), repeat=3):
            j = where.get((int(b), int(c[0]) + dx, int(c[1]) + dy, int(c[2]) + dz))
            if j is not None:
                out[i] += feats[j] @ kernel[dx + 1, dy + 1, dz + 1]
    return out


def dense_otb(
    coords: np.ndarray,
    batch_ids: np.ndarray,
    feats: np.ndarray,
    params: dict,
    height: int,
    scale: float,
    eps: float = 1e-5,
    centers: Optional[np.ndarray] = None,
    seg_scores: Optional[np.ndarray] = None,
    sam: Optional[tuple] = None,
    return_levels: bool = False,
):
    """Reference block output with every level attending densely within its scene.

    ``params`` maps the block's parameter names to numpy arrays.  When
    ``seg_scores`` is given, ``centers`` (level-0 voxel centres) must be too,
    and ``sam`` is ``(delta_q, delta_k, gamma)``.  With ``return_levels`` the
    upsampled per-level attention outputs (indexed by level) come back too.
    """
    coords = np.asarray(coords, dtype=np.int64)
    batch_ids = np.asarray(batch_ids, dtype=np.int64)
    m0 = len(coords)
    level_outputs = []
    for n in range(height):
        groups: dict = {}
        for r in range(m0):
            key = (int(batch_ids[r]),) + tuple(int(v) >> n for v in coords[r])
            groups.setdefault(key, []).append(r)
        keys = sorted(groups)
        members = [groups[k] for k in keys]
        pooled = np.array([feats[rows].max(axis=0) for rows in members])
        x = _bn(pooled, params[f"pyramid.{n}.gamma"], params[f"pyramid.{n}.beta"], eps)
        s = None
        if seg_scores is not None:
            ctr = np.array([centers[rows].mean(axis=0) for rows in members])
            s = np.array([seg_scores[rows].mean() for rows in members])
            x = np.concatenate([ctr, s[:, None], x], axis=1) @ params[f"level{n}.sape"]
        out = np.zeros((len(keys), x.shape[1]))
        scene_of = np.array([k[0] for k in keys])
        for b in np.unique(scene_of):
            rows = np.flatnonzero(scene_of == b)
            additive = None
            if s is not None:
                dq, dk, gamma = sam
                fg_q = s[rows] >= dq
                fg_k = s[rows] >= dk
                additive = np.where(fg_q[:, None] & ~fg_k[None, :], -gamma, 0.0)
            _, o = dense_mhsa(
                x[rows],
                params[f"level{n}.wq"],
                params[f"level{n}.wk"],
                params[f"level{n}.wv"],
                params[f"level{n}.wh"],
                scale,
                additive,
            )
            out[rows] = o
        up = np.zeros((m0, out.shape[1]))
        for i, rows in enumerate(members):
            up[rows] = out[i]
        level_outputs.append(up)

    cat = np.concatenate(level_outputs[::-1], axis=1)
    fused = cat @ params["fc.weight"] + params["fc.bias"]
    mixed = fused + dense_subm_conv(coords, batch_ids, feats, params["lepe.kernel"], params["lepe.bias"])
    hidden = np.maximum(mixed @ params["ffn.w1"] + params["ffn.b1"], 0.0)
    ff = hidden @ params["ffn.w2"] + params["ffn.b2"]
    out = _bn(ff, params["ffn.bn.gamma"], params["ffn.bn.beta"], eps) + mixed
    return (out, level_outputs) if return_levels else out
