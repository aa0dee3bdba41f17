"""Multiply-accumulate instrumentation for attention kernels.

Kernels call ``record`` with the MACs they actually executed; a caller
collects them by wrapping work in ``count_macs()``.
"""

from __future__ import annotations

import contextlib
import contextvars
from collections import Counter
from typing import Iterator, Optional, Sequence

SCORE = "attn_score"  # Q K^T
VALUE = "attn_value"  # softmax(.) V
PROJECTION = "projection"  # W_q, W_k, W_v and W_h

_active: contextvars.ContextVar[Optional[Counter]] = contextvars.ContextVar("mac_counter", default=None)


@contextlib.contextmanager
def count_macs() -> Iterator[Counter]:
    counter: Counter = Counter()
    token = _active.set(counter)
    try:
        yield counter
    finally:
        _active.reset(token)


def record(category: str, macs: int) -> None:
    counter = _active.get()
    if counter is not None:
        counter[category] += int(macs)


def attention_macs(counter: Counter) -> int:
    """MACs inside Q K^T and attn V, the quantity the complexity model predicts."""
    return counter[SCORE] + counter[VALUE]


def dense_attention_macs(m: int, heads: int, head_dim: int, batch: int = 1) -> int:
    """Q K^T plus attn V for full self-attention over ``m`` tokens."""
    return 2 * batch * heads * m * m * head_dim


def octattn_attention_macs(
    top_tokens: int, lower_counts: Sequence[int], keys: int, heads: int, head_dim: int, batch: int = 1
) -> int:
    """Closed form: top-level m^2 term plus K * m_n for every lower level, both kernels, all heads.

    ``top_tokens`` is the padded per-scene token count at the top level and
    ``lower_counts`` the non-empty voxel counts of levels N-2 ... 0.
    """
    top = batch * top_tokens * top_tokens
    lower = sum(keys * m for m in lower_counts)
    return 2 * heads * head_dim * (top + lower)
