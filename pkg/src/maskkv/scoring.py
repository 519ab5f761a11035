"""Importance signals: mask-query attention, voting, layer importance, head preference."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigurationError, NumericError

log = logging.getLogger(__name__)

SEGMENTS = ("all", "front", "middle", "back")


@dataclass
class MaskAttention:
    A: np.ndarray  # (n_m, n) row-stochastic
    n_prompt: int
    n_mask: int


@dataclass
class ImportanceVector:
    scores: np.ndarray  # (n_p,)
    n_mask: int
    segment: str = "all"
    rows: tuple[int, int] = (0, 0)  # voting mask rows [start, stop)


@dataclass
class LayerImportance:
    value: float
    count: int
    zero_norm_rows: int = 0


@dataclass
class HeadPreference:
    value: float
    to_prompt: float  # S_{m->p}
    to_mask: float  # S_{m->m}


def mask_attention(q_mask, k_full, d_k: int | None = None, n_prompt: int | None = None) -> MaskAttention:
    """Row softmax of ``q_mask @ k_full.T / sqrt(d_k)``.

    ``n_prompt`` defaults to ``n - n_m`` (prompt keys first, then mask keys).
    """
    q = np.asarray(q_mask, dtype=np.float64)
    k = np.asarray(k_full, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise ConfigurationError(f"incompatible shapes {q.shape} and {k.shape}")
    n_m, n = q.shape[0], k.shape[0]
    if n_m < 1 or n < 1:
        raise ConfigurationError("need at least one mask query and one key")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(k))):
        raise NumericError("non-finite query or key values")
    d_k = q.shape[1] if d_k is None else d_k
    s = (q @ k.T) / math.sqrt(d_k)
    s -= s.max(axis=1, keepdims=True)
    e = np.exp(s)
    A = e / e.sum(axis=1, keepdims=True)
    if n_prompt is None:
        n_prompt = max(n - n_m, 0)
    return MaskAttention(A=A, n_prompt=n_prompt, n_mask=n_m)


def segment_rows(n_mask: int, segment: str = "all") -> tuple[int, int]:
    """Row range voting in ``segment``: three near-equal contiguous thirds."""
    if segment not in SEGMENTS:
        raise ConfigurationError(f"unknown mask segment {segment!r}")
    if segment == "all":
        return 0, n_mask
    parts = np.array_split(np.arange(n_mask), 3)
    part = parts[("front", "middle", "back").index(segment)]
    if len(part) == 0:
        return 0, 0
    return int(part[0]), int(part[-1]) + 1


def mask_voting(attn: MaskAttention, segment: str = "all") -> ImportanceVector:
    """Column sums of mask-query attention over the prompt keys."""
    start, stop = segment_rows(attn.n_mask, segment)
    A = np.ascontiguousarray(attn.A, dtype=np.float64)
    scores = kernels.column_vote(A, start, stop, attn.n_prompt)
    return ImportanceVector(scores=scores, n_mask=attn.n_mask, segment=segment, rows=(start, stop))


def layer_importance(h_in, h_out) -> LayerImportance:
    """``1 - mean_i cos(h_in_i, h_out_i)``, clipped to [0, 2].

    A zero-norm row counts as cosine 1 (no transformation).
    """
    a = np.ascontiguousarray(h_in, dtype=np.float64)
    b = np.ascontiguousarray(h_out, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] < 1:
        raise ConfigurationError(f"h_in {a.shape} and h_out {b.shape} must be equal (n>=1, d)")
    cos, n_zero = kernels.row_cosine(a, b)
    if n_zero:
        log.info("layer importance: %d zero-norm row(s) treated as cosine 1", n_zero)
    value = 1.0 - float(np.mean(cos))
    return LayerImportance(value=min(max(value, 0.0), 2.0), count=a.shape[0], zero_norm_rows=n_zero)


def prompt_preference(attn, prompt_cols, mask_cols) -> HeadPreference:
    """Share of mask-query attention on prompt keys vs mask keys.

    ``attn`` is a :class:`MaskAttention` or a raw (n_m, n) array.  Columns in
    neither set (decoded response keys) are ignored.
    """
    A = attn.A if isinstance(attn, MaskAttention) else np.asarray(attn, dtype=np.float64)
    A = np.ascontiguousarray(A, dtype=np.float64)
    p = np.asarray(list(prompt_cols), dtype=np.int64)
    m = np.asarray(list(mask_cols), dtype=np.int64)
    if np.intersect1d(p, m).size:
        raise ConfigurationError("prompt and mask column sets must be disjoint")
    n = A.shape[1]
    if (p.size and (p.min() < 0 or p.max() >= n)) or (m.size and (m.min() < 0 or m.max() >= n)):
        raise ConfigurationError("column index outside the attention matrix")
    s_mp = kernels.mass_over(A, p)
    s_mm = kernels.mass_over(A, m)
    denom = s_mp + s_mm
    if denom <= 0.0:
        log.info("prompt preference: zero denominator, preference set to 0")
        return HeadPreference(0.0, s_mp, s_mm)
    return HeadPreference(min(max(s_mp / denom, 0.0), 1.0), s_mp, s_mm)


@dataclass
class SampleScores:
    """All per-sample signals one first denoising step yields."""

    layer_importance: np.ndarray  # (D,)
    head_preference: np.ndarray  # (D, H)
    token_importance: np.ndarray  # (D, H, n_p)


def score_qk(queries, keys, h_in, h_out, n_prompt: int, segment: str = "all",
             mask_cols=None) -> SampleScores:
    """Score from raw tensors.

    ``queries`` (D, H, n_m, d_k) are the mask queries, ``keys`` (D, H, n, d_k)
    the full key set with prompt keys first; ``h_in``/``h_out`` (D, n, d) are the
    attention sub-layer boundaries.  ``mask_cols`` defaults to every non-prompt
    column.
    """
    D, H, n_m, d_k = queries.shape
    n = keys.shape[2]
    if mask_cols is None:
        mask_cols = np.arange(n_prompt, n)
    prompt_cols = np.arange(n_prompt)
    li_vals = np.empty(D)
    prefs = np.empty((D, H))
    imp = np.empty((D, H, n_prompt))
    for li in range(D):
        li_vals[li] = layer_importance(h_in[li], h_out[li]).value
        for hi in range(H):
            att = mask_attention(queries[li, hi], keys[li, hi], d_k, n_prompt)
            imp[li, hi] = mask_voting(att, segment).scores
            prefs[li, hi] = prompt_preference(att, prompt_cols, mask_cols).value
    return SampleScores(li_vals, prefs, imp)


def score_step(out, prompt_len: int, segment: str = "all") -> SampleScores:
    """Scores from a cache-free (or fully refreshed) :class:`StepOutput`."""
    masked = out.masked_positions
    q = out.queries[:, :, masked, :]
    return score_qk(q, out.keys, out.hidden[:-1], out.attn_hidden, prompt_len, segment,
                    mask_cols=masked)


def snap_scores(attn_rows, window_size: int, n_prompt: int | None = None) -> np.ndarray:
    """Column sums over the last ``window_size`` prompt-query rows.

    ``attn_rows`` holds the attention of the prompt queries (row ``i`` = prompt
    position ``i``); only the first ``n_prompt`` columns are scored.
    """
    A = np.ascontiguousarray(attn_rows, dtype=np.float64)
    n_rows = A.shape[0]
    n_prompt = n_rows if n_prompt is None else n_prompt
    if not 0 <= window_size <= n_rows:
        raise ConfigurationError(f"window_size {window_size} outside [0, {n_rows}]")
    return kernels.column_vote(A, n_rows - window_size, n_rows, n_prompt)


def spearman(a, b) -> float:
    """Spearman rank correlation; NaN when either side is constant."""
    from scipy.stats import spearmanr

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or np.all(a == a[0]) or np.all(b == b[0]):
        return float("nan")
    return float(spearmanr(a, b).statistic)
