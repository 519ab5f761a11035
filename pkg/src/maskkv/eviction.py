"""Per-head top-k eviction of prompt KV entries."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .cache import FeatureCache, compact
from .scoring import snap_scores


def select_keep_set(importance, k: int) -> np.ndarray:
    """Sorted indices of the ``k`` highest scores; ties go to the lower index."""
    scores = np.ascontiguousarray(importance, dtype=np.float64)
    return kernels.topk_indices(scores, max(int(k), 0))


def snap_select(attn_window, k: int, window_size: int, n_prompt: int | None = None) -> np.ndarray:
    """Keep set from the attention of the last ``window_size`` prompt queries.

    ``attn_window`` has one row per prompt query (in position order).
    """
    return select_keep_set(snap_scores(attn_window, window_size, n_prompt), k)


def retained_mass(importance, keep) -> float:
    total = float(np.sum(importance))
    if total <= 0.0:
        return 1.0
    return float(np.sum(np.asarray(importance)[keep])) / total


@dataclass
class EvictionReport:
    retained_counts: np.ndarray  # (D, H) prompt entries kept
    retained_mass: np.ndarray  # (D, H) share of importance kept
    kv_bytes_before: int
    kv_bytes_after: int
    clamped: int

    @property
    def mean_retained_mass(self) -> float:
        return float(self.retained_mass.mean())


def evict(cache: FeatureCache, plan, importance) -> tuple[FeatureCache, EvictionReport]:
    """Compact ``cache`` to ``plan`` using per-head ``importance`` (D, H, n_p)."""
    importance = np.asarray(importance, dtype=np.float64)
    before = cache.kv_bytes()
    n_events = len(cache.events)
    compact(cache, plan, importance)
    D, H = importance.shape[:2]
    mass = np.empty((D, H))
    for li in range(D):
        for hi in range(H):
            mass[li, hi] = retained_mass(importance[li, hi], cache.keep_sets[li][hi])
    report = EvictionReport(
        retained_counts=cache.retained_prompt_counts(),
        retained_mass=mass,
        kv_bytes_before=before,
        kv_bytes_after=cache.kv_bytes(),
        clamped=len(cache.events) - n_events,
    )
    return cache, report
