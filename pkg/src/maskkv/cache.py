"""Feature cache for diffusion decoding.

Stores per-layer, per-position bundles {K, V, attention output, FFN output},
decides which positions to recompute each step, and supports per-head prompt
eviction.  Arrays are dense; presence masks say which slots hold data.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import CacheError, ConfigurationError, ProtocolError
from .memory import BF16_BYTES, retained_kv_bytes

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CacheConfig:
    prompt_interval: int = 50  # T_p
    response_interval: int = 5  # T_r
    shift_threshold: float = 0.5  # delta
    prompt_state_exclusion: bool = True
    mask_only_projection: bool = True
    probe_layer: int = 0

    def validate(self, num_layers: int | None = None) -> None:
        if self.prompt_interval < 1 or self.response_interval < 1:
            raise ConfigurationError("T_p and T_r must be >= 1")
        if not -1.0 <= self.shift_threshold <= 1.0:
            raise ConfigurationError("delta must lie in [-1, 1]")
        if self.probe_layer < 0 or (num_layers is not None and self.probe_layer >= num_layers):
            raise ConfigurationError("probe_layer outside the model")


@dataclass
class FeatureBundle:
    keys: dict  # head -> (d_k,)
    values: dict
    attn_out: np.ndarray | None
    ffn_out: np.ndarray | None


@dataclass
class FeatureCache:
    num_layers: int
    num_heads: int
    head_dim: int
    model_dim: int
    prompt_len: int
    gen_len: int
    config: CacheConfig = field(default_factory=CacheConfig)

    def __post_init__(self):
        self.config.validate(self.num_layers)
        D, H, n, dk, d = self.num_layers, self.num_heads, self.seq_len, self.head_dim, self.model_dim
        self.keys = np.zeros((D, H, n, dk))
        self.values = np.zeros((D, H, n, dk))
        self.attn_out = np.zeros((D, n, d))
        self.ffn_out = np.zeros((D, n, d))
        self.kv_present = np.zeros((D, H, n), dtype=bool)
        self.state_present = np.zeros((D, n), dtype=bool)
        self.kv_allowed = np.ones((D, H, n), dtype=bool)
        self.last_refresh_step = np.full(n, -1, dtype=np.int64)
        self.refresh_counts = np.zeros(n, dtype=np.int64)
        self.keep_sets: list[list[np.ndarray]] | None = None
        self.probe_prev: np.ndarray | None = None
        self.initialized = False
        self.events: list[str] = []

    @classmethod
    def for_model(cls, model_config, prompt_len: int, gen_len: int,
                  config: CacheConfig | None = None) -> "FeatureCache":
        return cls(model_config.num_layers, model_config.num_heads, model_config.head_dim,
                   model_config.model_dim, prompt_len, gen_len, config or CacheConfig())

    @property
    def seq_len(self) -> int:
        return self.prompt_len + self.gen_len

    def check_compatible(self, model_config, seq_len: int) -> None:
        got = (self.num_layers, self.num_heads, self.seq_len, self.head_dim, self.model_dim)
        want = (model_config.num_layers, model_config.num_heads, seq_len,
                model_config.head_dim, model_config.model_dim)
        if got != want:
            raise CacheError(f"cache dims (D, H, n, d_k, d)={got} do not match model {want}")

    def bundle(self, layer: int, pos: int) -> FeatureBundle | None:
        """The cached bundle at (layer, pos), or None when nothing is stored."""
        heads = np.flatnonzero(self.kv_present[layer, :, pos])
        has_state = bool(self.state_present[layer, pos])
        if len(heads) == 0 and not has_state:
            return None
        return FeatureBundle(
            keys={int(h): self.keys[layer, h, pos].copy() for h in heads},
            values={int(h): self.values[layer, h, pos].copy() for h in heads},
            attn_out=self.attn_out[layer, pos].copy() if has_state else None,
            ffn_out=self.ffn_out[layer, pos].copy() if has_state else None,
        )

    def retained_counts(self) -> np.ndarray:
        """(D, H) number of positions with stored K/V."""
        return self.kv_present.sum(axis=2)

    def retained_prompt_counts(self) -> np.ndarray:
        return self.kv_present[:, :, : self.prompt_len].sum(axis=2)

    def kv_bytes(self, elem_bytes: int = BF16_BYTES) -> int:
        return retained_kv_bytes(self.retained_counts(), self.head_dim, elem_bytes)

    def state_bytes(self, elem_bytes: int = BF16_BYTES) -> int:
        # attention output and FFN output, d elements each
        return int(self.state_present.sum()) * 2 * self.model_dim * elem_bytes

    def total_bytes(self, elem_bytes: int = BF16_BYTES) -> int:
        return self.kv_bytes(elem_bytes) + self.state_bytes(elem_bytes)

    def layer_bytes(self, layer: int, elem_bytes: int = BF16_BYTES) -> int:
        kv = 2 * int(self.kv_present[layer].sum()) * self.head_dim * elem_bytes
        st = int(self.state_present[layer].sum()) * 2 * self.model_dim * elem_bytes
        return kv + st

    def note(self, msg: str) -> None:
        self.events.append(msg)
        log.info(msg)


def prompt_refresh_set(t: int, config: CacheConfig, prompt_positions) -> set[int]:
    if t < 0:
        raise ProtocolError("step must be >= 0")
    if t % config.prompt_interval == 0:
        return {int(p) for p in prompt_positions}
    return set()


def response_refresh_set(t: int, config: CacheConfig, v_now, v_prev, response_positions,
                         events: list | None = None) -> set[int]:
    """Periodic set (``t mod T_r == 0``) united with the cosine-shift set.

    ``v_now``/``v_prev`` hold one row per response position (values of all
    heads concatenated at the probe layer).  Zero-norm rows count as cosine 1.
    """
    positions = [int(p) for p in response_positions]
    if t % config.response_interval == 0:
        return set(positions)
    v_now = np.ascontiguousarray(v_now, dtype=np.float64)
    v_prev = np.ascontiguousarray(v_prev, dtype=np.float64)
    if v_now.shape != v_prev.shape or v_now.shape[0] != len(positions):
        raise ProtocolError("V_now / V_prev must cover every response position")
    cos, n_zero = kernels.row_cosine(v_now, v_prev)
    if n_zero:
        msg = f"step {t}: {n_zero} zero-norm value vector(s) treated as cosine 1"
        log.info(msg)
        if events is not None:
            events.append(msg)
    return {p for p, c in zip(positions, cos) if c < config.shift_threshold}


def apply_refresh(cache: FeatureCache, out, refresh_set, iteration: int) -> FeatureCache:
    """Overwrite the bundles at ``refresh_set`` with features from ``out``.

    ``iteration`` counts executed steps (0 for the first), so per-position
    ``last_refresh_step`` never decreases.  Evicted (layer, head, position)
    slots stay empty; prompt attention/FFN outputs are skipped under
    prompt-state exclusion.
    """
    rows = np.array(sorted(int(p) for p in refresh_set), dtype=np.int64)
    if len(rows) == 0:
        return cache
    if rows[0] < 0 or rows[-1] >= cache.seq_len:
        raise ProtocolError("refresh position outside the sequence")
    for li in range(cache.num_layers):
        allowed = cache.kv_allowed[li][:, rows]  # (H, r)
        for hi in range(cache.num_heads):
            ok = rows[allowed[hi]]
            cache.keys[li, hi, ok] = out.keys[li, hi, ok]
            cache.values[li, hi, ok] = out.values[li, hi, ok]
            cache.kv_present[li, hi, ok] = True
        srows = rows[rows >= cache.prompt_len] if cache.config.prompt_state_exclusion else rows
        cache.attn_out[li, srows] = out.attn_out[li, srows]
        cache.ffn_out[li, srows] = out.ffn_out[li, srows]
        cache.state_present[li, srows] = True
    cache.last_refresh_step[rows] = iteration
    cache.refresh_counts[rows] += 1
    if len(rows) == cache.seq_len:
        cache.initialized = True
    return cache


def compact(cache: FeatureCache, plan, importance) -> FeatureCache:
    """Keep, for every (layer, head), the top-``k_lh`` prompt positions by importance.

    ``importance`` has shape (D, H, n_p).  Budgets above ``n_p`` are clamped and
    noted.  Response entries are never touched.  Eviction is irreversible.
    """
    from .eviction import select_keep_set

    importance = np.asarray(importance, dtype=np.float64)
    D, H, n_p = cache.num_layers, cache.num_heads, cache.prompt_len
    if importance.shape != (D, H, n_p):
        raise CacheError(f"importance shape {importance.shape} != {(D, H, n_p)}")
    k_lh = np.asarray(plan.k_lh)
    if k_lh.shape != (D, H):
        raise CacheError(f"plan covers {k_lh.shape}, cache has {(D, H)}")
    keep_sets = []
    for li in range(D):
        layer_sets = []
        for hi in range(H):
            k = int(k_lh[li, hi])
            if k > n_p:
                cache.note(f"budget k[{li},{hi}]={k} exceeds n_p={n_p}; clamped")
                k = n_p
            keep = select_keep_set(importance[li, hi], k)
            drop = np.setdiff1d(np.arange(n_p), keep)
            cache.kv_allowed[li, hi, drop] = False
            cache.kv_present[li, hi, drop] = False
            cache.keys[li, hi, drop] = 0.0
            cache.values[li, hi, drop] = 0.0
            layer_sets.append(keep)
        keep_sets.append(layer_sets)
    cache.keep_sets = keep_sets
    return cache
