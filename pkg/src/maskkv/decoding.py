"""Full denoising decode with optional feature caching and one-shot eviction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .budgeting import (BASELINE_POLICIES, BudgetConfig, CalibrationProfile, baseline_allocate,
                        calibrate, plan_budget)
from .cache import CacheConfig, FeatureCache, apply_refresh, prompt_refresh_set, response_refresh_set
from .errors import ConfigurationError
from .eviction import EvictionReport, evict
from .memory import retained_kv_bytes
from .model import (DenoisingState, ModelParams, RemaskPolicy, embed_tokens, forward_step, remask,
                    rms_norm, schedule_steps)
from .scoring import SEGMENTS, score_step, snap_scores, spearman

POLICIES = ("maskkv",) + BASELINE_POLICIES
# policies that rank tokens with the prompt-window (snap) vote instead of mask voting
SNAP_SELECTION = ("snap", "pyramid", "squeeze", "ada")


@dataclass(frozen=True)
class EvictionConfig:
    """One-shot eviction after the first step.

    ``budget`` is the average per-head prompt budget per layer, so
    ``k_p = budget * num_layers``.
    """

    budget: int
    policy: str = "maskkv"
    alpha: float = 0.1
    beta: float = 0.4
    boundary: tuple[int, ...] | None = None
    profile: CalibrationProfile | None = None
    mask_segment: str = "all"
    snap_window: int = 32
    pyramid_steepness: float = 20.0
    squeeze_share: float = 0.4
    ada_reserve: float = 0.2

    def validate(self) -> None:
        if self.policy not in POLICIES:
            raise ConfigurationError(f"unknown policy {self.policy!r}; choose from {POLICIES}")
        if self.budget < 0:
            raise ConfigurationError("budget must be >= 0")
        if self.mask_segment not in SEGMENTS:
            raise ConfigurationError(f"mask segment must be one of {SEGMENTS}")
        if self.snap_window < 1:
            raise ConfigurationError("snap window must be >= 1")
        if self.policy == "squeeze" and self.profile is None:
            raise ConfigurationError("squeeze policy needs a calibration profile")


@dataclass
class StepSummary:
    t: int
    prompt_refreshed: int
    response_refreshed: int
    decoded: list[int]
    cache_bytes: int


@dataclass
class DecodeResult:
    tokens: np.ndarray
    prompt_len: int
    steps: list[StepSummary]
    refresh_counts: np.ndarray | None
    retained_counts: np.ndarray | None  # (D, H) prompt KV kept at the end
    peak_bytes: int
    final_bytes: int  # KV plus stored states
    final_kv_bytes: int = 0
    prompt_kv_bytes: int = 0  # formula applied to the retained prompt counts
    eviction: EvictionReport | None = None
    plan: object = None
    importance: np.ndarray | None = None  # (D, H, n_p) first-step ranking used
    stability: float | None = None
    events: list[str] = field(default_factory=list)

    @property
    def response(self) -> np.ndarray:
        return self.tokens[self.prompt_len:]


def probe_values(params: ModelParams, state: DenoisingState, cache: FeatureCache, layer: int) -> np.ndarray:
    """Value vectors (all heads concatenated) of the response positions at ``layer``.

    Layers below the probe use the cached attention/FFN outputs.
    """
    resp = state.response_positions
    h = embed_tokens(params, state.tokens[resp], resp)
    for li in range(layer):
        h = h + cache.attn_out[li, resp] + cache.ffn_out[li, resp]
    return rms_norm(h) @ params.layers[layer].wv


def _importance_and_plan(params, state, out, ev: EvictionConfig):
    cfg = params.config
    D, H, n_p = cfg.num_layers, cfg.num_heads, state.prompt_len
    k_p = ev.budget * D
    scores = score_step(out, n_p, ev.mask_segment)
    if ev.policy in SNAP_SELECTION:
        window = min(ev.snap_window, n_p)
        prompt = state.prompt_positions
        imp = np.empty((D, H, n_p))
        for li in range(D):
            rows = out.attention_rows(li, prompt)
            for hi in range(H):
                imp[li, hi] = snap_scores(rows[hi], window, n_p)
    else:
        imp = scores.token_importance

    online = False
    if ev.policy == "maskkv":
        profile = ev.profile
        if profile is None:
            profile = calibrate([scores], source="online")
            online = True
        plan = plan_budget(BudgetConfig(k_p, ev.alpha, ev.beta, ev.boundary), profile)
    else:
        extras = {"pyramid_steepness": ev.pyramid_steepness, "squeeze_share": ev.squeeze_share,
                  "ada_reserve": ev.ada_reserve, "head_scores": imp}
        if ev.profile is not None:
            extras["layer_importance"] = ev.profile.layer_importance
        plan = baseline_allocate(ev.policy, k_p, D, H, extras)
    return imp, plan, online, scores


def decode(
    params: ModelParams,
    prompt,
    gen_len: int,
    policy: RemaskPolicy | None = None,
    cache_config: CacheConfig | None = None,
    eviction: EvictionConfig | None = None,
    mask_only_projection: bool | None = None,
    track_stability: bool = False,
) -> DecodeResult:
    """Decode ``gen_len`` tokens after ``prompt``.

    ``cache_config=None`` recomputes every position every step.  With
    ``eviction``, prompt KV is compacted once right after the first step.
    """
    cfg = params.config
    policy = policy or RemaskPolicy()
    if len(prompt) == 0:
        raise ConfigurationError("prompt must be nonempty")
    if gen_len < 1:
        raise ConfigurationError("gen_len must be >= 1")
    if eviction is not None:
        eviction.validate()
        if cache_config is None:
            raise ConfigurationError("eviction needs a feature cache (cache_config)")
    if mask_only_projection is None:
        mask_only_projection = cache_config.mask_only_projection if cache_config else False

    total = schedule_steps(gen_len, policy)
    state = DenoisingState.initial(prompt, gen_len, total, cfg.mask_id)
    n_p = state.prompt_len
    cache = FeatureCache.for_model(cfg, n_p, gen_len, cache_config) if cache_config else None
    resp = state.response_positions

    steps: list[StepSummary] = []
    peak = 0
    ev_report = plan = importance = None
    stability = None
    for it in range(total):
        t = state.step
        if cache is None:
            out = forward_step(params, state, mask_only_projection=mask_only_projection)
            n_prompt_ref, n_resp_ref = n_p, gen_len
        else:
            if not cache.initialized:
                refresh = set(range(state.seq_len))
                n_prompt_ref, n_resp_ref = n_p, gen_len
            else:
                sp = prompt_refresh_set(t, cache.config, state.prompt_positions)
                v_now = probe_values(params, state, cache, cache.config.probe_layer)
                sr = response_refresh_set(t, cache.config, v_now, cache.probe_prev, resp, cache.events)
                refresh = sp | sr
                n_prompt_ref, n_resp_ref = len(sp), len(sr)
            out = forward_step(params, state, cache, refresh, mask_only_projection)
            apply_refresh(cache, out, refresh, it)
            cache.probe_prev = probe_values(params, state, cache, cache.config.probe_layer)

            if it == 0:
                full_layers = [cache.layer_bytes(li) for li in range(cfg.num_layers)]
                if eviction is not None:
                    importance, plan, online, _ = _importance_and_plan(params, state, out, eviction)
                    cache, ev_report = evict(cache, plan, importance)
                    if online:
                        peak = max(peak, sum(full_layers))
                    else:
                        # offline budgets: each layer is compacted as soon as it is produced
                        acc = 0
                        for li in range(cfg.num_layers):
                            peak = max(peak, acc + full_layers[li])
                            acc += cache.layer_bytes(li)
                else:
                    peak = max(peak, sum(full_layers))
            peak = max(peak, cache.total_bytes())

        if track_stability and it == 0:
            # the first pass refreshes every position, so ``out`` is cache-free
            stab_first = score_step(out, n_p)
        new_state = remask(state, out.logits, policy, out.logit_positions)
        decoded = [int(p) for p in np.flatnonzero(new_state.tokens != state.tokens)]
        steps.append(StepSummary(t, n_prompt_ref, n_resp_ref, decoded,
                                 cache.total_bytes() if cache is not None else 0))
        if track_stability and it == 1:
            second = score_step(forward_step(params, state), n_p)
            stability = _mean_spearman(stab_first.token_importance, second.token_importance)
        state = new_state

    return DecodeResult(
        tokens=state.tokens,
        prompt_len=n_p,
        steps=steps,
        refresh_counts=None if cache is None else cache.refresh_counts.copy(),
        retained_counts=None if cache is None else cache.retained_prompt_counts(),
        peak_bytes=peak,
        final_bytes=0 if cache is None else cache.total_bytes(),
        final_kv_bytes=0 if cache is None else cache.kv_bytes(),
        prompt_kv_bytes=0 if cache is None else retained_kv_bytes(cache.retained_prompt_counts(),
                                                                  cfg.head_dim),
        eviction=ev_report,
        plan=plan,
        importance=importance,
        stability=stability,
        events=[] if cache is None else list(cache.events),
    )


def _mean_spearman(a: np.ndarray, b: np.ndarray) -> float:
    vals = [spearman(a[li, hi], b[li, hi]) for li in range(a.shape[0]) for hi in range(a.shape[1])]
    vals = [v for v in vals if v == v]
    return float(np.mean(vals)) if vals else float("nan")
