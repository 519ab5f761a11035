import numpy as np
import pytest

from maskkv.budgeting import CalibrationProfile
from maskkv.cache import CacheConfig
from maskkv.decoding import POLICIES, EvictionConfig, decode
from maskkv.errors import ConfigurationError
from maskkv.memory import retained_kv_bytes
from maskkv.model import ModelConfig, RemaskPolicy, init_model

EVERY_STEP = CacheConfig(prompt_interval=1, response_interval=1, shift_threshold=-1.0)


def prompt_for(seed, n=12, vocab=16):
    return np.random.default_rng(seed).integers(0, vocab - 2, n)


@pytest.fixture(scope="module")
def params():
    return init_model(ModelConfig(num_layers=3, num_heads=4, model_dim=16, vocab_size=16, seed=11,
                                  anchor_logit=4.0, anchor_value=0.3, position_scale=0.5))


def test_refresh_everything_equals_cache_free(params):
    for seed in range(4):
        p = prompt_for(seed)
        a = decode(params, p, 8)
        b = decode(params, p, 8, cache_config=EVERY_STEP)
        assert np.array_equal(a.tokens, b.tokens)


def test_mask_only_projection_does_not_change_tokens(params):
    p = prompt_for(3)
    a = decode(params, p, 8, cache_config=EVERY_STEP, mask_only_projection=False)
    b = decode(params, p, 8, cache_config=EVERY_STEP, mask_only_projection=True)
    assert np.array_equal(a.tokens, b.tokens)


@pytest.mark.parametrize("policy", POLICIES)
def test_full_budget_eviction_is_transparent(params, policy):
    p = prompt_for(5)
    prof = CalibrationProfile(np.array([0.3, 0.1, 0.4]), np.full((3, 4), 0.5), 1)
    ref = decode(params, p, 8, cache_config=CacheConfig())
    ev = EvictionConfig(budget=len(p), policy=policy, profile=prof)
    res = decode(params, p, 8, cache_config=CacheConfig(), eviction=ev)
    assert np.array_equal(ref.tokens, res.tokens)


def test_eviction_needs_a_cache(params):
    with pytest.raises(ConfigurationError):
        decode(params, prompt_for(0), 4, eviction=EvictionConfig(budget=2))


@pytest.mark.parametrize("ev", [EvictionConfig(budget=-1), EvictionConfig(budget=2, policy="h2o"),
                                EvictionConfig(budget=2, mask_segment="tail"),
                                EvictionConfig(budget=2, policy="squeeze")])
def test_invalid_eviction(params, ev):
    with pytest.raises(ConfigurationError):
        decode(params, prompt_for(0), 4, cache_config=CacheConfig(), eviction=ev)


def test_bad_lengths(params):
    with pytest.raises(ConfigurationError):
        decode(params, [], 4)
    with pytest.raises(ConfigurationError):
        decode(params, prompt_for(0), 0)


def test_memory_accounting_after_eviction(params):
    p = prompt_for(7)
    res = decode(params, p, 8, cache_config=CacheConfig(), eviction=EvictionConfig(budget=3))
    counts = res.retained_counts
    assert counts.sum() == 3 * 4 * 3
    assert res.prompt_kv_bytes == retained_kv_bytes(counts, 4)
    # response KV is never evicted: 8 positions per (layer, head)
    assert res.final_kv_bytes == retained_kv_bytes(counts + 8, 4)
    assert res.eviction.kv_bytes_after < res.eviction.kv_bytes_before


def test_offline_profile_lowers_peak(params):
    p = prompt_for(8)
    prof = CalibrationProfile(np.array([0.3, 0.1, 0.4]), np.full((3, 4), 0.5), 1)
    online = decode(params, p, 8, cache_config=CacheConfig(), eviction=EvictionConfig(budget=2))
    offline = decode(params, p, 8, cache_config=CacheConfig(),
                     eviction=EvictionConfig(budget=2, profile=prof))
    full = decode(params, p, 8, cache_config=CacheConfig())
    assert offline.peak_bytes < online.peak_bytes == full.peak_bytes


def test_refresh_schedule_counts(params):
    res = decode(params, prompt_for(1), 8, cache_config=CacheConfig(prompt_interval=50))
    # 6 steps starting at t=6: prompt refreshed on the first step only
    assert len(res.steps) == 6
    assert (res.refresh_counts[:12] == 1).all()
    assert res.steps[0].prompt_refreshed == 12
    assert all(s.prompt_refreshed == 0 for s in res.steps[1:])
    assert (res.refresh_counts[12:] >= 2).all()  # t=5 is periodic


def test_every_position_decoded(params):
    res = decode(params, prompt_for(2), 10, RemaskPolicy(0.3, 4), CacheConfig())
    assert params.config.mask_id not in res.response.tolist()
    assert sorted(p for s in res.steps for p in s.decoded) == list(range(12, 22))


def test_stability_statistic(params):
    res = decode(params, prompt_for(4), 8, cache_config=CacheConfig(), track_stability=True)
    assert -1.0 <= res.stability <= 1.0


def test_segment_voting_changes_selection(params):
    p = prompt_for(6)
    a = decode(params, p, 8, cache_config=CacheConfig(), eviction=EvictionConfig(budget=2))
    b = decode(params, p, 8, cache_config=CacheConfig(),
               eviction=EvictionConfig(budget=2, mask_segment="back"))
    assert a.importance.shape == b.importance.shape == (3, 4, 12)
    assert not np.array_equal(a.importance, b.importance)
