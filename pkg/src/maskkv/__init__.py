"""KV-cache eviction for diffusion language models, on a deterministic toy model.

Mask-query voting ranks prompt tokens, a calibrated layer/head budget plan
decides how many each head keeps, and per-head top-k eviction compacts the
feature cache once after the first denoising step.
"""
from .budgeting import (BudgetConfig, BudgetPlan, CalibrationProfile, allocate_heads,
                        allocate_layers, baseline_allocate, calibrate, calibrate_model,
                        load_profile, plan_budget, save_profile)
from .cache import CacheConfig, FeatureCache, apply_refresh, compact, prompt_refresh_set, response_refresh_set
from .decoding import DecodeResult, EvictionConfig, decode
from .errors import (CacheError, ComparisonError, ConfigurationError, MaskKVError, NumericError,
                     ParseError, ProtocolError)
from .eviction import EvictionReport, evict, select_keep_set, snap_select
from .memory import kv_memory_bytes
from .model import (DenoisingState, ModelConfig, ModelParams, RemaskPolicy, StepOutput, forward_step,
                    init_model, remask, schedule_steps)
from .scoring import layer_importance, mask_attention, mask_voting, prompt_preference

__version__ = "0.1.0"
