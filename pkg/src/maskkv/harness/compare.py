"""Policy x budget sweep on the toy needle task."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..budgeting import CalibrationProfile, calibrate_model
from ..cache import CacheConfig
from ..decoding import POLICIES, EvictionConfig, decode
from ..errors import ConfigurationError
from ..memory import BF16_BYTES, kv_memory_bytes
from ..model import ModelConfig, RemaskPolicy, init_model
from ..scoring import SEGMENTS
from .report import RunReport, RunResult
from .tasks import NEEDLE_MODEL, agreement_rate, needle_hit, needle_task

log = logging.getLogger(__name__)

CALIBRATION_SEED_BASE = 1_000_000


@dataclass
class CompareConfig:
    model: ModelConfig = NEEDLE_MODEL
    seeds: tuple[int, ...] = tuple(range(50))
    prompt_len: int = 64
    gen_len: int = 8
    needle_depth: float | None = None  # None draws a depth per seed
    policies: tuple[str, ...] = POLICIES
    budgets: tuple[int, ...] = (2, 4, 8, 16)
    alpha: float = 0.1
    beta: float = 0.4
    boundary: tuple[int, ...] | None = None
    mask_segment: str = "all"
    cache: CacheConfig = field(default_factory=CacheConfig)
    remask: RemaskPolicy = field(default_factory=RemaskPolicy)
    calibration_samples: int = 8
    profile: CalibrationProfile | None = None
    online: bool = False  # maskkv scores its budgets from the sample itself

    def validate(self) -> None:
        self.model.validate()
        self.cache.validate(self.model.num_layers)
        self.remask.validate()
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError("seeds must be distinct")
        if self.prompt_len < 1 or self.gen_len < 1:
            raise ConfigurationError("prompt_len and gen_len must be >= 1")
        if self.needle_depth is not None and not 0.0 <= self.needle_depth <= 1.0:
            raise ConfigurationError("needle depth must lie in [0, 1]")
        for p in self.policies:
            if p not in POLICIES:
                raise ConfigurationError(f"unknown policy {p!r}; choose from {POLICIES}")
        if any(b < 0 for b in self.budgets):
            raise ConfigurationError("budgets must be >= 0")
        if self.mask_segment not in SEGMENTS:
            raise ConfigurationError(f"mask segment must be one of {SEGMENTS}")
        if self.calibration_samples < 1 and self.profile is None:
            raise ConfigurationError("calibration needs at least one sample")
        if self.profile is not None and (self.profile.num_layers != self.model.num_layers
                                         or self.profile.num_heads != self.model.num_heads):
            raise ConfigurationError("profile shape does not match the model")

    def calibration_seeds(self) -> list[int]:
        seeds = [CALIBRATION_SEED_BASE + i for i in range(self.calibration_samples)]
        if set(seeds) & set(self.seeds):
            raise ConfigurationError("calibration seeds overlap evaluation seeds")
        return seeds

    def echo(self) -> list[tuple[str, str]]:
        m = self.model
        return [
            ("model", f"D={m.num_layers} H={m.num_heads} d={m.model_dim} V={m.vocab_size} "
                      f"seed={m.seed} qk_gain={m.qk_gain:g} anchor_logit={m.anchor_logit:g} "
                      f"retrieval_heads={m.num_retrieval_heads}"),
            ("seeds", " ".join(str(s) for s in self.seeds)),
            ("prompt_len", str(self.prompt_len)),
            ("gen_len", str(self.gen_len)),
            ("needle_depth", "random" if self.needle_depth is None else f"{self.needle_depth:g}"),
            ("policies", " ".join(self.policies) or "-"),
            ("budgets", " ".join(str(b) for b in self.budgets) or "-"),
            ("alpha", f"{self.alpha:g}"),
            ("beta", f"{self.beta:g}"),
            ("boundary", "default" if self.boundary is None else " ".join(map(str, self.boundary))),
            ("mask_segment", self.mask_segment),
            ("tp", str(self.cache.prompt_interval)),
            ("tr", str(self.cache.response_interval)),
            ("delta", f"{self.cache.shift_threshold:g}"),
            ("transfer_ratio", f"{self.remask.transfer_ratio:g}"),
            ("block_len", str(self.remask.block_length)),
            ("profile", "online" if self.online else
             ("given" if self.profile is not None else f"calibrated samples={self.calibration_samples}")),
        ]


def task_for(config: CompareConfig, seed: int):
    depth = config.needle_depth
    if depth is None:
        depth = float(np.random.default_rng([seed, 1]).random())
    return needle_task(seed, config.prompt_len, depth, config.model.vocab_size,
                       config.model.anchor_id, config.model.mask_id)


def build_profile(config: CompareConfig, params=None) -> CalibrationProfile:
    params = params if params is not None else init_model(config.model)
    prompts = [task_for(config, s).prompt for s in config.calibration_seeds()]
    return calibrate_model(params, prompts, config.gen_len, config.mask_segment,
                           source=f"needle seeds from {CALIBRATION_SEED_BASE}")


def run_compare(config: CompareConfig) -> RunReport:
    """Full-cache reference plus every policy at every budget, over all seeds."""
    config.validate()
    params = init_model(config.model)
    tasks = [task_for(config, s) for s in config.seeds]

    profile = config.profile
    needs_profile = "squeeze" in config.policies or (not config.online and "maskkv" in config.policies)
    if profile is None and needs_profile:
        profile = build_profile(config, params)

    ref = RunResult(policy="full", budget=None)
    ref_tokens = {}
    agg = _Agg()
    stabilities = []
    for task in tasks:
        res = decode(params, task.prompt, config.gen_len, config.remask, config.cache,
                     track_stability=True)
        ref_tokens[task.seed] = res.response
        agg.add(res, task, res.response, None)
        if res.stability is not None and res.stability == res.stability:
            stabilities.append(res.stability)
    agg.fill(ref)
    ref.stability = float(np.mean(stabilities)) if stabilities else float("nan")

    results = []
    for policy in config.policies:
        for budget in config.budgets:
            ev = EvictionConfig(
                budget=budget, policy=policy, alpha=config.alpha, beta=config.beta,
                boundary=config.boundary, mask_segment=config.mask_segment,
                profile=None if (policy == "maskkv" and config.online) else profile)
            r = RunResult(policy=policy, budget=budget)
            agg = _Agg()
            for task in tasks:
                res = decode(params, task.prompt, config.gen_len, config.remask, config.cache, ev)
                agg.add(res, task, ref_tokens[task.seed], res.eviction)
            agg.fill(r)
            results.append(r)
            log.info("%s budget=%d agreement=%.3f needle=%.3f", policy, budget, r.agreement,
                     r.needle_accuracy)

    m = config.model
    n = config.prompt_len + config.gen_len
    per_layer = kv_memory_bytes(n, m.num_heads, m.head_dim, BF16_BYTES)
    memory = [("kv_bytes_full_per_layer", str(per_layer)),
              ("kv_bytes_full_total", str(kv_memory_bytes(n, m.num_heads, m.head_dim, BF16_BYTES,
                                                          m.num_layers))),
              ("elem_bytes", str(BF16_BYTES))]
    return RunReport(config=config.echo(), reference=ref, results=results, memory=memory)


class _Agg:
    def __init__(self):
        self.rows = []

    def add(self, res, task, ref_response, report):
        rc = res.refresh_counts
        self.rows.append(dict(
            tokens=(task.seed, [int(t) for t in res.response]),
            agreement=agreement_rate(res.response, ref_response),
            needle=float(needle_hit(res.response, task.answer)),
            mass=1.0 if report is None else report.mean_retained_mass,
            prompt_kv=res.prompt_kv_bytes,
            kv=res.final_kv_bytes,
            peak=res.peak_bytes,
            rp=0.0 if rc is None else float(rc[:res.prompt_len].sum()),
            rr=0.0 if rc is None else float(rc[res.prompt_len:].sum()),
            steps=len(res.steps),
        ))

    def fill(self, r: RunResult) -> None:
        rows = self.rows
        r.tokens = dict(row["tokens"] for row in rows)

        def mean(key):
            return float(np.mean([row[key] for row in rows]))

        r.agreement = mean("agreement")
        r.needle_accuracy = mean("needle")
        r.retained_mass = mean("mass")
        r.prompt_kv_bytes = mean("prompt_kv")
        r.kv_bytes = mean("kv")
        r.peak_bytes = mean("peak")
        r.refresh_prompt = mean("rp")
        r.refresh_response = mean("rr")
        r.steps = mean("steps")
