"""Toy tasks and metrics for the sweep harness."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ComparisonError, ConfigurationError
from ..model import ModelConfig

# model the harness decodes with unless told otherwise; retrieval heads with a
# planted mask->anchor affinity give the needle task a learnable signal
NEEDLE_MODEL = ModelConfig(seed=7, anchor_logit=12.0, anchor_value=0.4, position_scale=1.0)


@dataclass(frozen=True)
class NeedleTask:
    prompt: np.ndarray
    answer: int
    position: int
    seed: int


def needle_task(seed: int, prompt_len: int, needle_depth: float,
                vocab_size: int = NEEDLE_MODEL.vocab_size,
                needle_token: int | None = None, mask_token: int | None = None) -> NeedleTask:
    """Random filler with one needle token at ``floor(depth * prompt_len)``.

    Filler never contains the needle or the mask token.  Depth 1 maps to the
    last prompt position.
    """
    if prompt_len < 1:
        raise ConfigurationError("prompt_len must be >= 1")
    if not 0.0 <= needle_depth <= 1.0:
        raise ConfigurationError(f"needle_depth {needle_depth} outside [0, 1]")
    needle = vocab_size - 2 if needle_token is None else needle_token
    mask = vocab_size - 1 if mask_token is None else mask_token
    filler = np.array([t for t in range(vocab_size) if t not in (needle, mask)], dtype=np.int64)
    if filler.size == 0:
        raise ConfigurationError("vocabulary too small for filler tokens")
    rng = np.random.default_rng(seed)
    prompt = filler[rng.integers(0, filler.size, size=prompt_len)]
    pos = min(int(np.floor(needle_depth * prompt_len)), prompt_len - 1)
    prompt[pos] = needle
    return NeedleTask(prompt=prompt, answer=int(needle), position=pos, seed=seed)


def needle_hit(response, answer: int) -> bool:
    return bool(np.any(np.asarray(response) == answer))


def agreement_rate(tokens_a, tokens_b) -> float:
    """Fraction of positions holding the same token id."""
    a = np.asarray(tokens_a)
    b = np.asarray(tokens_b)
    if a.shape != b.shape:
        raise ComparisonError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 1.0
    return float(np.mean(a == b))
