"""Hierarchical budget allocation and calibration profiles.

Budgets are per-head averages: ``k_l`` is the average prompt-KV budget of one
head in layer ``l`` (the layer keeps ``N_h * k_l`` prompt entries), and
``k_p = sum_l k_l``.  Every floor is followed by a remainder pass that hands
out the missing units one at a time, highest score first, ties to the lower
index, so totals are conserved exactly.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError, ParseError

log = logging.getLogger(__name__)

# absorbs float noise in products such as 0.5 * 2 * 10 * 0.3 before flooring
_FLOOR_EPS = 1e-9
BASELINE_POLICIES = ("uniform", "snap", "pyramid", "squeeze", "ada")


def _floor(x: float) -> int:
    return int(math.floor(x + _FLOOR_EPS))


def _distribute(values: list[int], target: int, priority, audit: list, unit: str) -> list[int]:
    """Add (or, defensively, remove) units until ``sum(values) == target``.

    Units go round-robin in descending ``priority``, ties to the lower index.
    """
    order = sorted(range(len(values)), key=lambda i: (-priority[i], i))
    short = target - sum(values)
    i = 0
    while short > 0:
        j = order[i % len(order)]
        values[j] += 1
        audit.append((f"{unit}{j}", +1))
        short -= 1
        i += 1
    i = 0
    while short < 0:
        j = order[::-1][i % len(order)]
        if values[j] > 0:
            values[j] -= 1
            audit.append((f"{unit}{j}", -1))
            short += 1
        i += 1
    return values


@dataclass(frozen=True)
class BudgetConfig:
    k_p: int
    alpha: float = 0.1
    beta: float = 0.4
    boundary: tuple[int, ...] | None = None  # default: first and last layer

    def validate(self, num_layers: int) -> None:
        if self.k_p < 0:
            raise ConfigurationError("k_p must be >= 0")
        if not 0.0 <= self.alpha <= 1.0 or not 0.0 <= self.beta <= 1.0:
            raise ConfigurationError("alpha and beta must lie in [0, 1]")
        b = self.boundary_set(num_layers)
        if not b or any(not 0 <= i < num_layers for i in b):
            raise ConfigurationError(f"boundary layers {sorted(b)} must be a nonempty subset of 0..{num_layers - 1}")

    def boundary_set(self, num_layers: int) -> set[int]:
        if self.boundary is None:
            return {0, num_layers - 1}
        return set(self.boundary)


@dataclass
class BudgetPlan:
    k_l: np.ndarray  # (D,)
    k_lh: np.ndarray  # (D, H)
    audit: list = field(default_factory=list)
    policy: str = "maskkv"

    @property
    def k_p(self) -> int:
        return int(self.k_l.sum())

    def retained_prompt_total(self, n_prompt: int) -> int:
        return int(np.minimum(self.k_lh, n_prompt).sum())

    def check(self) -> None:
        H = self.k_lh.shape[1]
        if np.any(self.k_l < 0) or np.any(self.k_lh < 0):
            raise AssertionError("negative budget")
        if not np.array_equal(self.k_lh.sum(axis=1), H * self.k_l):
            raise AssertionError("head budgets do not sum to N_h * k_l")


@dataclass(frozen=True)
class CalibrationProfile:
    layer_importance: np.ndarray  # (D,)
    head_preference: np.ndarray  # (D, H)
    samples: int
    source: str = ""

    @property
    def num_layers(self) -> int:
        return len(self.layer_importance)

    @property
    def num_heads(self) -> int:
        return self.head_preference.shape[1]


def allocate_layers(k_p: int, beta: float, importance, boundary, audit: list | None = None) -> np.ndarray:
    """Hybrid base + group-proportional layer budgets summing exactly to ``k_p``."""
    audit = [] if audit is None else audit
    imp = np.asarray(importance, dtype=np.float64)
    D = len(imp)
    if D < 1:
        raise ConfigurationError("need at least one layer")
    if np.any(imp < 0) or not np.all(np.isfinite(imp)):
        raise ConfigurationError("layer importance must be finite and nonnegative")
    bound = sorted(set(int(b) for b in boundary))
    if not bound or bound[0] < 0 or bound[-1] >= D:
        raise ConfigurationError("boundary set must be a nonempty subset of the layers")
    mid = [i for i in range(D) if i not in bound]

    k_base = _floor(beta * k_p / D)
    k_imp = k_p - D * k_base
    k_l = [k_base] * D
    if beta >= 1.0:
        # pure base: only the flooring residue is left; hand it out like the
        # uniform baseline does
        return np.array(_distribute(k_l, k_p, [0.0] * D, audit, "layer"), dtype=np.int64)

    i_b = float(imp[bound].sum())
    i_m = float(imp[mid].sum()) if mid else 0.0
    if i_b + i_m <= 0.0:
        log.info("layer importance sums to 0; k_imp allocated uniformly")
        audit.append(("fallback-uniform", k_imp))
        k_l = [k_base + k_imp // D] * D
    else:
        group_b = k_imp * i_b / (i_b + i_m)
        group_m = k_imp - group_b
        share_b = _floor(group_b / len(bound))
        share_m = _floor(group_m / len(mid)) if mid else 0
        for i in bound:
            k_l[i] += share_b
        for i in mid:
            k_l[i] += share_m
    return np.array(_distribute(k_l, k_p, list(imp), audit, "layer"), dtype=np.int64)


def allocate_heads(k_l: int, alpha: float, preferences, audit: list | None = None) -> np.ndarray:
    """Split ``N_h * k_l`` among heads: base ``alpha*k_l`` plus preference share."""
    audit = [] if audit is None else audit
    p = np.asarray(preferences, dtype=np.float64)
    n_h = len(p)
    if n_h < 1:
        raise ConfigurationError("need at least one head")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ConfigurationError("preferences must be finite and nonnegative")
    total = float(p.sum())
    if total <= 0.0:
        log.info("prompt preferences sum to 0; using uniform preference")
        p_hat = np.full(n_h, 1.0 / n_h)
    else:
        p_hat = p / total
    raw = alpha * k_l + (1.0 - alpha) * n_h * k_l * p_hat
    k = [max(_floor(x), 0) for x in raw]
    return np.array(_distribute(k, n_h * k_l, list(p_hat), audit, "head"), dtype=np.int64)


def plan_budget(config: BudgetConfig, profile: CalibrationProfile, preferences=None) -> BudgetPlan:
    """Layer allocation from the profile, then head allocation per layer."""
    D = profile.num_layers
    config.validate(D)
    prefs = profile.head_preference if preferences is None else np.asarray(preferences, dtype=np.float64)
    if prefs.shape[0] != D:
        raise ConfigurationError(f"preferences cover {prefs.shape[0]} layers, profile has {D}")
    audit: list = []
    k_l = allocate_layers(config.k_p, config.beta, profile.layer_importance,
                          config.boundary_set(D), audit)
    k_lh = np.stack([allocate_heads(int(k_l[i]), config.alpha, prefs[i], audit) for i in range(D)])
    plan = BudgetPlan(k_l=k_l, k_lh=k_lh, audit=audit, policy="maskkv")
    plan.check()
    return plan


def _uniform_layers(k_p: int, D: int, audit: list) -> list[int]:
    return _distribute([k_p // D] * D, k_p, [0.0] * D, audit, "layer")


def baseline_allocate(policy: str, k_p: int, num_layers: int, num_heads: int,
                      extras: dict | None = None) -> BudgetPlan:
    """Simplified analogues of published allocators (not faithful re-implementations).

    extras:
      ``pyramid_steepness`` (20), ``squeeze_share`` (0.4) with
      ``layer_importance`` (D,), ``ada_reserve`` (0.2) with ``head_scores``
      (D, H, n_p).
    """
    extras = extras or {}
    D, H = num_layers, num_heads
    if policy not in BASELINE_POLICIES:
        raise ConfigurationError(f"unknown baseline policy {policy!r}; choose from {BASELINE_POLICIES}")
    if k_p < 0 or D < 1 or H < 1:
        raise ConfigurationError("need k_p >= 0 and positive layer/head counts")
    audit: list = []

    if policy in ("uniform", "snap"):
        k_l = _uniform_layers(k_p, D, audit)
    elif policy == "pyramid":
        k_l = _pyramid_layers(k_p, D, float(extras.get("pyramid_steepness", 20.0)), audit)
    elif policy == "squeeze":
        if "layer_importance" not in extras:
            raise ConfigurationError("squeeze policy needs extras['layer_importance']")
        k_l = _squeeze_layers(k_p, np.asarray(extras["layer_importance"], dtype=np.float64),
                              float(extras.get("squeeze_share", 0.4)), audit)
    else:
        k_l = _uniform_layers(k_p, D, audit)

    if policy == "ada":
        if "head_scores" not in extras:
            raise ConfigurationError("ada policy needs extras['head_scores']")
        scores = np.asarray(extras["head_scores"], dtype=np.float64)
        reserve = float(extras.get("ada_reserve", 0.2))
        k_lh = np.stack([_ada_heads(k_l[i], scores[i], reserve, audit) for i in range(D)])
    else:
        k_lh = np.repeat(np.asarray(k_l, dtype=np.int64)[:, None], H, axis=1)
    plan = BudgetPlan(k_l=np.asarray(k_l, dtype=np.int64), k_lh=k_lh, audit=audit, policy=policy)
    plan.check()
    return plan


def pyramid_profile(k_p: int, num_layers: int, steepness: float) -> np.ndarray:
    """Real-valued arithmetic progression: top = mean/steepness, bottom = 2*mean - top."""
    D = num_layers
    mean = k_p / D
    if D == 1:
        return np.array([float(k_p)])
    top = mean / steepness
    bottom = 2.0 * mean - top
    return bottom - (bottom - top) * np.arange(D) / (D - 1)


def _pyramid_layers(k_p: int, D: int, steepness: float, audit: list) -> list[int]:
    if steepness < 1.0:
        raise ConfigurationError("pyramid steepness must be >= 1")
    real = pyramid_profile(k_p, D, steepness)
    k_l = [max(_floor(x), 0) for x in real]
    # shallower layers first
    return _distribute(k_l, k_p, [float(D - i) for i in range(D)], audit, "layer")


def squeeze_groups(importance: np.ndarray, n_groups: int = 3) -> list[np.ndarray]:
    """Layers ranked by importance (desc, ties low index), cut into near-equal groups."""
    order = sorted(range(len(importance)), key=lambda i: (-importance[i], i))
    return [g for g in np.array_split(np.array(order, dtype=np.int64), n_groups) if len(g)]


def _squeeze_layers(k_p: int, importance: np.ndarray, share: float, audit: list) -> list[int]:
    D = len(importance)
    if not 0.0 <= share <= 1.0:
        raise ConfigurationError("squeeze share must lie in [0, 1]")
    groups = squeeze_groups(importance)
    if len(groups) < 2:
        return _uniform_layers(k_p, D, audit)
    least = set(int(i) for i in groups[-1])
    rest = [i for i in range(D) if i not in least]
    k_l = [0] * D
    for i in least:
        k_l[i] = _floor(share * k_p / D)
    remaining = k_p - sum(k_l)
    for i in rest:
        k_l[i] = _floor(remaining / len(rest))
    # remainder: the important layers first
    return _distribute(k_l, k_p, [float(-r) for r in _ranks(importance)], audit, "layer")


def _ranks(importance: np.ndarray) -> list[int]:
    order = sorted(range(len(importance)), key=lambda i: (-importance[i], i))
    rank = [0] * len(order)
    for r, i in enumerate(order):
        rank[i] = r
    return rank


def _ada_heads(k_l: int, scores: np.ndarray, reserve: float, audit: list) -> np.ndarray:
    """Per-head split of ``H*k_l``: a reserved uniform floor plus the head's share of
    the layer's overall top scores."""
    H, n_p = scores.shape
    total = H * k_l
    base = _floor(reserve * k_l)
    adaptive = total - H * base
    counts = np.zeros(H, dtype=np.int64)
    take = min(adaptive, H * n_p)
    if take > 0:
        flat = kernels.topk_indices(np.ascontiguousarray(scores.reshape(-1)), take)
        counts = np.bincount(flat // n_p, minlength=H).astype(np.int64)
    k = [int(base + c) for c in counts]
    return np.array(_distribute(k, total, [0.0] * H, audit, "head"), dtype=np.int64)


def calibrate(samples, source: str = "") -> CalibrationProfile:
    """Arithmetic mean of per-sample layer importance and head preference.

    ``samples`` is an iterable of :class:`~maskkv.scoring.SampleScores`.
    """
    samples = list(samples)
    if not samples:
        raise ConfigurationError("empty calibration set")
    li = np.mean(np.stack([s.layer_importance for s in samples]), axis=0)
    hp = np.mean(np.stack([s.head_preference for s in samples]), axis=0)
    return CalibrationProfile(layer_importance=li, head_preference=hp, samples=len(samples), source=source)


def calibrate_model(params, prompts, gen_len: int, segment: str = "all", source: str = "") -> CalibrationProfile:
    """Calibrate on the toy model: one cache-free first step per prompt."""
    from .model import DenoisingState, forward_step
    from .scoring import score_step

    samples = []
    for prompt in prompts:
        state = DenoisingState.initial(prompt, gen_len, 1, params.config.mask_id)
        out = forward_step(params, state)
        samples.append(score_step(out, state.prompt_len, segment))
    return calibrate(samples, source=source)


# -- profile text format ------------------------------------------------------

_HEADER = re.compile(r"^maskkv-profile v1 D=(\d+) H=(\d+) samples=(\d+)$")


def _num(x: float) -> str:
    return f"{float(x):.9g}"


def format_profile(profile: CalibrationProfile) -> str:
    D, H = profile.num_layers, profile.num_heads
    lines = [f"maskkv-profile v1 D={D} H={H} samples={profile.samples}"]
    lines += [f"layer {i} importance {_num(v)}" for i, v in enumerate(profile.layer_importance)]
    lines += ["heads {} {}".format(i, " ".join(_num(v) for v in row))
              for i, row in enumerate(profile.head_preference)]
    return "\n".join(lines) + "\n"


def parse_profile(text: str, source: str = "") -> CalibrationProfile:
    """Inverse of :func:`format_profile`; errors carry the 1-based line number."""
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty profile", offset=1, unit="line")
    m = _HEADER.match(lines[0])
    if not m:
        raise ParseError(f"bad profile header {lines[0]!r}", offset=1, unit="line")
    D, H, samples = (int(g) for g in m.groups())
    if D < 1 or H < 1 or samples < 1:
        raise ParseError("profile dims and sample count must be positive", offset=1, unit="line")
    if len(lines) != 1 + 2 * D:
        raise ParseError(f"expected {1 + 2 * D} lines, found {len(lines)}", offset=min(len(lines), 1 + 2 * D) + 1, unit="line")
    li = np.empty(D)
    hp = np.empty((D, H))
    for i in range(D):
        lineno = 2 + i
        parts = lines[lineno - 1].split(" ")
        if len(parts) != 4 or parts[0] != "layer" or parts[2] != "importance" or parts[1] != str(i):
            raise ParseError(f"expected 'layer {i} importance <x>'", offset=lineno, unit="line")
        li[i] = _parse_float(parts[3], lineno)
    for i in range(D):
        lineno = 2 + D + i
        parts = lines[lineno - 1].split(" ")
        if len(parts) != 2 + H or parts[0] != "heads" or parts[1] != str(i):
            raise ParseError(f"expected 'heads {i}' followed by {H} values", offset=lineno, unit="line")
        hp[i] = [_parse_float(x, lineno) for x in parts[2:]]
    return CalibrationProfile(layer_importance=li, head_preference=hp, samples=samples, source=source)


def _parse_float(s: str, lineno: int) -> float:
    try:
        v = float(s)
    except ValueError:
        raise ParseError(f"not a number: {s!r}", offset=lineno, unit="line") from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value {s!r}", offset=lineno, unit="line")
    return v


def save_profile(profile: CalibrationProfile, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_profile(profile))


def load_profile(path) -> CalibrationProfile:
    with open(path, encoding="utf-8") as fh:
        return parse_profile(fh.read(), source=str(path))
