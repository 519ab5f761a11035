"""Deterministic toy diffusion language model.

A small bidirectional transformer with seeded random weights.  It decodes by
iterative unmasking and exposes every intermediate tensor (per-head Q/K/V,
attention maps, hidden states on both sides of each sub-layer) so that the
scoring and caching code can be exercised against it.

Layer ``l`` computes::

    h_mid = h + Attn(rmsnorm(h))
    h_out = h_mid + FFN(rmsnorm(h_mid))

and the update term ``delta = Attn + FFN`` is reported per position.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CacheError, ConfigurationError, ProtocolError

RMS_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    num_heads: int = 4
    model_dim: int = 32
    vocab_size: int = 64
    seed: int = 0
    ffn_mult: int = 4
    rope: bool = True
    rope_base: float = 10000.0
    mask_token: int | None = None  # defaults to vocab_size - 1
    # heads 0..retrieval_heads-1 of every layer: shared Q/K projection, output
    # projection tied to the value projection, no rotary mixing
    retrieval_heads: int | None = None  # defaults to num_heads // 2
    qk_gain: float = 1.0
    # planted layer-input attention logit from mask-token queries to
    # anchor-token keys in retrieval heads; 0 plants nothing
    anchor_logit: float = 0.0
    anchor_token: int | None = None  # defaults to vocab_size - 2
    # extra value-side copy of the anchor direction in retrieval heads
    anchor_value: float = 0.0
    # weight of a fixed sinusoidal absolute position code added to the input
    # embedding; 0 disables it
    position_scale: float = 0.0

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def mask_id(self) -> int:
        return self.vocab_size - 1 if self.mask_token is None else self.mask_token

    @property
    def anchor_id(self) -> int:
        return self.vocab_size - 2 if self.anchor_token is None else self.anchor_token

    @property
    def num_retrieval_heads(self) -> int:
        return self.num_heads // 2 if self.retrieval_heads is None else self.retrieval_heads

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ConfigurationError("num_layers must be a positive integer")
        if self.num_heads < 1:
            raise ConfigurationError("num_heads must be a positive integer")
        if self.model_dim < 1:
            raise ConfigurationError("model_dim must be a positive integer")
        if self.model_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"d not divisible by N_h (d={self.model_dim}, N_h={self.num_heads})"
            )
        if self.vocab_size < 2:
            raise ConfigurationError("vocab_size must be >= 2")
        if not 0 <= self.mask_id < self.vocab_size:
            raise ConfigurationError("mask token id must lie in [0, vocab_size)")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be a 64-bit unsigned integer")
        if self.ffn_mult < 1:
            raise ConfigurationError("ffn_mult must be a positive integer")
        if not 0 <= self.num_retrieval_heads <= self.num_heads:
            raise ConfigurationError("retrieval_heads must lie in [0, num_heads]")
        if self.qk_gain <= 0:
            raise ConfigurationError("qk_gain must be positive")
        if self.position_scale < 0:
            raise ConfigurationError("position_scale must be >= 0")
        if self.anchor_logit < 0 or self.anchor_value < 0:
            raise ConfigurationError("anchor_logit and anchor_value must be >= 0")
        if self.anchor_logit > 0 and (
                not 0 <= self.anchor_id < self.vocab_size or self.anchor_id == self.mask_id):
            raise ConfigurationError("anchor token must be a valid non-mask id")


@dataclass
class LayerParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass
class ModelParams:
    config: ModelConfig
    embed: np.ndarray  # (vocab, d); also the tied output projection
    layers: list[LayerParams]


def init_model(config: ModelConfig) -> ModelParams:
    """Draw all weights from PCG64 seeded with ``config.seed``.

    Matrices are standard normal scaled by ``1/sqrt(fan_in)``; the draw order is
    fixed (embedding, then per layer Q, K, V, O, FFN in, FFN out, and one
    unit direction per retrieval head when an anchor is planted).

    Retrieval heads copy their Q columns into K and the transposed V columns
    into their rows of the output projection.  With ``anchor_logit > 0`` they
    also get a rank-one term that maps the mask embedding (on the query side)
    and the anchor embedding (on the key side) onto a shared direction, worth
    ``anchor_logit`` in attention logit for unnormalised embeddings.
    """
    config.validate()
    rng = np.random.Generator(np.random.PCG64(config.seed))
    d, dk = config.model_dim, config.head_dim
    f = config.ffn_mult * d
    gain = math.sqrt(config.qk_gain)
    embed = rng.standard_normal((config.vocab_size, d))
    plant = config.anchor_logit > 0
    if plant:
        u_mask = embed[config.mask_id] / np.linalg.norm(embed[config.mask_id])
        # keep the anchor off the mask direction so masks alone never read it out
        a = embed[config.anchor_id]
        a = a - (a @ u_mask) * u_mask
        embed[config.anchor_id] = a * (math.sqrt(d) / np.linalg.norm(a))
        u_anchor = embed[config.anchor_id] / np.linalg.norm(embed[config.anchor_id])
        # rmsnorm(x) . u = sqrt(d) * cos(x, u); logit = c^2 * d / sqrt(d_k)
        c = math.sqrt(config.anchor_logit * math.sqrt(dk) / d)
    layers = []
    for _ in range(config.num_layers):
        wq, wk, wv, wo = (rng.standard_normal((d, d)) / math.sqrt(d) for _ in range(4))
        w1 = rng.standard_normal((d, f)) / math.sqrt(d)
        w2 = rng.standard_normal((f, d)) / math.sqrt(f)
        wq *= gain
        wk *= gain
        for h in range(config.num_retrieval_heads):
            cols = slice(h * dk, (h + 1) * dk)
            wk[:, cols] = wq[:, cols]
            if plant:
                r = rng.standard_normal(dk)
                r /= np.linalg.norm(r)
                wq[:, cols] += c * np.outer(u_mask, r)
                wk[:, cols] += c * np.outer(u_anchor, r)
                if config.anchor_value:
                    rv = rng.standard_normal(dk)
                    rv /= np.linalg.norm(rv)
                    wv[:, cols] += config.anchor_value * np.outer(u_anchor, rv)
            wo[cols, :] = wv[:, cols].T * (d / dk)
        layers.append(LayerParams(wq, wk, wv, wo, w1, w2))
    return ModelParams(config=config, embed=embed, layers=layers)


@dataclass
class DenoisingState:
    tokens: np.ndarray
    prompt_len: int
    gen_len: int
    step: int
    total_steps: int
    mask_id: int

    @classmethod
    def initial(cls, prompt, gen_len: int, total_steps: int, mask_id: int) -> "DenoisingState":
        prompt = np.asarray(prompt, dtype=np.int64)
        tokens = np.concatenate([prompt, np.full(gen_len, mask_id, dtype=np.int64)])
        state = cls(tokens, len(prompt), gen_len, total_steps, total_steps, mask_id)
        state.validate()
        return state

    @property
    def seq_len(self) -> int:
        return self.prompt_len + self.gen_len

    @property
    def prompt_positions(self) -> np.ndarray:
        return np.arange(self.prompt_len)

    @property
    def response_positions(self) -> np.ndarray:
        return np.arange(self.prompt_len, self.seq_len)

    @property
    def masked_positions(self) -> np.ndarray:
        resp = self.tokens[self.prompt_len:]
        return np.flatnonzero(resp == self.mask_id) + self.prompt_len

    def validate(self) -> None:
        if len(self.tokens) != self.seq_len:
            raise ProtocolError("token sequence length != prompt_len + gen_len")
        if np.any(self.tokens[: self.prompt_len] == self.mask_id):
            raise ProtocolError("prompt positions must not hold the mask token")
        if not 0 <= self.step <= self.total_steps:
            raise ProtocolError(f"step {self.step} outside [0, {self.total_steps}]")
        n_masked = len(self.masked_positions)
        if self.step == self.total_steps and n_masked != self.gen_len:
            raise ProtocolError("initial state must have every response position masked")
        if self.step == 0 and n_masked:
            raise ProtocolError("final state still holds masked positions")


@dataclass
class StepOutput:
    """Everything one denoising forward pass produced.

    Rows of the per-position arrays that were not computed (prompt positions
    outside the refresh set in cached mode) are NaN.
    """

    hidden: np.ndarray  # (D+1, n, d): h^(0) .. h^(D)
    attn_hidden: np.ndarray  # (D, n, d): attention sub-layer output h_mid
    deltas: np.ndarray  # (D, n, d): attn_out + ffn_out
    keys: np.ndarray  # (D, H, n, d_k) keys in use this step (rotated)
    values: np.ndarray  # (D, H, n, d_k)
    queries: np.ndarray  # (D, H, n, d_k) only computed rows are finite
    attn_out: np.ndarray  # (D, n, d)
    ffn_out: np.ndarray  # (D, n, d)
    attention: list[np.ndarray]  # per layer (H, n_q, n), rows follow query_positions
    query_positions: np.ndarray
    logits: np.ndarray  # (n_logit, vocab)
    logit_positions: np.ndarray
    masked_positions: np.ndarray
    key_sets: list[list[np.ndarray]] = field(default_factory=list)

    def attention_rows(self, layer: int, positions) -> np.ndarray:
        """Attention maps ``(H, len(positions), n)`` for the given query positions."""
        where = {int(p): r for r, p in enumerate(self.query_positions)}
        try:
            rows = [where[int(p)] for p in positions]
        except KeyError as exc:
            raise ProtocolError(f"no attention row computed for position {exc.args[0]}")
        return self.attention[layer][:, rows, :]


def position_code(positions, dim: int) -> np.ndarray:
    """Sinusoidal absolute position code, shape (len(positions), dim)."""
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    out = np.empty((pos.shape[0], dim))
    out[:, 0::2] = np.sin(pos * freq)[:, : (dim + 1) // 2]
    out[:, 1::2] = np.cos(pos * freq)[:, : dim // 2]
    return out


def embed_tokens(params: "ModelParams", tokens, positions) -> np.ndarray:
    """Input embedding of ``tokens`` sitting at ``positions``."""
    h = params.embed[np.asarray(tokens)]
    scale = params.config.position_scale
    if scale:
        h = h + scale * position_code(positions, params.config.model_dim)
    return h


def rms_norm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def softmax_rows(s: np.ndarray) -> np.ndarray:
    z = s - np.max(s, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def apply_rope(x: np.ndarray, positions: np.ndarray, base: float) -> np.ndarray:
    """Rotate (rows, H, d_k) by position, pairing dim i with i + d_k//2."""
    half = x.shape[-1] // 2
    if half == 0:
        return x
    freqs = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = positions[:, None].astype(np.float64) * freqs[None, :]
    cos = np.cos(ang)[:, None, :]
    sin = np.sin(ang)[:, None, :]
    out = x.copy()
    x1 = x[..., :half]
    x2 = x[..., half: 2 * half]
    out[..., :half] = x1 * cos - x2 * sin
    out[..., half: 2 * half] = x1 * sin + x2 * cos
    return out


def _split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    return x.reshape(x.shape[0], num_heads, x.shape[1] // num_heads)


def forward_step(
    params: ModelParams,
    state: DenoisingState,
    cache=None,
    refresh=None,
    mask_only_projection: bool = False,
) -> StepOutput:
    """Run one denoising forward pass.

    With ``cache=None`` every position is computed from scratch.  With a
    :class:`~maskkv.cache.FeatureCache`, only positions in ``refresh`` are
    recomputed; every other response position reuses its cached attention and
    FFN outputs, and attention keys/values outside ``refresh`` come from the
    cache.  Evicted prompt keys are invisible to every query.
    """
    cfg = params.config
    state.validate()
    masked = state.masked_positions
    if state.step > 0 and len(masked) == 0:
        raise ProtocolError("empty masked set at t > 0")
    n = state.seq_len
    D, H, dk, d = cfg.num_layers, cfg.num_heads, cfg.head_dim, cfg.model_dim

    if cache is None:
        rows = np.arange(n)
        active = np.ones(n, dtype=bool)
        allowed = np.ones((D, H, n), dtype=bool)
    else:
        cache.check_compatible(cfg, n)
        rows = np.arange(n) if refresh is None else np.unique(np.asarray(list(refresh), dtype=np.int64))
        if len(rows) and (rows[0] < 0 or rows[-1] >= n):
            raise ProtocolError("refresh position outside the sequence")
        if not cache.initialized and len(rows) != n:
            raise ProtocolError("an empty cache requires every position to be refreshed")
        active = np.zeros(n, dtype=bool)
        active[rows] = True
        active[state.prompt_len:] = True
        allowed = cache.kv_allowed

    reuse = np.flatnonzero(active & ~np.isin(np.arange(n), rows))
    nan = np.nan
    hidden = np.full((D + 1, n, d), nan)
    attn_hidden = np.full((D, n, d), nan)
    deltas = np.full((D, n, d), nan)
    attn_out_all = np.full((D, n, d), nan)
    ffn_out_all = np.full((D, n, d), nan)
    keys_all = np.full((D, H, n, dk), nan)
    values_all = np.full((D, H, n, dk), nan)
    queries_all = np.full((D, H, n, dk), nan)
    attention = []
    key_sets = []

    h = np.full((n, d), nan)
    h[active] = embed_tokens(params, state.tokens[active], np.flatnonzero(active))
    hidden[0] = h
    scale = 1.0 / math.sqrt(dk)
    for li, lp in enumerate(params.layers):
        x = rms_norm(h[rows])
        q = _split_heads(x @ lp.wq, H)
        k = _split_heads(x @ lp.wk, H)
        v = _split_heads(x @ lp.wv, H)
        r0 = cfg.num_retrieval_heads
        if cfg.rope and r0 < H:
            q[:, r0:] = apply_rope(q[:, r0:], rows, cfg.rope_base)
            k[:, r0:] = apply_rope(k[:, r0:], rows, cfg.rope_base)
        if cache is None:
            K = np.empty((H, n, dk))
            V = np.empty((H, n, dk))
        else:
            K = cache.keys[li].copy()
            V = cache.values[li].copy()
        K[:, rows] = k.transpose(1, 0, 2)
        V[:, rows] = v.transpose(1, 0, 2)
        keys_all[li] = K
        values_all[li] = V
        queries_all[li][:, rows] = q.transpose(1, 0, 2)

        amap = np.zeros((H, len(rows), n))
        heads_out = np.empty((len(rows), H, dk))
        layer_sets = []
        for hi in range(H):
            kidx = np.flatnonzero(allowed[li, hi])
            layer_sets.append(kidx)
            if len(kidx) == 0:
                heads_out[:, hi] = 0.0
                continue
            probs = softmax_rows((q[:, hi] @ K[hi, kidx].T) * scale)
            amap[hi][:, kidx] = probs
            heads_out[:, hi] = probs @ V[hi, kidx]
        attention.append(amap)
        key_sets.append(layer_sets)

        a_out = np.full((n, d), nan)
        a_out[rows] = heads_out.reshape(len(rows), d) @ lp.wo
        if len(reuse):
            a_out[reuse] = cache.attn_out[li][reuse]
        h_mid = h + a_out
        f_out = np.full((n, d), nan)
        f_out[rows] = gelu(rms_norm(h_mid[rows]) @ lp.w1) @ lp.w2
        if len(reuse):
            f_out[reuse] = cache.ffn_out[li][reuse]
        h = h_mid + f_out

        attn_out_all[li] = a_out
        ffn_out_all[li] = f_out
        attn_hidden[li] = h_mid
        deltas[li] = a_out + f_out
        hidden[li + 1] = h

    logit_positions = masked if mask_only_projection else np.flatnonzero(active)
    logits = rms_norm(h[logit_positions]) @ params.embed.T
    return StepOutput(
        hidden=hidden,
        attn_hidden=attn_hidden,
        deltas=deltas,
        keys=keys_all,
        values=values_all,
        queries=queries_all,
        attn_out=attn_out_all,
        ffn_out=ffn_out_all,
        attention=attention,
        query_positions=rows,
        logits=logits,
        logit_positions=logit_positions,
        masked_positions=masked,
        key_sets=key_sets,
    )


@dataclass(frozen=True)
class RemaskPolicy:
    transfer_ratio: float = 0.25
    block_length: int = 8

    def validate(self) -> None:
        if not 0.0 < self.transfer_ratio <= 1.0:
            raise ConfigurationError("transfer_ratio must lie in (0, 1]")
        if self.block_length < 1:
            raise ConfigurationError("block_length must be a positive integer")

    def num_to_decode(self, remaining: int) -> int:
        # round() guards products like 0.1 * 30 = 3.0000000000000004
        return max(1, math.ceil(round(self.transfer_ratio * remaining, 9)))


def schedule_steps(gen_len: int, policy: RemaskPolicy) -> int:
    """Exact number of denoising steps ``T`` the policy needs for ``gen_len`` tokens."""
    policy.validate()
    steps = 0
    for start in range(0, gen_len, policy.block_length):
        remaining = min(policy.block_length, gen_len - start)
        while remaining > 0:
            remaining -= policy.num_to_decode(remaining)
            steps += 1
    return steps


def remask(state: DenoisingState, logits: np.ndarray, policy: RemaskPolicy,
           positions=None) -> DenoisingState:
    """Commit the most confident masked positions of the active block.

    ``logits`` rows correspond to ``positions`` (default: the masked positions
    in ascending order).  The mask token is never committed.  Confidence ties go
    to the lower position.
    """
    policy.validate()
    if state.step <= 0:
        raise ProtocolError("remask called at t = 0")
    masked = state.masked_positions
    if len(masked) == 0:
        raise ProtocolError("remask called with an empty masked set")
    if positions is None:
        positions = masked
    row_of = {int(p): r for r, p in enumerate(positions)}
    missing = [int(p) for p in masked if int(p) not in row_of]
    if missing:
        raise ProtocolError(f"logits missing for masked positions {missing}")

    block = (masked - state.prompt_len) // policy.block_length
    cand = masked[block == block.min()]
    z = np.array([logits[row_of[int(p)]] for p in cand], dtype=np.float64)
    z[:, state.mask_id] = -np.inf
    probs = softmax_rows(z)
    conf = probs.max(axis=1)
    best = probs.argmax(axis=1)
    k = min(policy.num_to_decode(len(cand)), len(cand))
    order = np.lexsort((cand, -conf))[:k]
    tokens = state.tokens.copy()
    tokens[cand[order]] = best[order]
    nxt = DenoisingState(tokens, state.prompt_len, state.gen_len, state.step - 1,
                         state.total_steps, state.mask_id)
    nxt.validate()
    return nxt

