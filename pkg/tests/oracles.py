"""Independent straight-line re-computations used as test oracles.

Nothing here imports the package's numerics; loops and ``math`` only, except
the dense forward which reads raw weight arrays from a params object.
"""
from __future__ import annotations

import itertools
import math
from fractions import Fraction


def softmax(row):
    m = max(row)
    e = [math.exp(x - m) for x in row]
    s = sum(e)
    return [x / s for x in e]


def mask_attention(q, k):
    """q: list of n_m rows, k: list of n rows (each length d_k)."""
    dk = len(q[0])
    out = []
    for qi in q:
        scores = [sum(a * b for a, b in zip(qi, kj)) / math.sqrt(dk) for kj in k]
        out.append(softmax(scores))
    return out


def column_sums(A, rows, n_cols):
    return [sum(A[i][j] for i in rows) for j in range(n_cols)]


def prompt_preference(A, prompt_cols, mask_cols):
    s_mp = sum(A[i][j] for i in range(len(A)) for j in prompt_cols)
    s_mm = sum(A[i][j] for i in range(len(A)) for j in mask_cols)
    return 0.0 if s_mp + s_mm == 0 else s_mp / (s_mp + s_mm)


def snap(A_prompt_rows, window, n_prompt):
    n = len(A_prompt_rows)
    return column_sums(A_prompt_rows, range(n - window, n), n_prompt)


def best_subset_mass(scores, k):
    """Maximum total over all size-k subsets (exhaustive, correctly rounded sums)."""
    if k <= 0:
        return 0.0
    return max(math.fsum(scores[i] for i in c) for c in itertools.combinations(range(len(scores)), k))


def cosine(a, b):
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na == 0 or nb == 0:
        return 1.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def _round_robin(values, target, priority):
    order = sorted(range(len(values)), key=lambda i: (-priority[i], i))
    i = 0
    while sum(values) < target:
        values[order[i % len(order)]] += 1
        i += 1
    return values


def layer_budgets(k_p, beta, importance, boundary):
    """Exact-rational hybrid layer allocation; ``beta`` and ``importance`` as
    decimal strings or Fractions."""
    beta = Fraction(beta)
    imp = [Fraction(x) for x in importance]
    D = len(imp)
    k_base = math.floor(beta * k_p / D)
    k_imp = k_p - D * k_base
    vals = [k_base] * D
    if beta == 1:
        return _round_robin(vals, k_p, [0] * D)
    bound = sorted(boundary)
    mid = [i for i in range(D) if i not in bound]
    i_b = sum(imp[i] for i in bound)
    i_m = sum(imp[i] for i in mid)
    if i_b + i_m == 0:
        vals = [k_base + k_imp // D] * D
    else:
        g_b = k_imp * i_b / (i_b + i_m)
        g_m = k_imp - g_b
        for i in bound:
            vals[i] += math.floor(g_b / len(bound))
        for i in mid:
            vals[i] += math.floor(g_m / len(mid))
    return _round_robin(vals, k_p, imp)


def head_budgets(k_l, alpha, prefs):
    alpha = Fraction(alpha)
    p = [Fraction(x) for x in prefs]
    n_h = len(p)
    tot = sum(p)
    p_hat = [Fraction(1, n_h)] * n_h if tot == 0 else [x / tot for x in p]
    vals = [math.floor(alpha * k_l + (1 - alpha) * n_h * k_l * ph) for ph in p_hat]
    return _round_robin(vals, n_h * k_l, p_hat)


# -- dense forward ------------------------------------------------------------

def _matvec(x, W):
    """Row vector x (len d_in) times W (d_in x d_out) given as nested lists."""
    return [sum(x[i] * W[i][j] for i in range(len(x))) for j in range(len(W[0]))]


def _rms(x, eps=1e-6):
    r = math.sqrt(sum(v * v for v in x) / len(x) + eps)
    return [v / r for v in x]


def _gelu(v):
    return 0.5 * v * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v ** 3)))


def _rope(vec, pos, base):
    half = len(vec) // 2
    out = list(vec)
    for i in range(half):
        ang = pos * base ** (-i / half)
        c, s = math.cos(ang), math.sin(ang)
        a, b = vec[i], vec[i + half]
        out[i] = a * c - b * s
        out[i + half] = a * s + b * c
    return out


def dense_forward(params, tokens):
    """Cache-free forward of the toy model, one position and head at a time.

    Returns (final hidden rows, logits rows).  Absolute position codes are not
    supported (``position_scale`` must be 0).
    """
    cfg = params.config
    assert cfg.position_scale == 0
    H, dk, d = cfg.num_heads, cfg.head_dim, cfg.model_dim
    E = params.embed.tolist()
    n = len(tokens)
    h = [list(E[t]) for t in tokens]
    for lp in params.layers:
        wq, wk, wv, wo = lp.wq.tolist(), lp.wk.tolist(), lp.wv.tolist(), lp.wo.tolist()
        w1, w2 = lp.w1.tolist(), lp.w2.tolist()
        x = [_rms(r) for r in h]
        q = [_matvec(r, wq) for r in x]
        k = [_matvec(r, wk) for r in x]
        v = [_matvec(r, wv) for r in x]
        concat = [[0.0] * d for _ in range(n)]
        for hi in range(H):
            sl = slice(hi * dk, (hi + 1) * dk)
            qh = [r[sl] for r in q]
            kh = [r[sl] for r in k]
            if cfg.rope and hi >= cfg.num_retrieval_heads:
                qh = [_rope(r, p, cfg.rope_base) for p, r in enumerate(qh)]
                kh = [_rope(r, p, cfg.rope_base) for p, r in enumerate(kh)]
            A = mask_attention(qh, kh)
            for i in range(n):
                for c in range(dk):
                    concat[i][hi * dk + c] = sum(A[i][j] * v[j][hi * dk + c] for j in range(n))
        a_out = [_matvec(r, wo) for r in concat]
        h = [[a + b for a, b in zip(hr, ar)] for hr, ar in zip(h, a_out)]
        f_in = [_rms(r) for r in h]
        f_out = [_matvec([_gelu(u) for u in _matvec(r, w1)], w2) for r in f_in]
        h = [[a + b for a, b in zip(hr, fr)] for hr, fr in zip(h, f_out)]
    logits = [_matvec(_rms(r), [list(col) for col in zip(*E)]) for r in h]
    return h, logits
