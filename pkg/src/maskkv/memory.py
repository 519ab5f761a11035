"""Modeled KV-cache memory.

``kv_memory_bytes`` is the bf16 deployment formula (2 for K and V) times the
layer count.  The engine itself computes in float64; accounting is modeled.
"""
from .errors import ConfigurationError

BF16_BYTES = 2


def kv_memory_bytes(seq_len: int, num_heads: int, head_dim: int,
                    elem_bytes: int = BF16_BYTES, num_layers: int = 1) -> int:
    """Bytes for K and V of ``seq_len`` positions: ``2*L*H*d_head*s*D``.

    ``seq_len`` may be 0 (an evicted-empty head); the other sizes must be positive.
    """
    if seq_len < 0:
        raise ConfigurationError("seq_len must be >= 0")
    for name, v in (("num_heads", num_heads), ("head_dim", head_dim),
                    ("elem_bytes", elem_bytes), ("num_layers", num_layers)):
        if v <= 0:
            raise ConfigurationError(f"{name} must be positive")
    per_layer = 2 * seq_len * num_heads * head_dim * elem_bytes
    return per_layer * num_layers


def retained_kv_bytes(counts, head_dim: int, elem_bytes: int = BF16_BYTES) -> int:
    """Modeled KV bytes for per-(layer, head) retained position counts."""
    return sum(kv_memory_bytes(int(c), 1, head_dim, elem_bytes, 1)
               for c in (int(x) for row in counts for x in row))
