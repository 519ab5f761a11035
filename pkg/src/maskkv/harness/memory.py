"""Modeled KV memory, re-exported for harness users."""
from ..memory import BF16_BYTES, kv_memory_bytes, retained_kv_bytes

__all__ = ["BF16_BYTES", "kv_memory_bytes", "retained_kv_bytes"]
