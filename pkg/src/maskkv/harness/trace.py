"""Binary attention traces.

Layout (little-endian)::

    8 bytes   magic b"MKVTRC01"
    5 x u32   D, N_h, n_p, n_m, d_k
    f32       Q_mask (D, N_h, n_m, d_k)
    f32       K_full (D, N_h, n_p + n_m, d_k)   prompt keys first
    f32       h_in   (D, n_p + n_m, N_h * d_k)
    f32       h_out  (D, n_p + n_m, N_h * d_k)
    u32       manifest length, then that many bytes of UTF-8 JSON

The hidden width is taken to be ``N_h * d_k``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError, ParseError
from ..model import DenoisingState, ModelParams, forward_step
from ..scoring import SampleScores, score_qk

MAGIC = b"MKVTRC01"
_DIMS = struct.Struct("<5I")
_U32 = struct.Struct("<I")
_F32 = np.dtype("<f4")
HEADER_BYTES = len(MAGIC) + _DIMS.size


@dataclass
class AttentionTrace:
    q_mask: np.ndarray
    k_full: np.ndarray
    h_in: np.ndarray
    h_out: np.ndarray
    manifest: dict = field(default_factory=dict)

    @property
    def dims(self) -> tuple[int, int, int, int, int]:
        D, H, n_m, dk = self.q_mask.shape
        return D, H, self.k_full.shape[2] - n_m, n_m, dk

    def validate(self) -> None:
        if self.q_mask.ndim != 4:
            raise ConfigurationError("q_mask must be (D, N_h, n_m, d_k)")
        D, H, n_p, n_m, dk = self.dims
        n, d = n_p + n_m, H * dk
        want = {"k_full": (D, H, n, dk), "h_in": (D, n, d), "h_out": (D, n, d)}
        for name, shape in want.items():
            if getattr(self, name).shape != shape:
                raise ConfigurationError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if min(D, H, n_p, n_m, dk) < 1:
            raise ConfigurationError(f"every trace dimension must be positive, got {self.dims}")
        for name in ("q_mask", "k_full", "h_in", "h_out"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ConfigurationError(f"{name} contains non-finite values")


def _payload_shapes(D, H, n_p, n_m, dk):
    n = n_p + n_m
    return [("q_mask", (D, H, n_m, dk)), ("k_full", (D, H, n, dk)),
            ("h_in", (D, n, H * dk)), ("h_out", (D, n, H * dk))]


def encode_trace(trace: AttentionTrace) -> bytes:
    trace.validate()
    parts = [MAGIC, _DIMS.pack(*trace.dims)]
    for name, _ in _payload_shapes(*trace.dims):
        parts.append(np.ascontiguousarray(getattr(trace, name), dtype=_F32).tobytes())
    meta = json.dumps(trace.manifest, sort_keys=True).encode("utf-8")
    parts.append(_U32.pack(len(meta)))
    parts.append(meta)
    return b"".join(parts)


def decode_trace(data: bytes) -> AttentionTrace:
    """Parse trace bytes; every failure names the byte offset."""
    if len(data) < len(MAGIC):
        raise ParseError(f"truncated header: expected {HEADER_BYTES} bytes, got {len(data)}", len(data))
    if data[:len(MAGIC)] != MAGIC:
        raise ParseError(f"bad magic {data[:len(MAGIC)]!r}", 0)
    if len(data) < HEADER_BYTES:
        raise ParseError(f"truncated header: expected {HEADER_BYTES} bytes, got {len(data)}", len(data))
    dims = _DIMS.unpack_from(data, len(MAGIC))
    for i, v in enumerate(dims):
        if v < 1:
            raise ParseError(f"dimension {('D', 'N_h', 'n_p', 'n_m', 'd_k')[i]} must be positive, got {v}",
                             len(MAGIC) + 4 * i)
    shapes = _payload_shapes(*dims)
    sizes = [int(np.prod(s)) * _F32.itemsize for _, s in shapes]
    meta_at = HEADER_BYTES + sum(sizes)
    if len(data) < meta_at + _U32.size:
        raise ParseError(f"truncated payload: expected at least {meta_at + _U32.size} bytes, "
                         f"got {len(data)}", len(data))
    arrays = {}
    off = HEADER_BYTES
    for (name, shape), size in zip(shapes, sizes):
        arr = np.frombuffer(data, dtype=_F32, count=size // 4, offset=off).reshape(shape)
        bad = np.flatnonzero(~np.isfinite(arr.ravel()))
        if bad.size:
            raise ParseError(f"non-finite value in {name}", off + 4 * int(bad[0]))
        arrays[name] = arr.copy()
        off += size
    (meta_len,) = _U32.unpack_from(data, meta_at)
    start = meta_at + _U32.size
    end = start + meta_len
    if len(data) < end:
        raise ParseError(f"truncated manifest: expected {end} bytes, got {len(data)}", len(data))
    if len(data) > end:
        raise ParseError(f"{len(data) - end} trailing byte(s) after the manifest", end)
    try:
        manifest = json.loads(data[start:end].decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ParseError(f"manifest is not UTF-8: {exc.reason}", start + exc.start) from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"manifest is not JSON: {exc.msg}", start + exc.pos) from None
    if not isinstance(manifest, dict):
        raise ParseError("manifest must be a JSON object", start)
    return AttentionTrace(manifest=manifest, **arrays)


def save_trace(trace: AttentionTrace, path) -> None:
    Path(path).write_bytes(encode_trace(trace))


def load_trace(path) -> AttentionTrace:
    return decode_trace(Path(path).read_bytes())


def trace_from_model(params: ModelParams, prompt, gen_len: int, source: str = "toy-model",
                     created: str | None = None) -> AttentionTrace:
    """Trace of the first (fully masked) denoising step of the toy model."""
    state = DenoisingState.initial(prompt, gen_len, 1, params.config.mask_id)
    out = forward_step(params, state)
    masked = out.masked_positions
    if created is None:
        created = datetime.now(timezone.utc).isoformat(timespec="seconds")
    manifest = {"source": source, "created": created, "model": asdict(params.config),
                "prompt": [int(t) for t in state.tokens[:state.prompt_len]]}
    return AttentionTrace(
        q_mask=out.queries[:, :, masked, :].astype(_F32),
        k_full=out.keys.astype(_F32),
        h_in=out.hidden[:-1].astype(_F32),
        h_out=out.attn_hidden.astype(_F32),
        manifest=manifest,
    )


def scores_from_trace(trace: AttentionTrace, segment: str = "all") -> SampleScores:
    D, H, n_p, n_m, dk = trace.dims
    f64 = np.float64
    return score_qk(trace.q_mask.astype(f64), trace.k_full.astype(f64), trace.h_in.astype(f64),
                    trace.h_out.astype(f64), n_p, segment)
