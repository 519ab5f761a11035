import struct

import numpy as np
import pytest

from maskkv.errors import ComparisonError, ConfigurationError, ParseError
from maskkv.harness import (NEEDLE_MODEL, CompareConfig, agreement_rate, needle_hit, needle_task,
                            parse_report, pretty, run_compare)
from maskkv.harness.report import RunResult, format_sections
from maskkv.harness.trace import (HEADER_BYTES, MAGIC, AttentionTrace, decode_trace, encode_trace,
                                  load_trace, save_trace, scores_from_trace, trace_from_model)
from maskkv.model import DenoisingState, ModelConfig, forward_step, init_model
from maskkv.scoring import score_qk, score_step


class TestTasks:
    def test_depth_zero(self):
        t = needle_task(1, 20, 0.0)
        assert t.position == 0 and t.prompt[0] == t.answer

    def test_depth_one(self):
        t = needle_task(1, 20, 1.0)
        assert t.position == 19 and t.prompt[19] == t.answer

    def test_deterministic(self):
        assert np.array_equal(needle_task(5, 64, 0.3).prompt, needle_task(5, 64, 0.3).prompt)

    def test_single_needle_and_no_mask(self):
        t = needle_task(9, 64, 0.5)
        assert (t.prompt == t.answer).sum() == 1
        assert NEEDLE_MODEL.mask_id not in t.prompt.tolist()
        assert t.answer == NEEDLE_MODEL.anchor_id

    @pytest.mark.parametrize("depth", [-0.1, 1.5])
    def test_bad_depth(self, depth):
        with pytest.raises(ConfigurationError):
            needle_task(0, 10, depth)

    def test_agreement(self):
        a = [1, 2, 3, 4, 5, 6, 7, 8]
        assert agreement_rate(a, a) == 1.0
        assert agreement_rate(a, [9] * 8) == 0.0
        assert agreement_rate(a, a[:7] + [0]) == 0.875
        with pytest.raises(ComparisonError):
            agreement_rate(a, a[:7])

    def test_needle_hit(self):
        assert needle_hit([1, 62, 3], 62) and not needle_hit([1, 2], 62)


@pytest.fixture(scope="module")
def trace():
    params = init_model(ModelConfig(num_layers=2, num_heads=2, model_dim=8, vocab_size=16, seed=7))
    return trace_from_model(params, [3, 14, 0, 9, 5], 3, source="unit", created="2026-01-01T00:00:00+00:00")


class TestTrace:
    def test_dims(self, trace):
        assert trace.dims == (2, 2, 5, 3, 4)
        assert trace.manifest["source"] == "unit"

    def test_round_trip_bit_exact(self, trace, tmp_path):
        save_trace(trace, tmp_path / "t.bin")
        back = load_trace(tmp_path / "t.bin")
        for name in ("q_mask", "k_full", "h_in", "h_out"):
            assert getattr(back, name).tobytes() == getattr(trace, name).tobytes()
        assert back.manifest == trace.manifest
        assert encode_trace(back) == encode_trace(trace)

    def test_header_layout(self, trace):
        data = encode_trace(trace)
        assert data[:8] == MAGIC and struct.unpack("<5I", data[8:28]) == (2, 2, 5, 3, 4)

    def test_bad_magic_at_offset_zero(self, trace):
        data = bytearray(encode_trace(trace))
        data[3] ^= 0xFF
        with pytest.raises(ParseError) as exc:
            decode_trace(bytes(data))
        assert exc.value.offset == 0

    def test_truncated_by_one_byte(self, trace):
        data = encode_trace(trace)
        with pytest.raises(ParseError, match=f"expected {len(data)} bytes, got {len(data) - 1}"):
            decode_trace(data[:-1])

    def test_truncated_payload(self, trace):
        data = encode_trace(trace)
        with pytest.raises(ParseError, match="expected at least") as exc:
            decode_trace(data[:100])
        assert exc.value.offset == 100

    def test_truncated_header(self):
        with pytest.raises(ParseError):
            decode_trace(MAGIC + b"\x01\x00")

    def test_zero_dimension(self, trace):
        data = bytearray(encode_trace(trace))
        data[8 + 4 * 3: 8 + 4 * 4] = b"\x00\x00\x00\x00"
        with pytest.raises(ParseError) as exc:
            decode_trace(bytes(data))
        assert exc.value.offset == 20

    def test_dimension_mismatch_with_payload(self, trace):
        data = bytearray(encode_trace(trace))
        data[8:12] = struct.pack("<I", 3)  # claims three layers
        with pytest.raises(ParseError):
            decode_trace(bytes(data))

    def test_non_finite_value_located(self, trace):
        data = bytearray(encode_trace(trace))
        off = HEADER_BYTES + 4 * 5
        data[off:off + 4] = struct.pack("<f", float("nan"))
        with pytest.raises(ParseError) as exc:
            decode_trace(bytes(data))
        assert exc.value.offset == off

    def test_trailing_bytes(self, trace):
        data = encode_trace(trace)
        with pytest.raises(ParseError) as exc:
            decode_trace(data + b"\x00")
        assert exc.value.offset == len(data)

    def test_bad_manifest(self, trace):
        data = encode_trace(AttentionTrace(trace.q_mask, trace.k_full, trace.h_in, trace.h_out, {}))
        broken = data[:-2] + b"{"[:1] + b"x"
        with pytest.raises(ParseError, match="manifest"):
            decode_trace(broken)

    def test_validate_rejects_inconsistent_arrays(self, trace):
        bad = AttentionTrace(trace.q_mask, trace.k_full[:, :, :-1], trace.h_in, trace.h_out)
        with pytest.raises(ConfigurationError):
            encode_trace(bad)

    def test_scores_agree_with_model_route(self):
        params = init_model(NEEDLE_MODEL)
        task = needle_task(3, 64, 0.5)
        tr = decode_trace(encode_trace(trace_from_model(params, task.prompt, 8, created="x")))
        from_trace = scores_from_trace(tr)
        out = forward_step(params, DenoisingState.initial(task.prompt, 8, 1, params.config.mask_id))
        m = out.masked_positions

        def f32(a):
            return a.astype(np.float32).astype(np.float64)

        same_inputs = score_qk(f32(out.queries[:, :, m]), f32(out.keys), f32(out.hidden[:-1]),
                               f32(out.attn_hidden), 64)
        direct = score_step(out, 64)
        for field in ("token_importance", "layer_importance", "head_preference"):
            a = getattr(from_trace, field)
            np.testing.assert_allclose(a, getattr(same_inputs, field), rtol=0, atol=1e-9)
            # float32 storage bounds the gap to the float64 model
            np.testing.assert_allclose(a, getattr(direct, field), rtol=0, atol=1e-6)


class TestReport:
    def test_format_and_parse(self):
        secs = [("config", [("a", "1"), ("b", "x y")]), ("reference", [("agreement", "1")])]
        text = format_sections(secs)
        assert text == "[config]\na\t1\nb\tx y\n\n[reference]\nagreement\t1\n"
        assert parse_report(text) == secs

    def test_parse_errors_have_line_numbers(self):
        with pytest.raises(ParseError, match="line 1"):
            parse_report("a\t1\n")
        with pytest.raises(ParseError, match="line 3"):
            parse_report("[x]\na\t1\nnot a row\n")
        with pytest.raises(ParseError):
            parse_report("\n\n")

    def test_rejects_tabs_in_values(self):
        with pytest.raises(ValueError):
            format_sections([("x", [("k", "a\tb")])])

    def test_result_rows(self):
        r = RunResult("maskkv", 4, tokens={1: [5, 6]}, agreement=0.5)
        rows = dict(r.rows())
        assert rows["agreement"] == "0.500000" and rows["tokens.1"] == "5 6" and rows["budget"] == "4"
        assert r.name == "policy maskkv budget 4"

    def test_pretty_has_summary(self):
        text = format_sections([("policy uniform budget 2",
                                 [("policy", "uniform"), ("budget", "2"), ("agreement", "0.9"),
                                  ("tokens.0", "1 2")])])
        out = pretty(parse_report(text))
        assert "summary" in out and "tokens.0" not in out
        assert "tokens.0" in pretty(parse_report(text), show_tokens=True)


SMALL = dict(model=ModelConfig(num_layers=2, num_heads=2, model_dim=8, vocab_size=16, seed=3,
                               anchor_logit=4.0, anchor_value=0.3, position_scale=0.5),
             seeds=(0, 1, 2), prompt_len=10, gen_len=4, calibration_samples=2)


class TestCompare:
    def test_full_budget_agrees(self):
        rep = run_compare(CompareConfig(budgets=(10, 1000), **SMALL))
        assert len(rep.results) == 12
        # uniform allocators keep everything at budget n_p
        for policy in ("uniform", "snap"):
            assert rep.result(policy, 10).agreement == 1.0
            assert rep.result(policy, 10).retained_mass == 1.0
        # uneven allocators clamp oversized heads, so keep-all needs a larger budget
        for r in rep.results:
            if r.budget == 1000:
                assert r.agreement == 1.0 and r.retained_mass == 1.0

    def test_empty_policy_list(self):
        rep = run_compare(CompareConfig(policies=(), **SMALL))
        assert rep.results == []
        assert [name for name, _ in rep.sections()] == ["config", "memory", "reference"]

    def test_deterministic_text(self):
        cfg = CompareConfig(policies=("maskkv", "snap"), budgets=(1, 3), **SMALL)
        assert run_compare(cfg).to_text() == run_compare(cfg).to_text()

    def test_online_mode_and_memory_fields(self):
        rep = run_compare(CompareConfig(policies=("maskkv",), budgets=(2,), online=True, **SMALL))
        r = rep.result("maskkv", 2)
        # D=2, H=2, d_k=4, budget 2 per head, bf16
        assert r.prompt_kv_bytes == 2 * 2 * 2 * (2 * 2 * 4 * 2) / 2
        assert 0.0 <= r.retained_mass <= 1.0 and 0.0 <= r.agreement <= 1.0
        assert dict(rep.memory)["kv_bytes_full_per_layer"] == str(2 * 14 * 2 * 4 * 2)
        assert ("profile", "online") in rep.config

    @pytest.mark.parametrize("kw", [dict(seeds=()), dict(seeds=(1, 1)), dict(policies=("h2o",)),
                                    dict(budgets=(-1,)), dict(needle_depth=2.0),
                                    dict(mask_segment="tail"), dict(seeds=(1_000_000,))])
    def test_invalid(self, kw):
        cfg = CompareConfig(**{**SMALL, **kw})
        with pytest.raises(ConfigurationError):
            run_compare(cfg)
