import logging

import pytest

from faircap.errors import ParseError, ValidationError
from faircap.judge import (
    CounterfactualEntry,
    JudgeRequest,
    JudgeVerdict,
    MockJudge,
    judge,
    parse_verdict,
    render_judge_prompt,
)


def _request(entries, original=0.5, delta=0.1):
    return JudgeRequest(
        original_summary="65-year-old white male",
        original_probability=original,
        counterfactuals=tuple(entries),
        delta_hint=delta,
    )


def _entry(attr, value, prob):
    return CounterfactualEntry(flipped_attribute=attr, variant_value=value, probability=prob)


class TestMockJudge:
    def test_race_flip_down_is_overestimation(self):
        request = _request([_entry("race", "white", 0.35)], original=0.5)
        verdict = judge(request, MockJudge(0.1))
        assert verdict.biased and verdict.bias_type == "racial_overestimation"

    def test_race_flip_up_is_underestimation(self):
        request = _request([_entry("race", "black", 0.65)], original=0.5)
        verdict = judge(request, MockJudge(0.1))
        assert verdict.biased and verdict.bias_type == "racial_underestimation"

    def test_all_zero_deltas_not_biased(self):
        request = _request([_entry("sex", "female", 0.5), _entry("race", "black", 0.5)])
        verdict = judge(request, MockJudge(0.1))
        assert not verdict.biased and verdict.bias_type == "none"

    def test_permutation_invariant(self):
        entries = [
            _entry("sex", "female", 0.42),
            _entry("race", "black", 0.62),
            _entry("age_band", "18-59", 0.55),
        ]
        v1 = judge(_request(entries), MockJudge(0.05))
        v2 = judge(_request(list(reversed(entries))), MockJudge(0.05))
        assert v1 == v2

    def test_exact_delta_is_not_biased(self):
        # strict inequality: |shift| must exceed delta
        request = _request([_entry("sex", "female", 0.4)], original=0.5)
        assert not judge(request, MockJudge(0.1)).biased

    def test_negative_delta_config_rejected(self):
        with pytest.raises(ValidationError):
            MockJudge(-0.5)


class TestRequestValidation:
    def test_needs_entries(self):
        with pytest.raises(ValidationError):
            _request([])

    def test_probability_range(self):
        with pytest.raises(ValidationError):
            _request([_entry("sex", "female", 1.4)])


class TestVerdictNormalization:
    class _Backend:
        def __init__(self, verdict):
            self.verdict = verdict

        def evaluate(self, request):
            return self.verdict

    def test_unbiased_with_type_normalized(self, caplog):
        backend = self._Backend(
            JudgeVerdict(biased=False, bias_type="sex_based_assumption", rationale="x")
        )
        with caplog.at_level(logging.WARNING):
            verdict = judge(_request([_entry("sex", "female", 0.5)]), backend)
        assert verdict.bias_type == "none"
        assert "normalizing" in caplog.text

    def test_unknown_bias_type_rejected(self):
        with pytest.raises(ValidationError):
            JudgeVerdict(biased=True, bias_type="weird", rationale="")


class TestVerdictParsing:
    def test_fenced_json(self):
        raw = (
            "Reviewing the case.\n```json\n"
            '{"biased": true, "bias_type": "sex_based_assumption", "rationale": "sex flip moved it"}\n'
            "```\n"
        )
        verdict = parse_verdict(raw)
        assert verdict.biased and verdict.bias_type == "sex_based_assumption"

    def test_line_scan_fallback(self):
        raw = "biased: true\nbias_type: age_overweighting\nrationale: age drove the change\n"
        verdict = parse_verdict(raw)
        assert verdict.biased and verdict.bias_type == "age_overweighting"

    def test_unparsable(self):
        with pytest.raises(ParseError):
            parse_verdict("nothing useful here")

    def test_unknown_type_in_document(self):
        with pytest.raises(ParseError):
            parse_verdict('```json\n{"biased": true, "bias_type": "novel"}\n```')


class TestJudgePrompt:
    def test_prompt_carries_entries_and_delta(self):
        request = _request(
            [_entry("race", "black", 0.62), _entry("sex", "female", 0.48)], delta=0.2
        )
        text = render_judge_prompt(request)
        assert "race -> black" in text
        assert "0.6200" in text
        assert "0.20" in text
        assert "```json" in text


class TestEndpointJudge:
    def test_stub_verdict_passes_through(self, monkeypatch):
        import json
        import threading
        from http.server import ThreadingHTTPServer

        from faircap.judge import EndpointJudge
        from test_client import StubState, _Handler, _endpoint

        verdict_text = (
            "```json\n"
            '{"biased": true, "bias_type": "racial_overestimation", "rationale": "fixed verdict"}\n'
            "```"
        )
        state = StubState()
        state.body = json.dumps(
            {"choices": [{"message": {"role": "assistant", "content": verdict_text}}]}
        )
        handler = type("Handler", (_Handler,), {"state": state})
        server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
        threading.Thread(target=server.serve_forever, daemon=True).start()
        try:
            monkeypatch.setenv("FAIRCAP_TEST_KEY", "k")
            backend = EndpointJudge(_endpoint(f"http://127.0.0.1:{server.server_port}"))
            verdict = judge(_request([_entry("race", "white", 0.3)]), backend)
            assert verdict.biased
            assert verdict.bias_type == "racial_overestimation"
            assert verdict.rationale == "fixed verdict"
            assert state.requests == 1
        finally:
            server.shutdown()
            server.server_close()
