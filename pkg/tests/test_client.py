import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from faircap.caselib import CaseRecord
from faircap.client import (
    EndpointConfig,
    MockSpec,
    complete,
    complete_many,
    extract_content,
    mock_predict,
    request_body,
)
from faircap.cohort import CLINICAL_FEATURES, BiasInjection
from faircap.errors import ConfigError, TransportError, ValidationError
from faircap.retrieval import RetrievalResult
from conftest import make_patient


class StubState:
    def __init__(self):
        self.fail_first = 0
        self.body = "canned response"
        self.delay = 0.0
        self.lock = threading.Lock()
        self.requests = 0
        self.in_flight = 0
        self.max_in_flight = 0
        self.captured = []


class _Handler(BaseHTTPRequestHandler):
    state: StubState = None

    def do_POST(self):
        state = self.state
        with state.lock:
            state.requests += 1
            state.in_flight += 1
            state.max_in_flight = max(state.max_in_flight, state.in_flight)
            fail = state.requests <= state.fail_first
        try:
            length = int(self.headers.get("Content-Length", 0))
            state.captured.append(self.rfile.read(length))
            if state.delay:
                time.sleep(state.delay)
            if fail:
                self.send_response(500)
                self.end_headers()
                self.wfile.write(b"boom")
            else:
                body = state.body.encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "text/plain")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)
        finally:
            with state.lock:
                state.in_flight -= 1

    def log_message(self, *args):
        pass


@pytest.fixture
def stub():
    state = StubState()
    handler = type("Handler", (_Handler,), {"state": state})
    server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    url = f"http://127.0.0.1:{server.server_port}"
    yield state, url
    server.shutdown()
    server.server_close()


def _endpoint(url, **overrides):
    fields = dict(
        base_url=url,
        model="test-model",
        api_key_env="FAIRCAP_TEST_KEY",
        timeout=5.0,
        max_retries=3,
        max_in_flight=4,
        backoff_base=0.01,
    )
    fields.update(overrides)
    return EndpointConfig(**fields)


class TestComplete:
    def test_body_returned_verbatim(self, stub, monkeypatch):
        state, url = stub
        monkeypatch.setenv("FAIRCAP_TEST_KEY", "secret")
        state.body = "any fixed canned body, not JSON"
        result = complete("hello", _endpoint(url))
        assert result.body == "any fixed canned body, not JSON"
        assert result.attempts == 1

    def test_retries_then_succeeds_with_attempt_count(self, stub, monkeypatch):
        state, url = stub
        monkeypatch.setenv("FAIRCAP_TEST_KEY", "secret")
        state.fail_first = 2
        result = complete("hello", _endpoint(url, max_retries=3))
        assert result.attempts == 3
        assert state.requests == 3

    def test_exhausted_retries_raise_transport_error(self, stub, monkeypatch):
        state, url = stub
        monkeypatch.setenv("FAIRCAP_TEST_KEY", "secret")
        state.fail_first = 10
        with pytest.raises(TransportError) as err:
            complete("hello", _endpoint(url, max_retries=2))
        assert err.value.attempts == 3
        assert len(err.value.attempt_log) == 3
        assert state.requests == 3

    def test_missing_key_fails_fast_without_network(self, stub, monkeypatch):
        state, url = stub
        monkeypatch.delenv("FAIRCAP_TEST_KEY", raising=False)
        with pytest.raises(ConfigError, match="FAIRCAP_TEST_KEY"):
            complete("hello", _endpoint(url))
        assert state.requests == 0

    def test_no_auth_header_when_env_name_empty(self, stub):
        state, url = stub
        result = complete("hello", _endpoint(url, api_key_env=""))
        assert result.attempts == 1

    def test_bounded_in_flight(self, stub, monkeypatch):
        state, url = stub
        monkeypatch.setenv("FAIRCAP_TEST_KEY", "secret")
        state.delay = 0.1
        results = complete_many(["p"] * 12, _endpoint(url, max_in_flight=3))
        assert len(results) == 12
        assert state.max_in_flight <= 3
        assert state.max_in_flight >= 2  # actually ran concurrently

    def test_request_body_byte_stable_and_sent(self, stub, monkeypatch):
        state, url = stub
        monkeypatch.setenv("FAIRCAP_TEST_KEY", "secret")
        endpoint = _endpoint(url, temperature=0.0)
        expected = request_body("fixed prompt", endpoint)
        assert expected == request_body("fixed prompt", endpoint)
        complete("fixed prompt", endpoint)
        assert state.captured[0] == expected
        doc = json.loads(expected)
        assert doc["messages"] == [{"content": "fixed prompt", "role": "user"}]
        assert doc["temperature"] == 0.0

    def test_prompt_length_cap(self, stub, monkeypatch):
        state, url = stub
        monkeypatch.setenv("FAIRCAP_TEST_KEY", "secret")
        with pytest.raises(ConfigError, match="max_prompt_chars"):
            complete("x" * 101, _endpoint(url, max_prompt_chars=100))
        assert state.requests == 0

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            EndpointConfig(base_url="x", model="m", timeout=0.0)
        with pytest.raises(ValidationError):
            EndpointConfig(base_url="x", model="m", max_in_flight=0)


class TestExtractContent:
    def test_chat_completion_json(self):
        body = json.dumps(
            {"choices": [{"message": {"role": "assistant", "content": "the text"}}]}
        )
        assert extract_content(body) == "the text"

    def test_completion_text_field(self):
        body = json.dumps({"choices": [{"text": "raw completion"}]})
        assert extract_content(body) == "raw completion"

    def test_plain_text_passthrough(self):
        assert extract_content("not json at all") == "not json at all"

    def test_json_without_choices_passthrough(self):
        body = json.dumps({"result": "x"})
        assert extract_content(body) == body


def _analog(bias_type="sex_based_assumption"):
    case = CaseRecord(
        id="case-1",
        sex="female",
        age_band="60+",
        race="white",
        clinical={f: 1.0 for f in CLINICAL_FEATURES},
        true_outcome=True,
        predicted_probability=0.2,
        error_type="false_negative",
        bias_type=bias_type,
        judge_rationale="",
        normalized_vector=tuple([0.0] * 15),
    )
    return RetrievalResult(case=case, similarity=0.9, demo_matches=2, crossed_features=())


class TestMockPredict:
    def test_zero_offsets_identical_across_kinds(self):
        patient = make_patient()
        spec = MockSpec()
        outputs = [mock_predict(patient, kind, None, spec) for kind in
                   ("base", "fairness", "system2")]
        outputs.append(mock_predict(patient, "cap", _analog(), spec))
        probs = {o.mortality_probability for o in outputs}
        factors = {o.key_factors for o in outputs}
        assert len(probs) == 1
        assert len(factors) == 1

    def test_male_offset_inflates_male_twin(self):
        spec = MockSpec(demographic_offsets=BiasInjection(sex={"male": 0.5}))
        male = make_patient(id="twin", sex="male")
        female = make_patient(id="twin", sex="female")
        pm = mock_predict(male, "base", None, spec).mortality_probability
        pf = mock_predict(female, "base", None, spec).mortality_probability
        assert pm > pf

    def test_cap_correction_equalizes_twins(self):
        spec = MockSpec(demographic_offsets=BiasInjection(sex={"male": 0.5}), cap_correction=True)
        male = make_patient(id="twin", sex="male")
        female = make_patient(id="twin", sex="female")
        pm = mock_predict(male, "cap", _analog(), spec).mortality_probability
        pf = mock_predict(female, "cap", _analog(), spec).mortality_probability
        assert pm == pf

    def test_correction_requires_flag_analog_and_bias_label(self):
        offsets = BiasInjection(sex={"male": 0.5})
        male = make_patient(id="twin", sex="male")
        female = make_patient(id="twin", sex="female")

        def gap(spec, analog, kind="cap"):
            return (
                mock_predict(male, kind, analog, spec).mortality_probability
                - mock_predict(female, kind, analog, spec).mortality_probability
            )

        assert gap(MockSpec(demographic_offsets=offsets, cap_correction=False), _analog()) > 0
        assert gap(MockSpec(demographic_offsets=offsets, cap_correction=True), None) > 0
        assert gap(MockSpec(demographic_offsets=offsets, cap_correction=True), _analog("none")) > 0
        assert gap(MockSpec(demographic_offsets=offsets, cap_correction=True), _analog()) == 0

    def test_key_factors_are_top_three_weighted_z(self):
        spec = MockSpec(severity_weights={"sofa_24h": 1.0, "lactate_max": 1.0, "gcs": 0.001})
        patient = make_patient(sofa_24h=20, lactate_max=1.9)  # sofa z huge, lactate z 0
        record = mock_predict(patient, "base", None, spec)
        assert record.key_factors[0] == "sofa_24h"
        assert len(record.key_factors) == 3
        assert len(set(record.key_factors)) == 3

    def test_replay_stable(self):
        patient = make_patient()
        spec = MockSpec(noise_seed=5)
        a = mock_predict(patient, "base", None, spec)
        b = mock_predict(patient, "base", None, spec)
        assert a == b

    def test_noise_varies_by_patient_id(self):
        spec = MockSpec(noise_seed=5, noise_scale=0.3)
        p1 = make_patient(id="alpha")
        p2 = make_patient(id="beta")
        assert (
            mock_predict(p1, "base", None, spec).mortality_probability
            != mock_predict(p2, "base", None, spec).mortality_probability
        )

    def test_unknown_strategy_rejected(self):
        with pytest.raises(ValidationError):
            mock_predict(make_patient(), "few-shot", None, MockSpec())

    def test_unknown_weight_feature_rejected(self):
        with pytest.raises(ValidationError):
            MockSpec(severity_weights={"bmi": 1.0})
