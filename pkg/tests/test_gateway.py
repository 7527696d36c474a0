from __future__ import annotations

import json
import threading
import time

import pytest

from annoteer.gateway import (
    BatchFailure,
    CapabilityError,
    CompletionRequest,
    MockBackend,
    MockScript,
    RateLimited,
    RetryPolicy,
    ScriptedAnswer,
    TransportError,
    complete_batch,
    complete_with_retry,
    load_mock_script,
    text_key,
)


def classify_request(text: str) -> CompletionRequest:
    return CompletionRequest(system_text="prompt", user_text=text, want_logprobs=True)


def meta_request(text: str) -> CompletionRequest:
    return CompletionRequest(system_text="meta", user_text=text, want_logprobs=False)


class TestMockBackend:
    def test_scripted_answer_echoed_exactly(self):
        script = MockScript(
            answers={
                text_key("note 1"): ScriptedAnswer(label="No Helmet", logprobs=(-0.1, -0.2))
            }
        )
        backend = MockBackend(script)
        response = backend.complete(classify_request("note 1"))
        assert response.text.endswith("ANSWER: No Helmet")
        assert response.token_logprobs == (-0.1, -0.2)

    def test_deterministic_repeat(self):
        backend = MockBackend(MockScript(classes=("A", "B")), seed=5)
        first = backend.complete(classify_request("unscripted note"))
        second = backend.complete(classify_request("unscripted note"))
        assert first == second

    def test_same_seed_same_fallbacks(self):
        r1 = MockBackend(MockScript(classes=("A", "B")), seed=9).complete(classify_request("x"))
        r2 = MockBackend(MockScript(classes=("A", "B")), seed=9).complete(classify_request("x"))
        assert r1 == r2
        r3 = MockBackend(MockScript(classes=("A", "B")), seed=10).complete(classify_request("x"))
        assert r3 != r1

    def test_capability_gate(self):
        backend = MockBackend(MockScript(), supports_logprobs=False)
        with pytest.raises(CapabilityError):
            backend.complete(classify_request("anything"))

    def test_meta_responses_consumed_in_order_and_memoized(self):
        backend = MockBackend(MockScript(meta_responses=["first prompt", "second prompt"]))
        a = backend.complete(meta_request("generate"))
        b = backend.complete(meta_request("generate"))  # same request replays
        c = backend.complete(meta_request("update now"))
        assert a.text == "first prompt"
        assert b.text == "first prompt"
        assert c.text == "second prompt"

    def test_meta_fallback_mentions_classes(self):
        backend = MockBackend(MockScript(classes=("Alpha", "Beta")))
        response = backend.complete(meta_request("generate"))
        assert "Alpha" in response.text and "Beta" in response.text
        assert "ANSWER:" in response.text


class TestRetry:
    def test_transport_error_then_success(self):
        key_text = "flaky note"
        script = MockScript(
            answers={text_key(key_text): ScriptedAnswer(label="A", logprobs=(-0.5,))}
        )
        backend = MockBackend(script, fail_plan={text_key(key_text): [TransportError("boom")]})
        sleeps: list[float] = []
        response = complete_with_retry(
            backend, classify_request(key_text), RetryPolicy(base_delay=0.01), sleeps.append
        )
        assert response.token_logprobs == (-0.5,)
        assert backend.calls == 2
        assert sleeps == [0.01]

    def test_backoff_doubles(self):
        backend = MockBackend(
            MockScript(classes=("A",)),
            fail_plan={text_key("x"): [TransportError("1"), TransportError("2"), TransportError("3")]},
        )
        sleeps: list[float] = []
        complete_with_retry(
            backend, classify_request("x"), RetryPolicy(max_attempts=5, base_delay=0.5), sleeps.append
        )
        assert sleeps == [0.5, 1.0, 2.0]

    def test_budget_exhaustion_raises(self):
        backend = MockBackend(
            MockScript(classes=("A",)),
            fail_plan={text_key("x"): [TransportError(str(i)) for i in range(10)]},
        )
        with pytest.raises(TransportError):
            complete_with_retry(
                backend, classify_request("x"), RetryPolicy(max_attempts=3, base_delay=0), lambda _ : None
            )

    def test_rate_limit_retry_after_honored(self):
        backend = MockBackend(
            MockScript(classes=("A",)),
            fail_plan={text_key("x"): [RateLimited("slow down", retry_after=7.5)]},
        )
        sleeps: list[float] = []
        complete_with_retry(
            backend, classify_request("x"), RetryPolicy(base_delay=0.5), sleeps.append
        )
        assert sleeps == [7.5]


class TestCompleteBatch:
    def test_order_preserved_with_parallelism(self):
        texts = [f"note {i}" for i in range(100)]
        script = MockScript(
            answers={
                text_key(t): ScriptedAnswer(label=f"L{i}", logprobs=(-0.1,))
                for i, t in enumerate(texts)
            }
        )
        backend = MockBackend(script, latency=0.002)
        responses = complete_batch(
            backend, [classify_request(t) for t in texts], max_in_flight=8
        )
        assert len(responses) == 100
        for i, response in enumerate(responses):
            assert response.text.endswith(f"ANSWER: L{i}")

    def test_concurrency_bound_respected(self):
        texts = [f"note {i}" for i in range(40)]
        backend = MockBackend(MockScript(classes=("A",)), latency=0.01)
        complete_batch(backend, [classify_request(t) for t in texts], max_in_flight=8)
        assert 1 < backend.peak_in_flight <= 8

    def test_serial_degenerate_case(self):
        texts = [f"note {i}" for i in range(10)]
        backend = MockBackend(MockScript(classes=("A",)), latency=0.001)
        complete_batch(backend, [classify_request(t) for t in texts], max_in_flight=1)
        assert backend.peak_in_flight == 1

    def test_injected_fault_retried_to_success(self):
        texts = [f"note {i}" for i in range(20)]
        script = MockScript(
            answers={
                text_key(t): ScriptedAnswer(label="A", logprobs=(-0.2,)) for t in texts
            }
        )
        backend = MockBackend(script, fail_plan={text_key("note 7"): [TransportError("blip")]})
        responses = complete_batch(
            backend,
            [classify_request(t) for t in texts],
            max_in_flight=4,
            retry=RetryPolicy(base_delay=0),
            sleep=lambda _: None,
        )
        assert all(not isinstance(r, BatchFailure) for r in responses)
        assert backend.calls == 21  # one retry for the injected fault

    def test_slot_failure_does_not_abort_batch(self):
        texts = ["good 1", "doomed", "good 2"]
        script = MockScript(
            answers={text_key(t): ScriptedAnswer(label="A", logprobs=(-0.2,)) for t in texts}
        )
        backend = MockBackend(
            script,
            fail_plan={text_key("doomed"): [TransportError(str(i)) for i in range(99)]},
        )
        responses = complete_batch(
            backend,
            [classify_request(t) for t in texts],
            max_in_flight=2,
            retry=RetryPolicy(max_attempts=3, base_delay=0),
            sleep=lambda _: None,
        )
        assert not isinstance(responses[0], BatchFailure)
        assert isinstance(responses[1], BatchFailure)
        assert responses[1].attempts == 3
        assert not isinstance(responses[2], BatchFailure)

    def test_non_retryable_error_fails_fast(self):
        backend = MockBackend(
            MockScript(classes=("A",)),
            fail_plan={text_key("x"): [CapabilityError("no logprobs")]},
        )
        responses = complete_batch(backend, [classify_request("x")], max_in_flight=1)
        assert isinstance(responses[0], BatchFailure)
        assert responses[0].attempts == 1


class TestScriptFile:
    def test_load_with_record_id_resolution(self, tmp_path):
        path = tmp_path / "script.json"
        path.write_text(
            json.dumps(
                {
                    "r1": {"label": "Helmet", "logprobs": [-0.1]},
                    text_key("raw text"): {"label": "No Helmet", "logprobs": [-0.2]},
                    "__meta__": ["meta one"],
                    "__classes__": ["Helmet", "No Helmet"],
                }
            ),
            encoding="utf-8",
        )
        script = load_mock_script(path, id_to_text={"r1": "the narrative"})
        assert text_key("the narrative") in script.answers
        assert text_key("raw text") in script.answers
        assert script.meta_responses == ["meta one"]
        assert script.classes == ("Helmet", "No Helmet")

    def test_rejects_non_object(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("[1,2,3]", encoding="utf-8")
        with pytest.raises(ValueError):
            load_mock_script(path)
