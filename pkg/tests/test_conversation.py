from __future__ import annotations

import json

import pytest

from propex.conversation import (
    BackendParams,
    BackendTimeout,
    BackendUnavailable,
    Conversation,
    HttpChatBackend,
    MalformedBackendReply,
    RateLimiter,
    RecordingBackend,
    RetriesExhausted,
    RetryPolicy,
    ScriptedBackend,
    TransientBackendError,
    context_key,
    fork_stateless,
    load_script,
    save_script,
    start_conversation,
)

NO_SLEEP = RetryPolicy(attempts=3, base_delay=0.0, sleep=lambda _: None)


def scripted(*pairs: tuple[list[str], str]) -> ScriptedBackend:
    return ScriptedBackend({context_key(prompts): reply for prompts, reply in pairs})


class TestBackendParams:
    def test_defaults_match_deterministic_decoding(self):
        p = BackendParams()
        assert p.temperature == 0.0
        assert p.top_p == 1.0
        assert p.frequency_penalty == 0.0
        assert p.presence_penalty == 0.0
        assert p.system_prompt is None


class TestScriptedBackend:
    def test_scripted_prompt_answers(self):
        backend = scripted((["Is it?"], "Yes"))
        conv = start_conversation(backend, retry=NO_SLEEP)
        assert conv.send("Is it?") == "Yes"

    def test_second_send_carries_full_context(self):
        backend = scripted((["p1"], "r1"), (["p1", "p2"], "r2"))
        conv = start_conversation(backend, retry=NO_SLEEP)
        conv.send("p1")
        assert conv.send("p2") == "r2"
        # delivered message list: p1, r1, p2
        assert len(backend.calls[1]) == 3
        roles = [m["role"] for m in backend.calls[1]]
        assert roles == ["user", "assistant", "user"]

    def test_unscripted_prompt_is_malformed(self):
        backend = scripted((["known"], "Yes"))
        conv = start_conversation(backend, retry=NO_SLEEP)
        with pytest.raises(MalformedBackendReply):
            conv.send("unknown")

    def test_context_hash_is_whitespace_insensitive_within_prompts(self):
        assert context_key(["a  b", "c"]) == context_key(["a b", "c"])
        assert context_key(["a b", "c"]) != context_key(["a", "b c"])

    def test_empty_script_is_unavailable(self):
        with pytest.raises(BackendUnavailable):
            start_conversation(ScriptedBackend({}))

    def test_missing_script_file(self, tmp_path):
        with pytest.raises(BackendUnavailable):
            ScriptedBackend.from_file(tmp_path / "nope.jsonl")


class TestConversation:
    def test_transcript_alternates_and_grows_by_two(self):
        backend = scripted((["a"], "ra"), (["a", "b"], "rb"))
        conv = start_conversation(backend, retry=NO_SLEEP)
        conv.send("a")
        conv.send("b")
        assert [t.role for t in conv.transcript] == [
            "prompt", "response", "prompt", "response",
        ]
        assert [t.text for t in conv.transcript] == ["a", "ra", "b", "rb"]

    def test_empty_prompt_rejected(self):
        conv = start_conversation(scripted((["x"], "y")), retry=NO_SLEEP)
        with pytest.raises(ValueError):
            conv.send("")

    def test_replay_determinism(self):
        pairs = ((["q1"], "a1"), (["q1", "q2"], "a2"))
        t1 = start_conversation(scripted(*pairs), retry=NO_SLEEP)
        t2 = start_conversation(scripted(*pairs), retry=NO_SLEEP)
        for conv in (t1, t2):
            conv.send("q1")
            conv.send("q2")
        assert [(t.role, t.text) for t in t1.transcript] == [
            (t.role, t.text) for t in t2.transcript
        ]

    def test_failed_send_leaves_transcript_unchanged(self):
        backend = scripted((["ok"], "fine"))
        conv = start_conversation(backend, retry=NO_SLEEP)
        with pytest.raises(MalformedBackendReply):
            conv.send("bad")
        assert conv.transcript == []
        assert conv.send("ok") == "fine"

    def test_fork_stateless_is_empty_and_isolated(self):
        backend = scripted((["a"], "ra"), (["b"], "rb"))
        conv = start_conversation(backend, retry=NO_SLEEP)
        conv.send("a")
        fork = fork_stateless(conv)
        assert fork.transcript == []
        fork.send("b")
        # the fork delivered exactly one prompt, no history
        assert len(backend.calls[-1]) == 1
        # and the original transcript was not mutated
        assert [t.text for t in conv.transcript] == ["a", "ra"]

    def test_params_frozen_for_conversation(self):
        conv = start_conversation(scripted((["x"], "y")), retry=NO_SLEEP)
        with pytest.raises(Exception):
            conv.params.temperature = 1.0  # type: ignore[misc]


class FlakyBackend(ScriptedBackend):
    def __init__(self, script, failures: int, exc=TransientBackendError):
        super().__init__(script)
        self.failures = failures
        self.exc = exc
        self.attempts = 0

    def complete(self, messages, params):
        self.attempts += 1
        if self.attempts <= self.failures:
            raise self.exc("flake")
        return super().complete(messages, params)


class TestRetries:
    def test_transient_failures_are_retried(self):
        backend = FlakyBackend({context_key(["p"]): "r"}, failures=2)
        conv = start_conversation(backend, retry=NO_SLEEP)
        assert conv.send("p") == "r"
        assert backend.attempts == 3

    def test_retries_exhausted(self):
        sleeps: list[float] = []
        retry = RetryPolicy(attempts=3, base_delay=2.0, sleep=sleeps.append)
        backend = FlakyBackend({context_key(["p"]): "r"}, failures=99)
        conv = start_conversation(backend, retry=retry)
        with pytest.raises(RetriesExhausted):
            conv.send("p")
        assert backend.attempts == 3
        assert sleeps == [2.0, 4.0]  # exponential from 2 s

    def test_timeout_counts_as_transient(self):
        backend = FlakyBackend({context_key(["p"]): "r"}, failures=1, exc=BackendTimeout)
        conv = start_conversation(backend, retry=NO_SLEEP)
        assert conv.send("p") == "r"


class TestRateLimiter:
    def test_limiter_sleeps_when_bucket_empty(self):
        now = [0.0]
        naps: list[float] = []

        def clock():
            return now[0]

        def sleep(dt):
            naps.append(dt)
            now[0] += dt

        limiter = RateLimiter(60, clock=clock, sleep=sleep)  # 1 req/s
        for _ in range(61):
            limiter.acquire()
        assert len(naps) >= 1
        assert all(dt > 0 for dt in naps)

    def test_disabled_limiter_never_sleeps(self):
        limiter = RateLimiter(None, sleep=lambda _: pytest.fail("slept"))
        for _ in range(100):
            limiter.acquire()


class TestRecordingAndScripts:
    def test_record_then_replay(self, tmp_path):
        live = scripted((["q"], "a"), (["q", "q2"], "a2"))
        recorder = RecordingBackend(live)
        conv = start_conversation(recorder, retry=NO_SLEEP)
        conv.send("q")
        conv.send("q2")
        path = tmp_path / "script.jsonl"
        assert recorder.write_script(path) == 2

        replay = ScriptedBackend.from_file(path)
        conv2 = start_conversation(replay, retry=NO_SLEEP)
        assert conv2.send("q") == "a"
        assert conv2.send("q2") == "a2"

    def test_script_roundtrip(self, tmp_path):
        script = {context_key(["x"]): "y"}
        path = tmp_path / "s.jsonl"
        save_script(script, path)
        assert load_script(path) == script


class StubSession:
    """requests.Session stand-in capturing the payload."""

    def __init__(self, status=200, body=None, exc=None):
        self.status = status
        self.body = body or {"choices": [{"message": {"content": "ok"}}]}
        self.exc = exc
        self.last = None

    def post(self, url, json=None, headers=None, timeout=None):
        if self.exc is not None:
            raise self.exc
        self.last = {"url": url, "json": json, "headers": headers}

        class R:
            status_code = self.status
            text = "body"

            def json(inner):
                return self.body

        return R()


class TestHttpBackend:
    def test_requires_credential(self, monkeypatch):
        monkeypatch.delenv("CHAT_API_KEY", raising=False)
        backend = HttpChatBackend("https://x/chat", session=StubSession())
        with pytest.raises(BackendUnavailable):
            start_conversation(backend)

    def test_payload_carries_params_and_messages(self, monkeypatch):
        monkeypatch.setenv("CHAT_API_KEY", "k")
        session = StubSession()
        backend = HttpChatBackend("https://x/chat", session=session)
        conv = start_conversation(
            backend,
            params=BackendParams(model_name="gpt-4-0314"),
            retry=NO_SLEEP,
        )
        assert conv.send("hello") == "ok"
        payload = session.last["json"]
        assert payload["model"] == "gpt-4-0314"
        assert payload["temperature"] == 0.0
        assert payload["top_p"] == 1.0
        assert payload["frequency_penalty"] == 0.0
        assert payload["presence_penalty"] == 0.0
        # no system prompt by default
        assert [m["role"] for m in payload["messages"]] == ["user"]
        assert session.last["headers"]["Authorization"] == "Bearer k"

    def test_system_prompt_included_when_set(self, monkeypatch):
        monkeypatch.setenv("CHAT_API_KEY", "k")
        session = StubSession()
        backend = HttpChatBackend("https://x/chat", session=session)
        conv = start_conversation(
            backend, params=BackendParams(system_prompt="sys"), retry=NO_SLEEP
        )
        conv.send("hello")
        assert session.last["json"]["messages"][0] == {
            "role": "system",
            "content": "sys",
        }

    def test_throttling_is_transient(self, monkeypatch):
        monkeypatch.setenv("CHAT_API_KEY", "k")
        backend = HttpChatBackend("https://x/chat", session=StubSession(status=429))
        conv = start_conversation(backend, retry=NO_SLEEP)
        with pytest.raises(RetriesExhausted):
            conv.send("p")

    def test_bad_reply_shape(self, monkeypatch):
        monkeypatch.setenv("CHAT_API_KEY", "k")
        backend = HttpChatBackend(
            "https://x/chat", session=StubSession(body={"unexpected": True})
        )
        conv = start_conversation(backend, retry=NO_SLEEP)
        with pytest.raises(MalformedBackendReply):
            conv.send("p")
