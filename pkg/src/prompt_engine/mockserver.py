"""Deterministic mock of an OpenAI-compatible inference backend.

Shipped as a real subcommand (prompt-engine mock) so deployments can be
validated offline, and used by the test suite for every wire-level
assertion. Behavior is fully scripted: ordered rules map request
predicates to canned responses, statuses, and latencies. Chat scripts
must end with a catch-all rule; unmatched requests get a 500 and a log
entry.

Script JSON:

    {
      "seed": 0,
      "embedding_dim": 8,
      "chat": [
        {"name": "r1", "match": {"contains": "..."},
         "respond": {"type": "literal_letter", "letter": "A"},
         "status_sequence": [429, 429, 200], "latency_ms": 5,
         "latency_jitter_ms": 20}
      ],
      "embeddings": [...], "completions": [...], "rerank": [...]
    }

Chat responder types: literal {text}, literal_letter {letter},
gold_position {answers: {stem: gold_text}, offset}, echo_stated_answer
{style: plain|thinking}, hash_letter, echo_marker. Optional keys on any
chat responder: usage {prompt_tokens, completion_tokens}, omit_usage,
finish_reason. Embeddings responder types: embed_hash {dim}, embed_fixed
{vectors}, embed_dims {dims}. Completions: loglik {options: [{suffix,
logprob}], default_logprob}, no_logprobs. Rerank: rerank_scores {scores:
[{contains, score}], default}.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Mapping, Sequence

logger = logging.getLogger(__name__)

_OPTION_LINE = re.compile(r"^\s*([A-J])\)\s*(.*?)\s*$", re.MULTILINE)
_STATED_ANSWER = re.compile(r"correct answer is \(([A-J])\)", re.IGNORECASE)
_MARKER = re.compile(r"REQ-(\d+)")


class MockScriptError(ValueError):
    """Invalid or incomplete mock script."""


@dataclass
class MockRule:
    name: str
    match: Mapping[str, Any] = field(default_factory=lambda: {"always": True})
    respond: Mapping[str, Any] = field(default_factory=lambda: {"type": "literal", "text": ""})
    status_sequence: tuple[int, ...] = (200,)
    latency_ms: float = 0.0
    latency_jitter_ms: float = 0.0

    def matches(self, haystack: str) -> bool:
        if self.match.get("always"):
            return True
        needle = self.match.get("contains")
        if needle is None:
            return False
        needles = [needle] if isinstance(needle, str) else list(needle)
        return all(n in haystack for n in needles)

    def is_catch_all(self) -> bool:
        return bool(self.match.get("always"))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MockRule":
        known = {"name", "match", "respond", "status_sequence", "latency_ms", "latency_jitter_ms"}
        unknown = set(d) - known
        if unknown:
            raise MockScriptError(f"unknown rule keys: {sorted(unknown)}")
        return cls(
            name=d.get("name", "rule"),
            match=d.get("match", {"always": True}),
            respond=d.get("respond", {"type": "literal", "text": ""}),
            status_sequence=tuple(d.get("status_sequence", (200,))),
            latency_ms=float(d.get("latency_ms", 0.0)),
            latency_jitter_ms=float(d.get("latency_jitter_ms", 0.0)),
        )


@dataclass
class MockScript:
    chat: list[MockRule] = field(default_factory=list)
    embeddings: list[MockRule] = field(default_factory=list)
    completions: list[MockRule] = field(default_factory=list)
    rerank: list[MockRule] = field(default_factory=list)
    embedding_dim: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.chat and not self.chat[-1].is_catch_all():
            raise MockScriptError("chat rules must end with a catch-all ({'always': true})")
        for rules in (self.chat, self.embeddings, self.completions, self.rerank):
            for i, rule in enumerate(rules[:-1]):
                if rule.is_catch_all():
                    raise MockScriptError(
                        f"rule {rule.name!r} is a catch-all but is not last"
                    )

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MockScript":
        known = {"chat", "embeddings", "completions", "rerank", "embedding_dim", "seed"}
        unknown = set(d) - known
        if unknown:
            raise MockScriptError(f"unknown script keys: {sorted(unknown)}")
        return cls(
            chat=[MockRule.from_dict(r) for r in d.get("chat", [])],
            embeddings=[MockRule.from_dict(r) for r in d.get("embeddings", [])],
            completions=[MockRule.from_dict(r) for r in d.get("completions", [])],
            rerank=[MockRule.from_dict(r) for r in d.get("rerank", [])],
            embedding_dim=int(d.get("embedding_dim", 8)),
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "MockScript":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise MockScriptError(f"{path}: invalid JSON: {e}") from e


def _whitespace_tokens(text: str) -> int:
    return len(text.split())


def _hash_unit_vector(key: str, dim: int) -> list[float]:
    seed = int.from_bytes(hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest(), "big")
    rng = random.Random(seed)
    v = [rng.gauss(0.0, 1.0) for _ in range(dim)]
    norm = sum(x * x for x in v) ** 0.5 or 1.0
    return [x / norm for x in v]


def _displayed_options(content: str) -> list[tuple[str, str]]:
    return [(m.group(1), m.group(2)) for m in _OPTION_LINE.finditer(content)]


class _ServerState:
    """Thread-safe counters and per-rule sequence positions."""

    def __init__(self, script: MockScript):
        self.script = script
        self.lock = threading.Lock()
        self.rng = random.Random(script.seed)
        self.reset()

    def reset(self) -> None:
        with getattr(self, "lock", threading.Lock()):
            self.requests_total = 0
            self.unmatched = 0
            self.in_flight = 0
            self.in_flight_high_water = 0
            self.prompt_tokens_total = 0
            self.completion_tokens_total = 0
            self.texts_embedded = 0
            self.by_path: dict[str, int] = {}
            self.rule_hits: dict[str, int] = {}
            self.rule_sequence_pos: dict[int, int] = {}
            self.log: list[dict[str, Any]] = []

    def enter(self, path: str) -> None:
        with self.lock:
            self.requests_total += 1
            self.by_path[path] = self.by_path.get(path, 0) + 1
            self.in_flight += 1
            self.in_flight_high_water = max(self.in_flight_high_water, self.in_flight)

    def leave(self) -> None:
        with self.lock:
            self.in_flight -= 1

    def next_status(self, rule: MockRule) -> int:
        with self.lock:
            pos = self.rule_sequence_pos.get(id(rule), 0)
            self.rule_sequence_pos[id(rule)] = pos + 1
            seq = rule.status_sequence
            return seq[min(pos, len(seq) - 1)]

    def latency(self, rule: MockRule) -> float:
        with self.lock:
            jitter = self.rng.uniform(0, rule.latency_jitter_ms) if rule.latency_jitter_ms else 0.0
        return (rule.latency_ms + jitter) / 1000.0

    def tally(self, prompt_tokens: int, completion_tokens: int) -> None:
        with self.lock:
            self.prompt_tokens_total += prompt_tokens
            self.completion_tokens_total += completion_tokens

    def hit(self, rule_name: str) -> None:
        with self.lock:
            self.rule_hits[rule_name] = self.rule_hits.get(rule_name, 0) + 1

    def record(self, entry: dict[str, Any]) -> None:
        with self.lock:
            self.log.append(entry)

    def stats(self) -> dict[str, Any]:
        with self.lock:
            return {
                "requests_total": self.requests_total,
                "unmatched": self.unmatched,
                "in_flight_high_water": self.in_flight_high_water,
                "prompt_tokens_total": self.prompt_tokens_total,
                "completion_tokens_total": self.completion_tokens_total,
                "texts_embedded": self.texts_embedded,
                "by_path": dict(self.by_path),
                "rule_hits": dict(self.rule_hits),
            }


def _chat_text(rule: MockRule, content: str, target: str) -> str | None:
    """Render the scripted chat completion text, None when unrenderable.

    ``content`` is the whole conversation (used for marker echo);
    ``target`` is the last user message, which is where a real model
    would find the question it is being asked to answer.
    """
    r = rule.respond
    kind = r.get("type", "literal")
    if kind == "literal":
        return r.get("text", "")
    if kind == "literal_letter":
        return f"Mock reasoning.\nThe answer is ({r.get('letter', 'A')})."
    if kind == "echo_marker":
        m = _MARKER.search(content)
        return f"response-for-REQ-{m.group(1)}" if m else "response-for-unknown"
    if kind == "hash_letter":
        options = _displayed_options(target)
        labels = [lab for lab, _ in options] or ["A", "B", "C", "D"]
        digest = int.from_bytes(
            hashlib.blake2b(target.encode("utf-8"), digest_size=8).digest(), "big"
        )
        return f"Mock reasoning.\nThe answer is ({labels[digest % len(labels)]})."
    if kind == "echo_stated_answer":
        m = _STATED_ANSWER.search(target)
        if not m:
            return None
        letter = m.group(1)
        if r.get("style") == "thinking":
            return (
                "<think>\nMock think trace weighing each option.\n</think>\n"
                f"The answer is ({letter})."
            )
        return f"Mock option-by-option reasoning.\nThe answer is ({letter})."
    if kind == "gold_position":
        answers: Mapping[str, str] = r.get("answers", {})
        options = _displayed_options(target)
        if not options:
            return None
        gold_text = None
        for stem, text in answers.items():
            if stem in target:
                gold_text = text
                break
        if gold_text is None:
            return None
        pos = None
        for i, (_, text) in enumerate(options):
            if text.strip() == gold_text.strip():
                pos = i
                break
        if pos is None:
            return None
        pos = (pos + int(r.get("offset", 0))) % len(options)
        return f"Mock reasoning.\nThe answer is ({options[pos][0]})."
    return None


class _Handler(BaseHTTPRequestHandler):
    # keep the stdlib request log quiet; assertions read /debug/stats
    def log_message(self, *args: Any) -> None:
        pass

    @property
    def state(self) -> _ServerState:
        return self.server.state  # type: ignore[attr-defined]

    def _send_json(self, status: int, body: dict[str, Any]) -> None:
        raw = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def do_GET(self) -> None:
        if self.path == "/debug/stats":
            self._send_json(200, self.state.stats())
        else:
            self._send_json(404, {"error": {"message": f"unknown path {self.path}"}})

    def do_POST(self) -> None:
        if self.path == "/debug/reset":
            self.state.reset()
            self._send_json(200, {"ok": True})
            return
        length = int(self.headers.get("Content-Length", 0))
        try:
            body = json.loads(self.rfile.read(length) or b"{}")
        except json.JSONDecodeError:
            self._send_json(400, {"error": {"message": "invalid JSON body"}})
            return
        self.state.enter(self.path)
        try:
            if self.path == "/v1/chat/completions":
                self._chat(body)
            elif self.path == "/v1/embeddings":
                self._embeddings(body)
            elif self.path == "/v1/completions":
                self._completions(body)
            elif self.path == "/v1/rerank":
                self._rerank(body)
            else:
                self._unmatched(f"unknown path {self.path}", body)
        finally:
            self.state.leave()

    def _unmatched(self, reason: str, body: Mapping[str, Any]) -> None:
        with self.state.lock:
            self.state.unmatched += 1
        self.state.record({"path": self.path, "error": reason})
        logger.warning("mock: unmatched request on %s: %s", self.path, reason)
        self._send_json(500, {"error": {"message": f"mock: {reason}"}})

    def _find_rule(self, rules: Sequence[MockRule], haystack: str) -> MockRule | None:
        for rule in rules:
            if rule.matches(haystack):
                return rule
        return None

    def _apply_latency_and_status(self, rule: MockRule) -> int:
        delay = self.state.latency(rule)
        if delay > 0:
            time.sleep(delay)
        return self.state.next_status(rule)

    def _chat(self, body: Mapping[str, Any]) -> None:
        messages = body.get("messages", [])
        content = "\n".join(str(m.get("content", "")) for m in messages)
        target = next(
            (str(m.get("content", "")) for m in reversed(messages) if m.get("role") == "user"),
            content,
        )
        rule = self._find_rule(self.state.script.chat, content)
        if rule is None:
            self._unmatched("no chat rule matched", body)
            return
        self.state.hit(rule.name)
        status = self._apply_latency_and_status(rule)
        if status != 200:
            self.state.record({"path": self.path, "rule": rule.name, "status": status})
            self._send_json(status, {"error": {"message": f"mock status {status}"}})
            return
        if rule.respond.get("type") == "malformed_body":
            self.state.record({"path": self.path, "rule": rule.name, "status": 200})
            self._send_json(200, {"unexpected": True})
            return
        text = _chat_text(rule, content, target)
        if text is None:
            self._unmatched(f"rule {rule.name!r} could not render a response", body)
            return
        usage_override = rule.respond.get("usage")
        if usage_override:
            prompt_tokens = int(usage_override.get("prompt_tokens", 0))
            completion_tokens = int(usage_override.get("completion_tokens", 0))
        else:
            prompt_tokens = _whitespace_tokens(content)
            completion_tokens = _whitespace_tokens(text)
        self.state.tally(prompt_tokens, completion_tokens)
        self.state.record({"path": self.path, "rule": rule.name, "status": 200})
        resp: dict[str, Any] = {
            "id": "mock-chat",
            "object": "chat.completion",
            "model": body.get("model", "mock"),
            "choices": [
                {
                    "index": 0,
                    "message": {"role": "assistant", "content": text},
                    "finish_reason": rule.respond.get("finish_reason", "stop"),
                }
            ],
        }
        if not rule.respond.get("omit_usage"):
            resp["usage"] = {
                "prompt_tokens": prompt_tokens,
                "completion_tokens": completion_tokens,
                "total_tokens": prompt_tokens + completion_tokens,
            }
        self._send_json(200, resp)

    def _embeddings(self, body: Mapping[str, Any]) -> None:
        inputs = body.get("input", [])
        if isinstance(inputs, str):
            inputs = [inputs]
        model = str(body.get("model", "mock-embed"))
        haystack = "\n".join(inputs)
        rule = self._find_rule(self.state.script.embeddings, haystack)
        dim = self.state.script.embedding_dim
        dims = [dim] * len(inputs)
        fixed = None
        if rule is not None:
            self.state.hit(rule.name)
            status = self._apply_latency_and_status(rule)
            if status != 200:
                self._send_json(status, {"error": {"message": f"mock status {status}"}})
                return
            kind = rule.respond.get("type", "embed_hash")
            if kind == "embed_dims":
                # pad with the default dim when the request outruns the list
                dims = [int(d) for d in rule.respond.get("dims", dims)]
                dims += [dim] * (len(inputs) - len(dims))
            elif kind == "embed_fixed":
                fixed = rule.respond.get("vectors")
            elif kind == "embed_hash":
                dims = [int(rule.respond.get("dim", dim))] * len(inputs)
        data = []
        for i, text in enumerate(inputs):
            if fixed is not None:
                vec = fixed[i % len(fixed)]
            else:
                vec = _hash_unit_vector(f"{model}:{text}", dims[i])
            data.append({"object": "embedding", "index": i, "embedding": vec})
        prompt_tokens = sum(_whitespace_tokens(t) for t in inputs)
        self.state.tally(prompt_tokens, 0)
        with self.state.lock:
            self.state.texts_embedded += len(inputs)
        self._send_json(
            200,
            {
                "object": "list",
                "data": data,
                "model": model,
                "usage": {"prompt_tokens": prompt_tokens, "total_tokens": prompt_tokens},
            },
        )

    def _completions(self, body: Mapping[str, Any]) -> None:
        prompt = str(body.get("prompt", ""))
        rule = self._find_rule(self.state.script.completions, prompt)
        respond = rule.respond if rule is not None else {"type": "loglik"}
        if rule is not None:
            self.state.hit(rule.name)
            status = self._apply_latency_and_status(rule)
            if status != 200:
                self._send_json(status, {"error": {"message": f"mock status {status}"}})
                return
        kind = respond.get("type", "loglik")
        choice: dict[str, Any] = {"index": 0, "text": prompt, "finish_reason": "stop"}
        if kind != "no_logprobs":
            suffix_match = None
            for opt in respond.get("options", []):
                if prompt.endswith(opt["suffix"]):
                    suffix_match = opt
                    break
            if suffix_match is not None:
                prefix = prompt[: len(prompt) - len(suffix_match["suffix"])]
                choice["logprobs"] = {
                    "tokens": [prefix, suffix_match["suffix"]],
                    "token_logprobs": [None, float(suffix_match["logprob"])],
                    "text_offset": [0, len(prefix)],
                }
            else:
                per_token = float(respond.get("default_logprob", -1.0))
                tokens, offsets = [], []
                pos = 0
                for tok in prompt.split():
                    start = prompt.index(tok, pos)
                    tokens.append(tok)
                    offsets.append(start)
                    pos = start + len(tok)
                choice["logprobs"] = {
                    "tokens": tokens,
                    "token_logprobs": [None] + [per_token] * (len(tokens) - 1) if tokens else [],
                    "text_offset": offsets,
                }
        prompt_tokens = _whitespace_tokens(prompt)
        self.state.tally(prompt_tokens, 0)
        self._send_json(
            200,
            {
                "id": "mock-completion",
                "object": "text_completion",
                "choices": [choice],
                "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": 0},
            },
        )

    def _rerank(self, body: Mapping[str, Any]) -> None:
        query = str(body.get("query", ""))
        documents = [str(d) for d in body.get("documents", [])]
        rule = self._find_rule(self.state.script.rerank, query + "\n" + "\n".join(documents))
        respond = rule.respond if rule is not None else {"type": "rerank_scores"}
        if rule is not None:
            self.state.hit(rule.name)
            status = self._apply_latency_and_status(rule)
            if status != 200:
                self._send_json(status, {"error": {"message": f"mock status {status}"}})
                return
        table = respond.get("scores", [])
        default = float(respond.get("default", 0.0))
        results = []
        for i, doc in enumerate(documents):
            score = default
            for entry in table:
                if entry.get("contains", "") in doc:
                    score = float(entry["score"])
                    break
            results.append({"index": i, "relevance_score": score})
        prompt_tokens = _whitespace_tokens(query) + sum(_whitespace_tokens(d) for d in documents)
        self.state.tally(prompt_tokens, 0)
        self._send_json(200, {"results": results})


class _MockHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True


class MockServer:
    """Scripted in-process server; also runnable standalone via the CLI.

    Use as a context manager in tests:

        with MockServer(script) as server:
            endpoint = Endpoint(base_url=server.base_url, model="mock")
    """

    def __init__(self, script: MockScript, port: int = 0, host: str = "127.0.0.1"):
        self._httpd = _MockHTTPServer((host, port), _Handler)
        self._httpd.state = _ServerState(script)  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def base_url(self) -> str:
        host = self._httpd.server_address[0]
        return f"http://{host}:{self.port}/v1"

    def start(self) -> "MockServer":
        # short poll interval keeps shutdown responsive in test suites
        self._thread = threading.Thread(
            target=lambda: self._httpd.serve_forever(poll_interval=0.02), daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def stats(self) -> dict[str, Any]:
        return self._httpd.state.stats()  # type: ignore[attr-defined]

    def reset(self) -> None:
        self._httpd.state.reset()  # type: ignore[attr-defined]

    def request_log(self) -> list[dict[str, Any]]:
        state = self._httpd.state  # type: ignore[attr-defined]
        with state.lock:
            return list(state.log)

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def __enter__(self) -> "MockServer":
        return self.start()

    def __exit__(self, *exc: Any) -> None:
        self.stop()
