"""Uniform chat-completion access with per-token log-probabilities.

Two providers: an OpenAI-compatible HTTP client and a scripted provider
that replays fixture responses keyed by (stage_tag, question_id), which
keeps runs deterministic regardless of prompt wording tweaks. The gateway
wrapper retries transient transport failures with exponential backoff and
computes the direct-answer confidence as the mean per-token probability.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import requests

from anchor_rag.corpus import DEFAULT_TOKENIZER

DEFAULT_RETRIES = 3
DEFAULT_BACKOFF_S = 0.5


class GatewayError(RuntimeError):
    """Provider misuse or a non-retryable provider response."""


class TransportError(GatewayError):
    """Transient network/server failure; eligible for retry."""


class FixtureMissingError(GatewayError):
    """Scripted provider has no fixture for the requested stage/question."""


class EmptyCompletionError(GatewayError):
    """The model returned no text."""


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    user_prompt: str
    max_new_tokens: int = 256
    temperature: float = 0.0
    want_logprobs: bool = False
    # Routing metadata: the scripted provider keys fixtures on these, and
    # they never affect a live HTTP request.
    stage_tag: str = ""
    question_id: str = ""

    def __post_init__(self) -> None:
        if self.max_new_tokens < 1:
            raise GatewayError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise GatewayError("temperature must be >= 0")
        if not self.system_prompt or not self.user_prompt:
            raise GatewayError("prompts must be non-empty")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    token_logprobs: tuple[tuple[str, float], ...] | None
    prompt_tokens: int
    completion_tokens: int
    provider_id: str
    latency_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.token_logprobs is not None:
            if any(lp > 0.0 for _, lp in self.token_logprobs):
                raise GatewayError("log-probabilities must be <= 0")
            if self.completion_tokens != len(self.token_logprobs):
                raise GatewayError("completion_tokens must equal the number of logprob entries")

    @property
    def has_logprobs(self) -> bool:
        return self.token_logprobs is not None


class ChatProvider(Protocol):
    provider_id: str

    def complete(self, request: ChatRequest) -> ChatResponse: ...


class ScriptedProvider:
    """Replays canned responses keyed by (stage_tag, question_id)."""

    provider_id = "scripted"

    def __init__(self, fixtures: dict[tuple[str, str], tuple[str, list | None]] | None = None):
        self._fixtures: dict[tuple[str, str], tuple[str, tuple[tuple[str, float], ...] | None]] = {}
        for key, (text, logprobs) in (fixtures or {}).items():
            self.add(key[0], key[1], text, logprobs)

    def add(self, stage_tag: str, question_id: str, text: str, token_logprobs: Sequence | None = None) -> None:
        key = (stage_tag, question_id)
        if key in self._fixtures:
            raise GatewayError(f"duplicate fixture for {key}")
        cleaned = None
        if token_logprobs is not None:
            cleaned = tuple((str(tok), min(0.0, float(lp))) for tok, lp in token_logprobs)
        self._fixtures[key] = (text, cleaned)

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "ScriptedProvider":
        provider = cls()
        with Path(path).open("r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                provider.add(row["stage_tag"], row["question_id"], row["text"], row.get("token_logprobs"))
        return provider

    def complete(self, request: ChatRequest) -> ChatResponse:
        key = (request.stage_tag, request.question_id)
        if key not in self._fixtures:
            raise FixtureMissingError(f"no fixture for stage={key[0]!r} question={key[1]!r}")
        text, logprobs = self._fixtures[key]
        if not request.want_logprobs:
            logprobs = None
        completion_tokens = len(logprobs) if logprobs is not None else DEFAULT_TOKENIZER.count(text)
        prompt_tokens = DEFAULT_TOKENIZER.count(request.system_prompt) + DEFAULT_TOKENIZER.count(request.user_prompt)
        return ChatResponse(
            text=text,
            token_logprobs=logprobs,
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            provider_id=self.provider_id,
            latency_ms=0.0,
        )


class OpenAIChatProvider:
    """OpenAI-compatible ``/chat/completions`` client with logprobs support."""

    def __init__(self, base_url: str, model: str, api_key: str | None = None, timeout_s: float = 120.0):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout_s = timeout_s
        self.provider_id = f"openai:{model}"

    def _post(self, payload: dict) -> requests.Response:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers=headers,
                timeout=self.timeout_s,
            )
        except requests.RequestException as exc:
            raise TransportError(f"chat request failed: {exc}") from exc
        if resp.status_code >= 500:
            raise TransportError(f"server error {resp.status_code}: {resp.text[:200]}")
        return resp

    def complete(self, request: ChatRequest) -> ChatResponse:
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "max_tokens": request.max_new_tokens,
            "temperature": request.temperature,
        }
        if request.want_logprobs:
            payload["logprobs"] = True
        started = time.perf_counter()
        resp = self._post(payload)
        if resp.status_code >= 400 and request.want_logprobs and "logprob" in resp.text.lower():
            # Endpoint rejects logprob requests: degrade to text-only.
            payload.pop("logprobs", None)
            resp = self._post(payload)
        if resp.status_code >= 400:
            raise GatewayError(f"chat endpoint error {resp.status_code}: {resp.text[:200]}")
        latency_ms = (time.perf_counter() - started) * 1000.0
        body = resp.json()
        choice = body["choices"][0]
        text = (choice.get("message") or {}).get("content") or ""
        logprobs = None
        lp_content = (choice.get("logprobs") or {}).get("content")
        if lp_content:
            logprobs = tuple((entry["token"], min(0.0, float(entry["logprob"]))) for entry in lp_content)
        usage = body.get("usage") or {}
        completion_tokens = int(usage.get("completion_tokens") or 0)
        if logprobs is not None:
            completion_tokens = len(logprobs)
        return ChatResponse(
            text=text,
            token_logprobs=logprobs,
            prompt_tokens=int(usage.get("prompt_tokens") or 0),
            completion_tokens=completion_tokens,
            provider_id=self.provider_id,
            latency_ms=latency_ms,
        )


def complete(
    request: ChatRequest,
    provider: ChatProvider,
    retries: int = DEFAULT_RETRIES,
    backoff_s: float = DEFAULT_BACKOFF_S,
    sleep: Callable[[float], None] = time.sleep,
) -> ChatResponse:
    """Run one completion, retrying transient transport failures.

    Raises :class:`EmptyCompletionError` when the model returns no text,
    and the final :class:`TransportError` once attempts are exhausted.
    """
    attempt = 0
    while True:
        attempt += 1
        try:
            response = provider.complete(request)
            break
        except TransportError:
            if attempt >= retries:
                raise
            sleep(backoff_s * (2 ** (attempt - 1)))
    if not response.text.strip():
        raise EmptyCompletionError(f"provider {provider.provider_id} returned an empty completion")
    return response


def answer_token_span(
    response: ChatResponse,
    open_tag: str = "<answer>",
    close_tag: str = "</answer>",
) -> tuple[int, int] | None:
    """Locate the tokens inside the tagged answer, when recoverable.

    Works on the concatenation of the completion's token texts; returns a
    half-open token-index range, or None when the tags cannot be aligned.
    """
    if not response.has_logprobs:
        return None
    tokens = [tok for tok, _ in response.token_logprobs]
    joined = "".join(tokens)
    open_at = joined.find(open_tag)
    if open_at < 0:
        return None
    content_start = open_at + len(open_tag)
    content_end = joined.find(close_tag, content_start)
    if content_end < 0 or content_end == content_start:
        return None
    first = last = None
    offset = 0
    for i, tok in enumerate(tokens):
        tok_start, tok_end = offset, offset + len(tok)
        offset = tok_end
        if tok_end <= content_start or tok_start >= content_end or tok_start == tok_end:
            continue
        if first is None:
            first = i
        last = i
    if first is None:
        return None
    return first, last + 1


def mean_token_confidence(response: ChatResponse, span: tuple[int, int] | None = None) -> float | None:
    """Mean per-token probability over the answer span (all tokens if None)."""
    if not response.has_logprobs or not response.token_logprobs:
        return None
    logprobs = [lp for _, lp in response.token_logprobs]
    if span is not None:
        logprobs = logprobs[span[0] : span[1]]
        if not logprobs:
            logprobs = [lp for _, lp in response.token_logprobs]
    return sum(math.exp(lp) for lp in logprobs) / len(logprobs)


def mean_logprob(response: ChatResponse, span: tuple[int, int] | None = None) -> float | None:
    """Raw mean log-probability over the same span, kept for inspection."""
    if not response.has_logprobs or not response.token_logprobs:
        return None
    logprobs = [lp for _, lp in response.token_logprobs]
    if span is not None:
        logprobs = logprobs[span[0] : span[1]]
        if not logprobs:
            logprobs = [lp for _, lp in response.token_logprobs]
    return sum(logprobs) / len(logprobs)
