"""Completion backends: scripted queues, an oracle driven by golden plans,
record/replay cassettes, and an OpenAI-compatible HTTP client."""

from __future__ import annotations

import enum
import hashlib
import logging
import os
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol

import httpx
import yaml

from .core import Task, render_action

log = logging.getLogger(__name__)


class Role(str, enum.Enum):
    PLAN = "plan"
    ACTION = "action"
    SUMMARIZE = "summarize"
    JUDGE = "judge"


class BackendError(Exception):
    pass


class ScriptExhausted(BackendError):
    pass


class CassetteMiss(BackendError):
    pass


class TransportError(BackendError):
    def __init__(self, message: str, retries: int):
        self.retries = retries
        super().__init__(f"{message} (after {retries} retries)")


@dataclass(frozen=True)
class BackendRequest:
    role: Role
    prompt: str
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        if not self.prompt.strip():
            raise ValueError("prompt must be non-empty")


class CompletionBackend(Protocol):
    def complete(self, req: BackendRequest) -> str: ...


def fingerprint(req: BackendRequest) -> str:
    """Stable hash of role + whitespace-collapsed prompt. Case is preserved."""
    normalized = " ".join(req.prompt.split())
    h = hashlib.sha256()
    h.update(req.role.value.encode())
    h.update(b"\x00")
    h.update(normalized.encode("utf-8"))
    return h.hexdigest()


class ScriptedBackend:
    """Dispenses scripted responses from per-(role, key) queues.

    ``key`` is ``metadata["key"]``; requests whose key has no queue fall back
    to the keyless queue for that role.
    """

    def __init__(self, entries=()):
        self._queues: dict[tuple[str, str | None], deque[str]] = defaultdict(deque)
        self._lock = threading.Lock()
        for e in entries:
            self.add(e["role"], e["response"], e.get("key"))

    def add(self, role, response: str, key: str | None = None):
        self._queues[(Role(role).value, key)].append(response)

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        return cls(data.get("entries", ()))

    def complete(self, req: BackendRequest) -> str:
        key = req.metadata.get("key")
        with self._lock:
            for k in ((req.role.value, key), (req.role.value, None)):
                q = self._queues.get(k)
                if q:
                    return q.popleft()
        raise ScriptExhausted(f"no scripted response left for role={req.role.value} key={key}")


def render_plan(calls) -> str:
    lines = []
    for i, c in enumerate(calls, 1):
        lines.append(f"{i}. {c.render()}")
        if c.purpose:
            lines.append(f"   Purpose: {c.purpose}")
        if c.stop_condition:
            lines.append(f"   Stop: {c.stop_condition}")
    return "\n".join(lines)


class OracleBackend:
    """Answers from each task's golden plan and per-subtask golden actions.

    Action requests must carry ``key`` (task id), ``subtask_index``,
    ``executed`` (actions already executed for this subtask) and
    ``batch_allowed``. With batching allowed the remaining actions of the
    subtask are returned in one turn, otherwise one action per turn.
    """

    def __init__(self, tasks: Mapping[str, Task]):
        self.tasks = dict(tasks)

    def complete(self, req: BackendRequest) -> str:
        task = self.tasks.get(req.metadata.get("key"))
        if task is None or task.golden_plan is None or task.plan_actions is None:
            raise ScriptExhausted(f"oracle has no golden plan for {req.metadata.get('key')!r}")
        if req.role is Role.PLAN:
            return render_plan(task.golden_plan)
        if req.role is not Role.ACTION:
            raise ScriptExhausted(f"oracle does not answer role {req.role.value}")
        idx = int(req.metadata["subtask_index"])
        done = int(req.metadata.get("executed", 0))
        segment = task.plan_actions[idx][done:]
        if not segment:
            raise ScriptExhausted(f"oracle segment {idx} of {task.id} already complete")
        batch = segment if req.metadata.get("batch_allowed") else segment[:1]
        finished = len(batch) == len(segment)
        lines = [
            f"Observation: {req.metadata.get('screen_id', 'current screen')}",
            f"Thought: continue {task.golden_plan[idx].name}",
            "Action:",
            *(render_action(a) for a in batch),
        ]
        summary = task.plan_summaries[idx] if task.plan_summaries else ""
        if finished and summary:
            lines.append(f"Summary: {summary}")
        lines.append(f"Done: {'yes' if finished else 'no'}")
        return "\n".join(lines)


class CassetteMode(str, enum.Enum):
    RECORD = "record"
    REPLAY = "replay"
    REPLAY_STRICT = "replay_strict"


@dataclass
class CassetteEntry:
    fingerprint: str
    role: str
    response: str
    prompt: str | None = None


class Cassette:
    """Ordered request-fingerprint -> response store persisted as YAML."""

    def __init__(self, entries=(), mode: CassetteMode = CassetteMode.REPLAY):
        self.entries: list[CassetteEntry] = list(entries)
        self.mode = CassetteMode(mode)

    @classmethod
    def load(cls, path: str | Path, mode=CassetteMode.REPLAY) -> "Cassette":
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        entries = []
        for raw in data.get("entries", ()):
            fp = raw.get("fingerprint")
            if fp is None:
                fp = fingerprint(BackendRequest(raw["role"], raw["prompt"]))
            entries.append(CassetteEntry(fp, raw["role"], raw["response"], raw.get("prompt")))
        return cls(entries, mode)

    def dump(self) -> str:
        data = {
            "entries": [
                {k: v for k, v in vars(e).items() if v is not None} for e in self.entries
            ]
        }
        return yaml.safe_dump(data, sort_keys=False, allow_unicode=True, width=100)

    def save(self, path: str | Path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.dump(), encoding="utf-8")


class CassetteBackend:
    """Record through ``inner`` or replay from a cassette.

    Replay serves entries sharing a fingerprint in recorded order and keeps
    repeating the last one; strict replay raises ``CassetteMiss`` instead once
    they are used up. A miss raises ``CassetteMiss`` unless a fallback backend
    is given (non-strict replay only).
    """

    def __init__(self, cassette: Cassette, inner: CompletionBackend | None = None,
                 path: str | Path | None = None, store_prompts: bool = True):
        self.cassette = cassette
        self.inner = inner
        self.path = Path(path) if path else None
        self.store_prompts = store_prompts
        self._lock = threading.Lock()
        self._cursor: dict[str, int] = defaultdict(int)
        self._by_fp: dict[str, list[CassetteEntry]] = defaultdict(list)
        for e in cassette.entries:
            self._by_fp[e.fingerprint].append(e)
        if cassette.mode is CassetteMode.RECORD and inner is None:
            raise ValueError("record mode needs an inner backend")

    def complete(self, req: BackendRequest) -> str:
        fp = fingerprint(req)
        mode = self.cassette.mode
        if mode is CassetteMode.RECORD:
            response = self.inner.complete(req)
            with self._lock:
                entry = CassetteEntry(fp, req.role.value, response, req.prompt if self.store_prompts else None)
                self.cassette.entries.append(entry)
                self._by_fp[fp].append(entry)
                if self.path:
                    self.cassette.save(self.path)
            return response
        with self._lock:
            hits = self._by_fp.get(fp)
            if hits:
                i = self._cursor[fp]
                if i < len(hits):
                    self._cursor[fp] = i + 1
                    return hits[i].response
                if mode is CassetteMode.REPLAY:
                    return hits[-1].response
        if mode is CassetteMode.REPLAY and self.inner is not None:
            return self.inner.complete(req)
        raise CassetteMiss(f"no cassette entry for {req.role.value} request {fp[:12]}")


class HttpBackend:
    """OpenAI-compatible chat-completions client.

    Configuration comes from ``SUBTASKBENCH_BASE_URL``, ``SUBTASKBENCH_API_KEY``
    and ``SUBTASKBENCH_MODEL`` unless passed explicitly.
    """

    def __init__(self, base_url: str | None = None, api_key: str | None = None,
                 model: str | None = None, max_retries: int = 2, timeout: float = 120.0,
                 temperature: float = 0.0, max_tokens: int = 4096,
                 transport: httpx.BaseTransport | None = None, backoff: float = 1.0):
        self.base_url = (base_url or os.environ.get("SUBTASKBENCH_BASE_URL", "https://api.openai.com/v1")).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get("SUBTASKBENCH_API_KEY", "")
        self.model = model or os.environ.get("SUBTASKBENCH_MODEL", "gpt-4o")
        self.max_retries = max_retries
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.backoff = backoff
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def payload(self, req: BackendRequest) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }

    def complete(self, req: BackendRequest) -> str:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        last = "unknown error"
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * attempt)
            try:
                resp = self._client.post(f"{self.base_url}/chat/completions",
                                         json=self.payload(req), headers=headers)
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
                log.warning("request failed (attempt %d): %s", attempt + 1, last)
                continue
            if resp.status_code >= 500 or resp.status_code == 429:
                last = f"HTTP {resp.status_code}"
                log.warning("request failed (attempt %d): %s", attempt + 1, last)
                continue
            if resp.status_code >= 400:
                raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}", attempt)
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (KeyError, IndexError, ValueError) as exc:
                raise TransportError(f"malformed response: {exc}", attempt) from None
        raise TransportError(last, self.max_retries)


def complete(backend: CompletionBackend, req: BackendRequest) -> str:
    return backend.complete(req)


__all__ = [
    "BackendError", "BackendRequest", "Cassette", "CassetteBackend", "CassetteEntry",
    "CassetteMiss", "CassetteMode", "CompletionBackend", "HttpBackend", "OracleBackend",
    "Role", "ScriptExhausted", "ScriptedBackend", "TransportError",
    "complete", "fingerprint", "render_plan",
]
