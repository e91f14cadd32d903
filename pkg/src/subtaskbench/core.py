"""Domain types shared across the harness, plus the action grammar.

Actions are immutable values. The canonical text form (``CLICK(200, 300)``,
``CLICK(Search Bar)``, ``SCROLL(up)``, ``TYPE(hello)``, ``BACK``, ``EXIT``,
``WAIT(2)``) is the interchange format used in task files, transcripts,
archives and CLI output.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence


class ActionParseError(ValueError):
    """Raised when a string is not a valid action."""


class UnknownActionName(ActionParseError):
    pass


class ArityMismatch(ActionParseError):
    pass


class BadAttribute(ActionParseError):
    pass


class Direction(str, enum.Enum):
    UP = "up"
    DOWN = "down"
    LEFT = "left"
    RIGHT = "right"


class Action:
    """Base class of the seven executable action variants."""

    __slots__ = ()


_NUMBERISH = re.compile(r"[+-]?\d+(?:\.\d*)?")
_INT = re.compile(r"[+-]?\d+")


def _looks_numeric(part: str) -> bool:
    return _NUMBERISH.fullmatch(part.strip()) is not None


@dataclass(frozen=True)
class Click(Action):
    x: int
    y: int

    def __post_init__(self):
        if isinstance(self.x, bool) or isinstance(self.y, bool):
            raise BadAttribute("click coordinates must be integers")
        if not isinstance(self.x, int) or not isinstance(self.y, int):
            raise BadAttribute(f"click coordinates must be integers, got {self.x!r}, {self.y!r}")


@dataclass(frozen=True)
class ClickTarget(Action):
    """A click on a named element that still needs grounding to coordinates."""

    element_name: str

    def __post_init__(self):
        name = self.element_name
        if not isinstance(name, str) or not name or name != name.strip() or "\n" in name:
            raise BadAttribute(f"invalid element name {name!r}")
        # would re-parse as coordinates
        if any(_looks_numeric(p) for p in name.split(",")):
            raise BadAttribute(f"element name {name!r} is ambiguous with coordinates")


@dataclass(frozen=True)
class Scroll(Action):
    direction: Direction

    def __post_init__(self):
        try:
            object.__setattr__(self, "direction", Direction(self.direction))
        except ValueError:
            raise BadAttribute(f"invalid scroll direction {self.direction!r}") from None


@dataclass(frozen=True)
class Type(Action):
    text: str

    def __post_init__(self):
        t = self.text
        if not isinstance(t, str) or not t or t != t.strip() or "\n" in t:
            raise BadAttribute(f"invalid text {t!r}")


@dataclass(frozen=True)
class Back(Action):
    pass


@dataclass(frozen=True)
class Exit(Action):
    pass


@dataclass(frozen=True)
class Wait(Action):
    seconds: int

    def __post_init__(self):
        s = self.seconds
        if isinstance(s, bool) or not isinstance(s, int) or s < 1:
            raise BadAttribute(f"wait seconds must be a positive integer, got {s!r}")


ACTION_NAMES = frozenset({"CLICK", "SCROLL", "TYPE", "BACK", "EXIT", "WAIT"})

_CALL = re.compile(r"^\s*([A-Za-z_]+)\s*(?:\((.*)\))?\s*$", re.S)


def parse_action(text: str) -> Action:
    """Parse one canonical action string. Keywords are case-insensitive."""
    if "\n" in text.strip():
        raise ActionParseError(f"action must be a single line: {text!r}")
    m = _CALL.match(text)
    if m is None:
        head = re.match(r"\s*([A-Za-z_]+)", text)
        if head and head.group(1).upper() not in ACTION_NAMES:
            raise UnknownActionName(head.group(1))
        raise ActionParseError(f"malformed action {text!r}")
    name, inner = m.group(1).upper(), m.group(2)
    if name not in ACTION_NAMES:
        raise UnknownActionName(m.group(1))
    arg = inner.strip() if inner is not None else ""

    if name in ("BACK", "EXIT"):
        if arg:
            raise ArityMismatch(f"{name} takes no arguments")
        return Back() if name == "BACK" else Exit()
    if not arg:
        raise ArityMismatch(f"{name} requires an argument")

    if name == "CLICK":
        parts = [p.strip() for p in arg.split(",")]
        numeric = [_looks_numeric(p) for p in parts]
        if not any(numeric):
            return ClickTarget(arg)
        if len(parts) == 2 and all(_INT.fullmatch(p) for p in parts):
            return Click(int(parts[0]), int(parts[1]))
        if all(numeric) and len(parts) != 2:
            raise ArityMismatch(f"CLICK expects (x, y), got {len(parts)} value(s)")
        raise BadAttribute(f"non-integer click coordinate in {arg!r}")
    if name == "SCROLL":
        if "," in arg:
            raise ArityMismatch("SCROLL takes one direction")
        return Scroll(arg.lower())
    if name == "TYPE":
        return Type(arg)
    # WAIT
    if "," in arg:
        raise ArityMismatch("WAIT takes one value")
    if not _INT.fullmatch(arg):
        raise BadAttribute(f"wait time must be an integer, got {arg!r}")
    return Wait(int(arg))


def render_action(a: Action) -> str:
    if isinstance(a, Click):
        return f"CLICK({a.x}, {a.y})"
    if isinstance(a, ClickTarget):
        return f"CLICK({a.element_name})"
    if isinstance(a, Scroll):
        return f"SCROLL({a.direction.value})"
    if isinstance(a, Type):
        return f"TYPE({a.text})"
    if isinstance(a, Wait):
        return f"WAIT({a.seconds})"
    if isinstance(a, Back):
        return "BACK"
    if isinstance(a, Exit):
        return "EXIT"
    raise TypeError(f"not an action: {a!r}")


Rect = tuple  # (x1, y1, x2, y2), half-open on the right/bottom edges


def rect_contains(rect: Sequence[int], x: int, y: int) -> bool:
    x1, y1, x2, y2 = rect
    return x1 <= x < x2 and y1 <= y < y2


def rect_center(rect: Sequence[int]) -> tuple[int, int]:
    x1, y1, x2, y2 = rect
    return (x1 + x2) // 2, (y1 + y2) // 2


def _name_matcher(template: str) -> re.Pattern:
    # "{query}" in a template element name stands for any typed search text
    pieces = re.split(r"\{query\}", template.strip())
    return re.compile(".+".join(re.escape(p) for p in pieces), re.IGNORECASE)


class ElementRegistry:
    """Element-name to bounds lookup used to unify ``Click`` and ``ClickTarget``.

    Entries are ``(name_template, rect)``; a template may contain ``{query}``.
    """

    def __init__(self, entries: Iterable[tuple[str, Sequence[int]]] = ()):
        self._entries = [(_name_matcher(n), tuple(r)) for n, r in entries]

    def __len__(self):
        return len(self._entries)

    def contains(self, element_name: str, x: int, y: int) -> bool:
        name = " ".join(element_name.split())
        return any(
            pat.fullmatch(name) and rect_contains(rect, x, y) for pat, rect in self._entries
        )


@dataclass(frozen=True)
class EqualityPolicy:
    case_fold: bool = True
    trim: bool = True
    ground_aware: bool = True
    registry: ElementRegistry | None = field(default=None, compare=False)

    def norm(self, s: str) -> str:
        if self.trim:
            s = " ".join(s.split())
        if self.case_fold:
            s = s.casefold()
        return s


DEFAULT_POLICY = EqualityPolicy()


def actions_equal(a: Action, b: Action, policy: EqualityPolicy = DEFAULT_POLICY) -> bool:
    if isinstance(a, ClickTarget) and isinstance(b, Click):
        a, b = b, a
    if isinstance(a, Click) and isinstance(b, ClickTarget):
        if policy.ground_aware and policy.registry is not None:
            return policy.registry.contains(b.element_name, a.x, a.y)
        return False
    if type(a) is not type(b):
        return False
    if isinstance(a, Click):
        return (a.x, a.y) == (b.x, b.y)
    if isinstance(a, ClickTarget):
        return policy.norm(a.element_name) == policy.norm(b.element_name)
    if isinstance(a, Type):
        return policy.norm(a.text) == policy.norm(b.text)
    return a == b


# --- state, tasks, plans -------------------------------------------------


@dataclass(frozen=True)
class ScreenState:
    screen_id: str
    app_id: str
    visible_elements: tuple[str, ...]
    observation_text: str


@dataclass(frozen=True)
class History:
    """Append-only record of (state, action) pairs."""

    entries: tuple[tuple[ScreenState, Action], ...] = ()

    def append(self, state: ScreenState, action: Action) -> "History":
        return History(self.entries + ((state, action),))

    def __len__(self):
        return len(self.entries)


class Language(str, enum.Enum):
    EN = "en"
    ZH = "zh"


class Difficulty(str, enum.Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"


@dataclass(frozen=True)
class SubtaskCall:
    name: str
    parameters: tuple[str, ...] = ()
    is_custom: bool = False
    purpose: str = ""
    stop_condition: str = ""

    def render(self) -> str:
        if not self.parameters:
            return self.name
        # quote parameters that contain commas so the plan parser keeps them whole
        params = [f'"{p}"' if "," in p or "，" in p else p for p in self.parameters]
        return f"{self.name} ({', '.join(params)})"


@dataclass(frozen=True)
class SubtaskDoc:
    standardized_process: tuple[str, ...]
    boundary_conditions: tuple[str, ...] = ()


@dataclass(frozen=True)
class BasisSubtask:
    name: str
    arity: int
    parameter_roles: tuple[str, ...]
    doc: SubtaskDoc
    fixed_flow: bool = False
    frequency: int = 0
    description: str = ""

    def __post_init__(self):
        if self.arity != len(self.parameter_roles):
            raise ValueError(f"{self.name}: arity {self.arity} != {len(self.parameter_roles)} roles")


def library_index(library: Iterable[BasisSubtask]) -> dict[str, BasisSubtask]:
    """Case-folded name -> subtask. Raises on duplicate names."""
    out: dict[str, BasisSubtask] = {}
    for b in library:
        key = b.name.casefold()
        if key in out:
            raise ValueError(f"duplicate basis subtask {b.name!r}")
        out[key] = b
    return out


@dataclass(frozen=True)
class MemoryEntry:
    subtask_name: str
    summary: str

    def __post_init__(self):
        if not self.summary.strip():
            raise ValueError("memory summary must be non-empty")


@dataclass(frozen=True)
class Task:
    id: str
    instruction: str
    app_id: str
    golden_actions: tuple[Action, ...]
    language: Language = Language.EN
    difficulty: Difficulty = Difficulty.EASY
    golden_plan: tuple[SubtaskCall, ...] | None = None
    # per-subtask slices of golden_actions, parallel to golden_plan
    plan_actions: tuple[tuple[Action, ...], ...] | None = None
    plan_summaries: tuple[str, ...] | None = None
    extra_app_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.golden_actions:
            raise ValueError(f"task {self.id}: golden_actions must be non-empty")
        if not isinstance(self.golden_actions[-1], Exit):
            raise ValueError(f"task {self.id}: last golden action must be EXIT")
        if self.plan_actions is not None:
            if self.golden_plan is None or len(self.plan_actions) != len(self.golden_plan):
                raise ValueError(f"task {self.id}: plan_actions must parallel golden_plan")
            flat = tuple(a for seg in self.plan_actions for a in seg)
            if flat != self.golden_actions:
                raise ValueError(f"task {self.id}: plan_actions do not concatenate to golden_actions")

    @property
    def app_ids(self) -> tuple[str, ...]:
        return (self.app_id,) + tuple(self.extra_app_ids)


# --- episodes --------------------------------------------------------------


class TerminalReason(str, enum.Enum):
    EXIT = "exit"
    MAX_ROUNDS = "max_rounds"
    PARSE_ERROR = "parse_error"
    ENV_ERROR = "env_error"
    PLAN_EXHAUSTED = "plan_exhausted"


@dataclass(frozen=True)
class TranscriptRecord:
    role: str
    request: str
    response: str
    turn: int
    subtask_index: int | None = None
    error: str | None = None
    error_kind: str | None = None

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "turn": self.turn,
            "subtask_index": self.subtask_index,
            "request": self.request,
            "response": self.response,
            "error": self.error,
            "error_kind": self.error_kind,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TranscriptRecord":
        return cls(
            role=d["role"],
            request=d["request"],
            response=d["response"],
            turn=int(d["turn"]),
            subtask_index=d.get("subtask_index"),
            error=d.get("error"),
            error_kind=d.get("error_kind"),
        )


@dataclass(frozen=True)
class Episode:
    task_id: str
    executed_actions: tuple[Action, ...]
    transcripts: tuple[TranscriptRecord, ...]
    action_agent_calls: int
    api_calls_total: int
    success: bool
    terminal_reason: TerminalReason
    plan: tuple[SubtaskCall, ...] = ()
    subtasks_completed: int = 0
    memories: tuple[MemoryEntry, ...] = ()

    def __post_init__(self):
        if self.action_agent_calls > self.api_calls_total:
            raise ValueError("action_agent_calls cannot exceed api_calls_total")

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "success": self.success,
            "terminal_reason": self.terminal_reason.value,
            "action_agent_calls": self.action_agent_calls,
            "api_calls_total": self.api_calls_total,
            "subtasks_completed": self.subtasks_completed,
            "executed_actions": [render_action(a) for a in self.executed_actions],
            "plan": [
                {
                    "name": c.name,
                    "parameters": list(c.parameters),
                    "is_custom": c.is_custom,
                    "purpose": c.purpose,
                    "stop_condition": c.stop_condition,
                }
                for c in self.plan
            ],
            "memories": [{"subtask_name": m.subtask_name, "summary": m.summary} for m in self.memories],
            "transcripts": [t.to_dict() for t in self.transcripts],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Episode":
        return cls(
            task_id=d["task_id"],
            executed_actions=tuple(parse_action(s) for s in d["executed_actions"]),
            transcripts=tuple(TranscriptRecord.from_dict(t) for t in d.get("transcripts", ())),
            action_agent_calls=int(d["action_agent_calls"]),
            api_calls_total=int(d["api_calls_total"]),
            success=bool(d["success"]),
            terminal_reason=TerminalReason(d["terminal_reason"]),
            plan=tuple(
                SubtaskCall(
                    name=p["name"],
                    parameters=tuple(p.get("parameters", ())),
                    is_custom=bool(p.get("is_custom", False)),
                    purpose=p.get("purpose", ""),
                    stop_condition=p.get("stop_condition", ""),
                )
                for p in d.get("plan", ())
            ),
            subtasks_completed=int(d.get("subtasks_completed", 0)),
            memories=tuple(MemoryEntry(**m) for m in d.get("memories", ())),
        )
