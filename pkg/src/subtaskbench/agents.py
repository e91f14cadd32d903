"""Plan agent, action agent and the episode loop that ties them to the simulator."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from string import Template
from typing import Mapping, Sequence

from .backends import BackendRequest, CompletionBackend, Role
from .core import (
    Action,
    ActionParseError,
    BasisSubtask,
    Click,
    ClickTarget,
    Episode,
    EqualityPolicy,
    Exit,
    Language,
    MemoryEntry,
    ScreenState,
    SubtaskCall,
    SubtaskDoc,
    Task,
    TerminalReason,
    TranscriptRecord,
    library_index,
    parse_action,
)
from .simenv import (
    AppDefinition,
    DeviceState,
    NoSuchElement,
    SimError,
    app_for_task,
    ground,
    observe,
    reset,
    step,
)

log = logging.getLogger(__name__)


class PlanParseError(ValueError):
    pass


class EmptyPlan(PlanParseError):
    pass


class PlanArityMismatch(PlanParseError):
    def __init__(self, subtask: str, expected: int, got: int):
        self.subtask, self.expected, self.got = subtask, expected, got
        super().__init__(f"{subtask}: expected {expected} parameter(s), got {got}")


class ActionOutputError(ValueError):
    pass


class NoActionFound(ActionOutputError):
    pass


class BatchNotAllowed(ActionOutputError):
    pass


@dataclass(frozen=True)
class PlanResult:
    subtasks: tuple[SubtaskCall, ...]
    raw_response: str


@dataclass(frozen=True)
class ActionTurn:
    observation: str
    thought: str
    actions: tuple[Action, ...]
    summarization: str | None = None
    subtask_done: bool = False


@dataclass(frozen=True)
class RunnerConfig:
    max_rounds: int = 20
    max_turns_per_subtask: int = 8
    policy: EqualityPolicy = field(default_factory=EqualityPolicy)
    language: Language | None = None  # None: use each task's language
    batching: bool = True
    max_consecutive_failures: int = 3

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.max_turns_per_subtask < 0:
            raise ValueError("max_turns_per_subtask must be >= 0")


_TEXT = {
    Language.EN: {
        "none": "none",
        "no_doc": "(custom subtask: no documentation)",
        "process": "Standardized process:",
        "boundary": "Boundary conditions:",
        "batch": "This subtask has a fixed workflow: write its complete action sequence under Action, one action per line.",
        "single": "Output exactly one action under Action.",
        "unspecified": "(not specified)",
    },
    Language.ZH: {
        "none": "无",
        "no_doc": "（自定义子任务：无文档）",
        "process": "标准流程：",
        "boundary": "边界条件：",
        "batch": "该子任务流程固定：请在 Action 下写出完整的动作序列，每行一个动作。",
        "single": "请在 Action 下只输出一个动作。",
        "unspecified": "（未指定）",
    },
}


@lru_cache(maxsize=None)
def load_template(kind: str, language: Language) -> Template:
    path = resources.files("subtaskbench").joinpath(f"data/prompts/{kind}.{Language(language).value}.txt")
    return Template(path.read_text(encoding="utf-8"))


def _placeholders(n: int) -> str:
    names = ["XXX", "YYY", "ZZZ"] + [f"P{i}" for i in range(4, n + 1)]
    return ", ".join(names[:n])


def describe_basis(b: BasisSubtask) -> str:
    head = f"{b.name} ({', '.join(b.parameter_roles)})" if b.arity else b.name
    fmt = f"{b.name} ({_placeholders(b.arity)})" if b.arity else b.name
    desc = b.description.strip() or (b.doc.standardized_process[0] if b.doc.standardized_process else "")
    return f'- {head}: {desc} Output format is "{fmt}".'


def build_plan_prompt(task: Task, library: Sequence[BasisSubtask], language: Language | None = None) -> str:
    if not library:
        raise ValueError("plan prompt needs a non-empty basis library")
    lang = Language(language or task.language)
    return load_template("plan", lang).substitute(
        instruction=task.instruction,
        basis_subtasks="\n".join(describe_basis(b) for b in library),
    )


_NUMBERED = re.compile(r"^\s*(\d+)\s*[.)、]\s*(.+?)\s*$")
_PURPOSE = re.compile(r"^\s*(?:purpose|目的)\s*[:：]\s*(.*)$", re.I)
_STOP = re.compile(r"^\s*(?:stop(?:ping)?(?:\s+condition)?|停止条件)\s*[:：]\s*(.*)$", re.I)
_CALL_TEXT = re.compile(r"^(?P<name>[^(（]+?)\s*[(（](?P<params>.*)[)）]$")


def split_parameters(text: str) -> list[str]:
    """Comma-split that keeps quoted parameters (which may contain commas) whole."""
    params, buf, quote = [], "", None
    for ch in text:
        if quote:
            buf += ch
            if ch == quote:
                quote = None
        elif ch in "'\"" and not buf.strip():
            quote = ch
            buf += ch
        elif ch in ",，":
            params.append(buf)
            buf = ""
        else:
            buf += ch
    params.append(buf)
    out = []
    for p in params:
        p = p.strip()
        if len(p) >= 2 and p[0] == p[-1] and p[0] in "'\"":
            p = p[1:-1].strip()
        if p:
            out.append(p)
    return out


def parse_call_text(text: str) -> tuple[str, tuple[str, ...]]:
    text = text.strip().rstrip(".。").strip()
    m = _CALL_TEXT.match(text)
    if m is None:
        return text, ()
    return m.group("name").strip(), tuple(split_parameters(m.group("params")))


def parse_plan_output(text: str, library: Sequence[BasisSubtask]) -> PlanResult:
    index = library_index(library)
    calls: list[dict] = []
    for line in text.splitlines():
        m = _NUMBERED.match(line)
        if m:
            name, params = parse_call_text(m.group(2))
            calls.append({"name": name, "parameters": params, "purpose": "", "stop_condition": ""})
            continue
        if not calls:
            continue
        if pm := _PURPOSE.match(line):
            calls[-1]["purpose"] = pm.group(1).strip()
        elif sm := _STOP.match(line):
            calls[-1]["stop_condition"] = sm.group(1).strip()
    if not calls:
        raise EmptyPlan("no numbered subtasks in plan output")
    out = []
    for c in calls:
        basis = index.get(" ".join(c["name"].split()).casefold())
        if basis is not None:
            if len(c["parameters"]) != basis.arity:
                raise PlanArityMismatch(basis.name, basis.arity, len(c["parameters"]))
            out.append(SubtaskCall(basis.name, c["parameters"], False, c["purpose"], c["stop_condition"]))
        else:
            out.append(SubtaskCall(c["name"], c["parameters"], True, c["purpose"], c["stop_condition"]))
    return PlanResult(tuple(out), text)


def plan(task: Task, library: Sequence[BasisSubtask], backend: CompletionBackend,
         language: Language | None = None) -> PlanResult:
    """One plan-role backend call; parse errors propagate."""
    prompt = build_plan_prompt(task, library, language)
    response = backend.complete(BackendRequest(Role.PLAN, prompt, {"key": task.id}))
    return parse_plan_output(response, library)


def format_doc(doc: SubtaskDoc | None, language: Language) -> str:
    t = _TEXT[language]
    if doc is None:
        return t["no_doc"]
    lines = [t["process"]]
    lines += [f"{i}. {s}" for i, s in enumerate(doc.standardized_process, 1)]
    if doc.boundary_conditions:
        lines.append(t["boundary"])
        lines += [f"{i}. {s}" for i, s in enumerate(doc.boundary_conditions, 1)]
    return "\n".join(lines)


def build_action_prompt(task: Task, subtask: SubtaskCall, doc: SubtaskDoc | None, obs: ScreenState,
                        memories: Sequence[MemoryEntry], language: Language | None = None,
                        batch_allowed: bool = False) -> str:
    lang = Language(language or task.language)
    t = _TEXT[lang]
    mem = "\n".join(f"- {m.subtask_name}: {m.summary}" for m in memories) or t["none"]
    return load_template("action", lang).substitute(
        instruction=task.instruction,
        subtask=subtask.render(),
        purpose=subtask.purpose or t["unspecified"],
        stop_condition=subtask.stop_condition or t["unspecified"],
        documentation=format_doc(None if subtask.is_custom else doc, lang),
        memories=mem,
        observation=obs.observation_text,
        batching=t["batch"] if batch_allowed else t["single"],
    )


_SECTION = re.compile(
    r"^\s*(observation|thought|actions?|summary|summarization|done|观察|思考|动作|操作|总结|完成)\s*[:：]\s*(.*)$",
    re.I,
)
_SECTION_KEYS = {
    "observation": "observation", "观察": "observation",
    "thought": "thought", "思考": "thought",
    "action": "action", "actions": "action", "动作": "action", "操作": "action",
    "summary": "summary", "summarization": "summary", "总结": "summary",
    "done": "done", "完成": "done",
}
_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


def parse_action_output(text: str, fixed_flow: bool) -> ActionTurn:
    """Parse a labelled Observation/Thought/Action/Summary/Done response.

    Several action lines are accepted only when ``fixed_flow`` is true.
    """
    sections: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines():
        m = _SECTION.match(line)
        if m:
            current = _SECTION_KEYS[m.group(1).lower()]
            sections.setdefault(current, [])
            if m.group(2).strip():
                sections[current].append(m.group(2).strip())
        elif current is not None and line.strip():
            sections[current].append(line.strip())
    raw_actions = [_BULLET.sub("", l).strip().strip("`").strip() for l in sections.get("action", ())]
    raw_actions = [a for a in raw_actions if a]
    if not raw_actions:
        raise NoActionFound("response has no Action section or it is empty")
    if len(raw_actions) > 1 and not fixed_flow:
        raise BatchNotAllowed(f"{len(raw_actions)} actions for a subtask without a fixed workflow")
    actions = tuple(parse_action(a) for a in raw_actions)
    done_text = " ".join(sections.get("done", ())).strip().lower()
    done = done_text.startswith(("yes", "true", "done", "是", "完成")) or any(isinstance(a, Exit) for a in actions)
    summary = " ".join(sections.get("summary", ())).strip()
    if summary.lower() in ("", "none", "n/a", "-", "无"):
        summary = None
    return ActionTurn(
        observation=" ".join(sections.get("observation", ())),
        thought=" ".join(sections.get("thought", ())),
        actions=actions,
        summarization=summary,
        subtask_done=done,
    )


@dataclass
class SubtaskResult:
    state: DeviceState
    actions: list[Action]
    turns: int
    memory: MemoryEntry | None
    done: bool
    # done | exit | turn_limit | max_rounds | parse_error | env_error
    stop_reason: str
    transcripts: list[TranscriptRecord] = field(default_factory=list)


def execute_subtask(state: DeviceState, subtask: SubtaskCall, doc: SubtaskDoc | None, task: Task,
                    memories: Sequence[MemoryEntry], backend: CompletionBackend, config: RunnerConfig,
                    *, fixed_flow: bool = False, subtask_index: int = 0,
                    executed_before: int = 0) -> SubtaskResult:
    """Drive the action agent on one subtask until done, exit, or a limit."""
    batch_allowed = fixed_flow and config.batching and not subtask.is_custom
    lang = Language(config.language or task.language)
    actions: list[Action] = []
    records: list[TranscriptRecord] = []
    memory = None
    note = ""
    failures = 0
    turns = 0
    done = False
    stop_reason = "turn_limit"

    while turns < config.max_turns_per_subtask:
        if executed_before + len(actions) >= config.max_rounds:
            stop_reason = "max_rounds"
            break
        obs = observe(state)
        if note:
            obs = ScreenState(obs.screen_id, obs.app_id, obs.visible_elements,
                              f"{obs.observation_text}\nError from last turn: {note}")
        prompt = build_action_prompt(task, subtask, doc, obs, memories, lang, batch_allowed)
        meta = {
            "key": task.id,
            "subtask_index": subtask_index,
            "turn": turns,
            "executed": len(actions),
            "batch_allowed": batch_allowed,
            "screen_id": state.screen_id,
        }
        response = backend.complete(BackendRequest(Role.ACTION, prompt, meta))
        turns += 1
        try:
            turn = parse_action_output(response, batch_allowed)
        except (ActionOutputError, ActionParseError) as exc:
            records.append(TranscriptRecord("action", prompt, response, turns, subtask_index,
                                            f"{type(exc).__name__}: {exc}", "parse"))
            note = f"could not parse the response ({type(exc).__name__}: {exc})"
            failures += 1
            if failures >= config.max_consecutive_failures:
                stop_reason = "parse_error"
                break
            continue

        error = kind = None
        exited = capped = False
        for a in turn.actions:
            if executed_before + len(actions) >= config.max_rounds:
                capped = True
                break
            try:
                if isinstance(a, ClickTarget):
                    a = Click(*ground(state, a.element_name))
                state, outcome = step(state, a)
            except NoSuchElement as exc:
                error, kind = f"GroundingError: {exc}", "grounding"
                break
            except SimError as exc:
                error, kind = f"{type(exc).__name__}: {exc}", "env"
                break
            actions.append(a)
            if outcome.terminal:
                exited = True
                break
        records.append(TranscriptRecord("action", prompt, response, turns, subtask_index, error, kind))
        if turn.summarization:
            memory = MemoryEntry(subtask.name, turn.summarization)
        if exited:
            done, stop_reason = True, "exit"
            break
        if capped:
            stop_reason = "max_rounds"
            break
        if error:
            note = error
            failures += 1
            if failures >= config.max_consecutive_failures:
                stop_reason = "env_error"
                break
            continue
        note = ""
        failures = 0
        if turn.subtask_done:
            done, stop_reason = True, "done"
            break
    else:
        if executed_before + len(actions) >= config.max_rounds and config.max_turns_per_subtask:
            stop_reason = "max_rounds"
    return SubtaskResult(state, actions, turns, memory, done, stop_reason, records)


def run_episode(task: Task, app_bundles: Mapping[str, AppDefinition], library: Sequence[BasisSubtask],
                backend: CompletionBackend, config: RunnerConfig = RunnerConfig()) -> Episode:
    """Plan once, then execute the subtasks in order.

    Agent-side failures end up in ``terminal_reason``; backend errors
    (missing cassette entries, transport failures) propagate.
    """
    app = app_for_task(app_bundles, task.app_ids)
    state = reset(app)
    index = library_index(library)
    lang = config.language or task.language
    prompt = build_plan_prompt(task, library, lang)
    response = backend.complete(BackendRequest(Role.PLAN, prompt, {"key": task.id}))
    transcripts = [TranscriptRecord("plan", prompt, response, turn=0)]
    try:
        plan_result = parse_plan_output(response, library)
    except PlanParseError as exc:
        transcripts[0] = TranscriptRecord("plan", prompt, response, 0, None, f"{type(exc).__name__}: {exc}", "parse")
        return Episode(task.id, (), tuple(transcripts), 0, 1, False, TerminalReason.PARSE_ERROR)

    executed: list[Action] = []
    memories: list[MemoryEntry] = []
    calls = 0
    completed = 0
    reason = TerminalReason.PLAN_EXHAUSTED
    for i, call in enumerate(plan_result.subtasks):
        basis = None if call.is_custom else index.get(call.name.casefold())
        res = execute_subtask(
            state, call, basis.doc if basis else None, task, memories, backend, config,
            fixed_flow=bool(basis and basis.fixed_flow), subtask_index=i, executed_before=len(executed),
        )
        state = res.state
        executed += res.actions
        calls += res.turns
        transcripts += res.transcripts
        if res.memory is not None:
            memories.append(res.memory)
        completed += res.done
        if res.stop_reason in ("exit", "max_rounds", "parse_error", "env_error"):
            reason = TerminalReason(res.stop_reason)
            break
    success = reason is TerminalReason.EXIT and completed == len(plan_result.subtasks)
    return Episode(
        task_id=task.id,
        executed_actions=tuple(executed),
        transcripts=tuple(transcripts),
        action_agent_calls=calls,
        api_calls_total=1 + calls,
        success=success,
        terminal_reason=reason,
        plan=plan_result.subtasks,
        subtasks_completed=completed,
        memories=tuple(memories),
    )
