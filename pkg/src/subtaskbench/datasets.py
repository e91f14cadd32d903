"""YAML/JSON readers and writers for tasks, corpora, libraries and episode archives."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import yaml

from .agents import parse_call_text
from .core import (
    BasisSubtask,
    Difficulty,
    Episode,
    Language,
    SubtaskCall,
    SubtaskDoc,
    Task,
    parse_action,
)
from .miner import AnnotatedStep, TrajectoryRecord


class DatasetError(ValueError):
    pass


def _read_yaml(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise DatasetError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise DatasetError(f"{path}: expected a mapping at top level")
    return data


def _dump_yaml(data) -> str:
    return yaml.safe_dump(data, sort_keys=False, allow_unicode=True, width=100)


# --- tasks -----------------------------------------------------------------


def task_from_dict(raw: Mapping) -> Task:
    """Build a task. Golden actions come from ``golden_plan`` slices when present."""
    tid = raw.get("id")
    if not tid:
        raise DatasetError("task without id")
    try:
        plan = plan_actions = summaries = None
        if raw.get("golden_plan"):
            calls, slices, sums = [], [], []
            for step in raw["golden_plan"]:
                name, params = parse_call_text(step["call"])
                calls.append(SubtaskCall(name, params, bool(step.get("custom", False)),
                                         step.get("purpose", ""), step.get("stop", "")))
                slices.append(tuple(parse_action(a) for a in step.get("actions", ())))
                sums.append(step.get("summary", ""))
            plan, plan_actions, summaries = tuple(calls), tuple(slices), tuple(sums)
            golden = tuple(a for s in slices for a in s)
            if "golden_actions" in raw:
                listed = tuple(parse_action(a) for a in raw["golden_actions"])
                if listed != golden:
                    raise DatasetError(f"task {tid}: golden_actions disagree with golden_plan slices")
        else:
            golden = tuple(parse_action(a) for a in raw.get("golden_actions", ()))
        return Task(
            id=str(tid),
            instruction=raw["instruction"],
            app_id=raw["app"],
            golden_actions=golden,
            language=Language(raw.get("language", "en")),
            difficulty=Difficulty(raw.get("difficulty", "easy")),
            golden_plan=plan,
            plan_actions=plan_actions,
            plan_summaries=summaries,
            extra_app_ids=tuple(raw.get("extra_apps", ())),
        )
    except DatasetError:
        raise
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"task {tid}: {type(exc).__name__}: {exc}") from None


def load_tasks(path: str | Path) -> dict[str, Task]:
    tasks = {}
    for raw in _read_yaml(path).get("tasks") or ():
        t = task_from_dict(raw)
        if t.id in tasks:
            raise DatasetError(f"{path}: duplicate task id {t.id!r}")
        tasks[t.id] = t
    return tasks


# --- corpus ----------------------------------------------------------------


def load_corpus(path: str | Path) -> list[TrajectoryRecord]:
    records = []
    for i, raw in enumerate(_read_yaml(path).get("records") or ()):
        steps = []
        for s in raw.get("steps", ()):
            if isinstance(s, str):
                steps.append(AnnotatedStep(parse_action(s)))
            else:
                steps.append(AnnotatedStep(parse_action(s["action"]), s.get("thought", "")))
        records.append(TrajectoryRecord(str(raw.get("id", i)), raw["instruction"], tuple(steps), raw.get("app", "")))
    return records


# --- library ---------------------------------------------------------------


def library_to_dict(library: Sequence[BasisSubtask]) -> dict:
    return {
        "subtasks": [
            {
                "name": b.name,
                "parameters": list(b.parameter_roles),
                "fixed_flow": b.fixed_flow,
                "frequency": b.frequency,
                "description": b.description,
                "process": list(b.doc.standardized_process),
                "boundary": list(b.doc.boundary_conditions),
            }
            for b in library
        ]
    }


def dump_library(library: Sequence[BasisSubtask]) -> str:
    return _dump_yaml(library_to_dict(library))


def save_library(library: Sequence[BasisSubtask], path: str | Path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dump_library(library), encoding="utf-8")


def load_library(path: str | Path) -> list[BasisSubtask]:
    out = []
    for raw in _read_yaml(path).get("subtasks") or ():
        try:
            roles = tuple(raw.get("parameters", ()))
            out.append(BasisSubtask(
                name=raw["name"],
                arity=len(roles),
                parameter_roles=roles,
                doc=SubtaskDoc(tuple(raw.get("process", ())), tuple(raw.get("boundary", ()))),
                fixed_flow=bool(raw.get("fixed_flow", False)),
                frequency=int(raw.get("frequency", 0)),
                description=raw.get("description", ""),
            ))
        except (KeyError, ValueError) as exc:
            raise DatasetError(f"{path}: bad subtask entry: {exc}") from None
    if not out:
        raise DatasetError(f"{path}: library has no subtasks")
    return out


# --- episode archives ------------------------------------------------------


def episode_json(ep: Episode) -> str:
    return json.dumps(ep.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_episode(ep: Episode, directory: str | Path) -> Path:
    path = Path(directory) / f"{ep.task_id}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(episode_json(ep), encoding="utf-8")
    return path


def read_episodes(directory: str | Path) -> list[Episode]:
    eps = []
    for p in sorted(Path(directory).glob("*.json")):
        try:
            eps.append(Episode.from_dict(json.loads(p.read_text(encoding="utf-8"))))
        except (KeyError, ValueError) as exc:
            raise DatasetError(f"{p}: {type(exc).__name__}: {exc}") from None
    return eps


def write_episodes(eps: Iterable[Episode], directory: str | Path) -> list[Path]:
    return [write_episode(e, directory) for e in eps]
