"""Deterministic simulated phone driven by declarative app bundles.

An app bundle is a screen graph: every element carries an ``on_click`` rule
and those rules are the environment's transition function. Observations are
plain text renderings of the current screen, standing in for screenshots.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import jsonschema
import yaml

from .core import (
    Action,
    Back,
    Click,
    ClickTarget,
    Direction,
    ElementRegistry,
    Exit,
    ScreenState,
    Scroll,
    Type,
    Wait,
    rect_center,
    rect_contains,
)

PHONE_APP_ID = "phone"
PHONE_HOME = "phone_home"


class SimError(Exception):
    """Base class for environment errors."""


class SchemaError(SimError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path or '<root>'}: {message}")


class DanglingReference(SimError):
    def __init__(self, where: str, missing: str):
        self.where = where
        self.missing = missing
        super().__init__(f"{where}: reference to undeclared {missing}")


class NoSuchElement(SimError):
    pass


class NoFocusedField(SimError):
    pass


class OutOfBounds(SimError):
    pass


class TerminalState(SimError):
    pass


# --- transition rules ------------------------------------------------------


@dataclass(frozen=True)
class GoTo:
    screen_id: str


@dataclass(frozen=True)
class Stay:
    pass


@dataclass(frozen=True)
class SetFocus:
    field_name: str


@dataclass(frozen=True)
class SubmitSearch:
    field_name: str
    result_template: str


@dataclass(frozen=True)
class TypedGuard:
    field_name: str
    equals: str | None = None  # None: any non-empty value


@dataclass(frozen=True)
class VisitedGuard:
    screen_id: str


@dataclass(frozen=True)
class Conditional:
    guard: TypedGuard | VisitedGuard
    then: "TransitionRule"
    otherwise: "TransitionRule" = Stay()


TransitionRule = GoTo | Stay | SetFocus | SubmitSearch | Conditional


@dataclass(frozen=True)
class Element:
    name: str
    bounds: tuple[int, int, int, int]
    on_click: TransitionRule = Stay()


@dataclass(frozen=True)
class Screen:
    screen_id: str
    title: str
    elements: tuple[Element, ...]
    scroll_pages: tuple[tuple[str, ...], ...] | None = None
    text_fields: tuple[tuple[str, str], ...] = ()
    template: bool = False

    def element(self, name: str) -> Element | None:
        key = name.strip().casefold()
        for e in self.elements:
            if e.name.casefold() == key:
                return e
        return None


@dataclass(frozen=True)
class AppDefinition:
    app_id: str
    name: str
    device_bounds: tuple[int, int]
    screens: Mapping[str, Screen]
    home_screen: str

    def registry(self) -> ElementRegistry:
        return ElementRegistry(
            (e.name, e.bounds) for s in self.screens.values() for e in s.elements
        )

    def field_defaults(self) -> dict[str, str]:
        return {f: v for s in self.screens.values() for f, v in s.text_fields}


# --- loading & validation -------------------------------------------------


def _schema() -> dict:
    text = resources.files("subtaskbench").joinpath("data/schema/app_bundle.schema.json").read_text()
    return json.loads(text)


def _json_path(parts: Iterable) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out


def _parse_rule(raw) -> TransitionRule:
    if raw is None or raw == "stay":
        return Stay()
    if "goto" in raw:
        return GoTo(raw["goto"])
    if "focus" in raw:
        return SetFocus(raw["focus"])
    if "search" in raw:
        return SubmitSearch(raw["search"]["field"], raw["search"]["results"])
    g = raw["if"]
    guard = VisitedGuard(g["visited"]) if "visited" in g else TypedGuard(g["typed"], g.get("equals"))
    return Conditional(guard, _parse_rule(raw["then"]), _parse_rule(raw.get("else")))


def _rule_targets(rule: TransitionRule) -> Iterable[str]:
    if isinstance(rule, GoTo):
        yield rule.screen_id
    elif isinstance(rule, SubmitSearch):
        yield rule.result_template
    elif isinstance(rule, Conditional):
        yield from _rule_targets(rule.then)
        yield from _rule_targets(rule.otherwise)


def _rule_fields(rule: TransitionRule) -> Iterable[str]:
    if isinstance(rule, SetFocus):
        yield rule.field_name
    elif isinstance(rule, SubmitSearch):
        yield rule.field_name
    elif isinstance(rule, Conditional):
        if isinstance(rule.guard, TypedGuard):
            yield rule.guard.field_name
        yield from _rule_fields(rule.then)
        yield from _rule_fields(rule.otherwise)


def app_from_dict(data, source: str = "<bundle>") -> AppDefinition:
    if not isinstance(data, dict):
        raise SchemaError("", f"{source}: bundle must be a mapping, got {type(data).__name__}")
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise SchemaError(_json_path(err.absolute_path), err.message)

    width, height = data["device_bounds"]
    screens: dict[str, Screen] = {}
    for si, rs in enumerate(data["screens"]):
        sid = rs["id"]
        if sid in screens:
            raise SchemaError(f"screens[{si}].id", f"duplicate screen id {sid!r}")
        elements = []
        seen = set()
        for ei, re_ in enumerate(rs["elements"]):
            path = f"screens[{si}].elements[{ei}]"
            key = re_["name"].casefold()
            if key in seen:
                raise SchemaError(path + ".name", f"duplicate element name {re_['name']!r}")
            seen.add(key)
            x1, y1, x2, y2 = re_["bounds"]
            if not (0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height):
                raise SchemaError(path + ".bounds", f"degenerate or out-of-device rectangle {re_['bounds']}")
            elements.append(Element(re_["name"], (x1, y1, x2, y2), _parse_rule(re_.get("on_click"))))
        pages = None
        if "scroll_pages" in rs:
            pages = tuple(tuple(p) for p in rs["scroll_pages"])
            for pi, page in enumerate(pages):
                for n in page:
                    if n.casefold() not in seen:
                        raise DanglingReference(f"screens[{si}].scroll_pages[{pi}]", f"element {n!r}")
            paged = {n.casefold() for p in pages for n in p}
            for e in elements:
                if e.name.casefold() not in paged:
                    raise SchemaError(f"screens[{si}].scroll_pages", f"element {e.name!r} is on no page")
        fields_ = tuple((f["name"], f.get("value", "")) for f in rs.get("text_fields", ()))
        screens[sid] = Screen(
            screen_id=sid,
            title=rs.get("title", sid),
            elements=tuple(elements),
            scroll_pages=pages,
            text_fields=fields_,
            template=bool(rs.get("template", False)),
        )

    home = data["home_screen"]
    if home not in screens:
        raise DanglingReference("home_screen", f"screen {home!r}")
    all_fields = {f for s in screens.values() for f, _ in s.text_fields}
    for sid, s in screens.items():
        local = {f for f, _ in s.text_fields}
        for e in s.elements:
            where = f"{sid}/{e.name}"
            for t in _rule_targets(e.on_click):
                if t not in screens:
                    raise DanglingReference(where, f"screen {t!r}")
            for f in _rule_fields(e.on_click):
                if f not in all_fields:
                    raise DanglingReference(where, f"field {f!r}")
            if isinstance(e.on_click, SetFocus) and e.on_click.field_name not in local:
                raise DanglingReference(where, f"field {e.on_click.field_name!r} on this screen")
            if isinstance(e.on_click, SubmitSearch) and not screens[e.on_click.result_template].template:
                raise SchemaError(where, f"search results screen {e.on_click.result_template!r} must be a template")

    app = AppDefinition(
        app_id=data["app_id"],
        name=data.get("name", data["app_id"].title()),
        device_bounds=(width, height),
        screens=screens,
        home_screen=home,
    )
    undeclared = reachable_screens(app) - set(screens)
    if undeclared:  # unreachable given the checks above, kept as a model check
        raise DanglingReference(app.app_id, f"screens {sorted(undeclared)}")
    return app


def load_app_bundle(path: str | Path) -> AppDefinition:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SchemaError("", f"{path}: invalid YAML: {exc}") from None
    if data is None:
        raise SchemaError("", f"{path}: empty bundle")
    return app_from_dict(data, str(path))


def load_bundles(directory: str | Path) -> dict[str, AppDefinition]:
    apps = {}
    for p in sorted(Path(directory).glob("*.yaml")):
        app = load_app_bundle(p)
        if app.app_id in apps:
            raise SchemaError("app_id", f"{p}: duplicate app id {app.app_id!r}")
        apps[app.app_id] = app
    return apps


def reachable_screens(app: AppDefinition) -> set[str]:
    """Breadth-first closure of screen ids over every transition rule."""
    seen = {app.home_screen}
    queue = deque([app.home_screen])
    while queue:
        sid = queue.popleft()
        screen = app.screens.get(sid)
        if screen is None:
            continue
        for e in screen.elements:
            for t in _rule_targets(e.on_click):
                if t not in seen:
                    seen.add(t)
                    queue.append(t)
    return seen


def compose_phone(apps: Sequence[AppDefinition]) -> AppDefinition:
    """Merge several apps under a launcher screen whose icons open each app.

    Screen ids and field names are namespaced as ``<app_id>/<name>``.
    """
    bounds = {a.device_bounds for a in apps}
    if len(bounds) != 1:
        raise SchemaError("device_bounds", "composed apps must share device bounds")
    (width, height), = bounds

    def ns(app_id, name):
        return f"{app_id}/{name}"

    def rename(rule, app_id):
        if isinstance(rule, GoTo):
            return GoTo(ns(app_id, rule.screen_id))
        if isinstance(rule, SetFocus):
            return SetFocus(ns(app_id, rule.field_name))
        if isinstance(rule, SubmitSearch):
            return SubmitSearch(ns(app_id, rule.field_name), ns(app_id, rule.result_template))
        if isinstance(rule, Conditional):
            g = rule.guard
            g = (
                TypedGuard(ns(app_id, g.field_name), g.equals)
                if isinstance(g, TypedGuard)
                else VisitedGuard(ns(app_id, g.screen_id))
            )
            return Conditional(g, rename(rule.then, app_id), rename(rule.otherwise, app_id))
        return rule

    screens: dict[str, Screen] = {}
    icons = []
    cols, cell_w, cell_h = 4, width // 4, 300
    for i, app in enumerate(apps):
        x1 = (i % cols) * cell_w
        y1 = 300 + (i // cols) * cell_h
        icons.append(Element(app.name, (x1, y1, x1 + cell_w, y1 + cell_h - 20), GoTo(ns(app.app_id, app.home_screen))))
        for sid, s in app.screens.items():
            screens[ns(app.app_id, sid)] = replace(
                s,
                screen_id=ns(app.app_id, sid),
                elements=tuple(replace(e, on_click=rename(e.on_click, app.app_id)) for e in s.elements),
                text_fields=tuple((ns(app.app_id, f), v) for f, v in s.text_fields),
            )
    screens[PHONE_HOME] = Screen(PHONE_HOME, "Home", tuple(icons))
    return AppDefinition(PHONE_APP_ID, "Phone", (width, height), screens, PHONE_HOME)


def app_for_task(apps: Mapping[str, AppDefinition], app_ids: Sequence[str]) -> AppDefinition:
    missing = [a for a in app_ids if a not in apps]
    if missing:
        raise DanglingReference("task", f"app bundle(s) {missing}")
    if len(app_ids) == 1:
        return apps[app_ids[0]]
    return compose_phone([apps[a] for a in app_ids])


# --- device state ----------------------------------------------------------


@dataclass(frozen=True)
class StepOutcome:
    kind: str
    terminal: bool = False
    message: str = ""


@dataclass(frozen=True)
class DeviceState:
    app: AppDefinition = field(repr=False, compare=False)
    screen_id: str
    page: int = 0
    back_stack: tuple[str, ...] = ()
    focused_field: str | None = None
    typed_values: tuple[tuple[str, str], ...] = ()
    clock_seconds: int = 0
    visited: tuple[str, ...] = ()
    terminal: bool = False

    @property
    def current(self) -> ScreenState:
        return observe(self)

    def typed(self) -> dict[str, str]:
        return dict(self.typed_values)

    def to_dict(self) -> dict:
        return {
            "app_id": self.app.app_id,
            "screen_id": self.screen_id,
            "page": self.page,
            "back_stack": list(self.back_stack),
            "focused_field": self.focused_field,
            "typed_values": dict(self.typed_values),
            "clock_seconds": self.clock_seconds,
            "visited": list(self.visited),
            "terminal": self.terminal,
        }


def split_instance(screen_id: str) -> tuple[str, str | None]:
    """``results?q=bob`` -> (``results``, ``bob``); plain ids have no query."""
    base, sep, query = screen_id.partition("?q=")
    return base, (query if sep else None)


def _screen(state: DeviceState) -> tuple[Screen, str | None]:
    base, query = split_instance(state.screen_id)
    return state.app.screens[base], query


def _fill(template: str, query: str | None) -> str:
    return template.replace("{query}", query) if query is not None else template


def visible_elements(state: DeviceState) -> list[Element]:
    screen, query = _screen(state)
    elements = screen.elements
    if screen.scroll_pages is not None:
        page = {n.casefold() for n in screen.scroll_pages[state.page]}
        elements = tuple(e for e in elements if e.name.casefold() in page)
    return [replace(e, name=_fill(e.name, query)) for e in elements]


def reset(app: AppDefinition) -> DeviceState:
    return DeviceState(app=app, screen_id=app.home_screen, visited=(app.home_screen,))


def _sorted_tuple(items: Iterable) -> tuple:
    return tuple(sorted(set(items)))


def _go(state: DeviceState, target: str) -> tuple[DeviceState, StepOutcome]:
    if target == state.screen_id:
        return state, StepOutcome("stayed")
    new = replace(
        state,
        screen_id=target,
        page=0,
        back_stack=state.back_stack + (state.screen_id,),
        focused_field=None,
        visited=_sorted_tuple(state.visited + (split_instance(target)[0],)),
    )
    return new, StepOutcome("moved", message=f"-> {target}")


def _apply(state: DeviceState, rule: TransitionRule) -> tuple[DeviceState, StepOutcome]:
    if isinstance(rule, Stay):
        return state, StepOutcome("stayed")
    if isinstance(rule, GoTo):
        return _go(state, rule.screen_id)
    if isinstance(rule, SetFocus):
        return replace(state, focused_field=rule.field_name), StepOutcome("focused", message=rule.field_name)
    if isinstance(rule, SubmitSearch):
        query = " ".join(_field_value(state, rule.field_name).split())
        if not query:
            return state, StepOutcome("stayed", message="empty search")
        return _go(state, f"{rule.result_template}?q={query}")
    if isinstance(rule, Conditional):
        g = rule.guard
        if isinstance(g, VisitedGuard):
            ok = g.screen_id in state.visited
        else:
            value = _field_value(state, g.field_name).strip()
            ok = bool(value) if g.equals is None else value.casefold() == g.equals.strip().casefold()
        return _apply(state, rule.then if ok else rule.otherwise)
    raise TypeError(f"unknown rule {rule!r}")


def _field_value(state: DeviceState, name: str) -> str:
    typed = state.typed()
    if name in typed:
        return typed[name]
    return state.app.field_defaults().get(name, "")


def ground(state: DeviceState, element_name: str) -> tuple[int, int]:
    """Center of a visible element on the current screen (case-insensitive name)."""
    key = " ".join(element_name.split()).casefold()
    for e in visible_elements(state):
        if e.name.casefold() == key:
            return rect_center(e.bounds)
    raise NoSuchElement(f"no visible element {element_name!r} on {state.screen_id}")


def step(state: DeviceState, action: Action) -> tuple[DeviceState, StepOutcome]:
    """Apply one action. Never mutates ``state``."""
    if state.terminal:
        raise TerminalState("episode already exited")
    if isinstance(action, ClickTarget):
        action = Click(*ground(state, action.element_name))
    if isinstance(action, Click):
        width, height = state.app.device_bounds
        if not (0 <= action.x < width and 0 <= action.y < height):
            raise OutOfBounds(f"({action.x}, {action.y}) outside {width}x{height}")
        for e in visible_elements(state):
            if rect_contains(e.bounds, action.x, action.y):
                return _apply(state, e.on_click)
        return state, StepOutcome("stayed", message="no element at point")
    if isinstance(action, Type):
        if state.focused_field is None:
            raise NoFocusedField("TYPE with no focused text field")
        typed = state.typed()
        typed[state.focused_field] = action.text
        return replace(state, typed_values=tuple(sorted(typed.items()))), StepOutcome("typed")
    if isinstance(action, Scroll):
        screen, _ = _screen(state)
        if screen.scroll_pages is None or action.direction in (Direction.LEFT, Direction.RIGHT):
            return state, StepOutcome("stayed")
        last = len(screen.scroll_pages) - 1
        page = min(state.page + 1, last) if action.direction is Direction.DOWN else max(state.page - 1, 0)
        return replace(state, page=page), StepOutcome("scrolled" if page != state.page else "stayed")
    if isinstance(action, Wait):
        return replace(state, clock_seconds=state.clock_seconds + action.seconds), StepOutcome("waited")
    if isinstance(action, Back):
        if not state.back_stack:
            return state, StepOutcome("stayed", message="already home")
        return (
            replace(
                state,
                screen_id=state.back_stack[-1],
                back_stack=state.back_stack[:-1],
                page=0,
                focused_field=None,
            ),
            StepOutcome("back"),
        )
    if isinstance(action, Exit):
        return replace(state, terminal=True), StepOutcome("exit", terminal=True)
    raise TypeError(f"unknown action {action!r}")


def observe(state: DeviceState) -> ScreenState:
    screen, query = _screen(state)
    base, _ = split_instance(state.screen_id)
    app_id = base.split("/", 1)[0] if "/" in base else state.app.app_id
    visible = visible_elements(state)
    lines = [f"Screen: {_fill(screen.title, query)} [{state.screen_id}]", "Visible elements:"]
    lines += [f"- {e.name}" for e in visible] or ["- (none)"]
    if screen.text_fields:
        lines.append("Text fields:")
        for name, _default in screen.text_fields:
            mark = " (focused)" if name == state.focused_field else ""
            lines.append(f'- {name} = "{_field_value(state, name)}"{mark}')
    if screen.scroll_pages is not None:
        lines.append(f"Page {state.page + 1} of {len(screen.scroll_pages)}")
    if state.terminal:
        lines.append("Task exited.")
    return ScreenState(
        screen_id=state.screen_id,
        app_id=app_id,
        visible_elements=tuple(e.name for e in visible),
        observation_text="\n".join(lines),
    )


def replay(app: AppDefinition, actions: Sequence[Action]) -> DeviceState:
    """Run ``actions`` from reset; raises on the first environment error."""
    state = reset(app)
    for a in actions:
        state, _ = step(state, a)
    return state
