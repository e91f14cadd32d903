import pytest
from hypothesis import given, strategies as st

from subtaskbench.core import (
    ArityMismatch,
    Back,
    BadAttribute,
    BasisSubtask,
    Click,
    ClickTarget,
    Difficulty,
    Direction,
    ElementRegistry,
    Episode,
    EqualityPolicy,
    Exit,
    History,
    MemoryEntry,
    ScreenState,
    Scroll,
    SubtaskCall,
    SubtaskDoc,
    Task,
    TerminalReason,
    TranscriptRecord,
    Type,
    UnknownActionName,
    Wait,
    actions_equal,
    library_index,
    parse_action,
    rect_center,
    render_action,
)


@pytest.mark.parametrize("text,expected", [
    ("CLICK(200, 300)", Click(200, 300)),
    ("click(200,300)", Click(200, 300)),
    ("EXIT", Exit()),
    ("exit()", Exit()),
    ("BACK", Back()),
    ("SCROLL(up)", Scroll(Direction.UP)),
    ("Scroll(DOWN)", Scroll(Direction.DOWN)),
    ("CLICK(Search Bar)", ClickTarget("Search Bar")),
    ("CLICK(Video: hiking)", ClickTarget("Video: hiking")),
    ("TYPE(Thanks, see you soon)", Type("Thanks, see you soon")),
    ("WAIT(2)", Wait(2)),
])
def test_parse_action(text, expected):
    assert parse_action(text) == expected


@pytest.mark.parametrize("text,err", [
    ("CLICK(200)", ArityMismatch),
    ("CLICK(1, 2, 3)", ArityMismatch),
    ("CLICK(200, abc)", BadAttribute),
    ("CLICK(1.5, 2)", BadAttribute),
    ("SCROLL(sideways)", BadAttribute),
    ("WAIT(0)", BadAttribute),
    ("WAIT(-3)", BadAttribute),
    ("WAIT(soon)", BadAttribute),
    ("TAP(1, 2)", UnknownActionName),
    ("SWIPE", UnknownActionName),
    ("EXIT(now)", ArityMismatch),
    ("TYPE()", ArityMismatch),
])
def test_parse_action_errors(text, err):
    with pytest.raises(err):
        parse_action(text)


def test_render_examples():
    assert render_action(Click(200, 300)) == "CLICK(200, 300)"
    assert render_action(Wait(2)) == "WAIT(2)"
    assert render_action(ClickTarget("Search Bar")) == "CLICK(Search Bar)"
    assert render_action(Scroll(Direction.LEFT)) == "SCROLL(left)"


def test_construction_invariants():
    with pytest.raises(ValueError):
        Wait(0)
    with pytest.raises(ValueError):
        ClickTarget("  ")
    with pytest.raises(ValueError):
        Click(True, 3)
    with pytest.raises(ValueError):
        Type("two\nlines")


_name = st.text(alphabet="abcdefghijklmnopqrstuvwxyzABCDEFGH :'-", min_size=1, max_size=20).filter(
    lambda s: s.strip() and not any(p.strip().lstrip("+-").replace(".", "", 1).isdigit() for p in s.split(","))
)
_actions = st.one_of(
    st.builds(Click, st.integers(0, 5000), st.integers(0, 5000)),
    st.builds(ClickTarget, _name.map(str.strip)),
    st.builds(Scroll, st.sampled_from(list(Direction))),
    st.builds(Type, st.text(alphabet="abc xyz,.!?耳机", min_size=1, max_size=20).filter(str.strip).map(str.strip)),
    st.just(Back()),
    st.just(Exit()),
    st.builds(Wait, st.integers(1, 1000)),
)


@given(_actions)
def test_round_trip(a):
    assert parse_action(render_action(a)) == a


@given(st.text(alphabet="ABCDEFGHIJKLMNOPQRSTUVWXYZ_", min_size=1, max_size=8))
def test_unknown_heads_rejected(head):
    if head.upper() in {"CLICK", "SCROLL", "TYPE", "BACK", "EXIT", "WAIT"}:
        return
    with pytest.raises(UnknownActionName):
        parse_action(f"{head}(1, 2)")


def test_equality_examples():
    assert actions_equal(Type("Bob"), Type("bob"))
    assert not actions_equal(Type("Bob"), Type("bob"), EqualityPolicy(case_fold=False))
    assert not actions_equal(Scroll(Direction.UP), Scroll(Direction.DOWN))
    reg = ElementRegistry([("Search Bar", (100, 250, 300, 350))])
    pol = EqualityPolicy(registry=reg)
    assert rect_center((100, 250, 300, 350)) == (200, 300)
    assert actions_equal(Click(200, 300), ClickTarget("Search Bar"), pol)
    assert actions_equal(ClickTarget("search bar"), Click(200, 300), pol)
    assert not actions_equal(Click(200, 300), ClickTarget("Search Bar"))  # no registry
    assert not actions_equal(Click(200, 300), ClickTarget("Search Bar"), EqualityPolicy(ground_aware=False, registry=reg))
    assert not actions_equal(Click(300, 300), ClickTarget("Search Bar"), pol)  # right edge is exclusive


def test_registry_templates():
    reg = ElementRegistry([("Email from {query}", (60, 400, 1020, 520))])
    assert reg.contains("Email from Bob", 540, 460)
    assert not reg.contains("Email from", 540, 460)
    assert not reg.contains("Inbox", 540, 460)


_click_free = st.one_of(
    st.builds(ClickTarget, st.sampled_from(["a", "A", "b"])),
    st.builds(Scroll, st.sampled_from(list(Direction))),
    st.builds(Type, st.sampled_from(["x", "X", "y"])),
    st.just(Back()), st.just(Exit()), st.builds(Wait, st.integers(1, 3)),
)


@given(_click_free, _click_free, _click_free)
def test_equality_is_equivalence_on_click_free(a, b, c):
    assert actions_equal(a, a)
    assert actions_equal(a, b) == actions_equal(b, a)
    if actions_equal(a, b) and actions_equal(b, c):
        assert actions_equal(a, c)


@given(st.integers(0, 400), st.integers(0, 400), st.sampled_from(["Search Bar", "Send", "Other"]))
def test_ground_aware_equality_symmetric(x, y, name):
    pol = EqualityPolicy(registry=ElementRegistry([("Search Bar", (100, 250, 300, 350)), ("Send", (0, 0, 50, 50))]))
    assert actions_equal(Click(x, y), ClickTarget(name), pol) == actions_equal(ClickTarget(name), Click(x, y), pol)


def test_history_appends():
    s = ScreenState("inbox", "mail", ("Search Bar",), "Screen: Inbox")
    h0 = History()
    h1 = h0.append(s, Back())
    assert len(h0) == 0 and len(h1) == 1
    assert h1.entries[0] == (s, Back())


def test_task_invariants():
    with pytest.raises(ValueError):
        Task("t", "q", "mail", ())
    with pytest.raises(ValueError):
        Task("t", "q", "mail", (Back(),))
    plan = (SubtaskCall("A"),)
    with pytest.raises(ValueError):
        Task("t", "q", "mail", (Back(), Exit()), golden_plan=plan, plan_actions=((Back(),),))
    t = Task("t", "q", "mail", (Back(), Exit()), difficulty=Difficulty.HARD, extra_app_ids=("notes",))
    assert t.app_ids == ("mail", "notes")


def test_subtask_call_render():
    assert SubtaskCall("Back Home").render() == "Back Home"
    assert SubtaskCall("Share Content", ("friend", "Sam")).render() == "Share Content (friend, Sam)"
    assert SubtaskCall("Send Text Message", ("Hi, Bob",)).render() == 'Send Text Message ("Hi, Bob")'


def test_library_and_memory_invariants():
    doc = SubtaskDoc(("step",))
    with pytest.raises(ValueError):
        BasisSubtask("X", 2, ("a",), doc)
    lib = [BasisSubtask("Search Item", 1, ("term",), doc), BasisSubtask("search item", 0, (), doc)]
    with pytest.raises(ValueError):
        library_index(lib)
    with pytest.raises(ValueError):
        MemoryEntry("X", "   ")


def test_episode_round_trip():
    ep = Episode(
        task_id="t",
        executed_actions=(Click(1, 2), Type("hi"), Exit()),
        transcripts=(TranscriptRecord("plan", "p", "r", 0), TranscriptRecord("action", "p2", "r2", 1, 0, "E", "parse")),
        action_agent_calls=2,
        api_calls_total=3,
        success=True,
        terminal_reason=TerminalReason.EXIT,
        plan=(SubtaskCall("A", ("x",), True, "why", "when"),),
        subtasks_completed=1,
        memories=(MemoryEntry("A", "noted"),),
    )
    assert Episode.from_dict(ep.to_dict()) == ep
    with pytest.raises(ValueError):
        Episode("t", (), (), 3, 2, False, TerminalReason.EXIT)
