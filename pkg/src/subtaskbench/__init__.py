"""Harness for basis-subtask planning on a simulated mobile device."""

from .core import (
    Action,
    Back,
    BasisSubtask,
    Click,
    ClickTarget,
    Episode,
    Exit,
    Scroll,
    SubtaskCall,
    Task,
    TerminalReason,
    Type,
    Wait,
    actions_equal,
    parse_action,
    render_action,
)

__version__ = "0.1.0"
