"""Brute-force reference implementations and random generators used by the tests."""

import math
import random
from itertools import combinations

from subtaskbench.core import (
    Back, Click, ClickTarget, Direction, ElementRegistry, EqualityPolicy, Exit, Scroll, Type, Wait, actions_equal,
)
from subtaskbench.simenv import visible_elements

REGISTRY = ElementRegistry([("Search Bar", (0, 0, 100, 100)), ("Send", (200, 200, 300, 300))])
POLICY = EqualityPolicy(registry=REGISTRY)

ALPHABET = [
    Click(50, 50), Click(250, 250), Click(500, 500),
    ClickTarget("Search Bar"), ClickTarget("send"), ClickTarget("Other"),
    Type("bob"), Type("BOB"), Scroll("down"), Back(), Exit(), Wait(1),
]


def random_actions(rng: random.Random, max_len: int = 8):
    return [rng.choice(ALPHABET) for _ in range(rng.randint(0, max_len))]


def random_gui_action(state, rng):
    """A random action that stays inside the grammar; never EXIT."""
    visible = visible_elements(state)
    roll = rng.random()
    if visible and roll < 0.55:
        return ClickTarget(rng.choice(visible).name)
    if roll < 0.65:
        return Back()
    if roll < 0.75:
        return Scroll(rng.choice(list(Direction)))
    if roll < 0.85 and state.focused_field:
        return Type(rng.choice(["Bob", "hiking", "耳机", "a b"]))
    if roll < 0.92:
        w, h = state.app.device_bounds
        return Click(rng.randrange(w), rng.randrange(h))
    return Wait(rng.randint(1, 3))


def _embeds(seq, target, eq):
    """True when ``seq`` pairs element-wise with a subsequence of ``target`` (greedy is optimal)."""
    j = 0
    for x in seq:
        while j < len(target) and not eq(x, target[j]):
            j += 1
        if j == len(target):
            return False
        j += 1
    return True


def brute_lcs(a, b, eq):
    for r in range(len(a), 0, -1):
        for idx in combinations(range(len(a)), r):
            if _embeds([a[i] for i in idx], b, eq):
                return r
    return 0


def brute_action_lcs(human, agent, policy=POLICY):
    return brute_lcs(human, agent, lambda h, g: actions_equal(h, g, policy))


def _ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def brute_bleu(candidate, reference, max_n=4):
    """Single-pair BLEU with clipped counts by list removal, effective order and brevity penalty."""
    if not candidate:
        return 0.0
    precisions = []
    for n in range(1, max_n + 1):
        cand = _ngrams(candidate, n)
        if not cand:
            continue
        pool = _ngrams(reference, n)
        hit = 0
        for g in cand:
            if g in pool:
                pool.remove(g)
                hit += 1
        precisions.append(hit / len(cand))
    if not precisions or min(precisions) == 0:
        return 0.0
    geo = math.prod(precisions) ** (1 / len(precisions))
    c, r = len(candidate), len(reference)
    return geo * (1.0 if c > r else math.exp(1 - r / c))


def brute_rouge_l(candidate, reference):
    lcs = brute_lcs(candidate, reference, lambda x, y: x == y)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    return 2 * p * r / (p + r)
