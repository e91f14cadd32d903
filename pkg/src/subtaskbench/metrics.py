"""Effectiveness/efficiency metrics, plan-matching scores and failure labels.

Corpus ratios are sums over tasks divided by sums over tasks and are returned
as exact ``Fraction`` values; reports convert them to floats.
"""

from __future__ import annotations

import enum
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

from .core import DEFAULT_POLICY, Action, Episode, EqualityPolicy, SubtaskCall, Task, TerminalReason, actions_equal


class MetricsError(Exception):
    pass


class MissingGolden(MetricsError):
    pass


class DivisionByZero(MetricsError, ZeroDivisionError):
    pass


class EmptyReference(MetricsError):
    pass


class NotAFailure(MetricsError):
    pass


class ErrorCategory(str, enum.Enum):
    HALLUCINATION = "Hallucination"
    POOR_GRAPHICAL_RECOGNITION = "PoorGraphicalRecognition"
    MISINTERPRETATION = "MisinterpretationOfTaskContext"
    EXCEEDS_MAX_ITERATIONS = "ExceedsMaxIterations"
    OUTPUT_PARSE_ERROR = "OutputParseError"


def lcs_intersection(human: Sequence[Action], agent: Sequence[Action],
                     policy: EqualityPolicy = DEFAULT_POLICY) -> int:
    """Length of the longest common subsequence under ``actions_equal``."""
    if not human or not agent:
        return 0
    prev = [0] * (len(agent) + 1)
    for h in human:
        cur = [0]
        for j, a in enumerate(agent, 1):
            if actions_equal(h, a, policy):
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def _pairs(episodes: Sequence[Episode], goldens: Mapping[str, Task]):
    for ep in episodes:
        task = goldens.get(ep.task_id)
        if task is None:
            raise MissingGolden(ep.task_id)
        yield ep, task


def _policy_for(task: Task, policy: EqualityPolicy, registries: Mapping | None) -> EqualityPolicy:
    if registries and task.id in registries:
        return EqualityPolicy(policy.case_fold, policy.trim, policy.ground_aware, registries[task.id])
    return policy


def _div(num: int, den: int, what: str) -> Fraction:
    if den == 0:
        raise DivisionByZero(f"{what}: denominator is zero")
    return Fraction(num, den)


def compute_cr(episodes, goldens, policy: EqualityPolicy = DEFAULT_POLICY, registries=None) -> Fraction:
    """Sum of LCS matches over sum of golden lengths."""
    num = den = 0
    for ep, task in _pairs(episodes, goldens):
        num += lcs_intersection(task.golden_actions, ep.executed_actions, _policy_for(task, policy, registries))
        den += len(task.golden_actions)
    return _div(num, den, "CR")


def compute_sr(episodes: Sequence[Episode]) -> Fraction:
    if not episodes:
        raise DivisionByZero("SR: no episodes")
    return Fraction(sum(ep.success for ep in episodes), len(episodes))


def compute_me(goldens, episodes) -> Fraction:
    num = den = 0
    for ep, task in _pairs(episodes, goldens):
        num += len(task.golden_actions)
        den += ep.action_agent_calls
    return _div(num, den, "ME")


def compute_ae(goldens, episodes) -> Fraction:
    num = den = 0
    for ep, task in _pairs(episodes, goldens):
        num += len(task.golden_actions)
        den += len(ep.executed_actions)
    return _div(num, den, "AE")


def compute_aac(episodes, goldens, policy: EqualityPolicy = DEFAULT_POLICY, registries=None) -> Fraction:
    calls = matched = 0
    for ep, task in _pairs(episodes, goldens):
        calls += ep.api_calls_total
        matched += lcs_intersection(task.golden_actions, ep.executed_actions, _policy_for(task, policy, registries))
    return _div(calls, matched, "AAC")


# --- plan matching ---------------------------------------------------------


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(pairs: Sequence[tuple[Sequence[str], Sequence[str]]], max_n: int = 4) -> float:
    """BLEU over (candidate, reference) token pairs, uniform weights, brevity penalty.

    Orders for which the corpus has no candidate n-grams are left out of the
    geometric mean, so short identical inputs still score 1.0.
    """
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    if not pairs or any(len(r) == 0 for _, r in pairs):
        raise EmptyReference("BLEU needs non-empty references")
    cand_len = sum(len(c) for c, _ in pairs)
    ref_len = sum(len(r) for _, r in pairs)
    if cand_len == 0:
        return 0.0
    log_sum, orders = 0.0, 0
    for n in range(1, max_n + 1):
        matched = total = 0
        for c, r in pairs:
            cc, rc = _ngram_counts(c, n), _ngram_counts(r, n)
            matched += sum(min(cnt, rc[g]) for g, cnt in cc.items())
            total += sum(cc.values())
        if total == 0:
            continue
        if matched == 0:
            return 0.0
        log_sum += math.log(matched / total)
        orders += 1
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_sum / orders)


def compute_bleu(candidate: Sequence[str], reference: Sequence[str], max_n: int = 4) -> float:
    return corpus_bleu([(candidate, reference)], max_n)


def _lcs_len(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def compute_rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """LCS-based F1 (beta = 1)."""
    if not reference:
        raise EmptyReference("ROUGE-L needs a non-empty reference")
    lcs = _lcs_len(candidate, reference)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    return 2 * p * r / (p + r)


def plan_tokens(calls: Sequence[SubtaskCall]) -> list[str]:
    return " ".join(c.render() for c in calls).split()


# --- failure labels --------------------------------------------------------

_WORD = re.compile(r"\w+", re.UNICODE)
_STOPWORDS = frozenset("a an the of to on in for and or with my your me it this that".split())


def content_tokens(text: str) -> set[str]:
    return {t for t in (w.casefold() for w in _WORD.findall(text)) if t not in _STOPWORDS}


def hallucinated_parameters(plan: Sequence[SubtaskCall], instruction: str, vocabulary: set[str]) -> list[str]:
    """Plan parameters sharing no content word with the instruction or app vocabulary."""
    known = content_tokens(instruction) | vocabulary
    bad = []
    for call in plan:
        for p in call.parameters:
            toks = content_tokens(p)
            if toks and not (toks & known):
                bad.append(p)
    return bad


def classify_error(episode: Episode, golden: Task, vocabulary: set[str] | None = None) -> ErrorCategory:
    """Deterministic rule cascade over a failed episode."""
    if episode.success:
        raise NotAFailure(episode.task_id)
    if episode.terminal_reason is TerminalReason.PARSE_ERROR:
        return ErrorCategory.OUTPUT_PARSE_ERROR
    if episode.terminal_reason is TerminalReason.MAX_ROUNDS:
        return ErrorCategory.EXCEEDS_MAX_ITERATIONS
    if any(t.error_kind == "grounding" for t in episode.transcripts):
        return ErrorCategory.POOR_GRAPHICAL_RECOGNITION
    if hallucinated_parameters(episode.plan, golden.instruction, vocabulary or set()):
        return ErrorCategory.HALLUCINATION
    return ErrorCategory.MISINTERPRETATION


# --- report ----------------------------------------------------------------

METRIC_NAMES = ("sr", "cr", "me", "ae", "aac")


@dataclass
class Bucket:
    """Raw sums from which every ratio metric is recomputed."""

    episodes: int = 0
    successes: int = 0
    golden_actions: int = 0
    agent_actions: int = 0
    matched: int = 0
    action_calls: int = 0
    api_calls: int = 0

    def add(self, ep: Episode, task: Task, matched: int):
        self.episodes += 1
        self.successes += ep.success
        self.golden_actions += len(task.golden_actions)
        self.agent_actions += len(ep.executed_actions)
        self.matched += matched
        self.action_calls += ep.action_agent_calls
        self.api_calls += ep.api_calls_total

    def ratios(self) -> dict[str, Fraction | None]:
        def r(n, d):
            return Fraction(n, d) if d else None

        return {
            "sr": r(self.successes, self.episodes),
            "cr": r(self.matched, self.golden_actions),
            "me": r(self.golden_actions, self.action_calls),
            "ae": r(self.golden_actions, self.agent_actions),
            "aac": r(self.api_calls, self.matched),
        }

    def to_dict(self) -> dict:
        out = {k: (float(v) if v is not None else None) for k, v in self.ratios().items()}
        out["counts"] = dict(vars(self))
        return out


@dataclass
class MetricsReport:
    overall: Bucket
    per_difficulty: dict[str, Bucket]
    per_app: dict[str, Bucket]
    subtask_bleu: float | None
    subtask_rouge_l: float | None
    error_histogram: dict[str, int]
    failures: dict[str, str] = field(default_factory=dict)

    def __getattr__(self, name):
        if name in METRIC_NAMES:
            return self.overall.ratios()[name]
        raise AttributeError(name)

    def to_dict(self) -> dict:
        return {
            "overall": self.overall.to_dict(),
            "per_difficulty": {k: b.to_dict() for k, b in self.per_difficulty.items()},
            "per_app": {k: b.to_dict() for k, b in self.per_app.items()},
            "subtask_bleu": self.subtask_bleu,
            "subtask_rouge_l": self.subtask_rouge_l,
            "error_histogram": self.error_histogram,
            "failures": self.failures,
            "notes": [
                "AAC counts LLM calls only (plan + action); element grounding is a registry lookup and costs no API call.",
                "Intersection in CR/AAC is an order-preserving LCS under action equality.",
                "Error categories come from a fixed rule cascade, not human labels.",
            ],
        }

    def to_json(self, header: Mapping | None = None) -> str:
        body = {"header": dict(header or {}), **self.to_dict()}
        return json.dumps(body, indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def table_rows(self) -> list[list[str]]:
        """Rows mirroring SR/CR/ME/AE/AAC by difficulty, plus the overall row."""
        rows = [["split", "n", "SR", "CR", "ME", "AE", "AAC"]]
        buckets = [(d, self.per_difficulty[d]) for d in ("easy", "medium", "hard") if d in self.per_difficulty]
        for name, b in buckets + [("overall", self.overall)]:
            r = b.ratios()
            rows.append([name, str(b.episodes)] + [("-" if r[m] is None else f"{float(r[m]):.2f}") for m in METRIC_NAMES])
        return rows

    def to_csv(self) -> str:
        return "\n".join(",".join(r) for r in self.table_rows()) + "\n"

    def summary_text(self, per_app: bool = False) -> str:
        rows = self.table_rows()
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
        if per_app and self.per_app:
            lines.append("")
            lines.append("per app:")
            for app, b in sorted(self.per_app.items()):
                r = b.ratios()
                vals = "  ".join(f"{m.upper()}={'-' if r[m] is None else f'{float(r[m]):.2f}'}" for m in METRIC_NAMES)
                lines.append(f"  {app:<16} n={b.episodes}  {vals}")
        fmt = lambda v: "-" if v is None else f"{v:.4f}"
        lines.append("")
        lines.append(f"subtask BLEU={fmt(self.subtask_bleu)}  ROUGE-L={fmt(self.subtask_rouge_l)}")
        if self.error_histogram:
            lines.append("errors: " + ", ".join(f"{k}={v}" for k, v in sorted(self.error_histogram.items())))
        return "\n".join(lines) + "\n"


def aggregate_report(episodes: Sequence[Episode], goldens: Mapping[str, Task],
                     policy: EqualityPolicy = DEFAULT_POLICY, registries: Mapping | None = None,
                     vocabularies: Mapping[str, set[str]] | None = None) -> MetricsReport:
    overall = Bucket()
    per_difficulty: dict[str, Bucket] = {}
    per_app: dict[str, Bucket] = {}
    histogram: dict[str, int] = {}
    failures: dict[str, str] = {}
    plan_pairs = []
    for ep, task in sorted(_pairs(episodes, goldens), key=lambda p: p[0].task_id):
        matched = lcs_intersection(task.golden_actions, ep.executed_actions, _policy_for(task, policy, registries))
        overall.add(ep, task, matched)
        per_difficulty.setdefault(task.difficulty.value, Bucket()).add(ep, task, matched)
        per_app.setdefault("+".join(task.app_ids), Bucket()).add(ep, task, matched)
        if not ep.success:
            cat = classify_error(ep, task, (vocabularies or {}).get(task.id))
            histogram[cat.value] = histogram.get(cat.value, 0) + 1
            failures[ep.task_id] = cat.value
        if task.golden_plan and ep.plan:
            plan_pairs.append((plan_tokens(ep.plan), plan_tokens(task.golden_plan)))
    bleu = rouge = None
    if plan_pairs:
        bleu = corpus_bleu(plan_pairs)
        rouge = sum(compute_rouge_l(c, r) for c, r in plan_pairs) / len(plan_pairs)
    return MetricsReport(
        overall=overall,
        per_difficulty=dict(sorted(per_difficulty.items())),
        per_app=dict(sorted(per_app.items())),
        subtask_bleu=bleu,
        subtask_rouge_l=rouge,
        error_histogram=dict(sorted(histogram.items())),
        failures=dict(sorted(failures.items())),
    )
