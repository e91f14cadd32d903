"""Mine a basis-subtask library from annotated demonstrations.

Records are kept as demonstrations, grouped by their leading verb (merged
through shared synsets), documented by a summarizing model and cut to the
most frequent groups."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import yaml

from .backends import BackendRequest, CompletionBackend, Role
from .core import Action, BasisSubtask, SubtaskDoc, render_action

log = logging.getLogger(__name__)

SUMMARY_PROMPT = (
    "Please summarize the following {action_sequence} into a standardized process "
    "and specify boundary conditions."
)


class MinerError(Exception):
    pass


class EmptyCorpus(MinerError):
    pass


class NoVerbFound(MinerError):
    pass


class UnparseableSummary(MinerError):
    pass


class MissingDoc(MinerError):
    pass


@dataclass(frozen=True)
class AnnotatedStep:
    action: Action
    thought: str = ""


@dataclass(frozen=True)
class TrajectoryRecord:
    record_id: str
    instruction: str
    steps: tuple[AnnotatedStep, ...]
    app_id: str = ""


@dataclass(frozen=True)
class DemoSegment:
    instruction: str
    steps: tuple[AnnotatedStep, ...]
    record_id: str = ""


class VerbLexicon:
    """Set of known verbs, loaded from a one-verb-per-line file."""

    def __init__(self, verbs: Iterable[str]):
        self.verbs = frozenset(v.strip().lower() for v in verbs if v.strip())

    def __contains__(self, word: str) -> bool:
        return word in self.verbs

    @classmethod
    def load(cls, path: str | Path) -> "VerbLexicon":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(l.split("#", 1)[0] for l in lines)


@dataclass(frozen=True)
class SynonymTable:
    """word -> set of synset ids. File format: ``word<TAB>synset synset ...``."""

    entries: Mapping[str, frozenset[str]]

    def __post_init__(self):
        for w, s in self.entries.items():
            if not s:
                raise ValueError(f"word {w!r} has no synsets")

    @classmethod
    def load(cls, path: str | Path) -> "SynonymTable":
        entries = {}
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            word, *synsets = line.split()
            if not synsets:
                raise ValueError(f"{path}:{n}: {word!r} has no synsets")
            entries[word.lower()] = frozenset(synsets)
        return cls(entries)

    def synsets(self, word: str) -> frozenset[str]:
        return self.entries.get(word, frozenset())


@dataclass
class VerbCluster:
    canonical_verb: str
    members: frozenset[str]
    segments: list[DemoSegment] = field(default_factory=list)
    frequency: int = 0


def segment_corpus(records: Sequence[TrajectoryRecord], k: int = 3) -> list[DemoSegment]:
    """Keep records with at least ``k`` steps as single-step demonstrations."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not records:
        raise EmptyCorpus("no trajectory records")
    return [DemoSegment(r.instruction, r.steps, r.record_id) for r in records if len(r.steps) >= k]


_TOKEN = re.compile(r"[A-Za-z]+(?:'[A-Za-z]+)?")


def extract_verb(instruction: str, lexicon: VerbLexicon, fallback: bool = True) -> str:
    if not instruction.strip():
        raise NoVerbFound("empty instruction")
    tokens = [t.lower() for t in _TOKEN.findall(instruction)]
    for t in tokens:
        if t in lexicon:
            return t
    if fallback and tokens:
        return tokens[0]
    raise NoVerbFound(f"no verb in {instruction!r}")


def cluster_synonyms(verbs: Sequence[str], table: SynonymTable,
                     segments: Sequence[DemoSegment] | None = None) -> list[VerbCluster]:
    """Connected components of the shared-synset graph over distinct verbs.

    ``verbs`` may repeat; each occurrence counts once toward frequency and,
    when ``segments`` is given (parallel to ``verbs``), contributes that segment.
    """
    if segments is not None and len(segments) != len(verbs):
        raise ValueError("segments must parallel verbs")
    counts: dict[str, int] = {}
    for v in verbs:
        counts[v] = counts.get(v, 0) + 1
    distinct = sorted(counts)

    parent = {v: v for v in distinct}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    by_synset: dict[str, str] = {}
    for v in distinct:
        for s in sorted(table.synsets(v)):
            if s in by_synset:
                a, b = find(v), find(by_synset[s])
                if a != b:
                    parent[max(a, b)] = min(a, b)
            else:
                by_synset[s] = v

    groups: dict[str, list[str]] = {}
    for v in distinct:
        groups.setdefault(find(v), []).append(v)

    clusters = []
    for members in groups.values():
        canonical = min(members, key=lambda m: (-counts[m], m))
        member_set = frozenset(members)
        segs = [s for v, s in zip(verbs, segments) if v in member_set] if segments is not None else []
        clusters.append(VerbCluster(canonical, member_set, segs, sum(counts[m] for m in members)))
    clusters.sort(key=lambda c: c.canonical_verb)
    return clusters


def render_sequences(cluster: VerbCluster) -> str:
    blocks = []
    for i, seg in enumerate(cluster.segments, 1):
        steps = "\n".join(
            f"  {j}. {render_action(s.action)}" + (f"  # {s.thought}" if s.thought else "")
            for j, s in enumerate(seg.steps, 1)
        )
        blocks.append(f"Sequence {i}: {seg.instruction}\n{steps}")
    return "\n".join(blocks)


def summary_prompt(cluster: VerbCluster) -> str:
    return SUMMARY_PROMPT.format(
        action_sequence="action sequences:\n\n" + render_sequences(cluster) + "\n\n"
    )


_ITEM = re.compile(r"(?:^|(?<=\s))(\d+)[.)]\s+")
_PROCESS_HEAD = re.compile(r"standardi[sz]ed process\s*[:：]?", re.I)
_BOUNDARY_HEAD = re.compile(r"boundary conditions?\s*[:：]?", re.I)


def _numbered_items(text: str) -> list[str]:
    parts = _ITEM.split(text)
    # parts = [prefix, num, body, num, body, ...]
    items = [" ".join(parts[i].split()) for i in range(2, len(parts), 2)]
    return [i for i in items if i]


def parse_summary(text: str) -> SubtaskDoc:
    text = text.replace("**", "")
    b = _BOUNDARY_HEAD.search(text)
    head, boundary = (text[: b.start()], text[b.end():]) if b else (text, "")
    p = _PROCESS_HEAD.search(head)
    process_text = head[p.end():] if p else head
    process = _numbered_items(process_text)
    if not process:
        raise UnparseableSummary("summary has no numbered process steps")
    return SubtaskDoc(tuple(process), tuple(_numbered_items(boundary)))


def summarize_cluster(cluster: VerbCluster, backend: CompletionBackend) -> SubtaskDoc:
    if not cluster.segments:
        raise ValueError(f"cluster {cluster.canonical_verb!r} has no segments")
    req = BackendRequest(Role.SUMMARIZE, summary_prompt(cluster), {"key": cluster.canonical_verb})
    return parse_summary(backend.complete(req))


def filter_top_k(clusters: Sequence[VerbCluster], k: int = 10) -> list[VerbCluster]:
    if k < 1:
        raise ValueError("k must be >= 1")
    return sorted(clusters, key=lambda c: (-c.frequency, c.canonical_verb))[:k]


@dataclass(frozen=True)
class OverlayEntry:
    name: str
    parameter_roles: tuple[str, ...] = ("parameter",)
    fixed_flow: bool = False
    description: str = ""


@dataclass(frozen=True)
class LibraryOverlay:
    """Human review of mined clusters: naming, parameters, and dropped verbs."""

    entries: Mapping[str, OverlayEntry] = field(default_factory=dict)
    drop: frozenset[str] = frozenset()

    @classmethod
    def load(cls, path: str | Path) -> "LibraryOverlay":
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        entries = {}
        for verb, raw in (data.get("subtasks") or {}).items():
            entries[verb.lower()] = OverlayEntry(
                name=raw["name"],
                parameter_roles=tuple(raw.get("parameters", ("parameter",))),
                fixed_flow=bool(raw.get("fixed_flow", False)),
                description=raw.get("description", ""),
            )
        return cls(entries, frozenset(v.lower() for v in data.get("drop", ())))

    def lookup(self, cluster: VerbCluster) -> OverlayEntry | None:
        if cluster.canonical_verb in self.entries:
            return self.entries[cluster.canonical_verb]
        for m in sorted(cluster.members):
            if m in self.entries:
                return self.entries[m]
        return None


def build_library(clusters: Sequence[VerbCluster], docs: Mapping[str, SubtaskDoc],
                  overlay: LibraryOverlay = LibraryOverlay()) -> list[BasisSubtask]:
    out = []
    for c in clusters:
        doc = docs.get(c.canonical_verb)
        if doc is None:
            raise MissingDoc(c.canonical_verb)
        entry = overlay.lookup(c) or OverlayEntry(name=c.canonical_verb.capitalize())
        out.append(BasisSubtask(
            name=entry.name,
            arity=len(entry.parameter_roles),
            parameter_roles=entry.parameter_roles,
            doc=doc,
            fixed_flow=entry.fixed_flow,
            frequency=c.frequency,
            description=entry.description,
        ))
    return out


@dataclass
class MiningResult:
    segments: list[DemoSegment]
    clusters: list[VerbCluster]
    kept: list[VerbCluster]
    library: list[BasisSubtask]


def mine_library(records: Sequence[TrajectoryRecord], lexicon: VerbLexicon, table: SynonymTable,
                 overlay: LibraryOverlay, backend: CompletionBackend,
                 k: int = 10, min_steps: int = 3) -> MiningResult:
    """Full pipeline. Every reviewed cluster is summarized before filtering."""
    segments = segment_corpus(records, min_steps)
    verbs = [extract_verb(s.instruction, lexicon) for s in segments]
    clusters = cluster_synonyms(verbs, table, segments)
    reviewed = [c for c in clusters if not (c.members & overlay.drop)]
    docs = {c.canonical_verb: summarize_cluster(c, backend) for c in reviewed}
    kept = filter_top_k(reviewed, k)
    return MiningResult(segments, clusters, kept, build_library(kept, docs, overlay))
