"""subtaskbench command line: extract, run, eval, replay, validate.

Exit status: 0 ok, 1 usage, 2 validation, 3 infrastructure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import yaml

from . import datasets
from .agents import RunnerConfig, run_episode
from .backends import (
    BackendError,
    Cassette,
    CassetteBackend,
    CassetteMode,
    HttpBackend,
    OracleBackend,
    ScriptedBackend,
)
from .core import Action, EqualityPolicy, Language, library_index, render_action
from .metrics import MetricsError, aggregate_report, content_tokens
from .miner import LibraryOverlay, MinerError, SynonymTable, VerbLexicon, mine_library
from .simenv import SimError, app_for_task, load_app_bundle, load_bundles, observe, reset, step

log = logging.getLogger("subtaskbench")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_INFRA = 0, 1, 2, 3
BACKENDS = ("scripted", "replay", "replay-strict", "record", "http", "oracle")


def fixtures_dir() -> Path:
    return Path(str(resources.files("subtaskbench").joinpath("data/fixtures")))


def miner_data_dir() -> Path:
    return Path(str(resources.files("subtaskbench").joinpath("data/miner")))


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


# --- backends --------------------------------------------------------------


@dataclass
class BackendFactory:
    """Builds one backend per unit of work (task or summarization run)."""

    kind: str
    cassettes: Path | None
    script: Path | None
    inner: str
    tasks: dict

    def _plain(self, kind: str):
        if kind == "oracle":
            return OracleBackend(self.tasks)
        if kind == "scripted":
            if self.script is None:
                raise UsageError("--backend scripted needs --script")
            return ScriptedBackend.from_file(_need(self.script, "script"))
        if kind == "http":
            return HttpBackend()
        raise UsageError(f"unsupported inner backend {kind!r}")

    def make(self, name: str, shared=None):
        if self.kind in ("oracle", "http"):
            return self._plain(self.kind)
        if self.kind == "scripted":
            return shared if shared is not None else self._plain("scripted")
        if self.cassettes is None:
            raise UsageError(f"--backend {self.kind} needs --cassettes")
        path = self.cassettes / f"{name}.yaml"
        if self.kind == "record":
            return CassetteBackend(Cassette(mode=CassetteMode.RECORD), self._plain(self.inner), path)
        if not path.is_file():
            if self.kind == "replay-strict":
                raise BackendError(f"no cassette for {name} at {path}")
            return CassetteBackend(Cassette(mode=CassetteMode.REPLAY))
        mode = CassetteMode.REPLAY_STRICT if self.kind == "replay-strict" else CassetteMode.REPLAY
        return CassetteBackend(Cassette.load(path, mode))


def _factory(args, tasks=None) -> BackendFactory:
    return BackendFactory(
        kind=args.backend,
        cassettes=Path(args.cassettes) if args.cassettes else None,
        script=Path(args.script) if args.script else None,
        inner=args.inner,
        tasks=tasks or {},
    )


# --- commands --------------------------------------------------------------


def cmd_extract(args) -> int:
    corpus = datasets.load_corpus(_need(Path(args.corpus), "corpus"))
    lexicon = VerbLexicon.load(_need(Path(args.verbs), "verb lexicon"))
    table = SynonymTable.load(_need(Path(args.synsets), "synonym table"))
    overlay = LibraryOverlay.load(_need(Path(args.overlay), "overlay"))
    backend = _factory(args).make("summaries")
    result = mine_library(corpus, lexicon, table, overlay, backend, k=args.k, min_steps=args.min_steps)
    datasets.save_library(result.library, args.out)
    kept = {c.canonical_verb for c in result.kept}
    print(f"{len(result.segments)} segments, {len(result.clusters)} clusters, {len(result.library)} kept")
    print(f"{'verb':<12} {'freq':>4}  kept  members")
    for c in sorted(result.clusters, key=lambda c: (-c.frequency, c.canonical_verb)):
        flag = "yes" if c.canonical_verb in kept else ("drop" if c.members & overlay.drop else "no")
        print(f"{c.canonical_verb:<12} {c.frequency:>4}  {flag:<4}  {', '.join(sorted(c.members))}")
    print(f"library written to {args.out}")
    return EXIT_OK


def _runner_config(args) -> RunnerConfig:
    return RunnerConfig(
        max_rounds=args.max_rounds,
        max_turns_per_subtask=args.max_turns,
        language=Language(args.language) if args.language else None,
        batching=not args.no_batching,
    )


def cmd_run(args) -> int:
    tasks = datasets.load_tasks(_need(Path(args.tasks), "tasks file"))
    bundles = load_bundles(_need(Path(args.bundles), "bundles directory"))
    library = datasets.load_library(_need(Path(args.library), "library"))
    if args.only:
        missing = sorted(set(args.only) - set(tasks))
        if missing:
            raise UsageError(f"unknown task id(s): {', '.join(missing)}")
        tasks = {k: tasks[k] for k in args.only}
    config = _runner_config(args)
    factory = _factory(args, tasks)
    shared = factory.make("script") if factory.kind == "scripted" else None
    out = Path(args.out) / "episodes"
    out.mkdir(parents=True, exist_ok=True)

    def one(task_id):
        ep = run_episode(tasks[task_id], bundles, library, factory.make(task_id, shared), config)
        datasets.write_episode(ep, out)
        return ep

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        episodes = list(pool.map(one, sorted(tasks)))
    for ep in episodes:
        status = "ok  " if ep.success else "FAIL"
        print(f"{status} {ep.task_id:<14} {ep.terminal_reason.value:<14} "
              f"actions={len(ep.executed_actions)} calls={ep.api_calls_total}")
    print(f"{sum(e.success for e in episodes)}/{len(episodes)} succeeded; archives in {out}")
    return EXIT_OK


def registries_for(tasks, bundles) -> dict:
    return {tid: app_for_task(bundles, t.app_ids).registry() for tid, t in tasks.items()}


def vocabularies_for(tasks, bundles) -> dict:
    vocab = {}
    for tid, t in tasks.items():
        app = app_for_task(bundles, t.app_ids)
        words = set()
        for s in app.screens.values():
            words |= content_tokens(s.title)
            for e in s.elements:
                words |= content_tokens(e.name.replace("{query}", " "))
            for _, v in s.text_fields:
                words |= content_tokens(v)
        vocab[tid] = words
    return vocab


def cmd_eval(args) -> int:
    tasks = datasets.load_tasks(_need(Path(args.tasks), "tasks file"))
    bundles = load_bundles(_need(Path(args.bundles), "bundles directory"))
    ep_dir = Path(args.episodes) if args.episodes else Path(args.out) / "episodes"
    episodes = datasets.read_episodes(_need(ep_dir, "episode directory"))
    known = {tid: t for tid, t in tasks.items()}
    report = aggregate_report(
        episodes, known, EqualityPolicy(),
        registries=registries_for(known, bundles),
        vocabularies=vocabularies_for(known, bundles),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = {"generated_at": datetime.now(timezone.utc).isoformat(timespec="seconds")}
    (out / "report.json").write_text(report.to_json(header), encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    text = report.summary_text(per_app=args.per_app)
    (out / "summary.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_replay(args) -> int:
    """Re-execute an archived episode's actions through the simulator."""
    bundles = load_bundles(_need(Path(args.bundles), "bundles directory"))
    tasks = datasets.load_tasks(_need(Path(args.tasks), "tasks file"))
    data = json.loads(_need(Path(args.episode), "episode archive").read_text(encoding="utf-8"))
    ep = datasets.Episode.from_dict(data)
    if ep.task_id not in tasks:
        raise UsageError(f"episode task {ep.task_id!r} not in {args.tasks}")
    state = reset(app_for_task(bundles, tasks[ep.task_id].app_ids))
    print(f"task {ep.task_id}: {len(ep.executed_actions)} actions, archived terminal={ep.terminal_reason.value}")
    print(f"  0  {'':<28} {state.screen_id}")
    for i, a in enumerate(ep.executed_actions, 1):
        try:
            state, outcome = step(state, a)
        except SimError as exc:
            print(f"  {i}  {render_action(a):<28} ERROR {type(exc).__name__}: {exc}")
            return EXIT_VALIDATION
        print(f"  {i}  {render_action(a):<28} {state.screen_id}  ({outcome.kind})")
    if args.show_final:
        print(observe(state).observation_text)
    if state.terminal != (ep.terminal_reason.value == "exit"):
        print("replayed terminal state disagrees with the archive")
        return EXIT_VALIDATION
    return EXIT_OK


def _check_golden(task, bundles) -> list[str]:
    errors = []
    try:
        state = reset(app_for_task(bundles, task.app_ids))
    except SimError as exc:
        return [f"task {task.id}: {exc}"]
    actions: list[Action] = list(task.golden_actions)
    for i, a in enumerate(actions):
        try:
            state, _ = step(state, a)
        except SimError as exc:
            errors.append(f"task {task.id}: golden step {i} {render_action(a)} failed: {type(exc).__name__}: {exc}")
            return errors
    if not state.terminal:
        errors.append(f"task {task.id}: golden actions do not end in an exited state")
    return errors


def validate_all(bundles_dir: Path, tasks_path: Path | None, library_path: Path | None,
                 cassettes_dir: Path | None) -> list[str]:
    """Every violation found across bundles, tasks, library and cassettes."""
    errors: list[str] = []
    bundles = {}
    for p in sorted(bundles_dir.glob("*.yaml")):
        try:
            app = load_app_bundle(p)
        except SimError as exc:
            errors.append(f"{p.name}: {type(exc).__name__}: {exc}")
            continue
        if app.app_id in bundles:
            errors.append(f"{p.name}: duplicate app id {app.app_id!r}")
        bundles[app.app_id] = app
    library = None
    if library_path is not None:
        try:
            library = datasets.load_library(library_path)
            library_index(library)
        except (ValueError, FileNotFoundError) as exc:
            errors.append(f"library: {exc}")
            library = None
    if tasks_path is not None:
        try:
            tasks = datasets.load_tasks(tasks_path)
        except (ValueError, FileNotFoundError) as exc:
            errors.append(f"tasks: {exc}")
            tasks = {}
        index = library_index(library) if library else {}
        for t in tasks.values():
            errors += _check_golden(t, bundles)
            for call in t.golden_plan or ():
                basis = index.get(call.name.casefold())
                if library and not call.is_custom and basis is None:
                    errors.append(f"task {t.id}: golden plan uses unknown subtask {call.name!r}")
                elif basis is not None and len(call.parameters) != basis.arity:
                    errors.append(f"task {t.id}: {call.name} takes {basis.arity} parameter(s), got {len(call.parameters)}")
    if cassettes_dir is not None and cassettes_dir.exists():
        for p in sorted(cassettes_dir.rglob("*.yaml")):
            try:
                Cassette.load(p)
            except (KeyError, TypeError, ValueError, AttributeError, yaml.YAMLError) as exc:
                errors.append(f"cassette {p}: {type(exc).__name__}: {exc}")
    return errors


def cmd_validate(args) -> int:
    errors = validate_all(
        _need(Path(args.bundles), "bundles directory"),
        Path(args.tasks) if args.tasks else None,
        Path(args.library) if args.library else None,
        Path(args.cassettes) if args.cassettes else None,
    )
    for e in errors:
        print(e)
    print(f"{len(errors)} problem(s) found" if errors else "all fixtures valid")
    return EXIT_VALIDATION if errors else EXIT_OK


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fx = fixtures_dir()
    md = miner_data_dir()
    p = _Parser(prog="subtaskbench", description="Basis-subtask mobile assistant harness")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def backend_flags(sp, default_backend, default_cassettes):
        sp.add_argument("--backend", choices=BACKENDS, default=default_backend)
        sp.add_argument("--cassettes", default=str(default_cassettes),
                        help="cassette directory (one YAML file per task)")
        sp.add_argument("--script", help="scripted-backend response file")
        sp.add_argument("--inner", choices=("http", "oracle", "scripted"), default="http",
                        help="backend wrapped by --backend record")

    ex = sub.add_parser("extract", help="mine a basis-subtask library from a corpus")
    ex.add_argument("--corpus", default=str(fx / "corpus.yaml"))
    ex.add_argument("--verbs", default=str(md / "verbs.txt"))
    ex.add_argument("--synsets", default=str(md / "synsets.txt"))
    ex.add_argument("--overlay", default=str(md / "overlay.yaml"))
    ex.add_argument("--k", type=int, default=12, help="number of clusters kept")
    ex.add_argument("--min-steps", type=int, default=3, help="shortest record kept as a demonstration")
    ex.add_argument("--out", default="library.yaml")
    backend_flags(ex, "replay", fx / "cassettes")
    ex.set_defaults(func=cmd_extract)

    run = sub.add_parser("run", help="run episodes for every task")
    run.add_argument("--tasks", default=str(fx / "tasks.yaml"))
    run.add_argument("--bundles", default=str(fx / "bundles"))
    run.add_argument("--library", default=str(fx / "library.yaml"))
    run.add_argument("--out", default="subtaskbench-out")
    run.add_argument("--max-rounds", type=int, default=20)
    run.add_argument("--max-turns", type=int, default=8, help="action-agent turns per subtask")
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--language", choices=("en", "zh"))
    run.add_argument("--no-batching", action="store_true")
    run.add_argument("--only", nargs="+", metavar="TASK_ID")
    backend_flags(run, "replay", fx / "cassettes" / "oracle")
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="score episode archives")
    ev.add_argument("--tasks", default=str(fx / "tasks.yaml"))
    ev.add_argument("--bundles", default=str(fx / "bundles"))
    ev.add_argument("--episodes", help="archive directory (default: OUT/episodes)")
    ev.add_argument("--out", default="subtaskbench-out")
    ev.add_argument("--per-app", action="store_true")
    ev.set_defaults(func=cmd_eval)

    rp = sub.add_parser("replay", help="re-execute an archived episode in the simulator")
    rp.add_argument("episode")
    rp.add_argument("--tasks", default=str(fx / "tasks.yaml"))
    rp.add_argument("--bundles", default=str(fx / "bundles"))
    rp.add_argument("--show-final", action="store_true")
    rp.set_defaults(func=cmd_replay)

    va = sub.add_parser("validate", help="check bundles, tasks, library and cassettes")
    va.add_argument("--bundles", default=str(fx / "bundles"))
    va.add_argument("--tasks", default=str(fx / "tasks.yaml"))
    va.add_argument("--library", default=str(fx / "library.yaml"))
    va.add_argument("--cassettes", default=str(fx / "cassettes"))
    va.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"subtaskbench: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SimError, MinerError, MetricsError, ValueError) as exc:
        print(f"subtaskbench: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except BackendError as exc:
        print(f"subtaskbench: backend failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INFRA


if __name__ == "__main__":
    sys.exit(main())
