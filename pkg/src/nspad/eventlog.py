"""Event logs: data model, CSV/XES ingestion, vocabularies and a synthetic generator."""

from __future__ import annotations

import csv
import gzip
import io
import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from datetime import datetime
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD = "<PAD>"

ACTIVITY_KEY = "concept:name"
RESOURCE_KEY = "org:resource"
TIMESTAMP_KEY = "time:timestamp"


class LogError(ValueError):
    """Raised for malformed or unusable event-log input."""


class SchemaError(LogError):
    pass


class EmptyLogError(LogError):
    pass


class XESParseError(LogError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Event:
    activity: str
    resource: str | None = None
    timestamp: datetime | None = None

    def __post_init__(self):
        if not self.activity:
            raise LogError("event activity label must be non-empty")


@dataclass(frozen=True)
class Trace:
    case_id: str
    events: tuple[Event, ...]

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        if not self.events:
            raise LogError(f"trace {self.case_id!r} has no events")

    def __len__(self) -> int:
        return len(self.events)

    @property
    def activities(self) -> tuple[str, ...]:
        return tuple(e.activity for e in self.events)


@dataclass(frozen=True)
class EventLog:
    traces: tuple[Trace, ...]
    name: str = "log"
    source: str = "memory"
    # Free-form provenance (e.g. rare case ids, parser warnings); not part of equality.
    meta: Mapping = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "traces", tuple(self.traces))
        seen = set()
        for t in self.traces:
            if t.case_id in seen:
                raise LogError(f"duplicate case id {t.case_id!r}")
            seen.add(t.case_id)

    def __len__(self) -> int:
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces)

    def case_ids(self) -> list[str]:
        return [t.case_id for t in self.traces]

    def subset(self, keep) -> "EventLog":
        """Traces for which ``keep(trace)`` is true, order preserved."""
        return EventLog(tuple(t for t in self.traces if keep(t)), self.name, self.source, dict(self.meta))

    def without(self, case_ids: Iterable[str]) -> "EventLog":
        drop = set(case_ids)
        return self.subset(lambda t: t.case_id not in drop)

    def only(self, case_ids: Iterable[str]) -> "EventLog":
        want = set(case_ids)
        return self.subset(lambda t: t.case_id in want)


@dataclass(frozen=True)
class CsvSchema:
    case: str = "case_id"
    activity: str = "activity"
    resource: str = "resource"
    timestamp: str = "timestamp"


def _parse_time(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    return datetime.fromisoformat(text)


def _ordered(events: list[Event]) -> tuple[Event, ...]:
    # Timestamp order only when every event carries one; sort is stable so ties keep input order.
    if events and all(e.timestamp is not None for e in events):
        return tuple(sorted(events, key=lambda e: e.timestamp))
    return tuple(events)


def parse_csv(stream: IO[bytes] | IO[str], schema: CsvSchema | Mapping | None = None, name: str = "log") -> EventLog:
    """Read a header-first CSV into an :class:`EventLog`, grouping rows by case."""
    if schema is None:
        schema = CsvSchema()
    elif isinstance(schema, Mapping):
        schema = CsvSchema(**schema)
    text = io.TextIOWrapper(stream, encoding="utf-8", newline="") if _is_binary(stream) else stream
    reader = csv.DictReader(text)
    header = reader.fieldnames
    if not header:
        raise EmptyLogError("CSV input is empty")
    for col in (schema.case, schema.activity):
        if col not in header:
            raise SchemaError(f"missing column {col!r}; header has {list(header)}")
    has_res = schema.resource in header
    has_ts = schema.timestamp in header

    grouped: dict[str, list[Event]] = {}
    for lineno, row in enumerate(reader, start=2):
        case = row[schema.case]
        res = row[schema.resource] if has_res else None
        ts = row[schema.timestamp] if has_ts else None
        try:
            event = Event(row[schema.activity], res or None, _parse_time(ts) if ts else None)
        except (LogError, ValueError) as exc:
            raise LogError(f"CSV row {lineno}: {exc}") from exc
        grouped.setdefault(case, []).append(event)
    if not grouped:
        raise EmptyLogError("CSV input has a header but no rows")
    traces = tuple(Trace(case, _ordered(evts)) for case, evts in grouped.items())
    return EventLog(traces, name=name, source="csv")


def write_csv(log: EventLog, stream: IO[str]) -> None:
    """Serialize with the default column names. Absent values become empty cells."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["case_id", "activity", "resource", "timestamp"])
    for trace in log:
        for e in trace.events:
            writer.writerow([
                trace.case_id,
                e.activity,
                e.resource or "",
                e.timestamp.isoformat() if e.timestamp is not None else "",
            ])


def log_to_csv_text(log: EventLog) -> str:
    buf = io.StringIO()
    write_csv(log, buf)
    return buf.getvalue()


def _is_binary(stream) -> bool:
    return isinstance(stream, (io.RawIOBase, io.BufferedIOBase, gzip.GzipFile)) or "b" in getattr(stream, "mode", "")


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def parse_xes(stream: IO[bytes], name: str = "log") -> EventLog:
    """Read the XES subset used here: trace/event ``concept:name``, ``org:resource``, ``time:timestamp``.

    Events without an activity are skipped; the number skipped is stored in
    ``meta["warnings"]``.
    """
    try:
        root = ET.parse(stream).getroot()
    except ET.ParseError as exc:
        raise XESParseError(str(exc), line=exc.position[0]) from exc

    warnings = 0
    traces = []
    for t_index, t_el in enumerate(el for el in root if _local(el.tag) == "trace"):
        case_id = None
        events = []
        for child in t_el:
            tag = _local(child.tag)
            if tag != "event":
                if child.get("key") == ACTIVITY_KEY:
                    case_id = child.get("value")
                continue
            attrs = {c.get("key"): c.get("value") for c in child}
            activity = attrs.get(ACTIVITY_KEY)
            if not activity:
                warnings += 1
                logger.warning("trace %s: event without %s skipped", case_id or t_index, ACTIVITY_KEY)
                continue
            ts = attrs.get(TIMESTAMP_KEY)
            try:
                stamp = _parse_time(ts) if ts else None
            except ValueError:
                warnings += 1
                stamp = None
            events.append(Event(activity, attrs.get(RESOURCE_KEY) or None, stamp))
        if case_id is None:
            case_id = str(t_index)
        if not events:
            warnings += 1
            logger.warning("trace %s has no usable events; dropped", case_id)
            continue
        traces.append(Trace(case_id, _ordered(events)))
    return EventLog(tuple(traces), name=name, source="xes", meta={"warnings": warnings})


def read_log(path: str, schema: CsvSchema | Mapping | None = None) -> EventLog:
    """Open a log by file extension: ``.csv``, ``.xes`` or ``.xes.gz``."""
    lower = path.lower()
    name = path.rsplit("/", 1)[-1]
    if lower.endswith(".xes.gz"):
        with gzip.open(path, "rb") as fh:
            return parse_xes(fh, name=name)
    if lower.endswith(".xes"):
        with open(path, "rb") as fh:
            return parse_xes(fh, name=name)
    with open(path, "rb") as fh:
        return parse_csv(fh, schema, name=name)


@dataclass(frozen=True)
class Vocabulary:
    activities: tuple[str, ...]
    resources: tuple[str, ...] = (PAD,)

    def __post_init__(self):
        for labels in (self.activities, self.resources):
            if not labels or labels[0] != PAD or labels.count(PAD) != 1:
                raise LogError("vocabulary must hold PAD exactly once, at index 0")
            if len(set(labels)) != len(labels):
                raise LogError("vocabulary labels must be distinct")
        object.__setattr__(self, "_act_index", {a: i for i, a in enumerate(self.activities)})
        object.__setattr__(self, "_res_index", {r: i for i, r in enumerate(self.resources)})

    @property
    def n_activities(self) -> int:
        return len(self.activities)

    @property
    def n_resources(self) -> int:
        return len(self.resources)

    def activity_index(self, label: str) -> int:
        try:
            return self._act_index[label]
        except KeyError:
            raise VocabularyError(f"unknown activity {label!r}") from None

    def resource_index(self, label: str | None) -> int:
        if label is None:
            return 0
        try:
            return self._res_index[label]
        except KeyError:
            raise VocabularyError(f"unknown resource {label!r}") from None

    def to_dict(self) -> dict:
        return {"activities": list(self.activities), "resources": list(self.resources)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Vocabulary":
        return cls(tuple(d["activities"]), tuple(d["resources"]))


class VocabularyError(LogError):
    pass


def build_vocab(log: EventLog) -> Vocabulary:
    activities = {PAD: None}
    resources = {PAD: None}
    for trace in log:
        for e in trace.events:
            activities.setdefault(e.activity, None)
            if e.resource is not None:
                resources.setdefault(e.resource, None)
    return Vocabulary(tuple(activities), tuple(resources))


def filter_by_length(log: EventLog, max_len: int) -> EventLog:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    return log.subset(lambda t: len(t) <= max_len)


@dataclass(frozen=True)
class LikelihoodGraph:
    """Probabilistic activity-transition model used to sample synthetic traces.

    ``edges`` maps each non-end node to ``((target, probability), ...)``.
    ``rare_branch`` lists the activities that only the rare variant visits,
    entered through an edge into ``rare_branch[0]``. ``max_visits`` caps how
    often a node may be visited in one trace, which bounds loops.
    """

    nodes: tuple[str, ...]
    edges: Mapping[str, tuple[tuple[str, float], ...]]
    start: str
    ends: frozenset[str]
    resources: Mapping[str, tuple[str, ...]]
    rare_branch: tuple[str, ...] = ()
    max_visits: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        nodes = set(self.nodes)
        if self.start not in nodes or not self.ends <= nodes:
            raise ValueError("start/end nodes must be graph nodes")
        for node in self.nodes:
            out = self.edges.get(node, ())
            if node in self.ends:
                if out:
                    raise ValueError(f"end node {node!r} has outgoing edges")
                continue
            if not out:
                raise ValueError(f"node {node!r} is neither an end node nor has outgoing edges")
            total = sum(p for _, p in out)
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"outgoing probabilities of {node!r} sum to {total}")
            for target, p in out:
                if target not in nodes or p < 0:
                    raise ValueError(f"bad edge {node!r} -> {target!r} ({p})")
        if not any(e in self.reachable(self.start) for e in self.ends):
            raise ValueError("no end node reachable from start")
        for node in self.rare_branch:
            if node not in nodes:
                raise ValueError(f"rare branch activity {node!r} not in graph")

    def reachable(self, origin: str) -> set[str]:
        seen = {origin}
        stack = [origin]
        while stack:
            for target, p in self.edges.get(stack.pop(), ()):
                if p > 0 and target not in seen:
                    seen.add(target)
                    stack.append(target)
        return seen

    def _walk(self, rng: np.random.Generator, rare: bool) -> list[str]:
        rare_set = set(self.rare_branch)
        entry = self.rare_branch[0] if self.rare_branch else None
        visits: dict[str, int] = {}
        node = self.start
        path = []
        entered = False
        while True:
            path.append(node)
            visits[node] = visits.get(node, 0) + 1
            entered = entered or node == entry
            if node in self.ends:
                return path
            cands = [
                (t, p) for t, p in self.edges[node]
                if p > 0 and visits.get(t, 0) < self.max_visits.get(t, 1 << 30)
            ]
            if rare and not entered:
                if any(t == entry for t, _ in cands):
                    cands = [(t, 1.0) for t, _ in cands if t == entry]
                else:
                    cands = [(t, p) for t, p in cands if entry in self.reachable(t)]
            elif not rare:
                cands = [(t, p) for t, p in cands if t not in rare_set]
            if not cands:
                raise ValueError(f"sampling stuck at {node!r}")
            probs = np.array([p for _, p in cands])
            node = cands[rng.choice(len(cands), p=probs / probs.sum())][0]


def generate_log(graph: LikelihoodGraph, n_cases: int, rare_count: int, seed: int, name: str = "synthetic") -> EventLog:
    """Sample ``n_cases`` traces of which exactly ``rare_count`` take the rare branch.

    Rare cases are placed at seeded random positions; their ids are recorded
    in ``meta["rare_cases"]``. Resources are drawn uniformly from each
    activity's pool.
    """
    if n_cases < 1:
        raise ValueError("n_cases must be positive")
    if not 0 <= rare_count <= n_cases:
        raise ValueError(f"rare_count={rare_count} must lie in [0, n_cases={n_cases}]")
    if rare_count and not graph.rare_branch:
        raise ValueError("graph designates no rare branch")
    rng = np.random.default_rng(seed)
    rare_slots = set(rng.choice(n_cases, size=rare_count, replace=False).tolist())
    width = len(str(n_cases - 1))
    traces = []
    rare_ids = []
    for i in range(n_cases):
        case_id = f"case_{i:0{width}d}"
        rare = i in rare_slots
        path = graph._walk(rng, rare)
        events = []
        for act in path:
            pool = graph.resources.get(act, ())
            res = pool[rng.integers(len(pool))] if pool else None
            events.append(Event(act, res))
        traces.append(Trace(case_id, tuple(events)))
        if rare:
            rare_ids.append(case_id)
    return EventLog(tuple(traces), name=name, source="generator",
                    meta={"rare_cases": rare_ids, "seed": seed, "rare_branch": list(graph.rare_branch)})


def default_graph() -> LikelihoodGraph:
    """A paper-review process with an accept/reject split, a reviewer loop and a rare method branch.

    Max trace length is 15 (two passes through the reviewer loop). The rare
    variant is ``Develop Method -> Final Decision``.
    """
    editors = ("editor_1", "editor_2")
    authors = ("author_1", "author_2")
    edges = {
        "Submit Paper": (("Check Format", 1.0),),
        "Check Format": (("Assign Reviewers", 1.0),),
        "Assign Reviewers": (("Review Paper", 0.98), ("Develop Method", 0.02)),
        "Review Paper": (("Collect Reviews", 1.0),),
        "Collect Reviews": (("Make Decision", 0.8), ("Invite Additional Reviewer", 0.2)),
        "Invite Additional Reviewer": (("Review Paper", 1.0),),
        "Make Decision": (("Accept Paper", 0.7), ("Reject Paper", 0.3)),
        "Accept Paper": (("Prepare Camera Ready", 1.0),),
        "Prepare Camera Ready": (("Notify Author", 1.0),),
        "Reject Paper": (("Notify Author", 1.0),),
        "Develop Method": (("Final Decision", 1.0),),
        "Final Decision": (("Notify Author", 1.0),),
    }
    resources = {
        "Submit Paper": authors,
        "Check Format": ("system",),
        "Assign Reviewers": editors,
        "Review Paper": ("reviewer_1", "reviewer_2", "reviewer_3"),
        "Collect Reviews": ("system",),
        "Invite Additional Reviewer": editors,
        "Make Decision": editors,
        "Accept Paper": editors,
        "Reject Paper": editors,
        "Prepare Camera Ready": authors,
        "Notify Author": ("system",),
        "Develop Method": authors,
        "Final Decision": ("chair",),
    }
    nodes = tuple(resources)
    return LikelihoodGraph(
        nodes=nodes,
        edges=edges,
        start="Submit Paper",
        ends=frozenset({"Notify Author"}),
        resources=resources,
        rare_branch=("Develop Method", "Final Decision"),
        max_visits={"Invite Additional Reviewer": 2},
    )


def max_trace_length(log: EventLog) -> int:
    return max((len(t) for t in log), default=0)


def traces_with(log: EventLog, activities: Sequence[str]) -> list[Trace]:
    """Traces containing every activity in ``activities``."""
    want = set(activities)
    return [t for t in log if want <= set(t.activities)]
