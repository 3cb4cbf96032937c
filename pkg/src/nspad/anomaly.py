"""Seeded anomaly injection producing ground-truth labels."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable, Mapping

import numpy as np

from .eventlog import Event, EventLog, Trace


class AnomalyType(str, Enum):
    SKIP = "Skip"
    INSERT = "Insert"
    REWORK = "Rework"
    EARLY = "Early"
    LATE = "Late"
    ATTRIBUTE_SWAP = "AttributeSwap"

    @classmethod
    def parse(cls, name: str) -> "AnomalyType":
        if isinstance(name, cls):
            return name
        for t in cls:
            if t.value.lower() == name.strip().lower():
                return t
        raise ValueError(f"unknown anomaly type {name!r}")


class InjectionError(ValueError):
    pass


@dataclass(frozen=True)
class Label:
    anomalous: bool
    anomaly_type: AnomalyType | None = None

    def __str__(self):
        return self.anomaly_type.value if self.anomalous else "normal"


NORMAL = Label(False)


@dataclass(frozen=True)
class LabeledLog:
    log: EventLog
    labels: Mapping[str, Label]
    originals: Mapping[str, Trace] = field(default_factory=dict)

    def anomalous_ids(self) -> list[str]:
        return [cid for cid, lab in self.labels.items() if lab.anomalous]

    def truth(self) -> dict[str, bool]:
        return {cid: lab.anomalous for cid, lab in self.labels.items()}


@dataclass(frozen=True)
class InjectionParams:
    max_span: int = 2
    max_shift: int = 2
    max_redraws: int = 10


def _strip_time(events: Iterable[Event]) -> tuple[Event, ...]:
    # Mutated traces lose timestamps so that file order stays authoritative on re-read.
    return tuple(Event(e.activity, e.resource) for e in events)


def _key(events) -> tuple:
    return tuple((e.activity, e.resource) for e in events)


def _mutate(kind: AnomalyType, events: list[Event], rng: np.random.Generator, activities: list[str],
            resources: list[str], params: InjectionParams) -> list[Event] | None:
    n = len(events)
    if kind is AnomalyType.SKIP:
        if n < 2:
            return None
        span = int(rng.integers(1, min(params.max_span, n - 1) + 1))
        at = int(rng.integers(0, n - span + 1))
        return events[:at] + events[at + span:]
    if kind is AnomalyType.INSERT:
        if not activities:
            return None
        span = int(rng.integers(1, params.max_span + 1))
        out = list(events)
        for _ in range(span):
            act = activities[rng.integers(len(activities))]
            res = resources[rng.integers(len(resources))] if resources else None
            out.insert(int(rng.integers(0, len(out) + 1)), Event(act, res))
        return out
    if kind is AnomalyType.REWORK:
        span = int(rng.integers(1, min(params.max_span, n) + 1))
        at = int(rng.integers(0, n - span + 1))
        return events[:at + span] + events[at:at + span] + events[at + span:]
    if kind in (AnomalyType.EARLY, AnomalyType.LATE):
        if n < 2:
            return None
        shift = int(rng.integers(1, min(params.max_shift, n - 1) + 1))
        if kind is AnomalyType.EARLY:
            src = int(rng.integers(shift, n))
            dst = src - shift
        else:
            src = int(rng.integers(0, n - shift))
            dst = src + shift
        out = list(events)
        ev = out.pop(src)
        out.insert(dst, ev)
        return out
    if kind is AnomalyType.ATTRIBUTE_SWAP:
        if len(resources) < 2:
            return None
        at = int(rng.integers(0, n))
        others = [r for r in resources if r != events[at].resource]
        out = list(events)
        out[at] = Event(events[at].activity, others[rng.integers(len(others))])
        return out
    raise ValueError(f"unknown anomaly type {kind!r}")


def inject(log: EventLog, fraction: float, types: Iterable[AnomalyType | str] = tuple(AnomalyType),
           rng: np.random.Generator | int = 0, params: InjectionParams = InjectionParams()) -> LabeledLog:
    """Mutate exactly ``round(fraction * |log|)`` uniformly chosen cases.

    Each selected case gets one uniformly chosen anomaly type. A mutation
    that leaves the trace unchanged is redrawn up to ``params.max_redraws``
    times before the remaining types are tried in random order.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    types = [AnomalyType.parse(t) for t in types]
    if not types:
        raise ValueError("at least one anomaly type is required")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    activities = sorted({a for t in log for a in t.activities})
    resources = sorted({e.resource for t in log for e in t.events if e.resource is not None})
    n_anom = int(round(fraction * len(log)))
    chosen = set(rng.choice(len(log), size=n_anom, replace=False).tolist()) if n_anom else set()

    traces, labels, originals = [], {}, {}
    for i, trace in enumerate(log):
        if i not in chosen:
            traces.append(trace)
            labels[trace.case_id] = NORMAL
            continue
        first = types[int(rng.integers(len(types)))]
        rest = [types[k] for k in rng.permutation(len(types)) if types[k] is not first]
        events = list(trace.events)
        mutated = kind = None
        for kind in [first, *rest]:
            for _ in range(params.max_redraws):
                cand = _mutate(kind, events, rng, activities, resources, params)
                if cand is not None and cand and _key(cand) != _key(events):
                    mutated = cand
                    break
            if mutated is not None:
                break
        if mutated is None:
            raise InjectionError(f"case {trace.case_id!r} admits none of the anomaly types {[t.value for t in types]}")
        traces.append(Trace(trace.case_id, _strip_time(mutated)))
        labels[trace.case_id] = Label(True, kind)
        originals[trace.case_id] = trace
    out = EventLog(tuple(traces), log.name, log.source, dict(log.meta))
    return LabeledLog(out, labels, originals)


def write_labels(labeled: LabeledLog, stream: IO[str]) -> None:
    """Labels CSV: case_id, label, anomaly_type, original_length, mutated_length."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["case_id", "label", "anomaly_type", "original_length", "mutated_length"])
    lengths = {t.case_id: len(t) for t in labeled.log}
    for cid, lab in labeled.labels.items():
        orig = labeled.originals.get(cid)
        writer.writerow([cid, "anomalous" if lab.anomalous else "normal",
                         lab.anomaly_type.value if lab.anomalous else "",
                         len(orig) if orig is not None else lengths[cid], lengths[cid]])


def read_labels(stream: IO[str]) -> dict[str, Label]:
    labels = {}
    for row in csv.DictReader(stream):
        if row["label"] == "anomalous":
            labels[row["case_id"]] = Label(True, AnomalyType.parse(row["anomaly_type"]))
        else:
            labels[row["case_id"]] = NORMAL
    return labels
