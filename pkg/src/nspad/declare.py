"""Declare templates: crisp trace semantics, mining with support/confidence, and knowledge-base selection."""

from __future__ import annotations

import fnmatch
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from itertools import permutations
from typing import IO, Iterable, NamedTuple, Sequence

from .eventlog import PAD, EventLog, Trace, Vocabulary


class Template(str, Enum):
    EXISTENCE = "Existence"
    RESPONDED_EXISTENCE = "RespondedExistence"
    RESPONSE = "Response"
    PRECEDENCE = "Precedence"
    SUCCESSION = "Succession"
    CHAIN_RESPONSE = "ChainResponse"
    CHOICE = "Choice"
    EXCLUSIVE_CHOICE = "ExclusiveChoice"

    @property
    def arity(self) -> int:
        return 1 if self is Template.EXISTENCE else 2

    @property
    def has_activation(self) -> bool:
        return self not in (Template.EXISTENCE, Template.CHOICE, Template.EXCLUSIVE_CHOICE)

    @classmethod
    def parse(cls, name: str) -> "Template":
        if isinstance(name, cls):
            return name
        for t in cls:
            if t.value.lower() == name.strip().lower():
                return t
        raise ValueError(f"unknown Declare template {name!r}")


class DeclareError(ValueError):
    pass


class SelectionError(DeclareError):
    pass


@dataclass(frozen=True)
class MinedConstraint:
    template: Template
    args: tuple[str, ...]
    support: float = 0.0
    confidence: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "template", Template(self.template))
        object.__setattr__(self, "args", tuple(self.args))
        if len(self.args) != self.template.arity:
            raise DeclareError(f"{self.template.value} takes {self.template.arity} argument(s), got {self.args}")
        if not 0.0 <= self.support <= 1.0:
            raise DeclareError(f"support {self.support} outside [0, 1]")

    def __str__(self) -> str:
        return f"{self.template.value}({','.join(self.args)})"

    def to_record(self) -> dict:
        return {"template": self.template.value, "args": list(self.args),
                "support": self.support, "confidence": self.confidence}

    @classmethod
    def from_record(cls, rec: dict) -> "MinedConstraint":
        return cls(Template(rec["template"]), tuple(rec["args"]), float(rec.get("support", 0.0)),
                   None if rec.get("confidence") is None else float(rec["confidence"]))


def constraint(spec: str) -> MinedConstraint:
    """Parse ``"Response(A,B)"`` into a constraint with no statistics attached."""
    m = re.fullmatch(r"\s*(\w+)\s*\((.*)\)\s*", spec)
    if not m:
        raise DeclareError(f"cannot parse constraint {spec!r}; expected Template(A,B)")
    args = tuple(a.strip() for a in m.group(2).split(","))
    return MinedConstraint(Template.parse(m.group(1)), args)


class Verdict(NamedTuple):
    holds: bool
    activated: bool


def _labels(trace: Trace | Sequence[str]) -> Sequence[str]:
    return trace.activities if isinstance(trace, Trace) else trace


def evaluate_crisp(c: MinedConstraint, trace: Trace | Sequence[str]) -> Verdict:
    """Boolean semantics of ``c`` on one trace (a :class:`Trace` or a label sequence)."""
    acts = _labels(trace)
    n = len(acts)
    a = c.args[0]
    b = c.args[1] if len(c.args) > 1 else None
    has_a = a in acts
    has_b = b in acts if b is not None else False
    t = c.template

    def response() -> bool:
        # the last b position; every a must sit strictly before one
        last_b = max((j for j, x in enumerate(acts) if x == b), default=-1)
        return all(i < last_b for i, x in enumerate(acts) if x == a)

    def precedence() -> bool:
        first_a = next((j for j, x in enumerate(acts) if x == a), n)
        return all(i > first_a for i, x in enumerate(acts) if x == b)

    if t is Template.EXISTENCE:
        return Verdict(has_a, False)
    if t is Template.RESPONDED_EXISTENCE:
        return Verdict(not has_a or has_b, has_a)
    if t is Template.RESPONSE:
        return Verdict(response(), has_a)
    if t is Template.PRECEDENCE:
        return Verdict(precedence(), has_b)
    if t is Template.SUCCESSION:
        return Verdict(response() and precedence(), has_a or has_b)
    if t is Template.CHAIN_RESPONSE:
        ok = all(acts[i + 1] == b for i in range(n - 1) if acts[i] == a) and (n == 0 or acts[-1] != a)
        return Verdict(ok, has_a)
    if t is Template.CHOICE:
        return Verdict(has_a or has_b, False)
    if t is Template.EXCLUSIVE_CHOICE:
        return Verdict(has_a != has_b, False)
    raise DeclareError(f"unsupported template {t}")


def mine(log: EventLog, templates: Iterable[Template | str] | None = None,
         vocab: Vocabulary | None = None) -> list[MinedConstraint]:
    """Support and confidence of every template over every activity (pair), counted per trace."""
    if len(log) == 0:
        raise DeclareError("cannot mine an empty log")
    templates = sorted({Template.parse(t) for t in (templates or list(Template))}, key=lambda t: t.value)
    if vocab is not None:
        activities = [a for a in vocab.activities if a != PAD]
    else:
        activities = sorted({a for t in log for a in t.activities})
    traces = [t.activities for t in log]
    total = len(traces)
    out = []
    for template in templates:
        arg_sets = [(a,) for a in activities] if template.arity == 1 else permutations(activities, 2)
        for args in arg_sets:
            c = MinedConstraint(template, args)
            holds = activated = both = 0
            for acts in traces:
                v = evaluate_crisp(c, acts)
                holds += v.holds
                activated += v.activated
                both += v.holds and v.activated
            if template.has_activation:
                support = activated / total
                confidence = both / activated if activated else None
            else:
                support, confidence = holds / total, None
            out.append(MinedConstraint(template, args, support, confidence))
    out.sort(key=lambda c: (c.template.value, c.args))
    return out


@dataclass(frozen=True)
class Pattern:
    """Whitelist entry; arguments may use shell-style wildcards."""

    template: Template
    args: tuple[str, ...]

    def matches(self, c: MinedConstraint) -> bool:
        return c.template is self.template and len(c.args) == len(self.args) and all(
            fnmatch.fnmatchcase(a, p) for a, p in zip(c.args, self.args))

    def __str__(self):
        return f"{self.template.value}({','.join(self.args)})"


def parse_whitelist(text: str | Iterable[str] | None) -> list[Pattern] | None:
    """``"Response(A,B), Choice(C,D)"`` -> patterns. ``None`` stays ``None``."""
    if text is None:
        return None
    if isinstance(text, str):
        items = re.findall(r"\w+\s*\([^)]*\)", text)
        if not items and text.strip():
            raise DeclareError(f"cannot parse whitelist {text!r}")
    else:
        items = list(text)
    pats = []
    for item in items:
        c = constraint(item) if isinstance(item, str) else item
        pats.append(Pattern(c.template, c.args))
    return pats


@dataclass(frozen=True)
class KnowledgeBase:
    constraints: tuple[MinedConstraint, ...]
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if not self.constraints:
            raise SelectionError("knowledge base must hold at least one constraint")

    def __iter__(self):
        return iter(self.constraints)

    def __len__(self):
        return len(self.constraints)

    def check_vocabulary(self, vocab: Vocabulary) -> None:
        for c in self.constraints:
            for a in c.args:
                vocab.activity_index(a)


def filter_constraints(mined: Sequence[MinedConstraint], max_support: float = 0.05, min_confidence: float = 0.9,
                       whitelist: Sequence[Pattern] | str | None = None) -> KnowledgeBase:
    """Keep low-support/high-confidence constraints, then narrow to the whitelist.

    Constraints without a confidence value (Existence, Choice,
    ExclusiveChoice) are admitted only by an explicit whitelist match.
    """
    if not (0.0 <= max_support <= 1.0 and 0.0 <= min_confidence <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    if isinstance(whitelist, str):
        whitelist = parse_whitelist(whitelist)

    def listed(c):
        return whitelist is not None and any(p.matches(c) for p in whitelist)

    kept = []
    for c in mined:
        if c.confidence is None:
            ok = listed(c)
        else:
            ok = c.support <= max_support and c.confidence >= min_confidence
            if whitelist is not None:
                ok = ok and listed(c)
        if ok:
            kept.append(c)
    if not kept:
        raise SelectionError("no constraint survives selection; nearest misses: "
                             + ", ".join(_describe(c) for c in _nearest(mined, max_support, min_confidence, whitelist)))
    prov = {"max_support": max_support, "min_confidence": min_confidence,
            "whitelist": [str(p) for p in whitelist] if whitelist is not None else None}
    return KnowledgeBase(tuple(kept), prov)


def _describe(c: MinedConstraint) -> str:
    conf = "n/a" if c.confidence is None else f"{c.confidence:.3f}"
    return f"{c} [support={c.support:.3f}, confidence={conf}]"


def _nearest(mined, max_support, min_confidence, whitelist, k=5):
    pool = [c for c in mined if whitelist is None or any(p.matches(c) for p in whitelist)] or list(mined)

    def miss(c):
        conf = 0.0 if c.confidence is None else c.confidence
        return max(0.0, c.support - max_support) + max(0.0, min_confidence - conf)

    return sorted(pool, key=lambda c: (miss(c), c.template.value, c.args))[:k]


def write_constraints(constraints: Iterable[MinedConstraint], stream: IO[str], provenance: dict | None = None) -> None:
    """JSON lines, one record per constraint."""
    for c in constraints:
        rec = c.to_record()
        if provenance is not None:
            rec["provenance"] = provenance
        stream.write(json.dumps(rec, sort_keys=True) + "\n")


def read_constraints(stream: IO[str]) -> list[MinedConstraint]:
    return [MinedConstraint.from_record(json.loads(line)) for line in stream if line.strip()]


def read_knowledge_base(stream: IO[str]) -> KnowledgeBase:
    records = [json.loads(line) for line in stream if line.strip()]
    prov = records[0].get("provenance", {}) if records else {}
    return KnowledgeBase(tuple(MinedConstraint.from_record(r) for r in records), prov or {})
