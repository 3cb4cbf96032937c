"""Real-valued logic over reconstructed traces and LTN-style fine-tuning.

Declare constraints compile to :class:`FuzzyExpr` trees over position
predicates ``P_i(a)``, the probability that the reconstruction places
activity ``a`` at position ``i``. Connectives are the product t-norm,
probabilistic sum and Reichenbach implication; quantifiers are power-mean
(exists) and power-mean-error (forall) aggregators.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .autoencoder import (Adam, DivergenceError, Model, ProbTrace, corrupt, encode_log, forward, forward_graph,
                          reconstruction_error, reconstruction_loss)
from .declare import MinedConstraint, Template, evaluate_crisp
from .eventlog import EventLog, Trace, Vocabulary
from .seeding import substream
from .tensorgrad import Graph, Node, NonFiniteError

EPS = 1e-7


class CompileError(ValueError):
    pass


class PartitionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# connectives: plain arithmetic, so they work on floats, arrays and graph nodes


def fuzzy_not(x):
    return 1 - x


def fuzzy_and(x, y):
    return x * y


def fuzzy_or(x, y):
    return x + y - x * y


def fuzzy_implies(x, y):
    return 1 - x + x * y


# ---------------------------------------------------------------------------
# aggregators


def _check_p(p: float) -> float:
    if p < 1:
        raise ValueError(f"aggregator exponent must be >= 1, got {p}")
    return float(p)


def _scaled_pmean(g: Graph, x: Node, p: float, axis: int) -> Node:
    # c * M_p(x / c) == M_p(x) for any constant c > 0; the row max keeps x**p from underflowing
    c = np.max(x.value, axis=axis, keepdims=True)
    c = np.where(c >= np.finfo(np.float64).tiny, c, 1.0)
    m = g.power(g.mean(g.power(x * g.constant(1.0 / c), p), axis=axis), 1.0 / p)
    return m * g.constant(np.squeeze(c, axis=axis))


def pmean(g: Graph, x: Node, p: float, axis: int = -1) -> Node:
    return _scaled_pmean(g, x, p, axis)


def pmean_error(g: Graph, x: Node, p: float, axis: int = -1) -> Node:
    return 1.0 - _scaled_pmean(g, 1.0 - x, p, axis)


def agg_exists(values: Sequence[float], p: float = 2.0) -> float:
    """Power mean; dominated by the largest value as ``p`` grows. Empty input is false."""
    p = _check_p(p)
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return 0.0
    g = Graph()
    return float(pmean(g, g.constant(values), p, axis=0).value)


def agg_forall(values: Sequence[float], p: float = 2.0) -> float:
    """One minus the power mean of the complements. Empty input is true."""
    p = _check_p(p)
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return 1.0
    g = Graph()
    return float(pmean_error(g, g.constant(values), p, axis=0).value)


def sat_agg(values: Sequence[float], p: float = 2.0) -> float:
    if len(values) == 0:
        raise ValueError("sat_agg needs at least one value")
    return agg_forall(values, p)


# ---------------------------------------------------------------------------
# expressions


@dataclass(frozen=True)
class Predicate:
    position: int  # 1-based
    activity: str


@dataclass(frozen=True)
class Constant:
    truth: float


@dataclass(frozen=True)
class Not:
    child: "FuzzyExpr"


@dataclass(frozen=True)
class And:
    left: "FuzzyExpr"
    right: "FuzzyExpr"


@dataclass(frozen=True)
class Or:
    left: "FuzzyExpr"
    right: "FuzzyExpr"


@dataclass(frozen=True)
class Implies:
    left: "FuzzyExpr"
    right: "FuzzyExpr"


@dataclass(frozen=True)
class Exists:
    children: tuple
    p: float | None = None


@dataclass(frozen=True)
class Forall:
    children: tuple
    p: float | None = None


FuzzyExpr = Union[Predicate, Constant, Not, And, Or, Implies, Exists, Forall]


def to_text(expr: FuzzyExpr) -> str:
    """Parenthesised prefix form, e.g. ``(forall 2 (implies (P 1 A) (exists 2 (P 2 B))))``."""
    if isinstance(expr, Predicate):
        return f"(P {expr.position} {expr.activity!r})"
    if isinstance(expr, Constant):
        return f"(const {expr.truth:g})"
    if isinstance(expr, Not):
        return f"(not {to_text(expr.child)})"
    if isinstance(expr, (And, Or, Implies)):
        return f"({type(expr).__name__.lower()} {to_text(expr.left)} {to_text(expr.right)})"
    if isinstance(expr, (Exists, Forall)):
        p = "default" if expr.p is None else f"{expr.p:g}"
        body = " ".join(to_text(c) for c in expr.children)
        return f"({type(expr).__name__.lower()} {p}{' ' + body if body else ''})"
    raise TypeError(f"not a fuzzy expression: {expr!r}")


def positions(expr: FuzzyExpr) -> set[int]:
    if isinstance(expr, Predicate):
        return {expr.position}
    if isinstance(expr, Not):
        return positions(expr.child)
    if isinstance(expr, (And, Or, Implies)):
        return positions(expr.left) | positions(expr.right)
    if isinstance(expr, (Exists, Forall)):
        return set().union(*(positions(c) for c in expr.children)) if expr.children else set()
    return set()


def compile(c: MinedConstraint, max_len: int, p_exists: float | None = None,
            p_forall: float | None = None) -> FuzzyExpr:
    """Unfold ``c`` into position-quantified logic over positions ``1..max_len``.

    Iterated conjunctions become :class:`Forall`, iterated disjunctions
    :class:`Exists`; an empty disjunction is ``Constant(0)`` and an empty
    conjunction ``Constant(1)``.
    """
    if max_len < 1:
        raise CompileError("max_len must be positive")
    rng = range(1, max_len + 1)

    def some(preds):
        preds = tuple(preds)
        return Exists(preds, p_exists) if preds else Constant(0.0)

    def every(items):
        items = tuple(items)
        return Forall(items, p_forall) if items else Constant(1.0)

    t = c.template
    a = c.args[0]
    b = c.args[1] if len(c.args) > 1 else None
    if t is Template.EXISTENCE:
        return some(Predicate(i, a) for i in rng)
    if t is Template.RESPONDED_EXISTENCE:
        return Implies(some(Predicate(i, a) for i in rng), some(Predicate(i, b) for i in rng))
    if t is Template.RESPONSE:
        return every(Implies(Predicate(i, a), some(Predicate(j, b) for j in range(i + 1, max_len + 1)))
                     for i in rng)
    if t is Template.PRECEDENCE:
        return every(Implies(Predicate(i, b), some(Predicate(j, a) for j in range(1, i))) for i in rng)
    if t is Template.SUCCESSION:
        return And(compile(MinedConstraint(Template.RESPONSE, c.args), max_len, p_exists, p_forall),
                   compile(MinedConstraint(Template.PRECEDENCE, c.args), max_len, p_exists, p_forall))
    if t is Template.CHAIN_RESPONSE:
        chain = every(Implies(Predicate(i, a), Predicate(i + 1, b)) for i in range(1, max_len))
        return And(chain, Not(Predicate(max_len, a)))
    if t is Template.CHOICE:
        return Or(some(Predicate(i, a) for i in rng), some(Predicate(i, b) for i in rng))
    if t is Template.EXCLUSIVE_CHOICE:
        ex_a = some(Predicate(i, a) for i in rng)
        ex_b = some(Predicate(i, b) for i in rng)
        return And(Or(ex_a, ex_b), Not(And(ex_a, ex_b)))
    raise CompileError(f"unsupported template {t!r}")


# ---------------------------------------------------------------------------
# evaluation on graph nodes


@dataclass(frozen=True)
class Semantics:
    mode: str = "smooth"  # or "crisp": quantifiers become max/min, no clamping
    p_exists: float = 2.0
    p_forall: float = 2.0
    eps: float = EPS

    def __post_init__(self):
        if self.mode not in ("smooth", "crisp"):
            raise ValueError(f"unknown aggregator mode {self.mode!r}")
        _check_p(self.p_exists)
        _check_p(self.p_forall)

    def exists(self, g: Graph, x: Node, p: float | None = None, axis: int = -1) -> Node:
        if self.mode == "crisp":
            return g.max(x, axis=axis)
        return pmean(g, g.clamp(x, self.eps, 1 - self.eps), self.p_exists if p is None else p, axis)

    def forall(self, g: Graph, x: Node, p: float | None = None, axis: int = -1) -> Node:
        if self.mode == "crisp":
            return g.min(x, axis=axis)
        return pmean_error(g, g.clamp(x, self.eps, 1 - self.eps), self.p_forall if p is None else p, axis)


def evaluate(g: Graph, expr: FuzzyExpr, act: Node, vocab: Vocabulary, sem: Semantics) -> Node:
    """Truth of ``expr`` for each trace of a batch; ``act`` has shape ``(B, L, |A|)``."""
    batch, length = act.shape[0], act.shape[1]

    def go(e) -> Node:
        if isinstance(e, Predicate):
            if not 1 <= e.position <= length:
                raise CompileError(f"predicate position {e.position} outside 1..{length}")
            return g.slice(act, (slice(None), e.position - 1, vocab.activity_index(e.activity)))
        if isinstance(e, Constant):
            return g.constant(np.full(batch, float(e.truth)))
        if isinstance(e, Not):
            return fuzzy_not(go(e.child))
        if isinstance(e, And):
            return fuzzy_and(go(e.left), go(e.right))
        if isinstance(e, Or):
            return fuzzy_or(go(e.left), go(e.right))
        if isinstance(e, Implies):
            return fuzzy_implies(go(e.left), go(e.right))
        if isinstance(e, (Exists, Forall)):
            if not e.children:
                return g.constant(np.full(batch, 0.0 if isinstance(e, Exists) else 1.0))
            stacked = gather(e.children)
            agg = sem.exists if isinstance(e, Exists) else sem.forall
            return agg(g, stacked, e.p, axis=1)
        raise TypeError(f"not a fuzzy expression: {e!r}")

    def gather(children) -> Node:
        # all-predicate children collapse to one fancy-index read
        if all(isinstance(c, Predicate) for c in children):
            for c in children:
                if not 1 <= c.position <= length:
                    raise CompileError(f"predicate position {c.position} outside 1..{length}")
            pos = np.array([c.position - 1 for c in children])
            idx = np.array([vocab.activity_index(c.activity) for c in children])
            return g.slice(act, (slice(None), pos, idx))
        return g.concat([g.reshape(go(c), (batch, 1)) for c in children], axis=1)

    return go(expr)


def predicate_P(out: ProbTrace, i: int, a: str) -> float | np.ndarray:
    """Probability that the reconstruction holds activity ``a`` at 1-based position ``i``."""
    probs = out.activities
    length = probs.shape[-2]
    if not 1 <= i <= length:
        raise ValueError(f"position {i} outside 1..{length}")
    return probs[..., i - 1, out.vocab.activity_index(a)]


def satisfiability(expr: FuzzyExpr, out: ProbTrace, sem: Semantics = Semantics()) -> float | np.ndarray:
    """Truth value of ``expr`` on one reconstruction, or one value per trace for a batch."""
    act = np.asarray(out.activities, dtype=np.float64)
    single = act.ndim == 2
    g = Graph()
    node = evaluate(g, expr, g.constant(act[None] if single else act), out.vocab, sem)
    return float(node.value[0]) if single else node.value.copy()


# ---------------------------------------------------------------------------
# partition of training traces


@dataclass(frozen=True)
class Partition:
    t_plus: tuple[Trace, ...]
    t_minus: tuple[Trace, ...] = ()
    excluded: tuple[Trace, ...] = ()
    synthetic_minus: bool = False


def partition(log: EventLog | Sequence[Trace], c: MinedConstraint) -> Partition:
    """Split traces into satisfying (t+), violating (t-) and vacuous ones.

    Templates without an activation notion (Existence, Choice,
    ExclusiveChoice) split on ``holds`` alone and exclude nothing.
    """
    plus, minus, excluded = [], [], []
    for t in log:
        v = evaluate_crisp(c, t)
        if c.template.has_activation and not v.activated:
            excluded.append(t)
        elif v.holds:
            plus.append(t)
        else:
            minus.append(t)
    if not plus:
        raise PartitionError(f"no trace activates and satisfies {c}; nothing to fine-tune toward")
    return Partition(tuple(plus), tuple(minus), tuple(excluded))


_DROP_CONSEQUENT = {Template.RESPONSE, Template.SUCCESSION, Template.CHAIN_RESPONSE, Template.RESPONDED_EXISTENCE}


def synthesize_violations(t_plus: Sequence[Trace], c: MinedConstraint, count: int,
                          rng: np.random.Generator) -> list[Trace]:
    """Crisp violations made from copies of t+ traces by deleting consequent (or antecedent) events."""
    if c.template in _DROP_CONSEQUENT:
        drop = c.args[1]
    elif c.template is Template.PRECEDENCE:
        drop = c.args[0]
    else:
        raise NotImplementedError(f"{c.template.value} has no removable consequent")
    if count <= 0 or not t_plus:
        return []
    candidates = []
    for t in t_plus:
        kept = tuple(e for e in t.events if e.activity != drop)
        if kept and not evaluate_crisp(c, [e.activity for e in kept]).holds:
            candidates.append((t.case_id, kept))
    if not candidates:
        raise PartitionError(f"no t+ trace yields a violation of {c} by deleting {drop!r}")
    picks = rng.integers(len(candidates), size=count)
    return [Trace(f"{candidates[k][0]}~violation{n}", candidates[k][1]) for n, k in enumerate(picks)]


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass(frozen=True)
class FinetuneConfig:
    lambda_rec: float = 1.0
    # reconstruction MSE sits near 1e-5 after pretraining while 1 - Sat is O(1)
    lambda_sat: float = 0.01
    p_exists: float = 2.0
    p_forall: float = 2.0
    epochs: int = 100
    lr: float = 1e-3
    seed: int = 0
    mode: str = "smooth"
    replay_fraction: float = 0.25
    batch: int = 32
    noise_rate: float = 0.1
    scope: str = "trace"  # or "max_len"

    def __post_init__(self):
        if self.lambda_rec < 0 or self.lambda_sat < 0 or self.lambda_rec + self.lambda_sat <= 0:
            raise ValueError("lambda weights must be non-negative with a positive sum")
        if not 0.0 <= self.replay_fraction <= 1.0:
            raise ValueError("replay_fraction must be in [0, 1]")
        if self.scope not in ("trace", "max_len"):
            raise ValueError(f"unknown quantifier scope {self.scope!r}")
        self.semantics()

    def semantics(self) -> Semantics:
        return Semantics(self.mode, self.p_exists, self.p_forall)


def ltn_objective(rec, sat, lambda_rec: float, lambda_sat: float):
    """``lambda_rec * rec + lambda_sat * (1 - sat)``; minimising it maximises satisfiability."""
    return lambda_rec * rec + lambda_sat * (1 - sat)


@dataclass
class SatTerms:
    sat: Node
    t_plus_truth: list[np.ndarray] = field(default_factory=list)


def trace_truth(g: Graph, c: MinedConstraint, act: Node, lengths: np.ndarray, vocab: Vocabulary,
                sem: Semantics, scope: str = "trace") -> Node:
    """Truth of ``c`` for each reconstruction in a batch; ``act`` has shape ``(B, L, |A|)``.

    With ``scope="trace"`` row ``k`` is judged over its own positions
    ``1..lengths[k]``; with ``scope="max_len"`` every row is judged over
    all ``L`` positions, PAD slots included.
    """
    if scope == "max_len":
        return evaluate(g, compile(c, act.shape[1], sem.p_exists, sem.p_forall), act, vocab, sem)
    if scope != "trace":
        raise ValueError(f"unknown quantifier scope {scope!r}")
    lengths = np.clip(np.asarray(lengths, dtype=int), 1, act.shape[1])
    parts, rows_seen = [], []
    for n in np.unique(lengths):
        rows = np.flatnonzero(lengths == n)
        expr = compile(c, int(n), sem.p_exists, sem.p_forall)
        parts.append(evaluate(g, expr, g.slice(act, (rows,)), vocab, sem))
        rows_seen.append(rows)
    if len(parts) == 1:
        return parts[0]
    inverse = np.argsort(np.concatenate(rows_seen), kind="stable")
    return g.slice(g.concat(parts, axis=0), (inverse,))


def sat_objective(g: Graph, model: Model, pnodes: Sequence[Node], constraints: Sequence[MinedConstraint],
                  x_plus: np.ndarray, len_plus: np.ndarray, x_minus: np.ndarray, len_minus: np.ndarray,
                  sem: Semantics, scope: str = "trace") -> SatTerms:
    """SatAgg over ``forall t+: phi`` and ``forall t-: not phi`` for every constraint."""
    aggregands = []
    terms = SatTerms(sat=None)
    out_plus = forward_graph(g, model.arch, pnodes, g.constant(x_plus))
    out_minus = forward_graph(g, model.arch, pnodes, g.constant(x_minus)) if len(x_minus) else None
    for c in constraints:
        phi = trace_truth(g, c, out_plus.activities, len_plus, model.vocab, sem, scope)
        terms.t_plus_truth.append(phi.value)
        aggregands.append(g.reshape(sem.forall(g, phi, axis=0), (1,)))
        if out_minus is not None:
            neg = fuzzy_not(trace_truth(g, c, out_minus.activities, len_minus, model.vocab, sem, scope))
            aggregands.append(g.reshape(sem.forall(g, neg, axis=0), (1,)))
    terms.sat = sem.forall(g, g.concat(aggregands, axis=0), axis=0)
    return terms


def _lengths(traces: Sequence[Trace]) -> np.ndarray:
    return np.array([len(t) for t in traces], dtype=int)


def _snapshot(model: Model, constraints, x_plus, len_plus, x_pre, sem, scope) -> tuple[float, float]:
    """Clean-input t+ satisfiability and replay-pool reconstruction error of the current model."""
    g = Graph()
    out = forward_graph(g, model.arch, model.bind(g), g.constant(x_plus))
    sat = float(np.mean([trace_truth(g, c, out.activities, len_plus, model.vocab, sem, scope).value.mean()
                         for c in constraints]))
    rec = float(np.mean(reconstruction_error(x_pre, forward(model, x_pre).flat()))) if len(x_pre) else 0.0
    return sat, rec


def finetune(model: Model, pretrain_log: EventLog | Sequence[Trace], part: Partition,
             kb, config: FinetuneConfig = FinetuneConfig()) -> Model:
    """Refine a pretrained model towards the knowledge base.

    Each step minimises ``lambda_rec * L_rec + lambda_sat * (1 - SatAgg)``
    where ``L_rec`` is the denoising reconstruction loss on a mini-batch
    drawn from a seeded replay sample of ``pretrain_log`` plus t+, and
    SatAgg is computed on the clean t+ / t- reconstructions.

    ``meta["finetune_history"]`` holds one row per epoch: step means of
    ``loss``, ``rec_term`` and ``sat_term``, plus end-of-epoch snapshots
    ``t_plus_sat`` (mean truth on clean t+) and ``replay_rec`` (clean
    reconstruction error over ``pretrain_log``). The pre-training-step
    snapshot taken before the first step is ``meta["finetune_start"]``.
    """
    if not part.t_plus:
        raise ValueError("fine-tuning needs a non-empty t+")
    constraints = list(kb)
    if not constraints:
        raise ValueError("fine-tuning needs at least one constraint")
    model = model.copy()
    vocab, arch = model.vocab, model.arch
    for c in constraints:
        for a in c.args:
            vocab.activity_index(a)
    sem = config.semantics()
    x_pre = encode_log(list(pretrain_log), vocab, arch.max_len)
    x_plus = encode_log(part.t_plus, vocab, arch.max_len)
    x_minus = encode_log(part.t_minus, vocab, arch.max_len)
    len_plus, len_minus = _lengths(part.t_plus), _lengths(part.t_minus)

    replay_rng = substream(config.seed, "replay")
    shuffle_rng = substream(config.seed, "shuffle")
    noise_rng = substream(config.seed, "corruption")
    opt = Adam(model.params, lr=config.lr)
    sat0, rec0 = _snapshot(model, constraints, x_plus, len_plus, x_pre, sem, config.scope)
    history = []
    for epoch in range(1, config.epochs + 1):
        k = int(round(config.replay_fraction * len(x_pre)))
        picked = replay_rng.choice(len(x_pre), size=k, replace=False) if k else np.zeros(0, dtype=int)
        pool = np.concatenate([x_pre[np.sort(picked)], x_plus])
        order = shuffle_rng.permutation(len(pool))
        sums = dict(loss=0.0, rec_term=0.0, sat_term=0.0)
        steps = 0
        for start in range(0, len(pool), config.batch):
            target = pool[order[start:start + config.batch]]
            noisy = corrupt(target, config.noise_rate, noise_rng, vocab)
            try:
                g = Graph()
                pnodes = model.bind(g)
                rec = reconstruction_loss(g, target, forward_graph(g, arch, pnodes, g.constant(noisy)))
                terms = sat_objective(g, model, pnodes, constraints, x_plus, len_plus, x_minus, len_minus,
                                      sem, config.scope)
                loss = ltn_objective(rec, terms.sat, config.lambda_rec, config.lambda_sat)
                grads = g.backward(loss)
            except NonFiniteError as exc:
                raise DivergenceError(epoch, str(exc)) from exc
            opt.step(model.params, [grads[p.id] for p in pnodes])
            sums["loss"] += float(loss.value)
            sums["rec_term"] += float(rec.value)
            sums["sat_term"] += float(terms.sat.value)
            steps += 1
        row = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}}
        if not np.isfinite(row["loss"]):
            raise DivergenceError(epoch, "non-finite loss")
        row["t_plus_sat"], row["replay_rec"] = _snapshot(model, constraints, x_plus, len_plus, x_pre, sem,
                                                         config.scope)
        history.append(row)
    model.meta = {**model.meta, "stage": "finetune", "finetune_epochs": config.epochs,
                  "finetune_seed": config.seed, "constraints": [str(c) for c in constraints],
                  "synthetic_t_minus": part.synthetic_minus, "finetune_history": history,
                  "finetune_start": {"t_plus_sat": sat0, "replay_rec": rec0}}
    return model


def mean_satisfiability(model: Model, traces: Sequence[Trace], c: MinedConstraint,
                        sem: Semantics = Semantics(), scope: str = "trace") -> float:
    """Mean truth of ``c`` over the clean reconstructions of ``traces``."""
    x = encode_log(list(traces), model.vocab, model.arch.max_len)
    out = forward(model, x)
    g = Graph()
    truth = trace_truth(g, c, g.constant(out.activities), _lengths(traces), model.vocab, sem, scope)
    return float(np.mean(truth.value))
