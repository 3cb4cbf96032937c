"""Scoring, thresholding, metrics and the end-to-end experiment harness."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import re
from dataclasses import asdict, dataclass, field, replace
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .anomaly import AnomalyType, LabeledLog, inject
from .autoencoder import LengthError, Model, PretrainConfig, encode_trace, forward, pretrain, reconstruction_error
from .declare import MinedConstraint, Pattern, Template, filter_constraints, mine
from .eventlog import (EventLog, LikelihoodGraph, build_vocab, default_graph, filter_by_length, generate_log,
                       max_trace_length)
from .ltn import FinetuneConfig, Partition, finetune, mean_satisfiability, partition, synthesize_violations
from .seeding import substream

logger = logging.getLogger(__name__)


class HeuristicError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreTable:
    errors: Mapping[str, float]
    model_id: str = ""

    def sorted(self) -> list[tuple[str, float]]:
        return sorted(self.errors.items(), key=lambda kv: (kv[1], kv[0]))

    def values(self) -> np.ndarray:
        return np.array(list(self.errors.values()), dtype=np.float64)

    def __len__(self):
        return len(self.errors)


def model_id(model: Model) -> str:
    h = hashlib.sha256()
    for p in model.params:
        h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def score(model: Model, log: EventLog, batch: int = 512) -> ScoreTable:
    """Reconstruction error per case on clean (uncorrupted) inputs."""
    vocab, max_len = model.vocab, model.arch.max_len
    traces = list(log)
    encs = []
    for t in traces:
        try:
            encs.append(encode_trace(t, vocab, max_len))
        except (LengthError, ValueError) as exc:
            raise type(exc)(f"case {t.case_id!r}: {exc}") from exc
    errors = {}
    for start in range(0, len(traces), batch):
        x = np.stack(encs[start:start + batch])
        err = np.atleast_1d(reconstruction_error(x, forward(model, x)))
        for t, e in zip(traces[start:start + batch], err):
            errors[t.case_id] = float(e)
    return ScoreTable(errors, model_id(model))


def parse_heuristic(text: str) -> tuple[str, float | None]:
    """``"elbow"``, ``"percentile(95)"`` or ``"mean_plus_k_sigma(2)"``."""
    m = re.fullmatch(r"\s*(\w+)\s*(?:\(\s*([-+0-9.eE]+)\s*\))?\s*", text)
    if not m or m.group(1) not in ("elbow", "percentile", "mean_plus_k_sigma"):
        raise HeuristicError(f"unknown threshold heuristic {text!r}")
    name, arg = m.group(1), m.group(2)
    if name != "elbow" and arg is None:
        raise HeuristicError(f"{name} needs a parameter, e.g. {name}(95)")
    return name, None if arg is None else float(arg)


def select_threshold(scores: ScoreTable | Sequence[float], heuristic: str = "elbow", param: float | None = None) -> float:
    """Pick a cut-off on the error distribution.

    ``elbow`` is the midpoint of the widest gap between consecutive sorted
    errors in the upper half; ``percentile`` interpolates linearly;
    ``mean_plus_k_sigma`` uses the population standard deviation.
    """
    if "(" in heuristic:
        heuristic, param = parse_heuristic(heuristic)
    errs = np.sort(scores.values() if isinstance(scores, ScoreTable) else np.asarray(scores, dtype=np.float64))
    if heuristic == "elbow":
        n = len(errs)
        if n < 3:
            raise HeuristicError(f"elbow needs at least 3 scores, got {n}; use percentile(q) instead")
        lo = n // 2
        gaps = np.diff(errs[lo:])
        k = int(np.argmax(gaps))  # first maximum -> smallest midpoint among ties
        return float((errs[lo + k] + errs[lo + k + 1]) / 2.0)
    if not len(errs):
        raise HeuristicError("no scores to threshold")
    if heuristic == "percentile":
        if param is None or not 0 <= param <= 100:
            raise HeuristicError(f"percentile needs q in [0, 100], got {param}")
        return float(np.percentile(errs, param))
    if heuristic == "mean_plus_k_sigma":
        return float(errs.mean() + (param or 0.0) * errs.std())
    raise HeuristicError(f"unknown threshold heuristic {heuristic!r}")


def classify(scores: ScoreTable, threshold: float) -> dict[str, bool]:
    """True means anomalous: error strictly above the threshold."""
    return {cid: err > threshold for cid, err in scores.errors.items()}


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


@dataclass
class DetectionReport:
    threshold: float | None
    predictions: dict[str, bool]
    tp: int
    fp: int
    tn: int
    fn: int
    groups: dict[str, dict] = field(default_factory=dict)

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def group_flagged(self, name: str) -> int:
        return self.groups.get(name, {}).get("flagged", 0)

    def summary(self) -> dict:
        return {"threshold": self.threshold, "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
                "precision": self.precision, "recall": self.recall, "f1": self.f1, "groups": self.groups}


def metrics(pred: Mapping[str, bool], truth: Mapping[str, bool], groups: Mapping[str, str] | None = None,
            threshold: float | None = None) -> DetectionReport:
    """Confusion counts with anomalous as the positive class; 0/0 ratios are 0.

    ``groups`` maps case ids to a group name (e.g. normal / rare / anomalous);
    each group reports its size, flagged count and flagged rate.
    """
    if set(pred) != set(truth):
        missing = sorted(set(pred) ^ set(truth))[:5]
        raise ValueError(f"prediction and truth cover different cases (e.g. {missing})")
    tp = fp = tn = fn = 0
    for cid, p in pred.items():
        t = truth[cid]
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    breakdown = {}
    if groups is not None:
        for cid, p in pred.items():
            name = groups.get(cid, "anomalous" if truth[cid] else "normal")
            row = breakdown.setdefault(name, {"size": 0, "flagged": 0})
            row["size"] += 1
            row["flagged"] += int(p)
        for row in breakdown.values():
            row["flagged_rate"] = _ratio(row["flagged"], row["size"])
    return DetectionReport(threshold, dict(pred), tp, fp, tn, fn, dict(sorted(breakdown.items())))


def case_groups(labeled: LabeledLog, rare_ids: Iterable[str]) -> dict[str, str]:
    """normal / rare (rare-conformant, not injected) / anomalous."""
    rare = set(rare_ids)
    out = {}
    for cid, lab in labeled.labels.items():
        out[cid] = "anomalous" if lab.anomalous else ("rare" if cid in rare else "normal")
    return out


def detect(model: Model, labeled: LabeledLog, rare_ids: Iterable[str] = (), heuristic: str = "elbow") -> DetectionReport:
    scores = score(model, labeled.log)
    thr = select_threshold(scores, heuristic)
    return metrics(classify(scores, thr), labeled.truth(), case_groups(labeled, rare_ids), thr)


# ---------------------------------------------------------------------------
# experiment pipeline: generate -> inject -> pretrain -> finetune -> detect


@dataclass(frozen=True)
class ExperimentConfig:
    n_cases: int = 1000
    fraction: float = 0.3
    max_len: int = 16
    anomaly_types: tuple[str, ...] = tuple(t.value for t in AnomalyType)
    max_support: float = 0.1
    min_confidence: float = 0.9
    # flag the expected contamination share; the max-gap elbow lands in the sparse upper tail here
    heuristic: str = "percentile(70)"
    synthesize_t_minus: bool = True
    pretrain: PretrainConfig = PretrainConfig()
    finetune: FinetuneConfig = FinetuneConfig()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anomaly_types"] = list(self.anomaly_types)
        d["pretrain"]["widths"] = list(self.pretrain.widths)
        return d


def stage_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(2**31 - 1))


def rare_constraint(graph: LikelihoodGraph, template: Template | str) -> MinedConstraint:
    """The constraint of ``template`` that encodes the graph's rare branch.

    Choice-style templates pair the rare entry with the alternative it
    replaces at the split node.
    """
    template = Template.parse(template)
    if len(graph.rare_branch) < 2:
        raise ValueError("graph has no two-activity rare branch")
    a, b = graph.rare_branch[:2]
    if template is Template.EXISTENCE:
        return MinedConstraint(template, (a,))
    if template in (Template.CHOICE, Template.EXCLUSIVE_CHOICE):
        split = next(n for n, out in graph.edges.items() if any(t == a for t, _ in out))
        alt = next(t for t, _ in graph.edges[split] if t != a)
        return MinedConstraint(template, (a, alt))
    return MinedConstraint(template, (a, b))


@dataclass
class Setting:
    """One generated + injected log shared by every model trained for it."""

    rare_count: int
    seed: int
    train: EventLog
    labeled: LabeledLog
    rare_ids: list[str]
    max_len: int


def prepare(cfg: ExperimentConfig, rare_count: int, seed: int, graph: LikelihoodGraph | None = None) -> Setting:
    graph = graph or default_graph()
    log = generate_log(graph, cfg.n_cases, rare_count, stage_seed(seed, "generate"))
    log = filter_by_length(log, cfg.max_len)
    labeled = inject(log, cfg.fraction, cfg.anomaly_types, substream(seed, "inject"))
    # headroom for the length-increasing anomalies
    max_len = max(max_trace_length(log), max_trace_length(labeled.log))
    rare_ids = [c for c in log.meta.get("rare_cases", []) if c in set(log.case_ids())]
    return Setting(rare_count, seed, log, labeled, rare_ids, max_len)


def _pretrain_cfg(cfg: ExperimentConfig, seed: int) -> PretrainConfig:
    return replace(cfg.pretrain, seed=stage_seed(seed, "pretrain"))


def train_baseline(cfg: ExperimentConfig, s: Setting) -> Model:
    """Autoencoder trained on every conformant trace, rare ones included."""
    return pretrain(s.train, _pretrain_cfg(cfg, s.seed), build_vocab(s.train), s.max_len)


@dataclass
class LtnRun:
    model: Model
    constraint: MinedConstraint
    partition: Partition
    history: list[dict]
    sat_before: float
    sat_after: float


def train_ltn(cfg: ExperimentConfig, s: Setting, template: Template | str,
              graph: LikelihoodGraph | None = None, pretrained: Model | None = None) -> LtnRun:
    """Pretrain without the rare traces, then fine-tune on them under one constraint."""
    graph = graph or default_graph()
    vocab = build_vocab(s.train)
    pre_log = s.train.without(s.rare_ids)
    rare_log = s.train.only(s.rare_ids)
    if pretrained is None:
        pretrained = pretrain(pre_log, _pretrain_cfg(cfg, s.seed), vocab, s.max_len)
    target = rare_constraint(graph, template)
    kb = filter_constraints(mine(s.train, [target.template], vocab), cfg.max_support, cfg.min_confidence,
                            [Pattern(target.template, target.args)])
    c = kb.constraints[0]
    part = partition(rare_log, c)
    if not part.t_minus and cfg.synthesize_t_minus and c.template.has_activation:
        minus = synthesize_violations(part.t_plus, c, len(part.t_plus), substream(s.seed, "violations"))
        part = Partition(part.t_plus, tuple(minus), part.excluded, synthetic_minus=True)
    ft_cfg = replace(cfg.finetune, seed=stage_seed(s.seed, "finetune"))
    sem = ft_cfg.semantics()
    before = mean_satisfiability(pretrained, part.t_plus, c, sem, ft_cfg.scope)
    model = finetune(pretrained, pre_log, part, kb, ft_cfg)
    after = mean_satisfiability(model, part.t_plus, c, sem, ft_cfg.scope)
    return LtnRun(model, c, part, model.meta["finetune_history"], before, after)


@dataclass
class AblationCell:
    template: str
    rare_count: int
    f1_baseline: float | None = None
    f1_ltn: float | None = None
    sat_after: float | None = None
    rare_fp_baseline: int | None = None
    rare_fp_ltn: int | None = None
    error: str | None = None

    @property
    def delta(self) -> float | None:
        if self.f1_baseline is None or self.f1_ltn is None:
            return None
        return self.f1_ltn - self.f1_baseline


def ablate(cfg: ExperimentConfig, templates: Sequence[Template | str], sweep: Sequence[int], seed: int = 0,
           graph: LikelihoodGraph | None = None) -> list[AblationCell]:
    """F1 of baseline vs fine-tuned model for every (template, rare count).

    The baseline and the rare-free pretrained model are trained once per
    rare count and reused across templates. A failing stage is recorded in
    the cell's ``error`` and the sweep continues.
    """
    graph = graph or default_graph()
    templates = [Template.parse(t) for t in templates]
    cells = []
    for rare_count in sweep:
        try:
            s = prepare(cfg, rare_count, seed, graph)
            base = detect(train_baseline(cfg, s), s.labeled, s.rare_ids, cfg.heuristic)
            pre = pretrain(s.train.without(s.rare_ids), _pretrain_cfg(cfg, seed), build_vocab(s.train), s.max_len)
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            logger.warning("rare_count=%s baseline failed: %s", rare_count, exc)
            cells.extend(AblationCell(t.value, rare_count, error=f"{type(exc).__name__}: {exc}") for t in templates)
            continue
        for t in templates:
            cell = AblationCell(t.value, rare_count, f1_baseline=base.f1, rare_fp_baseline=base.group_flagged("rare"))
            try:
                run = train_ltn(cfg, s, t, graph, pretrained=pre)
                rep = detect(run.model, s.labeled, s.rare_ids, cfg.heuristic)
                cell.f1_ltn, cell.sat_after, cell.rare_fp_ltn = rep.f1, run.sat_after, rep.group_flagged("rare")
            except Exception as exc:  # noqa: BLE001 - recorded per cell
                logger.warning("template=%s rare_count=%s failed: %s", t.value, rare_count, exc)
                cell.error = f"{type(exc).__name__}: {exc}"
            cells.append(cell)
    return sorted(cells, key=lambda c: (c.template, c.rare_count))


ABLATION_COLUMNS = ["template", "rare_count", "f1_baseline", "f1_ltn", "sat_after",
                    "rare_fp_baseline", "rare_fp_ltn", "error"]


def write_ablation(cells: Sequence[AblationCell], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(ABLATION_COLUMNS)
    for c in cells:
        row = asdict(c)
        writer.writerow(["" if row[k] is None else (repr(row[k]) if isinstance(row[k], float) else row[k])
                         for k in ABLATION_COLUMNS])


def ablation_csv(cells: Sequence[AblationCell]) -> str:
    buf = io.StringIO()
    write_ablation(cells, buf)
    return buf.getvalue()


def write_plot_data(cells: Sequence[AblationCell], stream: IO[str]) -> None:
    """Long-form rows for per-constraint bar (F1) and line (satisfiability) charts."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["template", "rare_count", "series", "value"])
    for c in cells:
        for series, value in (("f1_baseline", c.f1_baseline), ("f1_ltn", c.f1_ltn), ("sat_after", c.sat_after)):
            if value is not None:
                writer.writerow([c.template, c.rare_count, series, repr(value)])
