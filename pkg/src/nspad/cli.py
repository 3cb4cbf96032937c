"""Command-line pipeline: generate, inject, mine, pretrain, finetune, detect, evaluate, ablate.

Every command reads files, writes files, and drops a ``<output>.manifest.json``
beside its main output recording input/output digests and the full
configuration. Settings resolve as flag > ``--config`` JSON > default.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import types
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .anomaly import AnomalyType, InjectionError, InjectionParams, LabeledLog, inject, read_labels, write_labels
from .autoencoder import DivergenceError, LengthError, PretrainConfig, load_model, pretrain, save_model
from .declare import (DeclareError, SelectionError, Template, filter_constraints, mine, parse_whitelist,
                      read_knowledge_base, write_constraints)
from .detect import (ExperimentConfig, HeuristicError, ablate, case_groups, classify, metrics, parse_heuristic,
                     score, select_threshold, write_ablation, write_plot_data)
from .eventlog import LogError, build_vocab, default_graph, generate_log, log_to_csv_text, max_trace_length, read_log
from .ltn import FinetuneConfig, Partition, PartitionError, finetune, partition, synthesize_violations
from .seeding import substream
from .tensorgrad import NonFiniteError

logger = logging.getLogger("nspad")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_SELECTION = 0, 2, 3, 4, 5


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class GenerateConfig:
    cases: int = 1000
    rare: int = 10
    seed: int = 0


@dataclass(frozen=True)
class InjectConfig:
    fraction: float = 0.3
    types: tuple[str, ...] = tuple(t.value for t in AnomalyType)
    seed: int = 0
    max_span: int = 2
    max_shift: int = 2


@dataclass(frozen=True)
class MineConfig:
    templates: tuple[str, ...] = tuple(t.value for t in Template)
    max_support: float = 0.05
    min_confidence: float = 0.9
    whitelist: str | None = None
    select: bool = True


@dataclass(frozen=True)
class EncodingConfig:
    max_len: int | None = None
    headroom: int = 2


@dataclass(frozen=True)
class PartitionConfig:
    synthesize_t_minus: bool = True
    seed: int = 0


@dataclass(frozen=True)
class DetectConfig:
    heuristic: str = "elbow"


@dataclass(frozen=True)
class AblateConfig:
    templates: tuple[str, ...] = ("Response", "ExclusiveChoice")
    rare_counts: tuple[int, ...] = (10, 25, 50)
    seed: int = 0
    n_cases: int = 1000
    fraction: float = 0.3
    max_len: int = 16
    max_support: float = 0.1
    min_confidence: float = 0.9
    heuristic: str = "percentile(70)"


@dataclass(frozen=True)
class RunConfig:
    generate: GenerateConfig = GenerateConfig()
    inject: InjectConfig = InjectConfig()
    mine: MineConfig = MineConfig()
    encoding: EncodingConfig = EncodingConfig()
    pretrain: PretrainConfig = PretrainConfig()
    partition: PartitionConfig = PartitionConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    detect: DetectConfig = DetectConfig()
    ablate: AblateConfig = AblateConfig()

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data, "config")

    def experiment(self) -> ExperimentConfig:
        a = self.ablate
        return ExperimentConfig(n_cases=a.n_cases, fraction=a.fraction, max_len=a.max_len,
                                anomaly_types=self.inject.types, max_support=a.max_support,
                                min_confidence=a.min_confidence, heuristic=a.heuristic,
                                synthesize_t_minus=self.partition.synthesize_t_minus,
                                pretrain=self.pretrain, finetune=self.finetune)


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return _build(tp, value, where)
    if origin is tuple:
        if isinstance(value, str) or not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(_coerce(args[0], v, f"{where}[]") for v in value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def _build(cls, data: dict, where: str):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _override(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Apply ``{"section.field": value}`` flag values on top of ``cfg``."""
    sections: dict[str, dict] = {}
    for key, value in overrides.items():
        section, name = key.split(".")
        sections.setdefault(section, {})[name] = value
    for section, values in sections.items():
        current = asdict(getattr(cfg, section))
        current.update(values)
        cfg = replace(cfg, **{section: _build(type(getattr(cfg, section)), _plain(current), f"flags.{section}")})
    return cfg


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    # manifests embed the config under "config"
    if "command" in data and "config" in data:
        data = data["config"]
    return RunConfig.from_dict(data)


# ---------------------------------------------------------------------------
# manifests and small file helpers


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path: str | Path, command: str, cfg: RunConfig, inputs: Sequence[str], outputs: Sequence[str],
                   extra: dict | None = None) -> dict:
    body = {
        "command": command,
        "version": __version__,
        "config": cfg.to_dict(),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
    }
    if extra:
        body["extra"] = extra
    body["digest"] = hashlib.sha256(json.dumps(body, sort_keys=True).encode("utf-8")).hexdigest()
    # the timestamp stays out of the digest
    body["created"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return body


def manifest_path(output: str | Path) -> Path:
    return Path(str(output) + ".manifest.json")


def read_case_list(path: str) -> list[str]:
    """Case ids from a ``generate`` manifest (its rare cases) or a text file, one id per line."""
    text = Path(path).read_text(encoding="utf-8")
    if path.endswith(".json"):
        data = json.loads(text)
        extra = data.get("extra", data)
        if "rare_cases" not in extra:
            raise LogError(f"{path} holds no rare_cases list")
        return [str(c) for c in extra["rare_cases"]]
    return [line.strip() for line in text.splitlines() if line.strip()]


def _write_text(path: str | Path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8", newline="")


def _write_rows(path: str | Path, header: Sequence[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _sibling(output: str, suffix: str) -> str:
    p = Path(output)
    return str(p.with_name(p.name.split(".")[0] + suffix))


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args, cfg: RunConfig) -> dict:
    c = cfg.generate
    log = generate_log(default_graph(), c.cases, c.rare, c.seed, name=Path(args.output).name)
    _write_text(args.output, log_to_csv_text(log))
    extra = {"rare_cases": list(log.meta["rare_cases"]), "n_cases": len(log)}
    write_manifest(manifest_path(args.output), "generate", cfg, [], [args.output], extra)
    return {"cases": len(log), "rare": len(extra["rare_cases"])}


def cmd_inject(args, cfg: RunConfig) -> dict:
    c = cfg.inject
    log = read_log(args.input)
    labeled = inject(log, c.fraction, c.types, substream(c.seed, "selection"),
                     InjectionParams(c.max_span, c.max_shift))
    labels_path = args.labels or _sibling(args.output, ".labels.csv")
    _write_text(args.output, log_to_csv_text(labeled.log))
    with open(labels_path, "w", encoding="utf-8", newline="") as fh:
        write_labels(labeled, fh)
    write_manifest(manifest_path(args.output), "inject", cfg, [args.input], [args.output, labels_path])
    return {"cases": len(labeled.log), "anomalous": len(labeled.anomalous_ids())}


def cmd_mine(args, cfg: RunConfig) -> dict:
    c = cfg.mine
    log = read_log(args.input)
    mined = mine(log, c.templates)
    if c.select:
        kb = filter_constraints(mined, c.max_support, c.min_confidence, parse_whitelist(c.whitelist))
        kept, prov = list(kb), kb.provenance
    else:
        kept, prov = mined, {"selected": False}
    with open(args.output, "w", encoding="utf-8", newline="") as fh:
        write_constraints(kept, fh, prov)
    write_manifest(manifest_path(args.output), "mine", cfg, [args.input], [args.output])
    return {"mined": len(mined), "written": len(kept)}


def cmd_pretrain(args, cfg: RunConfig) -> dict:
    log = read_log(args.input)
    vocab = build_vocab(log)
    inputs = [args.input]
    if args.exclude_cases:
        excluded = read_case_list(args.exclude_cases)
        inputs.append(args.exclude_cases)
        log = log.without(excluded)
    max_len = cfg.encoding.max_len or max_trace_length(read_log(args.input)) + cfg.encoding.headroom
    model = pretrain(log, cfg.pretrain, vocab, max_len)
    with open(args.output, "wb") as fh:
        save_model(model, fh)
    loss_path = args.loss_csv or _sibling(args.output, ".loss.csv")
    _write_rows(loss_path, ["epoch", "mean_loss"],
                [(i, repr(v)) for i, v in enumerate(model.meta["loss_history"], start=1)])
    write_manifest(manifest_path(args.output), "pretrain", cfg, inputs, [args.output, loss_path])
    hist = model.meta["loss_history"]
    return {"traces": len(log), "max_len": max_len, "final_loss": hist[-1] if hist else None}


def cmd_finetune(args, cfg: RunConfig) -> dict:
    with open(args.model, "rb") as fh:
        model = load_model(fh)
    log = read_log(args.input)
    with open(args.constraints, encoding="utf-8") as fh:
        kb = read_knowledge_base(fh)
    kb.check_vocabulary(model.vocab)
    inputs = [args.model, args.input, args.constraints]
    if args.cases:
        target_ids = read_case_list(args.cases)
        inputs.append(args.cases)
        target, replay = log.only(target_ids), log.without(target_ids)
    else:
        target, replay = log, log
    c = kb.constraints[0]
    part = partition(target, c)
    if not part.t_minus and cfg.partition.synthesize_t_minus and c.template.has_activation:
        minus = synthesize_violations(part.t_plus, c, len(part.t_plus), substream(cfg.partition.seed, "violations"))
        part = Partition(part.t_plus, tuple(minus), part.excluded, synthetic_minus=True)
    tuned = finetune(model, replay if len(replay) else target, part, kb, cfg.finetune)
    with open(args.output, "wb") as fh:
        save_model(tuned, fh)
    hist_path = args.history_csv or _sibling(args.output, ".history.csv")
    cols = ["epoch", "loss", "rec_term", "sat_term", "t_plus_sat", "replay_rec"]
    _write_rows(hist_path, cols, [[row["epoch"]] + [repr(row[k]) for k in cols[1:]]
                                  for row in tuned.meta["finetune_history"]])
    write_manifest(manifest_path(args.output), "finetune", cfg, inputs, [args.output, hist_path],
                   {"t_plus": len(part.t_plus), "t_minus": len(part.t_minus),
                    "synthetic_t_minus": part.synthetic_minus, "excluded": len(part.excluded)})
    last = tuned.meta["finetune_history"][-1] if tuned.meta["finetune_history"] else {}
    return {"t_plus": len(part.t_plus), "t_minus": len(part.t_minus), "t_plus_sat": last.get("t_plus_sat")}


def cmd_detect(args, cfg: RunConfig) -> dict:
    with open(args.model, "rb") as fh:
        model = load_model(fh)
    log = read_log(args.input)
    scores = score(model, log)
    threshold = select_threshold(scores, cfg.detect.heuristic)
    pred = classify(scores, threshold)
    inputs = [args.model, args.input]
    report = {"config": {"heuristic": cfg.detect.heuristic}, "model_id": scores.model_id, "threshold": threshold,
              "cases": [{"case_id": cid, "error": err, "anomalous": pred[cid]} for cid, err in scores.errors.items()]}
    if args.labels:
        inputs.append(args.labels)
        with open(args.labels, encoding="utf-8") as fh:
            labeled = LabeledLog(log, read_labels(fh))
        rare = read_case_list(args.rare_cases) if args.rare_cases else []
        if args.rare_cases:
            inputs.append(args.rare_cases)
        rep = metrics(pred, labeled.truth(), case_groups(labeled, rare), threshold)
        report["metrics"] = rep.summary()
    _write_text(args.output, json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_manifest(manifest_path(args.output), "detect", cfg, inputs, [args.output])
    out = {"threshold": threshold, "flagged": sum(pred.values())}
    if "metrics" in report:
        out["f1"] = report["metrics"]["f1"]
    return out


def cmd_evaluate(args, cfg: RunConfig) -> dict:
    try:
        report = json.loads(Path(args.report).read_text(encoding="utf-8"))
        pred = {row["case_id"]: bool(row["anomalous"]) for row in report["cases"]}
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise LogError(f"{args.report} is not a detection report: {exc}") from exc
    with open(args.labels, encoding="utf-8") as fh:
        labels = read_labels(fh)
    truth = {cid: lab.anomalous for cid, lab in labels.items()}
    groups = None
    if args.rare_cases:
        rare = set(read_case_list(args.rare_cases))
        groups = {cid: "anomalous" if t else ("rare" if cid in rare else "normal") for cid, t in truth.items()}
    summary = metrics(pred, truth, groups, report.get("threshold")).summary()
    if args.output:
        _write_text(args.output, json.dumps(summary, indent=2, sort_keys=True) + "\n")
        inputs = [args.report, args.labels] + ([args.rare_cases] if args.rare_cases else [])
        write_manifest(manifest_path(args.output), "evaluate", cfg, inputs, [args.output])
    return {k: summary[k] for k in ("precision", "recall", "f1")}


def cmd_ablate(args, cfg: RunConfig) -> dict:
    a = cfg.ablate
    cells = ablate(cfg.experiment(), a.templates, a.rare_counts, a.seed)
    with open(args.output, "w", encoding="utf-8", newline="") as fh:
        write_ablation(cells, fh)
    outputs = [args.output]
    if args.plot_data:
        with open(args.plot_data, "w", encoding="utf-8", newline="") as fh:
            write_plot_data(cells, fh)
        outputs.append(args.plot_data)
    write_manifest(manifest_path(args.output), "ablate", cfg, [], outputs)
    return {"cells": len(cells), "failed": sum(c.error is not None for c in cells)}


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _csv_list(kind=str):
    def parse(text: str):
        return [kind(x.strip()) for x in text.split(",") if x.strip()]
    return parse


def _flag(p, name: str, dest: str, kind=None, help: str = "", **kw):
    """Register ``--name`` writing to ``section.field``; unset flags leave config values alone."""
    p.add_argument(name, dest=dest, type=kind, default=argparse.SUPPRESS, help=help, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nspad", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help):
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", help="JSON run configuration (flags take precedence)")
        return p

    p = command("generate", "sample a synthetic log from the built-in review process")
    p.add_argument("--output", required=True)
    _flag(p, "--cases", "generate.cases", int)
    _flag(p, "--rare", "generate.rare", int, "traces forced through the rare branch")
    _flag(p, "--seed", "generate.seed", int)

    p = command("inject", "mutate a fraction of cases and write ground-truth labels")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--labels", help="labels CSV path (default: <output>.labels.csv)")
    _flag(p, "--fraction", "inject.fraction", float)
    _flag(p, "--types", "inject.types", _csv_list(), "comma-separated anomaly types")
    _flag(p, "--seed", "inject.seed", int)

    p = command("mine", "mine Declare constraints and select the knowledge base")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    _flag(p, "--templates", "mine.templates", _csv_list())
    _flag(p, "--max-support", "mine.max_support", float)
    _flag(p, "--min-confidence", "mine.min_confidence", float)
    _flag(p, "--whitelist", "mine.whitelist", str, 'e.g. "Response(Develop Method,Final Decision)"')
    p.add_argument("--all", dest="mine.select", action="store_false", default=argparse.SUPPRESS,
                   help="write every mined constraint without selection")

    p = command("pretrain", "train the denoising autoencoder")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--loss-csv")
    p.add_argument("--exclude-cases", help="generate manifest or id list of cases to leave out")
    _flag(p, "--max-len", "encoding.max_len", int)
    _flag(p, "--epochs", "pretrain.epochs", int)
    _flag(p, "--lr", "pretrain.lr", float)
    _flag(p, "--batch", "pretrain.batch", int)
    _flag(p, "--noise-rate", "pretrain.noise_rate", float)
    _flag(p, "--widths", "pretrain.widths", _csv_list(int))
    _flag(p, "--seed", "pretrain.seed", int)

    p = command("finetune", "fine-tune a model towards a constraint knowledge base")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--constraints", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--history-csv")
    p.add_argument("--cases", help="manifest or id list of the traces to partition (default: whole log)")
    _flag(p, "--lambda-rec", "finetune.lambda_rec", float)
    _flag(p, "--lambda-sat", "finetune.lambda_sat", float)
    _flag(p, "--p-exists", "finetune.p_exists", float)
    _flag(p, "--p-forall", "finetune.p_forall", float)
    _flag(p, "--epochs", "finetune.epochs", int)
    _flag(p, "--lr", "finetune.lr", float)
    _flag(p, "--mode", "finetune.mode", str, choices=["smooth", "crisp"])
    _flag(p, "--scope", "finetune.scope", str, choices=["trace", "max_len"])
    _flag(p, "--replay-fraction", "finetune.replay_fraction", float)
    _flag(p, "--seed", "finetune.seed", int)
    p.add_argument("--no-synthesize", dest="partition.synthesize_t_minus", action="store_false",
                   default=argparse.SUPPRESS, help="do not fabricate t- when the partition has none")

    p = command("detect", "score a log and flag anomalous cases")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--labels", help="labels CSV; adds metrics to the report")
    p.add_argument("--rare-cases", help="manifest or id list for the rare-conformant group")
    _flag(p, "--heuristic", "detect.heuristic", str, "elbow | percentile(q) | mean_plus_k_sigma(k)")

    p = command("evaluate", "compare a detection report with labels")
    p.add_argument("--report", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--rare-cases")
    p.add_argument("--output")

    p = command("ablate", "baseline vs fine-tuned F1 per template and rare count")
    p.add_argument("--output", required=True)
    p.add_argument("--plot-data")
    _flag(p, "--templates", "ablate.templates", _csv_list())
    _flag(p, "--rare-counts", "ablate.rare_counts", _csv_list(int))
    _flag(p, "--cases", "ablate.n_cases", int)
    _flag(p, "--fraction", "ablate.fraction", float)
    _flag(p, "--heuristic", "ablate.heuristic", str)
    _flag(p, "--seed", "ablate.seed", int)
    return parser


COMMANDS = {"generate": cmd_generate, "inject": cmd_inject, "mine": cmd_mine, "pretrain": cmd_pretrain,
            "finetune": cmd_finetune, "detect": cmd_detect, "evaluate": cmd_evaluate, "ablate": cmd_ablate}


def resolve_config(ns: argparse.Namespace) -> RunConfig:
    cfg = load_config(getattr(ns, "config", None))
    overrides = {k: v for k, v in vars(ns).items() if "." in k}
    cfg = _override(cfg, overrides)
    if "detect.heuristic" in overrides:
        parse_heuristic(cfg.detect.heuristic)
    return cfg


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (SelectionError, PartitionError)):
        return EXIT_SELECTION
    if isinstance(exc, (DivergenceError, NonFiniteError)):
        return EXIT_DIVERGENCE
    if isinstance(exc, (ConfigError, HeuristicError)):
        return EXIT_CONFIG
    if isinstance(exc, (LogError, LengthError, DeclareError, InjectionError, OSError, ValueError, KeyError)):
        return EXIT_DATA
    return 1


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    command = None
    try:
        ns = parser.parse_args(argv)
        command = ns.command
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(ns)
        result = COMMANDS[command](ns, cfg)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one JSON record
        code = exit_code(exc)
        if code == 1:
            logger.exception("unexpected failure")
        record = {"error": type(exc).__name__, "message": str(exc), "command": command, "exit_code": code}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return code
    print(json.dumps({"command": command, "status": "ok", **result}, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
