"""Command-line frontend.

Subcommands::

    proto-calib run-fscil     --embeddings E.csv --output report.csv [calibration flags]
    proto-calib run-fsl       --embeddings E.csv --output report.csv [episode flags]
    proto-calib gen-synthetic --output E.csv [--ground-truth truth.json] [synth flags]
    proto-calib analyze       --before A.csv --after B.csv --embeddings E.csv --output diag.csv

Any subcommand accepts ``--config FILE`` holding ``key=value`` lines named
after the long flags (``alpha=0.1``); flags given on the command line win.
Exit status: 0 on success, 2 on usage errors, 1 on data/validation errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .calib import STRATEGIES, CalibParams
from .classify import THREADS_ENV, worker_count
from .core import DataError, Dataset, empirical_prototypes, load_dataset, write_dataset
from .metrics import (
    MetricBundle,
    ChangeAnalysis,
    performance_drop,
    prediction_change,
    session_metrics,
)
from .protocol import EpisodeSpec, FSLResult, SessionResult, run_fscil, run_fsl
from .synth import SynthSpec, gen_synthetic, write_ground_truth

log = logging.getLogger("proto_calib")

COMMANDS = ("run-fscil", "run-fsl", "gen-synthetic", "analyze")
FORMATS = ("csv", "json")
METRIC_FIELDS = [f.name for f in fields(MetricBundle)]
PREDICTION_HEADER = ["index", "true_label", "pred_label"]


@dataclass(frozen=True)
class RunConfig:
    command: str
    output_path: Path
    report_format: str = "csv"
    embeddings_path: Path | None = None
    calib: CalibParams | None = None
    episodes: EpisodeSpec | None = None
    synth: SynthSpec | None = None
    ground_truth_path: Path | None = None
    predictions_path: Path | None = None
    predictions_session: int | None = None
    before_path: Path | None = None
    after_path: Path | None = None
    base_ids: tuple[int, ...] | None = None
    m_new_similar: int = 10
    base_fraction: float = 0.2
    collapse_ww: bool = False
    verbose: bool = False


# -- argument parsing ------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--output", required=True, type=Path, help="report / data file to write")
    p.add_argument("--config", type=Path, help="key=value file; command-line flags take precedence")


def _add_format(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=FORMATS, default="csv", dest="report_format")


def _add_calib(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", choices=STRATEGIES, default="teen")
    p.add_argument("--alpha", type=float, default=0.5, help="fusion coefficient in [0, 1]")
    p.add_argument("--tau", type=float, default=16.0, help="similarity sharpness, > 0")
    p.add_argument("--simteen-k", type=int, default=1, help="base prototypes fused by simteen")
    p.add_argument("--simteen-mean", action="store_true",
                   help="simteen averages its k prototypes instead of summing them")


def _add_similarity(p: argparse.ArgumentParser) -> None:
    p.add_argument("--m-new-similar", type=int, default=10,
                   help="similar base classes per new class for TBR")
    p.add_argument("--base-fraction", type=float, default=0.2,
                   help="fraction of new classes in each base class's TNR set")


def _id_list(text: str) -> tuple[int, ...]:
    """Parse ``0-59`` / ``1,4,7`` / ``0-3,9`` into a sorted id tuple."""
    ids: set[int] = set()
    try:
        for part in filter(None, (s.strip() for s in text.split(","))):
            if "-" in part:
                lo, hi = (int(x) for x in part.split("-", 1))
                ids.update(range(lo, hi + 1))
            else:
                ids.add(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid class-id list {text!r}") from None
    if not ids or min(ids) < 0:
        raise argparse.ArgumentTypeError(f"invalid class-id list {text!r}")
    return tuple(sorted(ids))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proto-calib", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = sub.choices

    p = sub.add_parser("run-fscil", help="multi-session few-shot class-incremental evaluation")
    p.add_argument("--embeddings", required=True, type=Path)
    _add_common(p)
    _add_format(p)
    _add_calib(p)
    _add_similarity(p)
    p.add_argument("--predictions", type=Path, help="also write index,true_label,pred_label")
    p.add_argument("--predictions-session", type=int,
                   help="session whose predictions are written (default: last)")

    p = sub.add_parser("run-fsl", help="episodic N-way K-shot evaluation")
    p.add_argument("--embeddings", required=True, type=Path)
    _add_common(p)
    _add_format(p)
    _add_calib(p)
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--shots", type=int, default=5)
    p.add_argument("--queries", type=int, default=15)
    p.add_argument("--episodes", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen-synthetic", help="write a synthetic embedding CSV")
    _add_common(p)
    p.add_argument("--ground-truth", type=Path, help="JSON file for true means and mixtures")
    defaults = SynthSpec()
    for f in fields(SynthSpec):
        p.add_argument("--" + f.name.replace("_", "-"), type=type(getattr(defaults, f.name)),
                       default=getattr(defaults, f.name))

    p = sub.add_parser("analyze", help="compare two prediction files")
    _add_common(p)
    _add_format(p)
    _add_similarity(p)
    p.add_argument("--before", required=True, type=Path)
    p.add_argument("--after", required=True, type=Path)
    p.add_argument("--embeddings", type=Path,
                   help="source of base ids and of the prototypes defining TBR/TNR similar sets")
    p.add_argument("--base-ids", type=_id_list, help="base class ids, e.g. 0-59")
    p.add_argument("--collapse-ww", action="store_true",
                   help="fold wrong->other-wrong samples into UC")
    return parser


def _config_tokens(path: Path, parser: argparse.ArgumentParser) -> list[str]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        parser.error(f"cannot read config file {path}: {exc}")
    tokens = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            parser.error(f"{path}:{n}: expected key=value")
        if key == "config":
            parser.error(f"{path}:{n}: nested config files are not supported")
        if value.lower() in ("true", "false"):
            if value.lower() == "true":
                tokens.append("--" + key)
        else:
            tokens += ["--" + key, value]
    return tokens


def _find_config(argv: list[str]) -> Path | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return Path(argv[i + 1])
        if tok.startswith("--config="):
            return Path(tok.split("=", 1)[1])
    return None


def parse_args(argv: Sequence[str] | None = None) -> RunConfig:
    """Parse ``argv`` into a :class:`RunConfig`; usage errors exit with status 2."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    config = _find_config(argv)
    if config is not None:
        cmd_pos = next((i for i, t in enumerate(argv) if t in COMMANDS), None)
        if cmd_pos is None:
            parser.error("--config must follow a subcommand")
        # config values go right after the subcommand so explicit flags override them
        argv = argv[: cmd_pos + 1] + _config_tokens(config, parser) + argv[cmd_pos + 1:]
    ns = parser.parse_args(argv)
    sub = parser.subcommands[ns.command]

    def usage(msg: str):
        sub.error(msg)

    try:
        common = dict(command=ns.command, output_path=ns.output, verbose=ns.verbose)
        if ns.command == "gen-synthetic":
            spec = SynthSpec(**{f.name: getattr(ns, f.name) for f in fields(SynthSpec)})
            return RunConfig(**common, synth=spec, ground_truth_path=ns.ground_truth)

        common["report_format"] = ns.report_format
        if ns.command == "analyze":
            if ns.embeddings is None and ns.base_ids is None:
                usage("analyze needs --embeddings or --base-ids")
            _check_similarity(ns, usage)
            return RunConfig(
                **common, embeddings_path=ns.embeddings, before_path=ns.before,
                after_path=ns.after, base_ids=ns.base_ids, m_new_similar=ns.m_new_similar,
                base_fraction=ns.base_fraction, collapse_ww=ns.collapse_ww,
            )

        if not 0.0 <= ns.alpha <= 1.0:
            usage(f"--alpha must lie in [0, 1], got {ns.alpha}")
        if not ns.tau > 0:
            usage(f"--tau must be positive, got {ns.tau}")
        calib = CalibParams(ns.strategy, ns.alpha, ns.tau, ns.simteen_k, ns.simteen_mean)
        common.update(embeddings_path=ns.embeddings, calib=calib)
        if ns.command == "run-fsl":
            spec = EpisodeSpec(ns.ways, ns.shots, ns.queries, ns.episodes, ns.seed)
            return RunConfig(**common, episodes=spec)
        _check_similarity(ns, usage)
        return RunConfig(
            **common, predictions_path=ns.predictions, predictions_session=ns.predictions_session,
            m_new_similar=ns.m_new_similar, base_fraction=ns.base_fraction,
        )
    except ValueError as exc:
        usage(str(exc))


def _check_similarity(ns, usage) -> None:
    if ns.m_new_similar < 1:
        usage("--m-new-similar must be >= 1")
    if not 0.0 < ns.base_fraction <= 1.0:
        usage("--base-fraction must lie in (0, 1]")


# -- reports ---------------------------------------------------------------


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows([[_cell(v) for v in row] for row in rows])
    return buf.getvalue()


def _json_text(payload) -> str:
    return json.dumps(payload, indent=2, allow_nan=False) + "\n"


def fscil_payload(results: Sequence[SessionResult]) -> dict:
    sessions = [{"session": r.session, **r.metrics.as_dict()} for r in results]
    pd = performance_drop([r.metrics.avg_acc for r in results])
    return {"sessions": sessions, "summary": {"pd": pd}}


def fsl_payload(result: FSLResult) -> dict:
    return {
        "episodes": [{"episode": i, "accuracy": a} for i, a in enumerate(result.accuracies)],
        "summary": {"mean": result.mean, "ci95_half_width": result.half_width},
    }


@dataclass(frozen=True)
class AnalysisReport:
    change: ChangeAnalysis
    before: MetricBundle
    after: MetricBundle
    collapse_ww: bool = False

    def payload(self) -> dict:
        return {
            "change": self.change.rows(self.collapse_ww),
            "before": self.before.as_dict(),
            "after": self.after.as_dict(),
        }


def render_report(payload: dict, fmt: str) -> str:
    if fmt == "json":
        return _json_text(payload)
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    if "sessions" in payload:
        header = ["session", *METRIC_FIELDS, "pd"]
        rows = [[s["session"], *(s[k] for k in METRIC_FIELDS), None] for s in payload["sessions"]]
        rows.append(["summary", *([None] * len(METRIC_FIELDS)), payload["summary"]["pd"]])
        return _csv_text(header, rows)
    if "episodes" in payload:
        rows = [[e["episode"], e["accuracy"], None] for e in payload["episodes"]]
        s = payload["summary"]
        rows.append(["summary", s["mean"], s["ci95_half_width"]])
        return _csv_text(["episode", "accuracy", "ci95_half_width"], rows)
    rows = [
        ["change", f"{r['category']}_{k}", r[k]]
        for r in payload["change"] for k in ("count", "base_pct", "new_pct")
    ]
    for run in ("before", "after"):
        rows += [[run, k, v] for k, v in payload[run].items()]
    return _csv_text(["group", "name", "value"], rows)


def emit_report(payload: dict, fmt: str, path) -> None:
    """Write a rendered report; identical payloads give identical bytes."""
    Path(path).write_text(render_report(payload, fmt), encoding="utf-8")


# -- prediction files ------------------------------------------------------


def write_predictions(result: SessionResult, path) -> None:
    rows = [[i, int(y), int(p)] for i, (y, p) in enumerate(zip(result.true_labels, result.predictions))]
    Path(path).write_text(_csv_text(PREDICTION_HEADER, rows), encoding="utf-8")


def read_predictions(path) -> tuple[np.ndarray, np.ndarray]:
    """Return (true_labels, predictions) from an ``index,true_label,pred_label`` file."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != PREDICTION_HEADER:
            raise DataError(f"{path}: header must be {','.join(PREDICTION_HEADER)}")
        labels, preds = [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                index, y, p = (int(v) for v in row)
            except ValueError:
                raise DataError(f"{path}: line {line}: expected three integers") from None
            if index != len(labels):
                raise DataError(f"{path}: line {line}: index {index}, expected {len(labels)}")
            labels.append(y)
            preds.append(p)
    return np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)


def analyze(
    before_path, after_path, base_ids=None, dataset: Dataset | None = None,
    m_new_similar: int = 10, base_fraction: float = 0.2, collapse_ww: bool = False,
) -> AnalysisReport:
    """Change taxonomy plus FNR/FPR and TBR/TNR for a pair of aligned prediction files.

    TBR/TNR need prototypes, so they are only filled when ``dataset`` is given;
    similar sets then come from the empirical prototypes of the seen classes.
    """
    labels, before = read_predictions(before_path)
    labels_after, after = read_predictions(after_path)
    n = min(labels.size, labels_after.size)
    mismatch = np.flatnonzero(labels[:n] != labels_after[:n])
    if mismatch.size:
        raise DataError(f"prediction files disagree on true label at index {int(mismatch[0])}")
    if labels.size != labels_after.size:
        raise DataError(f"prediction files are misaligned from index {n} (lengths differ)")
    if labels.size == 0:
        raise DataError("prediction files are empty")

    registry = None
    if dataset is not None:
        layout = dataset.layout
        if base_ids is None:
            base_ids = layout.base_classes
        try:
            session = max(layout.session_of(int(c)) for c in np.unique(labels))
        except KeyError as exc:
            raise DataError(f"label {exc.args[0]} is not in the embeddings file") from None
        registry = empirical_prototypes(dataset, 0)
        for s in range(1, session + 1):
            registry = registry.merge(empirical_prototypes(dataset, s))
    base_ids = frozenset(base_ids)

    def bundle(preds):
        return session_metrics(preds, labels, base_ids, registry, m_new_similar, base_fraction)

    return AnalysisReport(
        prediction_change(before, after, labels, base_ids), bundle(before), bundle(after),
        collapse_ww,
    )


# -- entry point -----------------------------------------------------------


def execute(cfg: RunConfig) -> None:
    if cfg.command == "gen-synthetic":
        dataset, truth = gen_synthetic(cfg.synth)
        write_dataset(dataset, cfg.output_path)
        if cfg.ground_truth_path is not None:
            write_ground_truth(truth, cfg.ground_truth_path)
        log.info("wrote %d records to %s", len(dataset), cfg.output_path)
        return

    if cfg.command == "analyze":
        dataset = load_dataset(cfg.embeddings_path) if cfg.embeddings_path else None
        report = analyze(
            cfg.before_path, cfg.after_path, cfg.base_ids, dataset,
            cfg.m_new_similar, cfg.base_fraction, cfg.collapse_ww,
        )
        emit_report(report.payload(), cfg.report_format, cfg.output_path)
        return

    dataset = load_dataset(cfg.embeddings_path)
    log.info("loaded %d records, %d sessions", len(dataset), dataset.layout.n_sessions)
    if cfg.command == "run-fsl":
        result = run_fsl(dataset, cfg.episodes, cfg.calib)
        emit_report(fsl_payload(result), cfg.report_format, cfg.output_path)
        return

    results = run_fscil(dataset, cfg.calib, m_new_similar=cfg.m_new_similar,
                        base_fraction=cfg.base_fraction)
    emit_report(fscil_payload(results), cfg.report_format, cfg.output_path)
    if cfg.predictions_path is not None:
        session = results[-1].session if cfg.predictions_session is None else cfg.predictions_session
        if not 0 <= session < len(results):
            raise DataError(f"--predictions-session {session} out of range [0, {len(results)})")
        write_predictions(results[session], cfg.predictions_path)


def main(argv: Sequence[str] | None = None) -> int:
    cfg = parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if cfg.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        worker_count()
    except ValueError:
        print(f"proto-calib: error: {THREADS_ENV} must be a non-negative integer", file=sys.stderr)
        return 2
    try:
        execute(cfg)
    except (DataError, ValueError, KeyError, OSError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
