"""Experiment harness: run pipeline variants over a synthetic suite and report.

Outputs written to the run directory:

* ``results.csv``  one row per (instance, variant, k); deterministic bytes
* ``timings.csv``  wall-clock milliseconds for the same rows
* ``traces.jsonl`` search traces of the ``rap-full`` rows; deterministic bytes
* ``summary.json`` accuracy by question kind, selected-k histograms, expansions,
  throughput (instances per minute)
"""

from __future__ import annotations

import csv
import io
import json
import logging
import statistics
import time
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidConfig, ProviderError, RapError
from .grid import partition
from .layout import StripOrder, spatial_layout, strip_layout_by_score
from .providers import CROSS, SINGLE, OracleProvider, SyntheticInstance
from .retrieval import EmbeddingCache, RetentionMask, score_crops, top_k
from .search import SearchParams, exhaustive_search, re_search

log = logging.getLogger(__name__)

BASELINE = "baseline-full-image"
STRATEGY_SCORE = "fixed-k-strategy-1"
STRATEGY_APPEARANCE = "fixed-k-strategy-2"
STRATEGY_SPATIAL = "fixed-k-strategy-3"
RAP = "rap-full"
EXHAUSTIVE = "exhaustive-reference"

FIXED_K = (STRATEGY_SCORE, STRATEGY_APPEARANCE, STRATEGY_SPATIAL)
VARIANTS = (BASELINE, *FIXED_K, RAP, EXHAUSTIVE)

FAILURE_LIMIT = 0.2

CSV_COLUMNS = [
    "instance_id",
    "variant",
    "question_kind",
    "k_requested",
    "k_selected",
    "correct",
    "confidence",
    "expansions",
    "evaluations",
    "answer",
    "error",
]


class ExperimentAborted(RapError):
    def __init__(self, message, rows=None):
        super().__init__(message)
        self.rows = rows or []


@dataclass
class ExperimentConfig:
    suite: str | None = None
    variants: tuple[str, ...] = (BASELINE, RAP)
    k_values: tuple = (1, 2, 4, 8, 16, "all")
    params: SearchParams = field(default_factory=SearchParams)
    provider: str = "oracle"
    provider_config: object = None
    output: str = "runs/latest"
    seed: int = 0
    workers: int = 1
    max_in_flight: int = 1

    def __post_init__(self):
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise InvalidConfig(f"unknown variant(s) {unknown}; choose from {list(VARIANTS)}")
        if self.provider not in ("oracle", "http"):
            raise InvalidConfig(f"provider must be 'oracle' or 'http', got {self.provider!r}")
        ks = []
        for k in self.k_values:
            if k in ("all", "suff"):
                ks.append(k)
                continue
            try:
                k = int(k)
            except (TypeError, ValueError):
                raise InvalidConfig(f"bad k value {k!r}") from None
            if k < 1:
                raise InvalidConfig(f"k values must be >= 1, got {k}")
            ks.append(k)
        self.k_values = tuple(ks)
        if any(v in FIXED_K for v in self.variants) and not self.k_values:
            raise InvalidConfig("fixed-k variants need at least one k value")
        if self.workers < 1:
            raise InvalidConfig("workers must be >= 1")


@dataclass
class ResultRow:
    instance_id: str
    variant: str
    question_kind: str
    k_requested: str
    k_selected: int
    correct: bool
    confidence: float | None = None
    expansions: int = 0
    evaluations: int = 0
    answer: str = ""
    error: str = ""
    wall_time_ms: float = 0.0

    def csv_record(self) -> list:
        return [
            self.instance_id,
            self.variant,
            self.question_kind,
            self.k_requested,
            self.k_selected,
            int(self.correct),
            "" if self.confidence is None else repr(float(self.confidence)),
            self.expansions,
            self.evaluations,
            self.answer,
            self.error,
        ]


@dataclass
class InstanceReport:
    rows: list[ResultRow]
    traces: str


def resolve_k(k, inst: SyntheticInstance) -> int:
    n = inst.grid_rows * inst.grid_cols
    if k == "all":
        return n
    if k == "suff":
        return len(inst.subject_cells())
    return min(int(k), n)


def run_instance(
    inst: SyntheticInstance,
    config: ExperimentConfig,
    *,
    client=None,
    cache: EmbeddingCache | None = None,
) -> InstanceReport:
    """Run every configured variant on one instance.

    ``client`` is the shared remote backend when ``config.provider`` is "http";
    otherwise a fresh oracle is built for the instance.
    """
    if config.provider == "oracle":
        retriever = mllm = OracleProvider(inst, threshold=config.params.threshold)
    else:
        retriever = mllm = client
    rows: list[ResultRow] = []
    traces = io.StringIO()
    kind = inst.question_kind
    q = inst.question

    def failed(variant, k_label, exc, elapsed):
        rows.append(
            ResultRow(inst.id, variant, kind, k_label, 0, False, error=f"{type(exc).__name__}: {exc}",
                      wall_time_ms=elapsed)
        )

    t0 = time.perf_counter()
    try:
        grid = partition(inst.render(), inst.cell_size)
        scores = score_crops(q, grid, retriever, cache=cache, max_in_flight=config.max_in_flight)
    except ProviderError as exc:
        elapsed = (time.perf_counter() - t0) * 1000
        for variant in config.variants:
            labels = [str(k) for k in config.k_values] if variant in FIXED_K else [""]
            for label in labels:
                failed(variant, label, exc, elapsed)
        return InstanceReport(rows, "")
    score_ms = (time.perf_counter() - t0) * 1000

    for variant in config.variants:
        if variant in FIXED_K:
            jobs = [(str(k), resolve_k(k, inst)) for k in config.k_values]
        else:
            jobs = [("", None)]
        for label, k in jobs:
            t1 = time.perf_counter()
            try:
                row = _run_variant(variant, inst, grid, scores, mllm, config.params, k, traces)
            except ProviderError as exc:
                failed(variant, label, exc, score_ms + (time.perf_counter() - t1) * 1000)
                continue
            row.k_requested = label
            row.wall_time_ms = score_ms + (time.perf_counter() - t1) * 1000
            rows.append(row)
    return InstanceReport(rows, traces.getvalue())


def _run_variant(variant, inst, grid, scores, mllm, params, k, traces) -> ResultRow:
    q = inst.question
    expansions = evaluations = 0
    if variant == BASELINE:
        mask = RetentionMask(np.ones((grid.rows, grid.cols), dtype=bool))
        canvas = spatial_layout(grid, mask)
        confidence = mllm.yes_probability(canvas, q)
    elif variant in FIXED_K:
        mask = top_k(scores, k)
        if variant == STRATEGY_SPATIAL:
            canvas = spatial_layout(grid, mask)
        else:
            order = StripOrder.SCORE_ASCENDING if variant == STRATEGY_SCORE else StripOrder.APPEARANCE
            canvas = strip_layout_by_score(grid, mask, scores, order)
        confidence = mllm.yes_probability(canvas, q)
    else:
        search = re_search if variant == RAP else exhaustive_search
        outcome = search(grid, scores, mllm, q, params)
        canvas, mask = outcome.final_canvas, outcome.final_node.mask(grid.rows, grid.cols)
        confidence = outcome.confidence
        expansions, evaluations = outcome.expansions, outcome.evaluations
        if variant == RAP:
            for row in outcome.visit_trace:
                traces.write(json.dumps({"instance": inst.id, **row}, sort_keys=True) + "\n")
    answer = mllm.answer(canvas, q)
    return ResultRow(
        inst.id,
        variant,
        inst.question_kind,
        "",
        mask.count,
        answer == inst.answer_key,
        confidence=confidence,
        expansions=expansions,
        evaluations=evaluations,
        answer=answer,
    )


def _planned_rows(config: ExperimentConfig, n_instances: int) -> int:
    per = sum(len(config.k_values) if v in FIXED_K else 1 for v in config.variants)
    return per * n_instances


def execute(instances: list[SyntheticInstance], config: ExperimentConfig) -> tuple[list[InstanceReport], float]:
    """Run every instance; returns per-instance reports in suite order and wall seconds."""
    planned = _planned_rows(config, len(instances))
    limit = FAILURE_LIMIT * planned
    reports: list[InstanceReport | None] = [None] * len(instances)
    failures = 0
    client = None
    if config.provider == "http":
        from .providers import HttpProvider

        client = HttpProvider(config.provider_config)
    start = time.perf_counter()

    def check(report):
        nonlocal failures
        failures += sum(1 for r in report.rows if r.error)
        if failures > limit:
            done = [row for rep in reports if rep is not None for row in rep.rows]
            raise ExperimentAborted(
                f"{failures} of {planned} planned rows failed (limit {FAILURE_LIMIT:.0%})", done
            )

    try:
        if config.workers == 1:
            for i, inst in enumerate(instances):
                reports[i] = run_instance(inst, config, client=client)
                check(reports[i])
        else:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                futures = [pool.submit(run_instance, inst, config, client=client) for inst in instances]
                for i, fut in enumerate(futures):
                    reports[i] = fut.result()
                    check(reports[i])
    finally:
        if client is not None:
            client.close()
    return reports, time.perf_counter() - start


def _median(values):
    return statistics.median(values) if values else None


def summarize(rows: list[ResultRow], elapsed_s: float | None = None) -> dict:
    groups: dict[tuple[str, str], list[ResultRow]] = defaultdict(list)
    for row in rows:
        groups[(row.variant, row.k_requested)].append(row)
    out = []
    for (variant, k_label), members in sorted(groups.items(), key=lambda kv: (VARIANTS.index(kv[0][0]), kv[0][1])):
        ok = [r for r in members if not r.error]
        by_kind = {}
        for kind in (SINGLE, CROSS):
            sel = [r for r in ok if r.question_kind == kind]
            by_kind[kind] = {
                "n": len(sel),
                "accuracy": (sum(r.correct for r in sel) / len(sel)) if sel else None,
                "median_k_selected": _median([r.k_selected for r in sel]),
                "k_histogram": {str(k): c for k, c in sorted(Counter(r.k_selected for r in sel).items())},
            }
        wall_ms = sum(r.wall_time_ms for r in members)
        out.append(
            {
                "variant": variant,
                "k_requested": k_label,
                "n": len(members),
                "provider_failures": len(members) - len(ok),
                "accuracy": (sum(r.correct for r in ok) / len(ok)) if ok else None,
                "by_kind": by_kind,
                "mean_k_selected": (sum(r.k_selected for r in ok) / len(ok)) if ok else None,
                "k_histogram": {str(k): c for k, c in sorted(Counter(r.k_selected for r in ok).items())},
                "total_expansions": sum(r.expansions for r in ok),
                "mean_expansions": (sum(r.expansions for r in ok) / len(ok)) if ok else None,
                "total_evaluations": sum(r.evaluations for r in ok),
                "wall_time_ms": wall_ms,
                "throughput_per_min": (len(members) * 60_000.0 / wall_ms) if wall_ms > 0 else None,
            }
        )
    summary = {"groups": out, "rows": len(rows)}
    if elapsed_s is not None:
        summary["elapsed_s"] = elapsed_s
    return summary


def rows_csv(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow(row.csv_record())
    return buf.getvalue()


def timings_csv(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["instance_id", "variant", "k_requested", "wall_time_ms"])
    for row in rows:
        writer.writerow([row.instance_id, row.variant, row.k_requested, f"{row.wall_time_ms:.3f}"])
    return buf.getvalue()


@dataclass
class ExperimentReport:
    rows: list[ResultRow]
    summary: dict
    traces: str
    output: Path | None

    def group(self, variant: str, k_requested: str = "") -> dict:
        for g in self.summary["groups"]:
            if g["variant"] == variant and g["k_requested"] == k_requested:
                return g
        raise KeyError((variant, k_requested))


def run_experiment(
    config: ExperimentConfig,
    instances: list[SyntheticInstance] | None = None,
    *,
    write: bool = True,
) -> ExperimentReport:
    if instances is None:
        from .providers import load_suite

        instances = load_suite(config.suite)
    reports, elapsed = execute(instances, config)
    rows = [row for rep in reports for row in rep.rows]
    traces = "".join(rep.traces for rep in reports)
    summary = summarize(rows, elapsed)
    summary["config"] = _config_dict(config)
    out = None
    if write:
        out = Path(config.output)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(rows_csv(rows))
        (out / "timings.csv").write_text(timings_csv(rows))
        (out / "traces.jsonl").write_text(traces)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return ExperimentReport(rows, summary, traces, out)


def _config_dict(config: ExperimentConfig) -> dict:
    d = {
        "suite": config.suite,
        "variants": list(config.variants),
        "k_values": [str(k) for k in config.k_values],
        "params": {**asdict(config.params), "ratios": list(config.params.ratios)},
        "provider": config.provider,
        "seed": config.seed,
        "workers": config.workers,
    }
    return d


BENCH_COLUMNS = ["variant", "instances", "accuracy", "mean_k_selected", "mean_expansions",
                 "seconds", "instances_per_min"]


def bench(
    instances: list[SyntheticInstance],
    variants=(BASELINE, RAP, EXHAUSTIVE),
    *,
    params: SearchParams | None = None,
    repeat: int = 1,
    k: int | str = "all",
) -> list[dict]:
    """Wall-clock throughput per variant, each variant timed on its own (no shared cache)."""
    params = params or SearchParams()
    results = []
    for variant in variants:
        config = ExperimentConfig(variants=(variant,), k_values=(k,), params=params)
        best = None
        rows = []
        for _ in range(max(1, repeat)):
            reports, elapsed = execute(instances, config)
            rows = [row for rep in reports for row in rep.rows]
            best = elapsed if best is None else min(best, elapsed)
        ok = [r for r in rows if not r.error]
        n = len(instances)
        results.append(
            {
                "variant": variant,
                "instances": n,
                "accuracy": (sum(r.correct for r in ok) / len(ok)) if ok else 0.0,
                "mean_k_selected": (sum(r.k_selected for r in ok) / len(ok)) if ok else 0.0,
                "mean_expansions": (sum(r.expansions for r in ok) / len(ok)) if ok else 0.0,
                "seconds": best,
                "instances_per_min": (n * 60.0 / best) if best else float("inf"),
            }
        )
    return results


def bench_csv(results: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in results:
        writer.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
