import csv
import io
import json

import pytest

from rapvision.errors import InvalidConfig, ProviderError
from rapvision.harness import (
    BASELINE,
    CSV_COLUMNS,
    EXHAUSTIVE,
    RAP,
    STRATEGY_SCORE,
    STRATEGY_SPATIAL,
    ExperimentAborted,
    ExperimentConfig,
    bench,
    bench_csv,
    resolve_k,
    run_experiment,
)
from rapvision.providers import CROSS, SINGLE, OracleProvider


def test_resolve_k(small_suite):
    inst = small_suite[0]
    assert resolve_k("all", inst) == 64
    assert resolve_k("suff", inst) == len(inst.subject_cells())
    assert resolve_k(100, inst) == 64
    assert resolve_k(3, inst) == 3


@pytest.mark.parametrize("bad", [dict(variants=("nope",)), dict(k_values=(0,)), dict(k_values=("many",)),
                                 dict(provider="gpu"), dict(workers=0),
                                 dict(variants=(STRATEGY_SCORE,), k_values=())])
def test_config_validation(bad):
    with pytest.raises(InvalidConfig):
        ExperimentConfig(**bad)


def test_reports_written(tmp_path, small_suite):
    config = ExperimentConfig(variants=(BASELINE, STRATEGY_SPATIAL, RAP), k_values=(4, "suff"),
                              output=str(tmp_path / "run"))
    report = run_experiment(config, small_suite)
    out = tmp_path / "run"
    rows = list(csv.reader(io.StringIO((out / "results.csv").read_text())))
    assert rows[0] == CSV_COLUMNS
    assert len(rows) - 1 == len(small_suite) * 4
    assert (out / "timings.csv").read_text().startswith("instance_id,variant,k_requested,wall_time_ms")
    summary = json.loads((out / "summary.json").read_text())
    assert summary["rows"] == len(small_suite) * 4
    traces = [json.loads(line) for line in (out / "traces.jsonl").read_text().splitlines()]
    assert {t["instance"] for t in traces} == {i.id for i in small_suite}
    rap = report.group(RAP)
    assert rap["accuracy"] == 1.0
    assert rap["by_kind"][SINGLE]["n"] + rap["by_kind"][CROSS]["n"] == len(small_suite)
    assert report.group(BASELINE)["accuracy"] == 0.0
    assert report.group(STRATEGY_SPATIAL, "suff")["k_histogram"]


def test_workers_do_not_change_output(small_suite):
    base = dict(variants=(BASELINE, RAP, EXHAUSTIVE), k_values=())
    a = run_experiment(ExperimentConfig(workers=1, **base), small_suite, write=False)
    b = run_experiment(ExperimentConfig(workers=4, **base), small_suite, write=False)
    from rapvision.harness import rows_csv

    assert rows_csv(a.rows) == rows_csv(b.rows)
    assert a.traces == b.traces


def test_empty_suite(tmp_path):
    report = run_experiment(ExperimentConfig(output=str(tmp_path / "e")), [])
    assert report.rows == []
    assert (tmp_path / "e" / "results.csv").read_text().strip() == ",".join(CSV_COLUMNS)


def _failing_for(monkeypatch, bad_ids):
    original = OracleProvider.embed_image

    def embed_image(self, crop):
        if self.instance.id in bad_ids:
            raise ProviderError("backend unavailable")
        return original(self, crop)

    monkeypatch.setattr(OracleProvider, "embed_image", embed_image)


def test_isolated_failures_are_reported(monkeypatch, small_suite):
    _failing_for(monkeypatch, {small_suite[0].id})
    report = run_experiment(ExperimentConfig(), small_suite, write=False)
    failed = [r for r in report.rows if r.error]
    assert len(failed) == 2 and all(r.instance_id == small_suite[0].id for r in failed)
    assert report.group(RAP)["provider_failures"] == 1


def test_too_many_failures_abort(monkeypatch, small_suite):
    _failing_for(monkeypatch, {i.id for i in small_suite[:5]})
    with pytest.raises(ExperimentAborted) as err:
        run_experiment(ExperimentConfig(), small_suite, write=False)
    assert err.value.rows


def test_bench(small_suite):
    results = bench(small_suite[:6], (BASELINE, RAP))
    assert [r["variant"] for r in results] == [BASELINE, RAP]
    assert all(r["instances_per_min"] > 0 for r in results)
    text = bench_csv(results)
    assert text.splitlines()[0].startswith("variant,instances,accuracy")
