import json
from pathlib import Path

import pytest

from rapvision.cli import main
from rapvision.grid import load_image, save_image
from rapvision.providers import SINGLE, generate_suite, load_suite

FIXTURES = Path(__file__).parent / "fixtures"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def instance_file(tmp_path):
    inst = generate_suite(1, 6, 6, single_fraction=1.0, seed=17, cell_size=16)[0]
    path = tmp_path / "inst.json"
    path.write_text(inst.to_json())
    save_image(inst.render(), tmp_path / "inst.png")
    return inst, path


def test_gen_suite_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run(capsys, "gen-suite", "--count", 40, "--seed", 3, "--out", a)[0] == 0
    assert run(capsys, "gen-suite", "--count", 40, "--seed", 3, "--out", b)[0] == 0
    assert a.read_bytes() == b.read_bytes()
    suite = load_suite(a)
    assert len(suite) == 40 and sum(i.question_kind == SINGLE for i in suite) == 20


def test_tile(tmp_path, capsys, instance_file):
    code, out, _ = run(capsys, "tile", tmp_path / "inst.png", "--cell-size", 16, "--rects",
                       "--out-dir", tmp_path / "crops")
    assert code == 0
    doc = json.loads(out)
    assert (doc["rows"], doc["cols"]) == (6, 6) and len(doc["rects"]) == 6
    assert len(list((tmp_path / "crops").glob("*.png"))) == 36


def test_unreadable_image_is_a_usage_error(tmp_path, capsys):
    (tmp_path / "bad.png").write_bytes(b"garbage")
    code, _, err = run(capsys, "tile", tmp_path / "bad.png")
    assert code == 2 and "error" in err
    assert run(capsys, "tile", tmp_path / "missing.png")[0] == 2


def test_score_layout_search(tmp_path, capsys, instance_file):
    inst, path = instance_file
    code, out, _ = run(capsys, "score", tmp_path / "inst.png", "--instance", path,
                       "--question", inst.question, "--out", tmp_path / "s.json")
    assert code == 0 and json.loads(out)["rows"] == 6

    code, out, _ = run(capsys, "layout", tmp_path / "inst.png", "--cell-size", 16, "--scores",
                       tmp_path / "s.json", "--k", 4, "--out", tmp_path / "c.png")
    assert code == 0
    doc = json.loads(out)
    assert len(doc["mapping"]) == 4
    assert load_image(tmp_path / "c.png").width == doc["canvas_width"]

    code, out, _ = run(capsys, "search", "--instance", path, "--trace", tmp_path / "t.jsonl",
                       "--canvas", tmp_path / "final.png")
    assert code == 0
    assert f"answer: {inst.answer_key}" in out
    assert (tmp_path / "t.jsonl").read_text()
    assert (tmp_path / "final.png").exists()


def test_layout_needs_a_mask(tmp_path, capsys, instance_file):
    assert run(capsys, "layout", tmp_path / "inst.png", "--out", tmp_path / "c.png")[0] == 2
    (tmp_path / "m.json").write_text('{"other": 1}')
    assert run(capsys, "layout", tmp_path / "inst.png", "--mask", tmp_path / "m.json",
               "--out", tmp_path / "c.png")[0] == 2


def test_search_replays_recorded_session(capsys):
    code, out, _ = run(capsys, "search", FIXTURES / "http_image.png", "--question", "What color is object #0?",
                       "--provider", "http", "--replay", FIXTURES / "http_session.json", "--cell-size", 16)
    assert code == 0
    assert "answer: purple" in out


def test_run_and_empty_suite(tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    code, out, _ = run(capsys, "run", "--suite", empty, "--out", tmp_path / "r0")
    assert code == 0
    suite = tmp_path / "s.jsonl"
    run(capsys, "gen-suite", "--count", 6, "--out", suite)
    code, out, _ = run(capsys, "run", "--suite", suite, "--variants", "baseline-full-image,fixed-k-strategy-3",
                       "--k-values", "2,suff", "--out", tmp_path / "r1")
    assert code == 0
    lines = (tmp_path / "r1" / "results.csv").read_text().splitlines()
    assert len(lines) == 1 + 6 * 3


def test_run_bad_arguments(tmp_path, capsys):
    assert run(capsys, "run")[0] == 2
    assert run(capsys, "run", "--suite", tmp_path / "missing.jsonl")[0] == 2
    suite = tmp_path / "s.jsonl"
    run(capsys, "gen-suite", "--count", 2, "--out", suite)
    assert run(capsys, "run", "--suite", suite, "--variants", "magic")[0] == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_run_aborts_when_the_provider_is_down(tmp_path, capsys):
    suite = tmp_path / "s.jsonl"
    run(capsys, "gen-suite", "--count", 2, "--out", suite)
    config = tmp_path / "c.yaml"
    config.write_text(
        "provider:\n  kind: http\n  base_url: http://127.0.0.1:9\n  max_retries: 0\n  timeout_ms: 500\n"
    )
    code, _, err = run(capsys, "--config", config, "run", "--suite", suite, "--out", tmp_path / "r")
    assert code == 1 and "aborted" in err


def test_config_file(tmp_path, capsys, instance_file):
    inst, path = instance_file
    config = tmp_path / "c.yaml"
    config.write_text("search:\n  threshold: 0.95\n  max_expansions: 0\n")
    code, out, _ = run(capsys, "--config", config, "search", "--instance", path)
    assert code == 0
    assert "expansions: 0" in out and "answer: unanswerable" in out

    config.write_text("search:\n  colour: blue\n")
    assert run(capsys, "--config", config, "search", "--instance", path)[0] == 2
    config.write_text("- just\n- a list\n")
    assert run(capsys, "--config", config, "search", "--instance", path)[0] == 2


def test_bench_command(tmp_path, capsys):
    suite = tmp_path / "s.jsonl"
    run(capsys, "gen-suite", "--count", 4, "--out", suite)
    code, out, _ = run(capsys, "bench", "--suite", suite, "--variants", "rap-full", "--out", tmp_path / "b.csv")
    assert code == 0
    assert out.splitlines()[1].startswith("rap-full,4,")
    assert run(capsys, "bench", "--suite", suite, "--variants", "fixed-k-strategy-1")[0] == 2
