import base64

import numpy as np
import pytest
from fastapi.testclient import TestClient

from rapvision.grid import SourceImage, partition
from rapvision.layout import spatial_layout
from rapvision.pipeline import run_rap
from rapvision.providers import OracleProvider, generate_suite, wire
from rapvision.retrieval import RetentionMask


@pytest.fixture(scope="module")
def inst():
    return generate_suite(1, 6, 6, single_fraction=0.0, seed=13, cell_size=16)[0]


@pytest.fixture(scope="module")
def client(inst):
    from rapvision.service import create_app

    return TestClient(create_app(instance=inst))


def b64(image):
    return base64.b64encode(image.to_png()).decode()


def test_health(client, inst):
    body = client.get("/health").json()
    assert body == {"status": "ok", "instance": inst.id, "retriever": True, "mllm": True}


def test_tile(client, inst):
    r = client.post("/v1/tile", json={"image": b64(inst.render()), "cell_size": 16})
    assert r.status_code == 200
    body = r.json()
    assert (body["rows"], body["cols"]) == (6, 6)
    assert body["rects"][5][5] == [80, 80, 16, 16]


def test_tile_rejects_bad_input(client):
    assert client.post("/v1/tile", json={"image": "not base64!"}).status_code == 422
    blank = b64(SourceImage.blank(32, 32))
    assert client.post("/v1/tile", json={"image": blank, "cell_size": 4}).status_code == 422


def test_score_matches_oracle(client, inst):
    r = client.post("/v1/score", json={"image": b64(inst.render()), "cell_size": 16, "question": inst.question})
    assert r.status_code == 200
    scores = np.array(r.json()["scores"])
    oracle = OracleProvider(inst)
    grid = partition(inst.render(), 16)
    from rapvision.retrieval import score_crops

    assert np.allclose(scores, score_crops(inst.question, grid, oracle).scores)


def test_search_on_served_instance(client, inst):
    r = client.post("/v1/search", json={"question": inst.question, "include_trace": True})
    assert r.status_code == 200
    body = r.json()
    local = run_rap(inst.render(), inst.question, OracleProvider(inst), OracleProvider(inst), cell_size=16)
    assert body["answer"] == local.answer == inst.answer_key
    assert body["selected_k"] == local.selected_k
    assert body["trace"]
    assert sorted(r * 6 + c for r, c in body["retained"]) == local.outcome.retained_cells


def test_protocol_routes(client, inst):
    grid = partition(inst.render(), 16)
    canvas = spatial_layout(grid, RetentionMask.from_cells(6, 6, sorted(inst.subject_cells())))
    r = client.post("/confidence", json={"image": wire.encode_png(canvas.to_png()), "prompt": inst.question})
    assert r.status_code == 200
    expected = OracleProvider(inst).yes_probability(canvas, inst.question)
    assert r.json()["yes_probability"] == pytest.approx(expected)
    r = client.post("/answer", json={"image": wire.encode_png(canvas.to_png()), "question": inst.question})
    assert r.json() == {"text": inst.answer_key}
    r = client.post("/embed", json={"kind": "text", "payload": inst.question})
    assert len(r.json()["embedding"]) == OracleProvider(inst).dim


def test_protocol_rejects_extra_fields(client):
    r = client.post("/embed", json={"kind": "text", "payload": "x", "model": "y"})
    assert r.status_code == 422


def test_protocol_without_instance():
    from rapvision.service import create_app

    bare = TestClient(create_app())
    assert bare.post("/embed", json={"kind": "text", "payload": "x"}).status_code == 503
    assert bare.post("/v1/search", json={"question": "q"}).status_code == 503
