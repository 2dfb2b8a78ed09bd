import json

import httpx
import numpy as np
import pytest

from rapvision.errors import InvalidConfig, InvalidInput, ProtocolError, ProviderError
from rapvision.grid import crop_at, partition
from rapvision.layout import spatial_layout, strip_layout_by_score
from rapvision.providers import (
    CROSS,
    SINGLE,
    UNANSWERABLE,
    HttpProvider,
    OracleProvider,
    PixelOracle,
    ProviderConfig,
    SyntheticInstance,
    generate_suite,
    load_instance,
    load_suite,
    save_suite,
    wire,
)
from rapvision.providers.replay import ReplayTransport, request_key
from rapvision.providers.synthetic import Target
from rapvision.retrieval import RetentionMask, similarity
from rapvision.search import CONFIDENCE_PROMPT


def single(**kw):
    targets = kw.pop("targets", (Target(0, (1, 1, 2, 2), "red"), Target(1, (0, 2, 1, 2.5), "blue")))
    return SyntheticInstance(
        id="t", grid_rows=4, grid_cols=4, cell_size=16, targets=targets,
        question="What color is object #0?", question_kind=SINGLE, answer_key="red", seed=3, **kw,
    )


def cross():
    return SyntheticInstance(
        id="x", grid_rows=4, grid_cols=4, cell_size=16,
        targets=(Target(0, (0, 0, 1, 1), "red"), Target(1, (0, 3, 1, 4), "blue")),
        question="Where is object #0 relative to object #1?", question_kind=CROSS,
        answer_key="left", seed=4, relation="left",
    )


def mask(cells, rows=4, cols=4):
    return RetentionMask.from_cells(rows, cols, cells)


# -- oracle --------------------------------------------------------------------


def test_full_coverage_embeds_on_the_target_axis():
    inst = single()
    oracle = OracleProvider(inst)
    grid = partition(inst.render(), 16)
    e = oracle.embed_image(crop_at(grid, 1, 1))
    axis = np.zeros_like(e)
    axis[0] = 1.0
    assert np.allclose(e, axis)
    assert similarity(oracle.embed_query(inst.question), e) == pytest.approx(0.0, abs=1e-12)


def test_half_coverage_scores_a_quarter():
    inst = single()
    oracle = OracleProvider(inst)
    grid = partition(inst.render(), 16)
    e = oracle.embed_image(crop_at(grid, 0, 2))
    assert np.linalg.norm(e) == pytest.approx(1.0)
    assert similarity(oracle.embed_query("What color is object #1?"), e) == pytest.approx(0.25, abs=1e-12)


def test_background_cells_score_near_half():
    inst = single()
    oracle = OracleProvider(inst)
    grid = partition(inst.render(), 16)
    e = oracle.embed_image(crop_at(grid, 3, 3))
    assert similarity(oracle.embed_query(inst.question), e) == pytest.approx(0.5, abs=1e-12)


def test_confidence_is_one_at_reference_area():
    inst = single()
    oracle = OracleProvider(inst)
    grid = partition(inst.render(), 16)
    canvas = spatial_layout(grid, mask([5, 6, 9, 10]))
    assert canvas.area == 4 * 16 * 16
    assert oracle.yes_probability(canvas, inst.question) == pytest.approx(1.0)
    assert oracle.answer(canvas, inst.question) == "red"


def test_full_image_is_unanswerable():
    inst = single()
    oracle = OracleProvider(inst)
    grid = partition(inst.render(), 16)
    canvas = spatial_layout(grid, mask(range(16)))
    # vis 1, A = 16 cells: 2 * 4 / (4 + 16)
    assert oracle.yes_probability(canvas, inst.question) == pytest.approx(0.4)
    assert oracle.answer(canvas, inst.question) == UNANSWERABLE


def test_missing_subject_gives_zero():
    inst = single()
    oracle = OracleProvider(inst)
    grid = partition(inst.render(), 16)
    canvas = spatial_layout(grid, mask([0]))
    assert oracle.yes_probability(canvas, inst.question) == 0.0


def test_confidence_monotone_in_area_and_visibility():
    inst = single(targets=(Target(0, (1, 1, 2, 3), "red"),))  # cells 5 and 6
    oracle = OracleProvider(inst)
    grid = partition(inst.render(), 16)
    confs = [oracle.yes_probability(spatial_layout(grid, mask(cells)), inst.question)
             for cells in ([5, 6], [5, 6, 7], [5, 6, 13], [5, 6, 12, 15])]
    assert all(a >= b for a, b in zip(confs, confs[1:]))
    half = oracle.yes_probability(spatial_layout(grid, mask([5, 7])), inst.question)
    full = oracle.yes_probability(spatial_layout(grid, mask([5, 6])), inst.question)
    assert half < full


def test_cross_instance_order_matters():
    inst = cross()
    oracle = OracleProvider(inst)
    grid = partition(inst.render(), 16)
    spatial = spatial_layout(grid, mask([0, 3]))
    assert oracle.yes_probability(spatial, inst.question) == pytest.approx(1.0)
    # scores put #1 first, so the strip shows it left of #0: order reversed
    from rapvision.retrieval import ScoreMatrix

    s = np.full((4, 4), 0.5)
    s[0, 3], s[0, 0] = 0.0, 0.1
    scrambled = strip_layout_by_score(grid, mask([0, 3]), ScoreMatrix(s), "score-ascending")
    assert scrambled.mapping == {(0, 0): (0, 3), (0, 1): (0, 0)}
    assert oracle.yes_probability(scrambled, inst.question) == 0.0
    assert oracle.answer(scrambled, inst.question) == UNANSWERABLE


def test_oracle_is_deterministic():
    inst = generate_suite(1, 8, 8, seed=9)[0]
    a, b = OracleProvider(inst), OracleProvider(inst)
    grid = partition(inst.render(), inst.cell_size)
    for r, c in [(0, 0), (3, 4), (7, 7)]:
        assert np.array_equal(a.embed_image(crop_at(grid, r, c)), b.embed_image(crop_at(grid, r, c)))
    assert np.array_equal(a.embed_query("no ids here"), b.embed_query("no ids here"))


def test_empty_query_rejected():
    with pytest.raises(InvalidInput):
        OracleProvider(single()).embed_query("  ")


def test_pixel_oracle_agrees_with_geometric_oracle():
    inst = generate_suite(1, 6, 6, seed=2, cell_size=16)[0]
    geo, pix = OracleProvider(inst), PixelOracle(inst)
    grid = partition(inst.render(), 16)
    for r, c in grid.cells():
        crop = crop_at(grid, r, c)
        assert np.array_equal(geo.embed_image(crop), pix.embed_image(crop))
    canvas = spatial_layout(grid, mask(sorted(inst.subject_cells()) + [0], 6, 6))
    assert pix.yes_probability(canvas.image, inst.question) == geo.yes_probability(canvas, inst.question)
    assert pix.locate_canvas(canvas.image).mapping == canvas.mapping


def test_pixel_oracle_rejects_foreign_pixels():
    pix = PixelOracle(single())
    from rapvision.grid import SourceImage

    with pytest.raises(InvalidInput):
        pix.embed_image(SourceImage.blank(16, 16))
    with pytest.raises(InvalidInput):
        pix.yes_probability(SourceImage.blank(20, 16), "What color is object #0?")


# -- synthetic suites ----------------------------------------------------------


def test_generate_suite_split_and_determinism(tmp_path):
    a = generate_suite(50, 8, 8, seed=7)
    b = generate_suite(50, 8, 8, seed=7)
    assert [i.to_json() for i in a] == [i.to_json() for i in b]
    assert sum(i.question_kind == SINGLE for i in a) == 25
    save_suite(a, tmp_path / "s.jsonl")
    loaded = load_suite(tmp_path / "s.jsonl")
    assert [i.to_json() for i in loaded] == [i.to_json() for i in a]
    for inst in a:
        assert inst.answer_key
        if inst.question_kind == CROSS:
            assert inst.answer_key in {"left", "right", "above", "below"}


def test_instance_validation(tmp_path):
    with pytest.raises(InvalidInput):
        single(targets=(Target(0, (3, 3, 5, 4), "red"),))
    doc = single().to_dict()
    doc["question"] = "What color is object #9?"
    with pytest.raises(InvalidInput):
        SyntheticInstance.from_dict(doc)
    doc = single().to_dict()
    del doc["answer_key"]
    with pytest.raises(InvalidInput):
        SyntheticInstance.from_dict(doc)
    path = tmp_path / "one.json"
    path.write_text(single().to_json())
    assert load_instance(path).to_json() == single().to_json()


# -- wire + HTTP client --------------------------------------------------------


def test_wire_models_reject_unknown_fields():
    with pytest.raises(Exception):
        wire.EmbedRequest.model_validate_json('{"kind":"text","payload":"x","extra":1}')
    with pytest.raises(Exception):
        wire.ConfidenceResponse.model_validate_json('{"yes_probability": 1.5}')


def _json(resp):
    return httpx.Response(200, json=resp)


def make_client(handler, **cfg):
    sleeps = []
    client = HttpProvider(ProviderConfig(base_url="http://m.test", **cfg),
                          transport=httpx.MockTransport(handler), sleep=sleeps.append)
    return client, sleeps


def test_retries_with_backoff_then_succeeds():
    calls = []

    def handler(request):
        calls.append(request)
        if len(calls) < 3:
            return httpx.Response(503)
        return _json({"embedding": [0.0, 1.0]})

    client, sleeps = make_client(handler, max_retries=3)
    assert client.embed_query("hello").tolist() == [0.0, 1.0]
    assert len(calls) == 3 and sleeps == [0.2, 0.4]


def test_transport_errors_are_retried():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) == 1:
            raise httpx.ConnectError("refused")
        return _json({"text": "ok"})

    client, _ = make_client(handler, max_retries=1)
    canvas = spatial_layout(partition(single().render(), 16), mask([0]))
    assert client.answer(canvas, "q") == "ok"


def test_gives_up_after_max_retries():
    client, sleeps = make_client(lambda r: httpx.Response(429), max_retries=2)
    with pytest.raises(ProviderError, match="3 attempt"):
        client.embed_query("x")
    assert sleeps == [0.2, 0.4]


def test_client_errors_are_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(400, text="bad")

    client, _ = make_client(handler)
    with pytest.raises(ProviderError):
        client.embed_query("x")
    assert len(calls) == 1


def test_malformed_response_is_a_protocol_error():
    client, _ = make_client(lambda r: _json({"embeddings": [1.0]}))
    with pytest.raises(ProtocolError):
        client.embed_query("x")
    client, _ = make_client(lambda r: _json({"embedding": [0.0, 0.0]}))
    with pytest.raises(ProtocolError):
        client.embed_query("x")


def test_bearer_token_from_environment(monkeypatch):
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return _json({"yes_probability": 0.25})

    monkeypatch.setenv("RAPVISION_TOKEN", "s3cret")
    client, _ = make_client(handler)
    canvas = spatial_layout(partition(single().render(), 16), mask([0]))
    assert client.yes_probability(canvas, "Is it red?") == 0.25
    assert seen["auth"] == "Bearer s3cret"
    assert seen["body"]["prompt"] == CONFIDENCE_PROMPT.format(q="Is it red?")
    assert wire.decode_png(seen["body"]["image"]) == canvas.to_png()


def test_provider_config_bounds():
    with pytest.raises(InvalidConfig):
        ProviderConfig(max_retries=6)
    with pytest.raises(InvalidConfig):
        ProviderConfig(timeout_ms=0)


def test_replay_misses_are_404s():
    replay = ReplayTransport([])
    client = HttpProvider(ProviderConfig(base_url="http://m.test", max_retries=0), transport=replay)
    with pytest.raises(ProviderError, match="404"):
        client.embed_query("never recorded")
    assert replay.misses == ["/embed"]


def test_request_key_ignores_png_encoding():
    inst = single()
    image = inst.render()
    a = wire.ConfidenceRequest(image=wire.encode_png(image.to_png()), prompt="p").model_dump_json()
    import io

    buf = io.BytesIO()
    image.to_pil().save(buf, format="PNG", compress_level=1)
    b = wire.ConfidenceRequest(image=wire.encode_png(buf.getvalue()), prompt="p").model_dump_json()
    assert a != b
    assert request_key("/confidence", a) == request_key("/confidence", b)
