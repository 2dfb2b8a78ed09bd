"""Command-line driver.

Exit status: 0 success, 1 run failure (provider errors, failure threshold),
2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Settings, load_settings
from .errors import InvalidConfig, InvalidInput, ProviderError, RapError
from .grid import crop_at, load_image, partition, save_image
from .harness import (
    FIXED_K,
    VARIANTS,
    ExperimentAborted,
    ExperimentConfig,
    bench,
    bench_csv,
    run_experiment,
)
from .layout import StripOrder, spatial_layout, strip_layout_by_score
from .pipeline import run_rap
from .providers import (
    HttpProvider,
    OracleProvider,
    PixelOracle,
    generate_suite,
    load_instance,
    load_suite,
    save_suite,
)
from .retrieval import RetentionMask, ScoreMatrix, score_crops, top_k
from .search import SearchParams

log = logging.getLogger("rapvision")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(RapError):
    pass


def _csv_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _search_params(args, settings: Settings) -> SearchParams:
    base = settings.search
    return SearchParams(
        ratios=tuple(float(p) for p in _csv_list(args.ratios)) if args.ratios else base.ratios,
        bias=base.bias if args.bias is None else args.bias,
        threshold=base.threshold if args.threshold is None else args.threshold,
        max_depth=base.max_depth if args.max_depth is None else args.max_depth,
        max_expansions=base.max_expansions if args.max_expansions is None else args.max_expansions,
    )


def _provider_config(args, settings: Settings):
    cfg = settings.provider
    if getattr(args, "base_url", None):
        from dataclasses import replace

        cfg = replace(cfg, base_url=args.base_url)
    return cfg


def _provider_kind(args, settings: Settings) -> str:
    return getattr(args, "provider", None) or settings.provider_kind


def _backends(args, settings: Settings, *, image_given: bool):
    """(retriever, mllm, instance) for the selected provider."""
    kind = _provider_kind(args, settings)
    instance = load_instance(args.instance) if getattr(args, "instance", None) else None
    if kind == "oracle":
        if instance is None:
            raise UsageError("the oracle provider needs --instance")
        oracle = PixelOracle(instance, threshold=_threshold(args, settings)) if image_given else OracleProvider(
            instance, threshold=_threshold(args, settings)
        )
        return oracle, oracle, instance
    transport = None
    if getattr(args, "replay", None):
        from .providers.replay import ReplayTransport

        transport = ReplayTransport.from_file(args.replay)
    client = HttpProvider(_provider_config(args, settings), transport=transport)
    return client, client, instance


def _threshold(args, settings: Settings) -> float:
    t = getattr(args, "threshold", None)
    return settings.search.threshold if t is None else t


def _cell_size(args, settings: Settings, instance=None) -> int:
    if getattr(args, "cell_size", None):
        return args.cell_size
    if instance is not None:
        return instance.cell_size
    return settings.cell_size


def _image_and_cells(args, settings, instance):
    if args.image:
        return load_image(args.image), _cell_size(args, settings, instance)
    if instance is None:
        raise UsageError("give an image path or --instance")
    return instance.render(), instance.cell_size


# -- subcommands ---------------------------------------------------------------


def cmd_tile(args, settings: Settings) -> int:
    image = load_image(args.image)
    grid = partition(image, _cell_size(args, settings))
    doc = {
        "width": image.width,
        "height": image.height,
        "cell_size": grid.cell_size,
        "rows": grid.rows,
        "cols": grid.cols,
        "rects": [[list(r) for r in row] for row in grid.crop_rects],
    }
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        from .grid import SourceImage

        for r, c in grid.cells():
            save_image(SourceImage(crop_at(grid, r, c).pixels), out / f"crop_r{r:03d}_c{c:03d}.png")
    print(json.dumps(doc if args.rects else {k: v for k, v in doc.items() if k != "rects"}))
    return EXIT_OK


def cmd_score(args, settings: Settings) -> int:
    retriever, _, instance = _backends(args, settings, image_given=bool(args.image))
    image, cell_size = _image_and_cells(args, settings, instance)
    grid = partition(image, cell_size)
    scores = score_crops(args.question, grid, retriever)
    doc = {"rows": scores.rows, "cols": scores.cols, "scores": scores.to_list()}
    if args.out:
        Path(args.out).write_text(json.dumps(doc) + "\n")
    print(json.dumps(doc))
    return EXIT_OK


def _read_matrix(path, what):
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInput(f"cannot read {what} {path}: {exc}") from exc
    if isinstance(doc, dict):
        if what not in doc:
            raise InvalidInput(f"{path} has no {what!r} entry")
        return doc[what]
    return doc


def cmd_layout(args, settings: Settings) -> int:
    image = load_image(args.image)
    grid = partition(image, _cell_size(args, settings))
    scores = ScoreMatrix(np.array(_read_matrix(args.scores, "scores"))) if args.scores else None
    if args.mask:
        mask = RetentionMask(np.array(_read_matrix(args.mask, "mask")))
    elif scores is not None and args.k:
        mask = top_k(scores, args.k)
    else:
        raise UsageError("give --mask, or --scores with --k")
    if args.strategy == "spatial":
        canvas = spatial_layout(grid, mask)
    else:
        canvas = strip_layout_by_score(grid, mask, scores, StripOrder(args.strategy))
    save_image(canvas.image, args.out)
    print(json.dumps({
        "canvas_width": canvas.image.width,
        "canvas_height": canvas.image.height,
        "cells": [canvas.n_rows, canvas.n_cols],
        "mapping": [[list(dst), list(src)] for dst, src in sorted(canvas.mapping.items())],
    }))
    return EXIT_OK


def cmd_search(args, settings: Settings) -> int:
    retriever, mllm, instance = _backends(args, settings, image_given=bool(args.image))
    image, cell_size = _image_and_cells(args, settings, instance)
    question = args.question or (instance.question if instance else None)
    if not question:
        raise UsageError("--question is required")
    result = run_rap(
        image,
        question,
        retriever,
        mllm,
        cell_size=cell_size,
        params=_search_params(args, settings),
        trace_path=args.trace,
    )
    if args.canvas:
        save_image(result.outcome.final_canvas.image, args.canvas)
    out = result.outcome
    print(f"answer: {result.answer}")
    print(f"selected_k: {out.selected_k} of {result.grid.n_cells}")
    print(f"confidence: {out.confidence:.6f}")
    print(f"termination: {out.termination}  expansions: {out.expansions}  evaluations: {out.evaluations}")
    if args.trace:
        print(f"trace: {args.trace}")
    return EXIT_OK


def cmd_gen_suite(args, settings: Settings) -> int:
    suite = generate_suite(
        args.count,
        args.rows,
        args.cols,
        single_fraction=args.single_fraction,
        seed=args.seed,
        cell_size=args.cell_size,
    )
    try:
        save_suite(suite, args.out)
    except OSError as exc:
        raise InvalidInput(f"cannot write {args.out}: {exc}") from exc
    print(f"wrote {len(suite)} instance(s) to {args.out}")
    return EXIT_OK


def _experiment_config(args, settings: Settings) -> ExperimentConfig:
    exp = settings.experiment
    variants = _csv_list(args.variants) if args.variants else exp.get("variants", ["baseline-full-image", "rap-full"])
    k_values = _csv_list(args.k_values) if args.k_values else exp.get("k_values", [1, 2, 4, 8, 16, "all"])
    return ExperimentConfig(
        suite=args.suite or exp.get("suite"),
        variants=tuple(variants),
        k_values=tuple(k_values),
        params=_search_params(args, settings),
        provider=_provider_kind(args, settings),
        provider_config=_provider_config(args, settings),
        output=args.out or exp.get("output", "runs/latest"),
        seed=args.seed if args.seed is not None else int(exp.get("seed", 0)),
        workers=args.workers or int(exp.get("workers", 1)),
    )


def cmd_run(args, settings: Settings) -> int:
    config = _experiment_config(args, settings)
    if not config.suite:
        raise UsageError("--suite is required")
    report = run_experiment(config)
    for g in report.summary["groups"]:
        label = g["variant"] + (f"@k={g['k_requested']}" if g["k_requested"] else "")
        acc = "n/a" if g["accuracy"] is None else f"{g['accuracy']:.3f}"
        print(f"{label:32s} n={g['n']:<5d} accuracy={acc} mean_k={g['mean_k_selected']} "
              f"expansions={g['total_expansions']} failures={g['provider_failures']}")
    print(f"reports in {report.output}")
    return EXIT_OK


def cmd_bench(args, settings: Settings) -> int:
    suite = load_suite(args.suite)
    variants = _csv_list(args.variants) if args.variants else ["baseline-full-image", "rap-full", "exhaustive-reference"]
    bad = [v for v in variants if v not in VARIANTS or (v in FIXED_K and not args.k)]
    if bad:
        raise UsageError(f"cannot bench variant(s) {bad} (fixed-k variants need --k)")
    results = bench(suite, variants, params=_search_params(args, settings), repeat=args.repeat, k=args.k or "all")
    text = bench_csv(results)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_serve(args, settings: Settings) -> int:
    import uvicorn

    from .service import create_app

    instance = load_instance(args.instance) if args.instance else None
    retriever = mllm = None
    if _provider_kind(args, settings) == "http" and instance is None:
        retriever = mllm = HttpProvider(_provider_config(args, settings))
    app = create_app(retriever=retriever, mllm=mllm, instance=instance)
    uvicorn.run(app, host=args.host, port=args.port, log_level=args.log_level.lower())
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _add_search_flags(p):
    g = p.add_argument_group("search")
    g.add_argument("--ratios", help="comma-separated retention ratios, e.g. 0.25,0.5,0.75")
    g.add_argument("--bias", type=float)
    g.add_argument("--threshold", type=float, help="confidence needed to stop (default 0.6)")
    g.add_argument("--max-depth", type=int)
    g.add_argument("--max-expansions", type=int)


def _add_provider_flags(p):
    g = p.add_argument_group("provider")
    g.add_argument("--provider", choices=["oracle", "http"])
    g.add_argument("--instance", help="synthetic instance JSON (oracle provider)")
    g.add_argument("--base-url", help="model server URL (http provider)")
    g.add_argument("--replay", help="recorded session file served instead of the network (http provider)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rapvision", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="YAML settings file")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tile", help="partition an image into crops")
    p.add_argument("image")
    p.add_argument("--cell-size", type=int)
    p.add_argument("--out-dir", help="also write every crop as PNG here")
    p.add_argument("--rects", action="store_true", help="print every crop rectangle")
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("score", help="score every crop against a question")
    p.add_argument("image", nargs="?")
    p.add_argument("--question", required=True)
    p.add_argument("--cell-size", type=int)
    p.add_argument("--out")
    _add_provider_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("layout", help="compose retained crops into a canvas")
    p.add_argument("image")
    p.add_argument("--cell-size", type=int)
    p.add_argument("--mask", help="JSON 0/1 matrix (or {'mask': ...})")
    p.add_argument("--scores", help="JSON score matrix as written by `score --out`")
    p.add_argument("--k", type=int)
    p.add_argument("--strategy", default="spatial", choices=["spatial", "score-ascending", "appearance"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_layout)

    p = sub.add_parser("search", help="answer one question about one image")
    p.add_argument("image", nargs="?")
    p.add_argument("--question")
    p.add_argument("--cell-size", type=int)
    p.add_argument("--trace", help="write the search trace (JSON lines) here")
    p.add_argument("--canvas", help="write the final canvas image here")
    _add_provider_flags(p)
    _add_search_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("gen-suite", help="write a synthetic instance suite")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--rows", type=int, default=8)
    p.add_argument("--cols", type=int, default=8)
    p.add_argument("--single-fraction", type=float, default=0.5)
    p.add_argument("--cell-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_suite)

    p = sub.add_parser("run", help="run pipeline variants over a suite")
    p.add_argument("--suite")
    p.add_argument("--variants", help="comma-separated; one of " + ", ".join(VARIANTS))
    p.add_argument("--k-values", help="comma-separated k for fixed-k variants (ints, 'all', 'suff')")
    p.add_argument("--out", help="report directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    _add_provider_flags(p)
    _add_search_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="throughput per variant")
    p.add_argument("--suite", required=True)
    p.add_argument("--variants")
    p.add_argument("--k", help="k for fixed-k variants")
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--out")
    _add_search_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--instance", help="serve the oracle model-server routes for this instance")
    p.add_argument("--provider", choices=["oracle", "http"])
    p.add_argument("--base-url")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = load_settings(args.config)
        return args.func(args, settings)
    except (InvalidInput, InvalidConfig, UsageError) as exc:
        print(f"rapvision {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ExperimentAborted as exc:
        print(f"rapvision {args.command}: aborted: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except ProviderError as exc:
        where = f" (cell {exc.cell})" if exc.cell is not None else ""
        print(f"rapvision {args.command}: provider error{where}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
