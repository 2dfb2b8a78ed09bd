"""Synthetic perception instances with known ground truth.

An instance is a grid of ``grid_rows`` x ``grid_cols`` cells with a few
solid-colour objects on a textured grey background.  A single-instance
question asks for one object's colour; a cross-instance question asks where
one object sits relative to another.  Object boxes are stored in cell units,
so the oracle can reason about geometry without looking at pixels.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InvalidInput
from ..grid import SourceImage

SINGLE = "single-instance"
CROSS = "cross-instance-spatial"
KINDS = (SINGLE, CROSS)

PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 70, 220),
    "yellow": (235, 215, 40),
    "magenta": (210, 50, 200),
    "cyan": (40, 200, 210),
    "orange": (240, 140, 30),
    "purple": (120, 50, 170),
}

_SUBJECT = re.compile(r"#(\d+)")


def subject_ids(text: str) -> list[int]:
    """Object ids referenced as ``#<id>`` in a question, in order of mention."""
    return [int(m) for m in _SUBJECT.findall(text)]


@dataclass(frozen=True)
class Target:
    id: int
    box: tuple[float, float, float, float]  # top, left, bottom, right in cell units
    attribute: str
    cells: tuple[int, ...] = ()

    def pixel_rect(self, cell_size: int) -> tuple[int, int, int, int]:
        top, left, bottom, right = (int(round(v * cell_size)) for v in self.box)
        return top, left, bottom, right


@dataclass(frozen=True)
class SyntheticInstance:
    id: str
    grid_rows: int
    grid_cols: int
    cell_size: int
    targets: tuple[Target, ...]
    question: str
    question_kind: str
    answer_key: str
    seed: int
    subjects: tuple[int, ...] = ()
    relation: str | None = None

    def __post_init__(self):
        if self.question_kind not in KINDS:
            raise InvalidInput(f"unknown question kind {self.question_kind!r}")
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise InvalidInput("instance grid must have at least one cell")
        n = self.grid_rows * self.grid_cols
        fixed = []
        for t in self.targets:
            top, left, bottom, right = t.box
            if not (0 <= top < bottom <= self.grid_rows and 0 <= left < right <= self.grid_cols):
                raise InvalidInput(f"target {t.id} box {t.box} outside the grid")
            cells = covered_cells(t, self.grid_rows, self.grid_cols, self.cell_size)
            if any(c >= n for c in cells):
                raise InvalidInput(f"target {t.id} cells outside the grid")
            fixed.append(Target(t.id, tuple(float(v) for v in t.box), t.attribute, cells))
        object.__setattr__(self, "targets", tuple(fixed))
        mentioned = tuple(subject_ids(self.question))
        if not self.subjects:
            object.__setattr__(self, "subjects", mentioned)
        elif mentioned and tuple(self.subjects) != mentioned:
            raise InvalidInput(f"subjects {self.subjects} disagree with the question {self.question!r}")
        ids = {t.id for t in self.targets}
        if any(s not in ids for s in self.subjects):
            raise InvalidInput("question references an unknown target")
        expected = 1 if self.question_kind == SINGLE else 2
        if len(self.subjects) != expected:
            raise InvalidInput(
                f"{self.question_kind} question must reference {expected} target(s)"
            )

    @property
    def width(self) -> int:
        return self.grid_cols * self.cell_size

    @property
    def height(self) -> int:
        return self.grid_rows * self.cell_size

    def target(self, target_id: int) -> Target:
        for t in self.targets:
            if t.id == target_id:
                return t
        raise KeyError(target_id)

    def subject_cells(self) -> set[int]:
        cells: set[int] = set()
        for s in self.subjects:
            cells.update(self.target(s).cells)
        return cells

    def render(self) -> SourceImage:
        """Textured grey background with each target drawn as a flat colour patch.

        The texture makes every cell's pixels distinct, which lets a server map
        received crops back to grid cells.
        """
        rng = np.random.default_rng([self.seed, 0x5EED])
        noise = rng.integers(0, 40, size=(self.height, self.width, 3), dtype=np.int16)
        img = noise + 100
        for t in self.targets:
            top, left, bottom, right = t.pixel_rect(self.cell_size)
            colour = np.array(PALETTE[t.attribute], dtype=np.int16)
            img[top:bottom, left:right] = colour + (noise[top:bottom, left:right] // 4) - 5
        return SourceImage(np.clip(img, 0, 255).astype(np.uint8))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["targets"] = [
            {"id": t.id, "box": list(t.box), "attribute": t.attribute, "cells": list(t.cells)}
            for t in self.targets
        ]
        d["subjects"] = list(self.subjects)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticInstance":
        try:
            targets = tuple(
                Target(int(t["id"]), tuple(float(v) for v in t["box"]), str(t["attribute"]))
                for t in d["targets"]
            )
            inst = cls(
                id=str(d["id"]),
                grid_rows=int(d["grid_rows"]),
                grid_cols=int(d["grid_cols"]),
                cell_size=int(d.get("cell_size", 32)),
                targets=targets,
                question=str(d["question"]),
                question_kind=str(d["question_kind"]),
                answer_key=str(d["answer_key"]),
                seed=int(d["seed"]),
                subjects=tuple(int(s) for s in d.get("subjects", ())),
                relation=d.get("relation"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InvalidInput):
                raise
            raise InvalidInput(f"malformed instance document: {exc}") from exc
        stored = {int(t["id"]): tuple(t.get("cells", ())) for t in d["targets"]}
        for t in inst.targets:
            if stored[t.id] and tuple(stored[t.id]) != t.cells:
                raise InvalidInput(f"target {t.id}: stored cells disagree with its box")
        return inst

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def covered_cells(target: Target, rows: int, cols: int, cell_size: int) -> tuple[int, ...]:
    top, left, bottom, right = target.pixel_rect(cell_size)
    cells = []
    for r in range(rows):
        y0, y1 = r * cell_size, (r + 1) * cell_size
        if min(y1, bottom) <= max(y0, top):
            continue
        for c in range(cols):
            x0, x1 = c * cell_size, (c + 1) * cell_size
            if min(x1, right) > max(x0, left):
                cells.append(r * cols + c)
    return tuple(cells)


def load_suite(path: str | Path) -> list[SyntheticInstance]:
    """Read a suite file: one JSON instance document per line."""
    out = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise InvalidInput(f"cannot read suite {path}: {exc.strerror or exc}") from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InvalidInput(f"{path}:{lineno}: {exc}") from exc
        out.append(SyntheticInstance.from_dict(doc))
    return out


def save_suite(instances, path: str | Path) -> None:
    Path(path).write_text("".join(inst.to_json() + "\n" for inst in instances))


def load_instance(path: str | Path) -> SyntheticInstance:
    text = Path(path).read_text()
    try:
        return SyntheticInstance.from_dict(json.loads(text))
    except json.JSONDecodeError:
        suite = load_suite(path)
        if len(suite) != 1:
            raise InvalidInput(f"{path}: expected exactly one instance, found {len(suite)}")
        return suite[0]


# -- generation ---------------------------------------------------------------


@dataclass
class _Placer:
    rows: int
    cols: int
    cell_size: int
    taken: set = field(default_factory=set)

    def fits(self, t: Target) -> bool:
        cells = set(covered_cells(t, self.rows, self.cols, self.cell_size))
        halo = set()
        for idx in cells:
            r, c = divmod(idx, self.cols)
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < self.rows and 0 <= cc < self.cols:
                        halo.add(rr * self.cols + cc)
        return not (halo & self.taken)

    def take(self, t: Target) -> None:
        self.taken.update(covered_cells(t, self.rows, self.cols, self.cell_size))


def _small_box(rng, rows, cols) -> tuple[float, ...]:
    h = float(rng.uniform(0.35, 0.95))
    w = float(rng.uniform(0.35, 0.95))
    top = float(rng.uniform(0, rows - h))
    left = float(rng.uniform(0, cols - w))
    return (round(top, 3), round(left, 3), round(top + h, 3), round(left + w, 3))


def _place_small(rng, placer: _Placer, target_id: int, colour: str, tries: int = 200):
    for _ in range(tries):
        t = Target(target_id, _small_box(rng, placer.rows, placer.cols), colour)
        if placer.fits(t):
            placer.take(t)
            return t
    return None


def _colours(rng, n: int) -> list[str]:
    names = list(PALETTE)
    order = rng.permutation(len(names))
    return [names[i] for i in order[:n]]


def make_single(rng, index: int, rows: int, cols: int, cell_size: int) -> SyntheticInstance:
    seed = int(rng.integers(0, 2**63 - 1))
    n_distract = int(rng.integers(0, 3))
    colours = _colours(rng, 1 + n_distract)
    placer = _Placer(rows, cols, cell_size)
    subject = _place_small(rng, placer, 0, colours[0])
    targets = [subject]
    for i in range(n_distract):
        t = _place_small(rng, placer, i + 1, colours[i + 1])
        if t is not None:
            targets.append(t)
    return SyntheticInstance(
        id=f"inst-{index:05d}",
        grid_rows=rows,
        grid_cols=cols,
        cell_size=cell_size,
        targets=tuple(targets),
        question="What color is object #0?",
        question_kind=SINGLE,
        answer_key=subject.attribute,
        seed=seed,
    )


def _block_pair(rng, rows: int, cols: int, size: int):
    """Two ``size`` x ``size`` cell-aligned blocks sharing rows or columns, with a gap."""
    options = []
    if cols >= 2 * size + 1 and rows >= size:
        options.append("horizontal")
    if rows >= 2 * size + 1 and cols >= size:
        options.append("vertical")
    if not options:
        return None
    axis = options[int(rng.integers(0, len(options)))]
    if axis == "horizontal":
        r = int(rng.integers(0, rows - size + 1))
        c1 = int(rng.integers(0, cols - 2 * size))
        c2 = int(rng.integers(c1 + size + 1, cols - size + 1))
        a = (r, c1, r + size, c1 + size)
        b = (r, c2, r + size, c2 + size)
    else:
        c = int(rng.integers(0, cols - size + 1))
        r1 = int(rng.integers(0, rows - 2 * size))
        r2 = int(rng.integers(r1 + size + 1, rows - size + 1))
        a = (r1, c, r1 + size, c + size)
        b = (r2, c, r2 + size, c + size)
    if rng.random() < 0.5:
        a, b = b, a
    return axis, a, b


def _relation(axis: str, a, b) -> str:
    if axis == "horizontal":
        return "left" if a[1] < b[1] else "right"
    return "above" if a[0] < b[0] else "below"


def make_cross(rng, index: int, rows: int, cols: int, cell_size: int) -> SyntheticInstance:
    seed = int(rng.integers(0, 2**63 - 1))
    size = 2
    pair = _block_pair(rng, rows, cols, size)
    if pair is None:
        size = 1
        pair = _block_pair(rng, rows, cols, size)
    if pair is None:
        raise InvalidInput(f"a {rows}x{cols} grid is too small for a cross-instance question")
    axis, a, b = pair
    n_distract = int(rng.integers(0, 2))
    colours = _colours(rng, 2 + n_distract)
    ta = Target(0, tuple(float(v) for v in a), colours[0])
    tb = Target(1, tuple(float(v) for v in b), colours[1])
    placer = _Placer(rows, cols, cell_size)
    placer.take(ta)
    placer.take(tb)
    targets = [ta, tb]
    for i in range(n_distract):
        t = _place_small(rng, placer, i + 2, colours[i + 2])
        if t is not None:
            targets.append(t)
    relation = _relation(axis, a, b)
    return SyntheticInstance(
        id=f"inst-{index:05d}",
        grid_rows=rows,
        grid_cols=cols,
        cell_size=cell_size,
        targets=tuple(targets),
        question="Where is object #0 relative to object #1?",
        question_kind=CROSS,
        answer_key=relation,
        seed=seed,
        relation=relation,
    )


def generate_suite(
    count: int,
    rows: int = 8,
    cols: int = 8,
    *,
    single_fraction: float = 0.5,
    seed: int = 0,
    cell_size: int = 32,
) -> list[SyntheticInstance]:
    if count < 0:
        raise InvalidInput("count must be >= 0")
    if not 0.0 <= single_fraction <= 1.0:
        raise InvalidInput("single_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n_single = int(round(count * single_fraction))
    kinds = np.array([SINGLE] * n_single + [CROSS] * (count - n_single))
    kinds = kinds[rng.permutation(count)] if count else kinds
    out = []
    for i, kind in enumerate(kinds):
        make = make_single if kind == SINGLE else make_cross
        out.append(make(rng, i, rows, cols, cell_size))
    return out
