"""Deterministic geometry-driven stand-in for the retriever and the MLLM.

Embedding space: one axis per target id, followed by ``noise_dims`` axes used
for per-cell noise.  A crop's embedding is ``sum_t alpha_t * e_t`` plus enough
unit noise to make it a unit vector, where ``alpha_t`` is the fraction of the
crop covered by target ``t``.  Queries embed as the (normalised) sum of the
axes of the objects they mention.

Confidence rewards seeing the question's objects on a small canvas:

    conf = clamp(vis * 2 * A_ref / (A_ref + A_canvas), 0, 1)

``vis`` is the visible fraction of the subject's cells; for two-object
questions it is the smaller of the two fractions, and drops to 0 if the canvas
reverses the up/down or left/right order of any pair of their cells.
"""

from __future__ import annotations

import hashlib

import numpy as np

from ..errors import InvalidInput
from ..grid import Crop, SourceImage, partition
from ..layout import Canvas
from .synthetic import SyntheticInstance, subject_ids

UNANSWERABLE = "unanswerable"


def _seeded_unit(seed_parts, dims: int) -> np.ndarray:
    rng = np.random.default_rng(seed_parts)
    v = rng.standard_normal(dims)
    return v / np.linalg.norm(v)


def _text_seed(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


class OracleProvider:
    def __init__(
        self,
        instance: SyntheticInstance,
        *,
        threshold: float = 0.6,
        ref_cells: float = 4.0,
        noise_dims: int = 32,
    ):
        self.instance = instance
        self.threshold = threshold
        self.noise_dims = noise_dims
        self.n_axes = max(t.id for t in instance.targets) + 1 if instance.targets else 0
        self.dim = self.n_axes + noise_dims
        self.ref_area = ref_cells * instance.cell_size ** 2
        self._pixel_rects = {t.id: t.pixel_rect(instance.cell_size) for t in instance.targets}

    # -- retriever -----------------------------------------------------------

    def _axis(self, target_id: int) -> np.ndarray:
        v = np.zeros(self.dim)
        v[target_id] = 1.0
        return v

    def _noise(self, seed_parts) -> np.ndarray:
        v = np.zeros(self.dim)
        v[self.n_axes:] = _seeded_unit(seed_parts, self.noise_dims)
        return v

    def embed_query(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise InvalidInput("query text is empty")
        known = {t.id for t in self.instance.targets}
        mentioned = subject_ids(text)
        if not mentioned:
            return self._noise([self.instance.seed % 2**63, _text_seed(text)])
        v = np.zeros(self.dim)
        for target_id in mentioned:
            if target_id in known:
                v += self._axis(target_id)
            else:
                v += self._noise([self.instance.seed % 2**63, _text_seed(f"#{target_id}")])
        return v / np.linalg.norm(v)

    def coverage(self, crop: Crop) -> dict[int, float]:
        x, y, w, h = crop.rect
        out = {}
        for target_id, (top, left, bottom, right) in self._pixel_rects.items():
            ow = min(x + w, right) - max(x, left)
            oh = min(y + h, bottom) - max(y, top)
            if ow > 0 and oh > 0:
                out[target_id] = (ow * oh) / (w * h)
        return out

    def embed_image(self, crop: Crop) -> np.ndarray:
        if crop.rect.w < 1 or crop.rect.h < 1:
            raise InvalidInput("empty crop")
        v = np.zeros(self.dim)
        for target_id, alpha in self.coverage(crop).items():
            v[target_id] = alpha
        mass = float(np.dot(v, v))
        if mass < 1.0:
            cell = crop.grid_row * self.instance.grid_cols + crop.grid_col
            v += np.sqrt(1.0 - mass) * self._noise([self.instance.seed % 2**63, cell])
        return v / np.linalg.norm(v)

    # -- MLLM ----------------------------------------------------------------

    def visibility(self, canvas: Canvas, query: str) -> float:
        inst = self.instance
        known = {t.id for t in inst.targets}
        subjects = [s for s in subject_ids(query) if s in known]
        if not subjects:
            return 0.0
        placements = canvas.placements()
        cols = inst.grid_cols

        def present(target_id):
            cells = inst.target(target_id).cells
            shown = [c for c in cells if divmod(c, cols) in placements]
            return shown, len(shown) / len(cells)

        if len(subjects) == 1:
            return present(subjects[0])[1]
        (a_cells, a_vis), (b_cells, b_vis) = present(subjects[0]), present(subjects[1])
        vis = min(a_vis, b_vis)
        if vis == 0.0:
            return 0.0
        for a in a_cells:
            ra, ca = divmod(a, cols)
            pa = placements[(ra, ca)]
            for b in b_cells:
                rb, cb = divmod(b, cols)
                pb = placements[(rb, cb)]
                if np.sign(ra - rb) != np.sign(pa[0] - pb[0]) or np.sign(ca - cb) != np.sign(pa[1] - pb[1]):
                    return 0.0
        return vis

    def yes_probability(self, canvas: Canvas, query: str) -> float:
        if not query or not query.strip():
            raise InvalidInput("query text is empty")
        vis = self.visibility(canvas, query)
        conf = vis * 2.0 * self.ref_area / (self.ref_area + canvas.area)
        return float(min(1.0, max(0.0, conf)))

    def answer(self, canvas: Canvas, query: str) -> str:
        if self.yes_probability(canvas, query) > self.threshold:
            return self.instance.answer_key
        return UNANSWERABLE


class PixelOracle:
    """Oracle that works from pixels alone, for serving over HTTP.

    Crops and canvases arrive as images; each cell is identified by an exact
    pixel match against the rendered instance, then handed to the geometric
    oracle.  Only works because synthetic renders give every cell unique pixels.
    """

    def __init__(self, instance: SyntheticInstance, **oracle_kwargs):
        self.oracle = OracleProvider(instance, **oracle_kwargs)
        self.instance = instance
        self.image = instance.render()
        self.grid = partition(self.image, instance.cell_size)
        cs = instance.cell_size
        self._crops: dict[bytes, tuple[int, int]] = {}
        self._cells: dict[bytes, tuple[int, int]] = {}
        for r, c in self.grid.cells():
            px = self.grid.view(r, c)
            self._crops[self._key(px)] = (r, c)
            padded = np.zeros((cs, cs, 3), dtype=np.uint8)
            padded[: px.shape[0], : px.shape[1]] = px
            self._cells[self._key(padded)] = (r, c)

    @staticmethod
    def _key(px: np.ndarray) -> bytes:
        h = hashlib.sha256(repr(px.shape).encode())
        h.update(np.ascontiguousarray(px).tobytes())
        return h.digest()

    def embed_query(self, text: str) -> np.ndarray:
        return self.oracle.embed_query(text)

    def locate_crop(self, image: SourceImage) -> Crop:
        cell = self._crops.get(self._key(image.pixels))
        if cell is None:
            raise InvalidInput("image does not match any crop of the instance")
        r, c = cell
        return Crop(r, c, self.grid.rect(r, c), np.array(image.pixels))

    def embed_image(self, image: SourceImage | Crop) -> np.ndarray:
        if isinstance(image, Crop):
            image = SourceImage(image.pixels)
        return self.oracle.embed_image(self.locate_crop(image))

    def locate_canvas(self, image: SourceImage) -> Canvas:
        cs = self.instance.cell_size
        if image.width % cs or image.height % cs:
            raise InvalidInput(f"canvas {image.width}x{image.height} is not a whole number of cells")
        n_rows, n_cols = image.height // cs, image.width // cs
        filled = np.zeros((n_rows, n_cols), dtype=bool)
        mapping = {}
        for ci in range(n_rows):
            for cj in range(n_cols):
                block = image.pixels[ci * cs:(ci + 1) * cs, cj * cs:(cj + 1) * cs]
                if not block.any():
                    continue
                cell = self._cells.get(self._key(block))
                if cell is None:
                    raise InvalidInput(f"canvas cell ({ci}, {cj}) does not match any crop")
                mapping[(ci, cj)] = cell
                filled[ci, cj] = True
        return Canvas(image, cs, mapping, filled, (self.grid.rows, self.grid.cols))

    def yes_probability(self, image: SourceImage | Canvas, prompt: str) -> float:
        if isinstance(image, Canvas):
            image = image.image
        return self.oracle.yes_probability(self.locate_canvas(image), prompt)

    def answer(self, image: SourceImage | Canvas, question: str) -> str:
        if isinstance(image, Canvas):
            image = image.image
        return self.oracle.answer(self.locate_canvas(image), question)
