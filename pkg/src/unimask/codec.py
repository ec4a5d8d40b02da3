"""Synthetic two-modality world: grid images, captions, and QA pairs.

Images are small grids whose cells are empty or hold one colored shape.
Cells map to integer codes (empty, then shape x color combinations) with
the image mask as the last ID.  Captions and questions come from a small
closed grammar over a fixed word list; the text mask is likewise the last
ID and a dedicated pad word fills unused slots.

The module also carries the exact-match scene scorer used for
text-to-image evaluation: every category check is a literal predicate on
the decoded grid, so a grid constructed from a prompt scores 1.0 on all
categories that apply to that prompt.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .diffusion import Modality, TokenSequence
from .errors import DataError, GenerationError

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
PLURALS = {"circle": "circles", "square": "squares", "triangle": "triangles"}
SINGULARS = {v: k for k, v in PLURALS.items()}
RELATIONS = ("left", "right", "above", "below")
NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight")
COUNT_WORDS = {w: i for i, w in enumerate(NUMBER_WORDS)}

EMPTY_CODE = 0
IMG_MASK_ID = 1 + len(SHAPES) * len(COLORS)
IMG_VOCAB_SIZE = IMG_MASK_ID + 1

PAD_WORD = "<pad>"
MASK_WORD = "<mask>"

# Order is frozen: pad first, mask last.  Checkpoints and corpora depend on it.
VOCAB_WORDS = (
    (PAD_WORD, "a", "and")
    + NUMBER_WORDS
    + COLORS
    + SHAPES
    + tuple(PLURALS[s] for s in SHAPES)
    + ("left", "right", "above", "below", "of")
    + ("how", "many", "what", "color", "shape", "is", "in", "the", "object", "row", "column", "nothing")
    + (MASK_WORD,)
)
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB_WORDS)}
TEXT_VOCAB_SIZE = len(VOCAB_WORDS)
TEXT_MASK_ID = TEXT_VOCAB_SIZE - 1
PAD_ID = WORD_TO_ID[PAD_WORD]

DEFAULT_TEXT_LEN = 77
DEFAULT_ANSWER_LEN = 4

QA_KINDS = ("counting", "color", "shape", "position")
QA_KIND_WEIGHTS = (0.4, 0.2, 0.2, 0.2)


# ----------------------------------------------------------------- grid image


@dataclass(frozen=True)
class GridImage:
    """Row-major grid of cells; each cell is None or a (shape, color) pair."""

    width: int
    height: int
    cells: tuple[Optional[tuple[str, str]], ...]

    def __post_init__(self) -> None:
        if not (1 <= self.width <= 8 and 1 <= self.height <= 8):
            raise DataError(f"grid sides must lie in [1, 8], got {self.width}x{self.height}")
        if len(self.cells) != self.width * self.height:
            raise DataError("cell count does not match grid dimensions")
        for cell in self.cells:
            if cell is None:
                continue
            shape, color = cell
            if shape not in SHAPES or color not in COLORS:
                raise DataError(f"unknown cell content {cell!r}")

    def cell(self, row: int, col: int) -> Optional[tuple[str, str]]:
        return self.cells[row * self.width + col]

    def objects(self) -> list[tuple[int, int, str, str]]:
        out = []
        for idx, cell in enumerate(self.cells):
            if cell is not None:
                out.append((idx // self.width, idx % self.width, cell[0], cell[1]))
        return out

    def count_shape(self, shape: str) -> int:
        return sum(1 for c in self.cells if c is not None and c[0] == shape)


def cell_code(cell: Optional[tuple[str, str]]) -> int:
    if cell is None:
        return EMPTY_CODE
    shape, color = cell
    return 1 + SHAPES.index(shape) * len(COLORS) + COLORS.index(color)


def code_cell(code: int) -> Optional[tuple[str, str]]:
    if code == EMPTY_CODE:
        return None
    if not 1 <= code < IMG_MASK_ID:
        raise DataError(f"image code {code} outside the cell range")
    code -= 1
    return SHAPES[code // len(COLORS)], COLORS[code % len(COLORS)]


def encode_image(grid: GridImage) -> TokenSequence:
    ids = np.array([cell_code(c) for c in grid.cells], dtype=np.int64)
    return TokenSequence(ids, Modality.IMAGE, IMG_VOCAB_SIZE)


def decode_image(seq: TokenSequence, width: int, height: int) -> GridImage:
    if seq.modality is not Modality.IMAGE:
        raise DataError("decode_image expects an image sequence")
    if len(seq) != width * height:
        raise DataError(f"sequence length {len(seq)} != {width}x{height}")
    if np.any(seq.ids == IMG_MASK_ID):
        raise DataError("cannot decode an image that still contains mask ids")
    return GridImage(width, height, tuple(code_cell(int(i)) for i in seq.ids))


def empty_image_tokens(width: int, height: int) -> TokenSequence:
    """All-empty-cell image; the negative condition for image-conditioned tasks."""
    return TokenSequence(
        np.full(width * height, EMPTY_CODE, dtype=np.int64), Modality.IMAGE, IMG_VOCAB_SIZE
    )


# ------------------------------------------------------------------ text codec


def encode_text(words: Sequence[str], length: int = DEFAULT_TEXT_LEN) -> TokenSequence:
    if len(words) > length:
        raise DataError(f"{len(words)} words exceed the sequence length {length}")
    ids = np.full(length, PAD_ID, dtype=np.int64)
    for i, w in enumerate(words):
        if w not in WORD_TO_ID or w == MASK_WORD:
            raise DataError(f"word {w!r} is not in the vocabulary")
        ids[i] = WORD_TO_ID[w]
    return TokenSequence(ids, Modality.TEXT, TEXT_VOCAB_SIZE)


def decode_text(seq: TokenSequence) -> tuple[str, ...]:
    if seq.modality is not Modality.TEXT:
        raise DataError("decode_text expects a text sequence")
    if np.any(seq.ids == TEXT_MASK_ID):
        raise DataError("cannot decode text that still contains mask ids")
    return tuple(VOCAB_WORDS[int(i)] for i in seq.ids if int(i) != PAD_ID)


def empty_text_tokens(length: int = DEFAULT_TEXT_LEN) -> TokenSequence:
    """All-pad caption; the negative condition for text-conditioned tasks."""
    return encode_text((), length)


# ------------------------------------------------------------------- sampling


@dataclass(frozen=True)
class QAPair:
    kind: str
    question: tuple[str, ...]
    answer: tuple[str, ...]  # at most answer_len words; padded when encoded


@dataclass(frozen=True)
class Sample:
    grid: GridImage
    caption: tuple[str, ...]
    qa: tuple[QAPair, ...]


@dataclass(frozen=True)
class SampleSpec:
    """Complexity knobs for the scene generator."""

    width: int = 8
    height: int = 8
    text_len: int = DEFAULT_TEXT_LEN
    answer_len: int = DEFAULT_ANSWER_LEN
    max_objects: int = 4
    # weights over scene kinds (single, counting, two_objects, relation)
    scene_weights: tuple[float, float, float, float] = (0.3, 0.2, 0.25, 0.25)
    counting_color_prob: float = 0.5
    qa_per_sample: int = 2
    max_retries: int = 100

    def __post_init__(self) -> None:
        if self.max_objects < 2 or self.max_objects > min(4, self.width * self.height):
            raise DataError("max_objects must lie in [2, min(4, cells)]")
        if len(self.scene_weights) != 4 or min(self.scene_weights) < 0 or sum(self.scene_weights) <= 0:
            raise DataError("scene_weights must be four non-negative numbers, not all zero")
        if self.qa_per_sample < 0:
            raise DataError("qa_per_sample must be non-negative")


SCENE_KINDS = ("single", "counting", "two_objects", "relation")


def _place(rng: np.random.Generator, spec: SampleSpec, n: int, taken: set) -> list[tuple[int, int]]:
    cells = []
    for _ in range(n):
        for _ in range(spec.max_retries):
            r = int(rng.integers(0, spec.height))
            c = int(rng.integers(0, spec.width))
            if (r, c) not in taken:
                taken.add((r, c))
                cells.append((r, c))
                break
        else:
            raise GenerationError("could not place objects without overlap")
    return cells


def _grid_from(spec: SampleSpec, placed: Iterable[tuple[int, int, str, str]]) -> GridImage:
    cells: list[Optional[tuple[str, str]]] = [None] * (spec.width * spec.height)
    for r, c, shape, color in placed:
        cells[r * spec.width + c] = (shape, color)
    return GridImage(spec.width, spec.height, tuple(cells))


def _gen_scene(rng: np.random.Generator, spec: SampleSpec) -> tuple[GridImage, tuple[str, ...]]:
    weights = np.array(spec.scene_weights, dtype=np.float64)
    kind = SCENE_KINDS[int(rng.choice(4, p=weights / weights.sum()))]
    taken: set = set()
    if kind == "single":
        shape = SHAPES[int(rng.integers(3))]
        color = COLORS[int(rng.integers(4))]
        (r, c), = _place(rng, spec, 1, taken)
        return _grid_from(spec, [(r, c, shape, color)]), ("a", color, shape)
    if kind == "counting":
        k = int(rng.integers(2, spec.max_objects + 1))
        shape = SHAPES[int(rng.integers(3))]
        cells = _place(rng, spec, k, taken)
        if rng.random() < spec.counting_color_prob:
            color = COLORS[int(rng.integers(4))]
            placed = [(r, c, shape, color) for r, c in cells]
            caption = (NUMBER_WORDS[k], color, PLURALS[shape])
        else:
            placed = [(r, c, shape, COLORS[int(rng.integers(4))]) for r, c in cells]
            caption = (NUMBER_WORDS[k], PLURALS[shape])
        return _grid_from(spec, placed), caption
    # two objects, optionally with a spatial relation in the caption
    s1, s2 = rng.choice(3, size=2, replace=False)
    shape1, shape2 = SHAPES[int(s1)], SHAPES[int(s2)]
    color1 = COLORS[int(rng.integers(4))]
    color2 = COLORS[int(rng.integers(4))]
    if kind == "two_objects":
        (r1, c1), (r2, c2) = _place(rng, spec, 2, taken)
        grid = _grid_from(spec, [(r1, c1, shape1, color1), (r2, c2, shape2, color2)])
        return grid, ("a", color1, shape1, "and", "a", color2, shape2)
    relation = RELATIONS[int(rng.integers(4))]
    for _ in range(spec.max_retries):
        taken = set()
        (r1, c1), (r2, c2) = _place(rng, spec, 2, taken)
        ok = {
            "left": c1 < c2,
            "right": c1 > c2,
            "above": r1 < r2,
            "below": r1 > r2,
        }[relation]
        if ok:
            grid = _grid_from(spec, [(r1, c1, shape1, color1), (r2, c2, shape2, color2)])
            rel_words = (relation, "of") if relation in ("left", "right") else (relation,)
            caption = ("a", color1, shape1) + rel_words + ("a", color2, shape2)
            return grid, caption
    raise GenerationError(f"could not satisfy relation {relation!r} in {spec.max_retries} tries")


def answer_question(grid: GridImage, question: Sequence[str]) -> tuple[str, ...]:
    """Ground-truth answer for any grammar question; the QA oracle."""
    q = tuple(question)
    if len(q) == 3 and q[:2] == ("how", "many") and q[2] in SINGULARS:
        return (NUMBER_WORDS[grid.count_shape(SINGULARS[q[2]])],)
    if len(q) == 10 and q[:6] == ("what", "color", "is", "the", "object", "in"):
        cell = grid.cell(COUNT_WORDS[q[7]] - 1, COUNT_WORDS[q[9]] - 1)
        if cell is None:
            raise DataError("color question anchored at an empty cell")
        return (cell[1],)
    if len(q) == 10 and q[:6] == ("what", "shape", "is", "the", "object", "in"):
        cell = grid.cell(COUNT_WORDS[q[7]] - 1, COUNT_WORDS[q[9]] - 1)
        if cell is None:
            raise DataError("shape question anchored at an empty cell")
        return (cell[0],)
    if len(q) == 7 and q[:3] == ("what", "is", "in"):
        cell = grid.cell(COUNT_WORDS[q[4]] - 1, COUNT_WORDS[q[6]] - 1)
        return ("nothing",) if cell is None else (cell[1], cell[0])
    raise DataError(f"question {' '.join(q)!r} is outside the grammar")


def _gen_qa(rng: np.random.Generator, spec: SampleSpec, grid: GridImage) -> QAPair:
    kind = QA_KINDS[int(rng.choice(4, p=np.array(QA_KIND_WEIGHTS)))]
    objects = grid.objects()
    if kind == "counting":
        shape = SHAPES[int(rng.integers(3))]
        q = ("how", "many", PLURALS[shape])
    elif kind in ("color", "shape"):
        r, c, _, _ = objects[int(rng.integers(len(objects)))]
        row_w, col_w = NUMBER_WORDS[r + 1], NUMBER_WORDS[c + 1]
        q = ("what", kind, "is", "the", "object", "in", "row", row_w, "column", col_w)
    else:
        r = int(rng.integers(grid.height))
        c = int(rng.integers(grid.width))
        q = ("what", "is", "in", "row", NUMBER_WORDS[r + 1], "column", NUMBER_WORDS[c + 1])
    answer = answer_question(grid, q)
    if len(answer) > spec.answer_len:
        raise GenerationError("answer longer than the answer slot")
    return QAPair(kind, q, answer)


def gen_sample(rng: np.random.Generator, spec: SampleSpec = SampleSpec()) -> Sample:
    """Draw one (grid, caption, QA) sample consistent by construction."""
    grid, caption = _gen_scene(rng, spec)
    qa = tuple(_gen_qa(rng, spec, grid) for _ in range(spec.qa_per_sample))
    return Sample(grid, caption, qa)


# ------------------------------------------------------------ prompt parsing


@dataclass(frozen=True)
class PromptGroup:
    count: int
    color: Optional[str]
    shape: str


@dataclass(frozen=True)
class ParsedPrompt:
    groups: tuple[PromptGroup, ...]
    relation: Optional[str]


def _parse_group(words: Sequence[str], at: int) -> tuple[PromptGroup, int]:
    if at >= len(words):
        raise DataError("truncated prompt")
    head = words[at]
    if head == "a":
        count = 1
        at += 1
    elif head in COUNT_WORDS and COUNT_WORDS[head] >= 2:
        count = COUNT_WORDS[head]
        at += 1
    else:
        raise DataError(f"expected an article or count word, got {head!r}")
    color = None
    if at < len(words) and words[at] in COLORS:
        color = words[at]
        at += 1
    if at >= len(words):
        raise DataError("prompt ends before a shape word")
    noun = words[at]
    if count == 1 and noun in SHAPES:
        shape = noun
    elif count >= 2 and noun in SINGULARS:
        shape = SINGULARS[noun]
    else:
        raise DataError(f"bad shape word {noun!r} for count {count}")
    return PromptGroup(count, color, shape), at + 1


def parse_caption(words: Sequence[str]) -> ParsedPrompt:
    words = tuple(words)
    g1, at = _parse_group(words, 0)
    if at == len(words):
        return ParsedPrompt((g1,), None)
    connector = words[at]
    if connector == "and":
        relation = None
        at += 1
    elif connector in ("left", "right") and at + 1 < len(words) and words[at + 1] == "of":
        relation = connector
        at += 2
    elif connector in ("above", "below"):
        relation = connector
        at += 1
    else:
        raise DataError(f"unexpected connector {connector!r}")
    g2, at = _parse_group(words, at)
    if at != len(words):
        raise DataError(f"trailing words {words[at:]!r}")
    return ParsedPrompt((g1, g2), relation)


# ---------------------------------------------------------------- evaluation

GENEVAL_CATEGORIES = (
    "single_object",
    "two_objects",
    "counting",
    "colors",
    "position",
    "color_attribution",
)


def _matches(grid: GridImage, group: PromptGroup) -> list[tuple[int, int]]:
    out = []
    for r, c, shape, color in grid.objects():
        if shape == group.shape and (group.color is None or color == group.color):
            out.append((r, c))
    return out


def _color_ok(grid: GridImage, group: PromptGroup) -> bool:
    of_shape = [o for o in grid.objects() if o[2] == group.shape]
    return bool(of_shape) and all(o[3] == group.color for o in of_shape)


def mini_geneval(prompt: Sequence[str], grid: GridImage) -> dict[str, float]:
    """Exact category checks for one prompt against one decoded grid.

    Returns a score per applicable category plus their mean as "overall".
    A category missing from the result did not apply to the prompt.
    """
    parsed = parse_caption(prompt)
    scores: dict[str, float] = {}
    if len(parsed.groups) == 1:
        g = parsed.groups[0]
        if g.count == 1:
            scores["single_object"] = float(grid.count_shape(g.shape) == 1)
        else:
            scores["counting"] = float(grid.count_shape(g.shape) == g.count)
        if g.color is not None:
            scores["colors"] = float(_color_ok(grid, g))
    else:
        g1, g2 = parsed.groups
        scores["two_objects"] = float(
            grid.count_shape(g1.shape) == g1.count and grid.count_shape(g2.shape) == g2.count
        )
        if g1.color is not None and g2.color is not None:
            scores["color_attribution"] = float(_color_ok(grid, g1) and _color_ok(grid, g2))
        if parsed.relation is not None:
            hit = False
            for r1, c1 in _matches(grid, g1):
                for r2, c2 in _matches(grid, g2):
                    if (r1, c1) == (r2, c2):
                        continue
                    hit = hit or {
                        "left": c1 < c2,
                        "right": c1 > c2,
                        "above": r1 < r2,
                        "below": r1 > r2,
                    }[parsed.relation]
            scores["position"] = float(hit)
    scores["overall"] = float(np.mean([v for k, v in scores.items()]))
    return scores


# ----------------------------------------------------------------- corpus IO

CORPUS_KIND = "unimask-corpus"
CORPUS_VERSION = 1


def _cell_str(cell: Optional[tuple[str, str]]) -> str:
    return "" if cell is None else f"{cell[1]} {cell[0]}"


def _str_cell(text: str) -> Optional[tuple[str, str]]:
    if text == "":
        return None
    try:
        color, shape = text.split()
    except ValueError:
        raise DataError(f"bad cell string {text!r}") from None
    if shape not in SHAPES or color not in COLORS:
        raise DataError(f"bad cell string {text!r}")
    return shape, color


def write_corpus(path, samples: Sequence[Sample], spec: SampleSpec, seed: int) -> None:
    header = {
        "kind": CORPUS_KIND,
        "version": CORPUS_VERSION,
        "n": len(samples),
        "width": spec.width,
        "height": spec.height,
        "text_len": spec.text_len,
        "answer_len": spec.answer_len,
        "seed": seed,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for s in samples:
            rec = {
                "cells": [_cell_str(c) for c in s.grid.cells],
                "caption": " ".join(s.caption),
                "qa": [
                    {"kind": p.kind, "q": " ".join(p.question), "a": " ".join(p.answer)}
                    for p in s.qa
                ],
            }
            fh.write(json.dumps(rec) + "\n")


def read_corpus(path) -> tuple[dict, list[Sample]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty corpus file, expected a header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: bad header line: {exc}") from None
    if header.get("kind") != CORPUS_KIND:
        raise DataError(f"{path}: not a corpus file (kind={header.get('kind')!r})")
    if header.get("version") != CORPUS_VERSION:
        raise DataError(f"{path}: unsupported corpus version {header.get('version')!r}")
    width, height = header["width"], header["height"]
    samples = []
    for ln in lines[1:]:
        try:
            rec = json.loads(ln)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: bad record: {exc}") from None
        grid = GridImage(width, height, tuple(_str_cell(c) for c in rec["cells"]))
        caption = tuple(rec["caption"].split())
        qa = tuple(
            QAPair(p["kind"], tuple(p["q"].split()), tuple(p["a"].split())) for p in rec["qa"]
        )
        samples.append(Sample(grid, caption, qa))
    if len(samples) != header["n"]:
        raise DataError(f"{path}: header says n={header['n']} but found {len(samples)} records")
    return header, samples
