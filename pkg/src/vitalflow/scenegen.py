"""Procedural shape scenes with an exact render/parse oracle.

Scenes live on a 32x32 canvas split into a 3x3 grid of 10-pixel cells (with a
one-pixel border). Each cell holds at most one object, so objects never
overlap and every pixel outside the cells always shows the background.
Rendering is crisp (no antialiasing), which makes ``parse`` an exact inverse
of ``render`` on every in-grammar image.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

IMAGE_SIZE = 32
GRID = 3
CELL = 10
BORDER = 1

COLORS = ("red", "green", "blue", "yellow", "white")
SHAPES = ("circle", "square", "triangle")
SIZES = ("small", "large")
EDIT_KINDS = ("recolor", "add", "remove", "background", "move", "resize")
MAX_OBJECTS = 2

PALETTE = np.array(
    [
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
        [1.0, 1.0, -1.0],
        [1.0, 1.0, 1.0],
    ],
    dtype=np.float32,
)

# token vocabulary
PAD = 0
_BG_BASE = 1
_COLOR_BASE = _BG_BASE + len(COLORS)
_KIND_BASE = _COLOR_BASE + len(COLORS)  # (size, shape) combined tokens
_CELL_BASE = _KIND_BASE + len(SIZES) * len(SHAPES)
VOCAB_SIZE = _CELL_BASE + GRID * GRID
TEXT_LEN = 8


class SceneError(ValueError):
    """Raised for specs that violate a scene invariant."""


class DecodeError(ValueError):
    """Raised when a token sequence does not encode a scene."""


@dataclass(frozen=True, order=True)
class ObjectSpec:
    cell: int
    shape: str
    color: str
    size: str

    def validate(self) -> None:
        if not 0 <= self.cell < GRID * GRID:
            raise SceneError(f"cell index {self.cell} outside [0, {GRID * GRID - 1}]")
        if self.shape not in SHAPES:
            raise SceneError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise SceneError(f"unknown color {self.color!r}")
        if self.size not in SIZES:
            raise SceneError(f"unknown size {self.size!r}")

    def bbox(self) -> tuple[int, int, int, int]:
        """Pixel extent ``(row0, col0, row1, col1)``, half-open."""
        r, c = divmod(self.cell, GRID)
        top, left = BORDER + r * CELL, BORDER + c * CELL
        inset = 0 if self.size == "large" else 2
        return top + inset, left + inset, top + CELL - inset, left + CELL - inset

    def to_dict(self) -> dict:
        return {"cell": self.cell, "shape": self.shape, "color": self.color, "size": self.size}


@dataclass(frozen=True)
class SceneSpec:
    background: str
    objects: tuple[ObjectSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))

    def validate(self) -> None:
        if self.background not in COLORS:
            raise SceneError(f"unknown background color {self.background!r}")
        if len(self.objects) > MAX_OBJECTS:
            raise SceneError(f"at most {MAX_OBJECTS} objects allowed, got {len(self.objects)}")
        for obj in self.objects:
            obj.validate()
            if obj.color == self.background:
                raise SceneError(f"object color equals background ({obj.color}); object would be invisible")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise SceneError("objects overlap: two objects share a cell")

    def canonical(self) -> "SceneSpec":
        return SceneSpec(self.background, tuple(sorted(self.objects, key=lambda o: o.cell)))

    def to_dict(self) -> dict:
        return {"background": self.background, "objects": [o.to_dict() for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(d["background"], tuple(ObjectSpec(**o) for o in d["objects"]))


@dataclass(frozen=True)
class EditTask:
    source: SceneSpec
    target: SceneSpec
    kind: str
    edit_mask: np.ndarray = field(compare=False, repr=False)

    def to_dict(self) -> dict:
        return {"source": self.source.to_dict(), "target": self.target.to_dict(), "kind": self.kind}


# ---------------------------------------------------------------------------
# rendering


def _local_masks() -> dict[tuple[str, str], np.ndarray]:
    """Boolean CELL x CELL masks for every (shape, size) pair."""
    masks = {}
    for size in SIZES:
        ext = CELL if size == "large" else CELL - 4
        off = (CELL - ext) // 2
        yy, xx = np.mgrid[0:ext, 0:ext] + 0.5
        for shape in SHAPES:
            if shape == "square":
                m = np.ones((ext, ext), bool)
            elif shape == "circle":
                m = (yy - ext / 2) ** 2 + (xx - ext / 2) ** 2 <= (ext / 2) ** 2
            else:
                # apex at top-center, base along the bottom edge
                m = np.abs(xx - ext / 2) <= yy / 2
            full = np.zeros((CELL, CELL), bool)
            full[off : off + ext, off : off + ext] = m
            masks[(shape, size)] = full
    return masks


_MASKS = _local_masks()


def object_mask(obj: ObjectSpec) -> np.ndarray:
    """Full-image boolean mask of the pixels painted by ``obj``."""
    r, c = divmod(obj.cell, GRID)
    out = np.zeros((IMAGE_SIZE, IMAGE_SIZE), bool)
    top, left = BORDER + r * CELL, BORDER + c * CELL
    out[top : top + CELL, left : left + CELL] = _MASKS[(obj.shape, obj.size)]
    return out


def render(spec: SceneSpec) -> np.ndarray:
    """Rasterize ``spec`` to a ``(32, 32, 3)`` float32 image in [-1, 1]."""
    spec.validate()
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), np.float32)
    img[:] = PALETTE[COLORS.index(spec.background)]
    for obj in spec.objects:
        img[object_mask(obj)] = PALETTE[COLORS.index(obj.color)]
    return img


# ---------------------------------------------------------------------------
# parsing

_VARIANTS = [(shape, size, color) for shape in SHAPES for size in SIZES for color in COLORS]


def _cell_blocks(images: np.ndarray) -> np.ndarray:
    """(N, 32, 32, 3) -> (N, 9, CELL*CELL*3) cell contents."""
    inner = images[:, BORDER : BORDER + GRID * CELL, BORDER : BORDER + GRID * CELL]
    n = images.shape[0]
    blocks = inner.reshape(n, GRID, CELL, GRID, CELL, 3).transpose(0, 1, 3, 2, 4, 5)
    return blocks.reshape(n, GRID * GRID, CELL * CELL * 3)


def _templates() -> tuple[np.ndarray, np.ndarray]:
    """Cell templates: ``empty[b]`` and ``variant[b, v]`` flattened."""
    empty = np.repeat(PALETTE[:, None, :], CELL * CELL, axis=1).reshape(len(COLORS), -1)
    var = np.empty((len(COLORS), len(_VARIANTS), CELL * CELL * 3), np.float32)
    for b in range(len(COLORS)):
        for v, (shape, size, color) in enumerate(_VARIANTS):
            t = np.repeat(PALETTE[b][None, :], CELL * CELL, axis=0).reshape(CELL, CELL, 3)
            t[_MASKS[(shape, size)]] = PALETTE[COLORS.index(color)]
            var[b, v] = t.reshape(-1)
    return empty, var


_EMPTY_T, _VAR_T = _templates()
_BORDER_MASK = np.ones((IMAGE_SIZE, IMAGE_SIZE), bool)
_BORDER_MASK[BORDER : BORDER + GRID * CELL, BORDER : BORDER + GRID * CELL] = False


def parse_batch(images: np.ndarray) -> tuple[list[SceneSpec], np.ndarray]:
    """Nearest in-grammar spec for each image, by squared pixel distance.

    The distance of a candidate spec splits into independent per-cell terms
    plus the border term, so the minimum over the whole grammar is found by
    choosing, per background, the best zero-, one- or two-object placement.
    Ties resolve to fewer objects, then lower background / cell / variant
    index.

    Returns the specs and the residual squared distances.
    """
    images = np.asarray(images, np.float32)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ValueError(f"expected (N, {IMAGE_SIZE}, {IMAGE_SIZE}, 3) images, got {images.shape}")
    n = images.shape[0]
    blocks = _cell_blocks(images).astype(np.float64)  # (N, 9, D)
    sq = (blocks**2).sum(-1)  # (N, 9)
    border = images[:, _BORDER_MASK].astype(np.float64)  # (N, P, 3)

    nb, nv = len(COLORS), len(_VARIANTS)
    best_cost = np.full(n, np.inf)
    best = [None] * n
    for b in range(nb):
        bcost = ((border - PALETTE[b]) ** 2).sum((1, 2))
        e = _EMPTY_T[b].astype(np.float64)
        empty_cost = sq - 2 * blocks @ e + e @ e  # (N, 9)
        t = _VAR_T[b].astype(np.float64)
        var_cost = sq[..., None] - 2 * blocks @ t.T + (t * t).sum(-1)  # (N, 9, V)
        # variants whose color equals the background are outside the grammar
        invalid = np.array([c == COLORS[b] for (_, _, c) in _VARIANTS])
        var_cost[..., invalid] = np.inf
        delta = var_cost - empty_cost[..., None]
        vbest = delta.argmin(-1)  # (N, 9) first minimum -> lowest variant index
        dbest = np.take_along_axis(delta, vbest[..., None], -1)[..., 0]
        base = bcost + empty_cost.sum(-1)

        # zero objects, then single best cell, then best pair of distinct cells
        order = np.argsort(dbest, axis=1, kind="stable")
        c1, c2 = order[:, 0], order[:, 1]
        d1 = dbest[np.arange(n), c1]
        d2 = dbest[np.arange(n), c2]
        cand = np.stack([base, base + d1, base + d1 + d2], axis=1)
        k = cand.argmin(1)
        cost = cand[np.arange(n), k]
        for i in np.nonzero(cost < best_cost)[0]:
            objs = []
            for cell in (c1[i], c2[i])[: k[i]]:
                shape, size, color = _VARIANTS[vbest[i, cell]]
                objs.append(ObjectSpec(int(cell), shape, color, size))
            best[i] = SceneSpec(COLORS[b], tuple(objs)).canonical()
            best_cost[i] = cost[i]
    return best, np.maximum(best_cost, 0.0)


def parse(img: np.ndarray) -> tuple[SceneSpec, float]:
    """Nearest in-grammar spec for one image and its residual squared distance."""
    specs, res = parse_batch(np.asarray(img)[None])
    return specs[0], float(res[0])


def enumerate_grammar() -> Iterable[SceneSpec]:
    """Every canonical scene in the grammar (104 765 of them)."""
    singles = [
        (shape, color, size) for shape in SHAPES for color in COLORS for size in SIZES
    ]
    for bg in COLORS:
        yield SceneSpec(bg, ())
        allowed = [s for s in singles if s[1] != bg]
        for cell in range(GRID * GRID):
            for shape, color, size in allowed:
                yield SceneSpec(bg, (ObjectSpec(cell, shape, color, size),))
        for ca, cb in itertools.combinations(range(GRID * GRID), 2):
            for (sa, ka, za), (sb, kb, zb) in itertools.product(allowed, allowed):
                yield SceneSpec(bg, (ObjectSpec(ca, sa, ka, za), ObjectSpec(cb, sb, kb, zb)))


# ---------------------------------------------------------------------------
# prompts


def prompt_of(spec: SceneSpec) -> np.ndarray:
    """Canonical token sequence ``[BG, (COLOR, SIZE_SHAPE, CELL)*, PAD...]``."""
    spec.validate()
    spec = spec.canonical()
    toks = [_BG_BASE + COLORS.index(spec.background)]
    for o in spec.objects:
        toks += [
            _COLOR_BASE + COLORS.index(o.color),
            _KIND_BASE + SIZES.index(o.size) * len(SHAPES) + SHAPES.index(o.shape),
            _CELL_BASE + o.cell,
        ]
    toks += [PAD] * (TEXT_LEN - len(toks))
    return np.array(toks, np.int64)


def null_prompt() -> np.ndarray:
    """All-PAD sequence used as the unconditional prompt."""
    return np.full(TEXT_LEN, PAD, np.int64)


def spec_of(tokens: Sequence[int]) -> SceneSpec:
    toks = [int(t) for t in tokens]
    if len(toks) != TEXT_LEN:
        raise DecodeError(f"expected {TEXT_LEN} tokens, got {len(toks)}")
    if any(not 0 <= t < VOCAB_SIZE for t in toks):
        raise DecodeError("token id outside vocabulary")
    if not _BG_BASE <= toks[0] < _COLOR_BASE:
        raise DecodeError("first token must be a background token")
    body = toks[1:]
    while body and body[-1] == PAD:
        body.pop()
    if len(body) % 3:
        raise DecodeError("object tokens must come in (color, size/shape, cell) triples")
    objs = []
    for i in range(0, len(body), 3):
        c, k, cell = body[i : i + 3]
        if not (_COLOR_BASE <= c < _KIND_BASE and _KIND_BASE <= k < _CELL_BASE and _CELL_BASE <= cell < VOCAB_SIZE):
            raise DecodeError(f"malformed object triple at position {i + 1}")
        size, shape = divmod(k - _KIND_BASE, len(SHAPES))
        objs.append(ObjectSpec(cell - _CELL_BASE, SHAPES[shape], COLORS[c - _COLOR_BASE], SIZES[size]))
    spec = SceneSpec(COLORS[toks[0] - _BG_BASE], tuple(objs))
    try:
        spec.validate()
    except SceneError as exc:
        raise DecodeError(str(exc)) from exc
    if spec.canonical() != spec:
        raise DecodeError("objects not in canonical cell order")
    return spec


def describe(spec: SceneSpec) -> str:
    parts = [f"{o.size} {o.color} {o.shape} at cell {o.cell}" for o in spec.canonical().objects]
    return f"{spec.background} background" + ("" if not parts else " with " + ", ".join(parts))


# ---------------------------------------------------------------------------
# sampling


def random_object(rng: np.random.Generator, background: str, cell: int) -> ObjectSpec:
    colors = [c for c in COLORS if c != background]
    return ObjectSpec(
        cell=int(cell),
        shape=SHAPES[rng.integers(len(SHAPES))],
        color=colors[rng.integers(len(colors))],
        size=SIZES[rng.integers(len(SIZES))],
    )


def random_scene(rng: np.random.Generator, n_objects: int | None = None) -> SceneSpec:
    """Draw one scene; object positions are rejection-sampled until disjoint."""
    bg = COLORS[rng.integers(len(COLORS))]
    if n_objects is None:
        n_objects = int(rng.integers(MAX_OBJECTS + 1))
    objs: list[ObjectSpec] = []
    while len(objs) < n_objects:
        obj = random_object(rng, bg, rng.integers(GRID * GRID))
        if any(np.any(object_box_mask(obj) & object_box_mask(o)) for o in objs):
            continue
        objs.append(obj)
    return SceneSpec(bg, tuple(objs)).canonical()


def object_box_mask(obj: ObjectSpec) -> np.ndarray:
    r0, c0, r1, c1 = obj.bbox()
    m = np.zeros((IMAGE_SIZE, IMAGE_SIZE), bool)
    m[r0:r1, c0:c1] = True
    return m


def make_dataset(n: int, seed: int) -> list[tuple[SceneSpec, np.ndarray, np.ndarray]]:
    """``n`` random (spec, image, tokens) triples; item ``i`` uses its own RNG stream."""
    if n <= 0:
        raise ValueError("n must be positive")
    out = []
    for child in np.random.SeedSequence(seed).spawn(n):
        spec = random_scene(np.random.default_rng(child))
        out.append((spec, render(spec), prompt_of(spec)))
    return out


def _edit_mask(source: SceneSpec, target: SceneSpec, kind: str) -> np.ndarray:
    if kind == "background":
        return np.ones((IMAGE_SIZE, IMAGE_SIZE), bool)
    changed = set(source.objects) ^ set(target.objects)
    mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), bool)
    for obj in changed:
        mask |= object_box_mask(obj)
    return mask


def _apply_edit(rng: np.random.Generator, src: SceneSpec, kind: str) -> SceneSpec | str:
    """Target scene for ``kind`` or a string explaining why it is impossible."""
    objs = list(src.objects)
    free = [c for c in range(GRID * GRID) if c not in {o.cell for o in objs}]
    if kind in ("recolor", "remove", "move", "resize") and not objs:
        return f"{kind} needs at least one object"
    if kind == "recolor":
        i = rng.integers(len(objs))
        colors = [c for c in COLORS if c not in (src.background, objs[i].color)]
        objs[i] = replace(objs[i], color=colors[rng.integers(len(colors))])
    elif kind == "add":
        if len(objs) >= MAX_OBJECTS:
            return "scene already holds the maximum number of objects"
        objs.append(random_object(rng, src.background, free[rng.integers(len(free))]))
    elif kind == "remove":
        objs.pop(int(rng.integers(len(objs))))
    elif kind == "background":
        used = {o.color for o in objs}
        colors = [c for c in COLORS if c != src.background and c not in used]
        if not colors:
            return "no background color left that differs from every object"
        return SceneSpec(colors[rng.integers(len(colors))], tuple(objs)).canonical()
    elif kind == "move":
        i = rng.integers(len(objs))
        objs[i] = replace(objs[i], cell=int(free[rng.integers(len(free))]))
    elif kind == "resize":
        i = rng.integers(len(objs))
        objs[i] = replace(objs[i], size="large" if objs[i].size == "small" else "small")
    else:
        raise ValueError(f"unknown edit kind {kind!r}")
    return SceneSpec(src.background, tuple(objs)).canonical()


def make_edit_tasks(seed: int, kinds: Sequence[str], n: int) -> list[EditTask]:
    """``n`` edit tasks cycling through ``kinds``; impossible draws are skipped and logged."""
    if not kinds:
        raise ValueError("kinds must be non-empty")
    for k in kinds:
        if k not in EDIT_KINDS:
            raise ValueError(f"unknown edit kind {k!r}")
    rng = np.random.default_rng(seed)
    tasks: list[EditTask] = []
    attempts = 0
    while len(tasks) < n:
        kind = kinds[attempts % len(kinds)]
        attempts += 1
        if attempts > 100 * n + 100:
            raise RuntimeError("could not draw enough edit tasks")
        src = random_scene(rng)
        tgt = _apply_edit(rng, src, kind)
        if isinstance(tgt, str):
            logger.info("skipping %s task on %s: %s", kind, describe(src), tgt)
            continue
        tasks.append(EditTask(src, tgt, kind, _edit_mask(src, tgt, kind)))
    return tasks


# ---------------------------------------------------------------------------
# persistence


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(img) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32) / 127.5 - 1.0


def save_png(path: str | os.PathLike, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(img), mode="RGB").save(path)


def load_png(path: str | os.PathLike) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def save_dataset(items, directory: str | os.PathLike) -> None:
    """Write ``items`` as ``NNNNNN.png`` files plus ``index.json``."""
    os.makedirs(directory, exist_ok=True)
    index = []
    for i, (spec, img, toks) in enumerate(items):
        name = f"{i:06d}.png"
        save_png(os.path.join(directory, name), img)
        index.append({"file": name, "spec": spec.to_dict(), "tokens": [int(t) for t in toks]})
    with open(os.path.join(directory, "index.json"), "w") as fh:
        json.dump({"image_size": IMAGE_SIZE, "vocab_size": VOCAB_SIZE, "items": index}, fh, indent=1)


def load_dataset(directory: str | os.PathLike) -> list[tuple[SceneSpec, np.ndarray, np.ndarray]]:
    with open(os.path.join(directory, "index.json")) as fh:
        index = json.load(fh)
    out = []
    for item in index["items"]:
        img = load_png(os.path.join(directory, item["file"]))
        out.append((SceneSpec.from_dict(item["spec"]), img, np.array(item["tokens"], np.int64)))
    return out


def scene_from_text(text: str) -> SceneSpec:
    """Parse ``"blue; large red circle@4; small white square@0"``.

    The first field is the background color; each further field is
    ``<size> <color> <shape>@<cell>``. A comma-separated list of integers is
    read as raw token ids instead.
    """
    text = text.strip()
    if text and all(p.strip().isdigit() for p in text.split(",")):
        toks = [int(p) for p in text.split(",")]
        return spec_of(toks + [PAD] * (TEXT_LEN - len(toks)))
    fields = [f.strip() for f in text.split(";") if f.strip()]
    if not fields:
        raise DecodeError("empty scene description")
    bg = fields[0].removesuffix(" background").strip()
    objs = []
    for f in fields[1:]:
        try:
            words, cell = f.rsplit("@", 1)
            size, color, shape = words.split()
            objs.append(ObjectSpec(int(cell), shape, color, size))
        except ValueError as exc:
            raise DecodeError(f"cannot parse object {f!r}; expected '<size> <color> <shape>@<cell>'") from exc
    spec = SceneSpec(bg, tuple(objs))
    try:
        spec.validate()
    except SceneError as exc:
        raise DecodeError(str(exc)) from exc
    return spec.canonical()


def scene_to_text(spec: SceneSpec) -> str:
    spec = spec.canonical()
    return "; ".join([spec.background] + [f"{o.size} {o.color} {o.shape}@{o.cell}" for o in spec.objects])
