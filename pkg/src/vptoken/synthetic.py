"""Deterministic glyph-tile scenes and VQA records.

Scenes are drawn on a square canvas (256 px by default) split into an 8 x 8
layout grid. A *tiny* object is a coloured plate with a 5x5 glyph stamped in
white; plates and glyphs sit on 4-pixel aligned offsets and every glyph has
its four corner cells off, so the 4x nearest-neighbour downsample to the
64 px model input samples only plate colour -- glyph identity is invisible
globally and legible in an upsized crop.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidConfigError
from .grid_codec import PixelBox
from .vocab import COLOR_NAMES, GLYPH_NAMES, NUMBER_WORDS

BACKGROUND = (24, 24, 24)
INK = (255, 255, 255)
PALETTE = (
    (220, 40, 40),
    (40, 200, 60),
    (50, 80, 230),
    (230, 210, 40),
    (40, 210, 210),
    (210, 50, 210),
)

CANVAS = 256
LAYOUT = 8
CELL = CANVAS // LAYOUT
PLATE = 24
GLYPH_OFFSET = 8  # glyph origin inside its plate; multiple of 4
LARGE_SCALE = 5

TASKS = ("locate-tiny-glyph", "identify-at-cell", "count-glyphs")


def _make_glyphs(n: int = 16, seed: int = 20240601) -> np.ndarray:
    rng = np.random.default_rng(seed)
    corners = np.zeros((5, 5), dtype=bool)
    corners[[0, 0, 4, 4], [0, 4, 0, 4]] = True
    accepted: list[np.ndarray] = []
    while len(accepted) < n:
        g = rng.random((5, 5)) < 0.5
        g[corners] = False
        if not 8 <= g.sum() <= 14:
            continue
        if all((g != a).sum() >= 6 for a in accepted):
            accepted.append(g)
    return np.stack(accepted)


GLYPHS = _make_glyphs()


@dataclass(frozen=True)
class ObjectSpec:
    glyph: int
    color: int
    col: int
    row: int
    scale: str = "tiny"  # "tiny" or "large"
    dx: int = 4
    dy: int = 4

    def box(self) -> PixelBox:
        x0, y0 = self.col * CELL + self.dx, self.row * CELL + self.dy
        size = PLATE if self.scale == "tiny" else 5 * LARGE_SCALE
        return PixelBox(x0, y0, x0 + size, y0 + size)


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[ObjectSpec, ...]
    canvas: int = CANVAS
    seed: int = 0

    def to_dict(self) -> dict:
        return {"canvas": self.canvas, "seed": self.seed, "objects": [asdict(o) for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(tuple(ObjectSpec(**o) for o in d["objects"]), int(d.get("canvas", CANVAS)), int(d.get("seed", 0)))

    def fingerprint(self) -> str:
        payload = json.dumps({"canvas": self.canvas, "objects": [asdict(o) for o in self.objects]}, sort_keys=True)
        return hashlib.sha1(payload.encode()).hexdigest()[:16]


def validate_scene(spec: SceneSpec) -> None:
    if not spec.objects:
        raise InvalidConfigError("scene needs at least one object")
    if spec.canvas != CANVAS:
        raise InvalidConfigError(f"only {CANVAS}px canvases are supported")
    boxes = [o.box() for o in spec.objects]
    for o, b in zip(spec.objects, boxes):
        if not (0 <= o.glyph < len(GLYPHS) and 0 <= o.color < len(PALETTE)):
            raise InvalidConfigError(f"bad glyph/colour in {o}")
        if o.scale not in ("tiny", "large"):
            raise InvalidConfigError(f"bad scale {o.scale!r}")
        if o.dx % 4 or o.dy % 4 or b.x_max > (o.col + 1) * CELL or b.y_max > (o.row + 1) * CELL:
            raise InvalidConfigError(f"{o} does not fit its cell on the 4px lattice")
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            a, b = boxes[i], boxes[j]
            if a.x_min < b.x_max and b.x_min < a.x_max and a.y_min < b.y_max and b.y_min < a.y_max:
                raise InvalidConfigError(f"objects {i} and {j} overlap")


def render(spec: SceneSpec) -> np.ndarray:
    validate_scene(spec)
    img = np.empty((spec.canvas, spec.canvas, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for o in spec.objects:
        b = o.box()
        glyph = GLYPHS[o.glyph]
        if o.scale == "tiny":
            img[b.y_min : b.y_max, b.x_min : b.x_max] = PALETTE[o.color]
            gx, gy = b.x_min + GLYPH_OFFSET, b.y_min + GLYPH_OFFSET
            patch = img[gy : gy + 5, gx : gx + 5]
            patch[glyph] = INK
        else:
            big = np.kron(glyph, np.ones((LARGE_SCALE, LARGE_SCALE), dtype=bool)).astype(bool)
            img[b.y_min : b.y_max, b.x_min : b.x_max][big] = PALETTE[o.color]
    return img


# -- records ---------------------------------------------------------------------------


@dataclass
class SourceRecord:
    id: str
    scene: SceneSpec
    question: str
    answer: str
    task_type: str  # "region-task", "reencode-task", "plain"
    task: str = ""
    bbox: PixelBox | None = None

    def __post_init__(self):
        if self.task_type == "region-task" and self.bbox is None:
            raise InvalidConfigError(f"region-task record {self.id} needs a ground-truth box")

    def image(self) -> np.ndarray:
        return render(self.scene)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "scene_spec": self.scene.to_dict(),
            "question": self.question,
            "answer": self.answer,
            "bbox": list(self.bbox.as_tuple()) if self.bbox is not None else None,
            "task_type": self.task_type,
            "task": self.task,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SourceRecord":
        bbox = d.get("bbox")
        return cls(
            id=d["id"],
            scene=SceneSpec.from_dict(d["scene_spec"]),
            question=d["question"],
            answer=d["answer"],
            task_type=d["task_type"],
            task=d.get("task", ""),
            bbox=PixelBox(*bbox) if bbox is not None else None,
        )


def _place(rng: np.random.Generator, n: int) -> list[tuple[int, int]]:
    cells = rng.choice(LAYOUT * LAYOUT, size=n, replace=False)
    return [(int(c) % LAYOUT, int(c) // LAYOUT) for c in cells]


def _tile(rng, glyph, color, col, row) -> ObjectSpec:
    dx, dy = (int(v) * 4 for v in rng.integers(0, 3, size=2))
    return ObjectSpec(int(glyph), int(color), col, row, "tiny", dx, dy)


def _large(rng, glyph, color, col, row) -> ObjectSpec:
    dx, dy = (int(v) * 4 for v in rng.integers(0, 2, size=2))
    return ObjectSpec(int(glyph), int(color), col, row, "large", dx, dy)


def _locate(rng, seed) -> tuple[SceneSpec, str, str, PixelBox]:
    """One tiny plated glyph among large, globally legible distractor glyphs."""
    n_large = int(rng.integers(1, 4))
    cells = _place(rng, n_large + 1)
    glyphs = rng.integers(0, len(GLYPHS), size=n_large + 1)
    colors = rng.integers(0, len(PALETTE), size=n_large + 1)
    # fixed offset: the target always sits at the same place inside its k=8 cell
    target = ObjectSpec(int(glyphs[0]), int(colors[0]), *cells[0], "tiny", 4, 4)
    large = tuple(_large(rng, g, c, col, row) for g, c, (col, row) in zip(glyphs[1:], colors[1:], cells[1:]))
    q = "what symbol is on the small tile ?"
    return SceneSpec((target,) + large, seed=seed), q, GLYPH_NAMES[target.glyph], target.box()


def _identify(rng, seed):
    n = int(rng.integers(2, 5))
    objs = tuple(
        _tile(rng, rng.integers(0, len(GLYPHS)), rng.integers(0, len(PALETTE)), col, row)
        for col, row in _place(rng, n)
    )
    target = objs[int(rng.integers(0, n))]
    q = f"what symbol is in column {NUMBER_WORDS[target.col]} row {NUMBER_WORDS[target.row]} ?"
    return SceneSpec(objs, seed=seed), q, GLYPH_NAMES[target.glyph], target.box()


def _count(rng, seed):
    color = int(rng.integers(0, len(PALETTE)))
    count = int(rng.integers(1, 4))
    others = int(rng.integers(1, 5))
    other_colors = [c for c in range(len(PALETTE)) if c != color]
    colors = [color] * count + [int(rng.choice(other_colors)) for _ in range(others)]
    glyphs = rng.integers(0, len(GLYPHS), size=len(colors))
    objs = tuple(_tile(rng, g, c, col, row) for g, c, (col, row) in zip(glyphs, colors, _place(rng, len(colors))))
    q = f"how many {COLOR_NAMES[color]} tiles are there ?"
    return SceneSpec(objs, seed=seed), q, NUMBER_WORDS[count], None


_GENERATORS = {"locate-tiny-glyph": _locate, "identify-at-cell": _identify, "count-glyphs": _count}


def gen_records(task: str, n: int, seed: int = 0) -> list[SourceRecord]:
    """``n`` reproducible records; record ``i`` draws from ``default_rng([seed, i])``."""
    if task not in _GENERATORS:
        raise InvalidConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    if n < 1:
        raise InvalidConfigError("n must be >= 1")
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        scene, q, a, box = _GENERATORS[task](rng, seed * 1_000_003 + i)
        task_type = "reencode-task" if box is None else "region-task"
        out.append(SourceRecord(f"{task}-{seed}-{i}", scene, q, a, task_type, task, box))
    return out


def gen_captions(n: int, seed: int = 0) -> list[SourceRecord]:
    """Image-caption pairs for the alignment phase: the set of plate colours present."""
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i, 7])
        m = int(rng.integers(1, 4))
        colors = sorted(int(c) for c in rng.choice(len(PALETTE), size=m, replace=False))
        objs = tuple(
            _tile(rng, rng.integers(0, len(GLYPHS)), c, col, row) for c, (col, row) in zip(colors, _place(rng, m))
        )
        caption = " ".join(f"{COLOR_NAMES[c]} tile" for c in colors)
        out.append(SourceRecord(f"caption-{seed}-{i}", SceneSpec(objs, seed=seed), "", caption, "plain", "caption"))
    return out


def write_bitmap(path, img: np.ndarray) -> None:
    """Uncompressed binary PPM export for inspection."""
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())
