"""Procedural interior-layout dataset with numerically checkable constraints.

Scenes are flat-color floor plans on an 8x8 cell grid: a style-colored
background plus 1-4 non-overlapping furniture rectangles, each drawn with a
1-pixel border and a kind-specific fill color.  Every color in the generator
(15 style palettes x 3 plus 18 furniture fills) sits on the 4-level RGB
lattice {0,85,170,255}^3 and is globally unique, so nearest-color
classification recovers the layout exactly on clean rasters and tolerates
bounded noise on generated ones.  That is what makes prompt constraints like
"sofa of width 3" machine-verifiable.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import GenerationError, ShapeError
from .latent_codec import read_ppm, validate_image, write_ppm
from .tensor_core import Rng

GRID = 8  # scene grid is GRID x GRID cells

SPACE_TYPES = (
    "living room", "kitchen", "bedroom", "bathroom", "study", "dining room",
    "office", "cafe", "hotel room", "shop", "exhibition hall", "library",
    "restaurant", "lobby", "gym", "studio", "balcony",
)

# per style: (background, accent, rectangle-border) as lattice level triples
_STYLE_LEVELS = {
    "modern": ((3, 3, 3), (2, 2, 2), (0, 0, 0)),
    "minimalist": ((3, 3, 2), (2, 2, 3), (1, 1, 1)),
    "nordic": ((2, 3, 3), (1, 2, 3), (0, 1, 1)),
    "industrial": ((2, 2, 1), (1, 2, 2), (1, 0, 0)),
    "vintage": ((3, 2, 1), (2, 1, 0), (1, 1, 0)),
    "rustic": ((2, 1, 1), (2, 2, 0), (0, 1, 0)),
    "japanese": ((3, 2, 2), (2, 3, 2), (1, 0, 1)),
    "mediterranean": ((0, 3, 3), (1, 1, 3), (0, 0, 1)),
    "luxurious": ((3, 3, 1), (3, 2, 0), (1, 0, 2)),
    "classic": ((3, 2, 3), (2, 1, 2), (0, 0, 2)),
    "classical": ((2, 3, 1), (1, 2, 1), (0, 2, 0)),
    "futuristic": ((1, 3, 3), (0, 2, 3), (0, 1, 2)),
    "eco-friendly": ((1, 3, 2), (1, 3, 1), (0, 2, 1)),
    "eclectic": ((3, 1, 2), (2, 0, 2), (1, 0, 3)),
    "country": ((3, 3, 0), (2, 1, 3), (1, 1, 2)),
}

_KIND_LEVELS = {
    "sofa": (3, 0, 3),
    "table": (0, 3, 2),
    "bed": (2, 0, 3),
    "chair": (2, 3, 0),
    "desk": (3, 0, 2),
    "wardrobe": (0, 1, 3),
    "bookshelf": (0, 3, 1),
    "rug": (1, 3, 0),
    "lamp": (3, 0, 1),
    "plant": (3, 1, 0),
    "cabinet": (0, 0, 3),
    "counter": (0, 3, 0),
    "bathtub": (3, 0, 0),
    "sink": (3, 1, 3),
    "toilet": (3, 1, 1),
    "mirror": (0, 2, 2),
    "bench": (1, 2, 0),
    "display": (2, 0, 1),
}

# (w_min, w_max), (h_min, h_max) in grid cells
_KIND_SIZES = {
    "sofa": ((2, 4), (1, 2)),
    "table": ((1, 3), (1, 2)),
    "bed": ((2, 4), (2, 3)),
    "chair": ((1, 1), (1, 1)),
    "desk": ((2, 3), (1, 1)),
    "wardrobe": ((1, 2), (2, 4)),
    "bookshelf": ((1, 1), (2, 4)),
    "rug": ((2, 4), (2, 3)),
    "lamp": ((1, 1), (1, 1)),
    "plant": ((1, 1), (1, 1)),
    "cabinet": ((1, 2), (1, 2)),
    "counter": ((2, 4), (1, 1)),
    "bathtub": ((2, 3), (1, 2)),
    "sink": ((1, 1), (1, 1)),
    "toilet": ((1, 1), (1, 2)),
    "mirror": ((1, 2), (1, 1)),
    "bench": ((2, 3), (1, 1)),
    "display": ((2, 3), (1, 2)),
}

# every space type installs one characteristic piece against the top-left
# corner; the mapping is injective so the corner piece identifies the space
SPACE_ANCHORS = {
    "living room": "sofa",
    "kitchen": "counter",
    "bedroom": "bed",
    "bathroom": "bathtub",
    "study": "desk",
    "dining room": "table",
    "office": "chair",
    "cafe": "bench",
    "hotel room": "wardrobe",
    "shop": "display",
    "exhibition hall": "mirror",
    "library": "bookshelf",
    "restaurant": "sink",
    "lobby": "lamp",
    "gym": "rug",
    "studio": "cabinet",
    "balcony": "plant",
}

_LEVEL_VALUES = (0, 85, 170, 255)


def _rgb(levels) -> tuple:
    return tuple(_LEVEL_VALUES[v] for v in levels)


STYLES = tuple(_STYLE_LEVELS)
KINDS = tuple(_KIND_LEVELS)
STYLE_PALETTES = {s: tuple(_rgb(c) for c in cols) for s, cols in _STYLE_LEVELS.items()}
KIND_COLORS = {k: _rgb(c) for k, c in _KIND_LEVELS.items()}

# global classification table: 45 style colors then 18 kind colors
_GLOBAL_COLORS = np.array(
    [c for s in STYLES for c in STYLE_PALETTES[s]] + [KIND_COLORS[k] for k in KINDS],
    dtype=np.float64,
) / 255.0
_KIND_COLOR_ROW = {k: 45 + i for i, k in enumerate(KINDS)}


@dataclass
class FurnitureItem:
    kind: str
    x: int
    y: int
    w: int
    h: int
    color_index: int  # into SceneSpec.full_palette(): 3 style colors + 18 kind fills

    def cells(self) -> tuple:
        return (self.x, self.y, self.x + self.w, self.y + self.h)


@dataclass
class SceneSpec:
    space_type: str
    style: str
    palette: tuple = None  # 3 RGB u8 triples derived from style
    furniture: list = field(default_factory=list)

    def __post_init__(self):
        if self.style not in STYLE_PALETTES:
            raise ShapeError(f"unknown style {self.style!r}")
        if self.space_type not in SPACE_TYPES:
            raise ShapeError(f"unknown space type {self.space_type!r}")
        if self.palette is None:
            self.palette = STYLE_PALETTES[self.style]
        seen_kinds = set()
        for item in self.furniture:
            x0, y0, x1, y1 = item.cells()
            if item.w < 1 or item.h < 1:
                raise ShapeError(f"{item.kind}: w,h must be >= 1")
            if x0 < 0 or y0 < 0 or x1 > GRID or y1 > GRID:
                raise ShapeError(f"{item.kind} at {(item.x, item.y)} exceeds the {GRID}x{GRID} grid")
            if item.kind in seen_kinds:
                raise ShapeError(f"duplicate furniture kind {item.kind!r}")
            seen_kinds.add(item.kind)
        for i, a in enumerate(self.furniture):
            for b in self.furniture[i + 1 :]:
                ax0, ay0, ax1, ay1 = a.cells()
                bx0, by0, bx1, by1 = b.cells()
                if ax0 < bx1 and bx0 < ax1 and ay0 < by1 and by0 < ay1:
                    raise ShapeError(f"furniture overlap: {a.kind} and {b.kind}")

    def full_palette(self) -> np.ndarray:
        """(21, 3) u8 palette: background, accent, border, then kind fills."""
        return np.array(list(self.palette) + [KIND_COLORS[k] for k in KINDS], dtype=np.uint8)

    def to_dict(self) -> dict:
        return {
            "space_type": self.space_type,
            "style": self.style,
            "palette": [list(c) for c in self.palette],
            "furniture": [
                {"kind": f.kind, "x": f.x, "y": f.y, "w": f.w, "h": f.h, "color_index": f.color_index}
                for f in self.furniture
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            space_type=d["space_type"],
            style=d["style"],
            palette=tuple(tuple(c) for c in d["palette"]),
            furniture=[
                FurnitureItem(f["kind"], f["x"], f["y"], f["w"], f["h"], f["color_index"])
                for f in d["furniture"]
            ],
        )


@dataclass
class DescriptionDoc:
    """JSON design description paired with a scene; dimensions match the spec."""

    space_type: str
    style: str
    furniture: list  # [{kind, width, height}]
    colors: list  # 3 RGB triples
    prompt: str
    detailed: bool

    def to_dict(self) -> dict:
        return {
            "space_type": self.space_type,
            "style": self.style,
            "furniture": self.furniture,
            "colors": self.colors,
            "prompt": self.prompt,
            "detailed": self.detailed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DescriptionDoc":
        return cls(**d)


def _pick(rng: Rng, constraint, default_pool):
    if constraint is None:
        return rng.choice(list(default_pool))
    if isinstance(constraint, str):
        return constraint
    return rng.choice(list(constraint))


def _place(rng: Rng, w: int, h: int, occupied: list, tries: int = 32):
    if w > GRID or h > GRID:
        return None
    for _ in range(tries):
        x = int(rng.integers(0, GRID - w + 1))
        y = int(rng.integers(0, GRID - h + 1))
        ok = True
        for ox0, oy0, ox1, oy1 in occupied:
            if x < ox1 and ox0 < x + w and y < oy1 and oy0 < y + h:
                ok = False
                break
        if ok:
            return x, y
    return None


def generate_scene(rng: Rng, constraints: dict | None = None) -> SceneSpec:
    """Random scene satisfying optional constraints, by rejection.

    constraints keys (all optional): space_type / style (value or list of
    candidates), furniture (list of {kind, w?, h?} that must appear),
    n_furniture ((lo, hi) total count, default (1, 4)).
    """
    constraints = constraints or {}
    required = constraints.get("furniture", [])
    lo, hi = constraints.get("n_furniture", (1, 4))
    lo = max(lo, len(required), 1)
    if hi < lo:
        raise GenerationError(f"n_furniture range ({lo},{hi}) unsatisfiable")
    for _attempt in range(10_000):
        space = _pick(rng, constraints.get("space_type"), SPACE_TYPES)
        style = _pick(rng, constraints.get("style"), STYLES)
        anchor = SPACE_ANCHORS[space]
        anchor_req = next((r for r in required if r["kind"] == anchor), None)
        rest = [r for r in required if r is not anchor_req]
        # anchor occupies one slot; constrained items the rest
        if hi < 1 + len(rest):
            continue
        n_items = int(rng.integers(max(lo, 1 + len(rest)), hi + 1))
        (wlo, whi), (hlo, hhi) = _KIND_SIZES[anchor]
        areq = {} if anchor_req is None else anchor_req
        w = int(areq.get("w", rng.integers(wlo, whi + 1)))
        h = int(areq.get("h", rng.integers(hlo, hhi + 1)))
        if w < 1 or h < 1 or w > GRID or h > GRID:
            continue
        items = [FurnitureItem(anchor, 0, 0, w, h, 3 + KINDS.index(anchor))]
        occupied = [items[0].cells()]
        failed = False
        for req in rest:
            kind = req["kind"]
            (wlo, whi), (hlo, hhi) = _KIND_SIZES[kind]
            w = int(req.get("w", rng.integers(wlo, whi + 1)))
            h = int(req.get("h", rng.integers(hlo, hhi + 1)))
            pos = _place(rng, w, h, occupied)
            if pos is None:
                failed = True
                break
            items.append(FurnitureItem(kind, pos[0], pos[1], w, h, 3 + KINDS.index(kind)))
            occupied.append(items[-1].cells())
        if failed:
            continue
        extra_kinds = [k for k in KINDS if k not in {i.kind for i in items}]
        while len(items) < n_items and extra_kinds:
            kind = extra_kinds.pop(int(rng.integers(0, len(extra_kinds))))
            (wlo, whi), (hlo, hhi) = _KIND_SIZES[kind]
            w = int(rng.integers(wlo, whi + 1))
            h = int(rng.integers(hlo, hhi + 1))
            pos = _place(rng, w, h, occupied)
            if pos is None:
                failed = True
                break
            items.append(FurnitureItem(kind, pos[0], pos[1], w, h, 3 + KINDS.index(kind)))
            occupied.append(items[-1].cells())
        if failed or len(items) < lo:
            continue
        return SceneSpec(space_type=space, style=style, furniture=items)
    raise GenerationError("generate_scene: constraints unsatisfiable after 10^4 attempts")


def rasterize(spec: SceneSpec, size: int = 32) -> np.ndarray:
    """Flat-color floor plan: background, then bordered furniture rectangles."""
    if size % GRID:
        raise ShapeError(f"size {size} not a multiple of the {GRID}-cell grid")
    cell = size // GRID
    palette = spec.full_palette().astype(np.float64) / 255.0
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = palette[0]
    border = palette[2]
    for item in spec.furniture:
        x0, y0 = item.x * cell, item.y * cell
        x1, y1 = (item.x + item.w) * cell, (item.y + item.h) * cell
        img[y0:y1, x0:x1] = border
        img[y0 + 1 : y1 - 1, x0 + 1 : x1 - 1] = palette[item.color_index]
    return img


def describe_scene(spec: SceneSpec, detailed: bool = True) -> tuple:
    """Templated prompt plus its DescriptionDoc; rough mode omits dimensions."""
    if detailed:
        clauses = [f"a {f.kind} of width {f.w} and height {f.h}" for f in spec.furniture]
    else:
        clauses = [f"a {f.kind}" for f in spec.furniture]
    prompt = f"a {spec.style} {spec.space_type}"
    if clauses:
        prompt += " with " + ", ".join(clauses)
    doc = DescriptionDoc(
        space_type=spec.space_type,
        style=spec.style,
        furniture=[{"kind": f.kind, "width": f.w, "height": f.h} for f in spec.furniture],
        colors=[list(c) for c in spec.palette],
        prompt=prompt,
        detailed=detailed,
    )
    return prompt, doc


def parse_description(prompt: str) -> list:
    """Recover {kind, width?, height?} clauses from a templated prompt."""
    words = [w.strip(".,!?;:") for w in prompt.lower().split()]
    out: list[dict] = []
    current: dict | None = None
    for i, word in enumerate(words):
        if word in _KIND_LEVELS:
            current = {"kind": word}
            out.append(current)
        elif word in ("width", "height") and current is not None:
            if i + 1 < len(words) and words[i + 1].isdigit():
                current[word] = int(words[i + 1])
    return out


def measure_layout(img: np.ndarray, kind: str):
    """Measured {w, h} in grid cells of the largest region of kind's color.

    Nearest-color classification against the global palette, then the largest
    4-connected component's bounding box.  Pixel extents are converted back
    to cells by inverting the 1-pixel border: cells = (pixels + 2) / cell.
    Returns None when fewer than 2 pixels classify to the kind.
    """
    img = validate_image(img)
    if kind not in _KIND_COLOR_ROW:
        raise ShapeError(f"unknown furniture kind {kind!r}")
    dists = ((img[:, :, None, :] - _GLOBAL_COLORS[None, None, :, :]) ** 2).sum(axis=-1)
    labels = dists.argmin(axis=-1)
    mask = labels == _KIND_COLOR_ROW[kind]
    if mask.sum() < 2:
        return None
    comp, n = ndimage.label(mask, structure=[[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    sizes = ndimage.sum_labels(mask, comp, index=range(1, n + 1))
    largest = int(np.argmax(sizes)) + 1
    if sizes[largest - 1] < 2:
        return None
    ys, xs = np.nonzero(comp == largest)
    cell_w = img.shape[1] // GRID
    cell_h = img.shape[0] // GRID
    return {
        "w": (xs.max() - xs.min() + 1 + 2) / cell_w,
        "h": (ys.max() - ys.min() + 1 + 2) / cell_h,
    }


# ---------------------------------------------------------------------------
# corpus layout on disk: {root}/{split}/{index}.ppm + .json + .spec.json


def record_paths(root, split: str, index: int) -> tuple:
    base = Path(root) / split
    stem = f"{index:06d}"
    return base / f"{stem}.ppm", base / f"{stem}.json", base / f"{stem}.spec.json"


def _dump_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")


def write_record(root, split: str, index: int, spec: SceneSpec, doc: DescriptionDoc, img: np.ndarray) -> None:
    ppm, doc_path, spec_path = record_paths(root, split, index)
    ppm.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(ppm, img)
    _dump_json(doc_path, doc.to_dict())
    _dump_json(spec_path, spec.to_dict())


def read_record(root, split: str, index: int) -> tuple:
    ppm, doc_path, spec_path = record_paths(root, split, index)
    spec = SceneSpec.from_dict(json.loads(spec_path.read_text()))
    doc = DescriptionDoc.from_dict(json.loads(doc_path.read_text()))
    return spec, doc, read_ppm(ppm)


def write_manifest(root, manifest: dict) -> None:
    _dump_json(Path(root) / "manifest.json", manifest)


def read_manifest(root) -> dict:
    return json.loads((Path(root) / "manifest.json").read_text())


def read_split(root, split: str) -> list:
    """All (spec, doc, image) records of a split, in index order."""
    manifest = read_manifest(root)
    count = manifest["splits"][split]
    return [read_record(root, split, i) for i in range(count)]


def generate_record(seed: int, split: str, index: int, constraints: dict | None = None,
                    rough_frac: float = 0.0, size: int = 32) -> tuple:
    """Deterministic (spec, doc, img) for one corpus index; safe to parallelize."""
    rng = Rng(seed).spawn("scene", split, index)
    spec = generate_scene(rng, constraints)
    detailed = bool(Rng(seed).spawn("rough", split, index).uniform() >= rough_frac)
    _, doc = describe_scene(spec, detailed=detailed)
    return spec, doc, rasterize(spec, size=size)
