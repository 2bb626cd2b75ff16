"""Deterministic synthetic glyphs and zero-shot dataset construction.

Radicals are seeded stroke patterns (a few anti-aliased line segments on a
square cell), so the whole corpus is a pure function of its arguments and
regenerates bit-identically. Composites are laid out recursively: each child
is composed at full canvas size, bilinearly scaled into its region, and
merged by per-pixel max.

Layout constants for the surround and within operators (inner child at 55%,
60%, or 50% of the canvas side) are fixed here; any consistent geometry
works, these are documented for reproducibility.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .caption_grammar import (
    DecompositionTree,
    Internal,
    Leaf,
    StructureOp,
    parse_caption,
    serialize,
    zero_shot_check,
)

MANIFEST_HEADER = "# ran-kit manifest v1"

SURROUND_CORNER_SCALE = 0.55  # stl, str, sbl, s
SURROUND_SIDE_SCALE = 0.60  # sl, sb, st
WITHIN_SCALE = 0.50  # w

MIN_CELL = 8


class CellTooSmall(ValueError):
    """Radical cell below the minimum renderable size."""


class MissingRadical(ValueError):
    """A leaf names a radical the atlas does not contain."""


class CoverageInfeasible(RuntimeError):
    """Dataset construction ran out of retries for distinctness or coverage."""


class ManifestError(ValueError):
    """Manifest file is malformed."""


@dataclass(frozen=True)
class GlyphImage:
    """A grayscale bitmap with intensities in [0, 1], row-major."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"glyph needs a 2-d pixel grid, got shape {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("glyph intensities must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def _stroke_rng(radical_id: str, cell: int, seed: int) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}|{cell}|{radical_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def render_radical(radical_id: str, cell: int, seed: int) -> GlyphImage:
    """Draw a seeded stroke pattern for one radical on a cell x cell canvas.

    Pure function of (radical_id, cell, seed): the generator is keyed on a
    hash of all three, so atlases regenerate bit-identically and different
    radicals get independent patterns.
    """
    if cell < MIN_CELL:
        raise CellTooSmall(f"cell {cell} is below the minimum of {MIN_CELL}")
    rng = _stroke_rng(radical_id, cell, seed)
    n_segments = int(rng.integers(3, 7))
    ys, xs = np.mgrid[0:cell, 0:cell].astype(np.float64)
    canvas = np.zeros((cell, cell))
    margin = 0.1 * cell
    min_len = 0.4 * cell
    for _ in range(n_segments):
        for _attempt in range(16):
            p = rng.uniform(margin, cell - margin, size=2)
            q = rng.uniform(margin, cell - margin, size=2)
            if np.hypot(*(q - p)) >= min_len:
                break
        half_width = max(0.75, 0.04 * cell)
        # distance from each pixel center to the segment p-q
        d = q - p
        seg_len2 = float(d @ d)
        t = ((xs - p[0]) * d[0] + (ys - p[1]) * d[1]) / seg_len2
        t = np.clip(t, 0.0, 1.0)
        dist = np.hypot(xs - (p[0] + t * d[0]), ys - (p[1] + t * d[1]))
        coverage = np.clip(half_width + 0.5 - dist, 0.0, 1.0)
        canvas = np.maximum(canvas, coverage)
    return GlyphImage(canvas)


@dataclass(frozen=True)
class RadicalAtlas:
    """Rendered radical bitmaps sharing one cell size."""

    entries: dict
    cell: int
    seed: int

    @classmethod
    def build(cls, radical_ids, cell: int, seed: int) -> "RadicalAtlas":
        entries = {rid: render_radical(rid, cell, seed) for rid in radical_ids}
        return cls(entries=entries, cell=cell, seed=seed)


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample; output of [0,1] input stays in [0,1]."""
    in_h, in_w = pixels.shape
    if (in_h, in_w) == (out_h, out_w):
        return pixels.copy()
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = pixels[np.ix_(y0, x0)] * (1 - wx) + pixels[np.ix_(y0, x1)] * wx
    bot = pixels[np.ix_(y1, x0)] * (1 - wx) + pixels[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def _cuts(total: int, parts: int):
    return [round(i * total / parts) for i in range(parts + 1)]


def _inner_box(op: StructureOp, size: int):
    """Top-left corner and side of the inner region for surround/within ops."""
    if op in (StructureOp.TOP_LEFT_SURROUND, StructureOp.TOP_RIGHT_SURROUND,
              StructureOp.BOTTOM_LEFT_SURROUND, StructureOp.FULL_SURROUND):
        side = round(SURROUND_CORNER_SCALE * size)
    elif op is StructureOp.WITHIN:
        side = round(WITHIN_SCALE * size)
    else:
        side = round(SURROUND_SIDE_SCALE * size)
    centered = (size - side) // 2
    flush = size - side
    if op is StructureOp.TOP_LEFT_SURROUND:  # inner sits opposite: bottom-right
        return flush, flush, side
    if op is StructureOp.TOP_RIGHT_SURROUND:  # bottom-left
        return flush, 0, side
    if op is StructureOp.BOTTOM_LEFT_SURROUND:  # top-right
        return 0, flush, side
    if op is StructureOp.LEFT_SURROUND:  # open side is the right edge
        return centered, flush, side
    if op is StructureOp.BOTTOM_SURROUND:  # open top
        return 0, centered, side
    if op is StructureOp.TOP_SURROUND:  # open bottom
        return flush, centered, side
    return centered, centered, side  # s and w: centered


def _paste_max(canvas, child_pixels, top, left, height, width):
    patch = resize_bilinear(child_pixels, height, width)
    region = canvas[top:top + height, left:left + width]
    np.maximum(region, patch, out=region)


def compose(tree: DecompositionTree, atlas: RadicalAtlas, out_size: int) -> GlyphImage:
    """Recursively composite a decomposition tree onto a square canvas.

    Every child is first composed at full out_size resolution, then scaled
    down into its layout region, so nesting depth does not erode stroke
    detail beyond one resampling per level. Overlaps resolve by max.
    """
    return GlyphImage(_compose_square(tree, atlas, out_size))


def _compose_square(tree, atlas: RadicalAtlas, size: int) -> np.ndarray:
    if isinstance(tree, Leaf):
        entry = atlas.entries.get(tree.radical_id)
        if entry is None:
            raise MissingRadical(f"radical {tree.radical_id!r} not in atlas")
        return resize_bilinear(entry.pixels, size, size)

    children = [_compose_square(c, atlas, size) for c in tree.children]
    canvas = np.zeros((size, size))
    op = tree.op
    if op is StructureOp.LEFT_RIGHT:  # left-right arrangement
        xs = _cuts(size, len(children))
        for child, x0, x1 in zip(children, xs, xs[1:]):
            _paste_max(canvas, child, 0, x0, size, x1 - x0)
    elif op is StructureOp.TOP_BOTTOM:  # top-bottom arrangement
        ys = _cuts(size, len(children))
        for child, y0, y1 in zip(children, ys, ys[1:]):
            _paste_max(canvas, child, y0, 0, y1 - y0, size)
    else:
        # first child is the surrounding shape at full size; the rest share
        # the inner box, side by side when there are more than two children
        _paste_max(canvas, children[0], 0, 0, size, size)
        top, left, side = _inner_box(op, size)
        xs = _cuts(side, len(children) - 1)
        for child, x0, x1 in zip(children[1:], xs, xs[1:]):
            _paste_max(canvas, child, top, left + x0, side, x1 - x0)
    return canvas


def write_pgm(image: GlyphImage, path) -> None:
    """Binary PGM (P5), maxval 255, intensity = round(pixel * 255)."""
    levels = np.rint(image.pixels * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.width} {image.height}\n255\n".encode("ascii"))
        fh.write(levels.tobytes())


def read_pgm(path) -> GlyphImage:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # header is ASCII tokens (magic, width, height, maxval) with optional
    # '#' comment lines; pixel data starts right after the maxval token
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: expected maxval 255, got {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos)
    if data.size != width * height:
        raise ValueError(f"{path}: pixel payload shorter than {width}x{height}")
    return GlyphImage(data.reshape(height, width) / 255.0)


@dataclass(frozen=True)
class ManifestItem:
    sample_id: str
    caption: str
    image_path: str


@dataclass(frozen=True)
class DatasetManifest:
    """One split's worth of (sample id, caption, relative image path) rows."""

    split: str
    items: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        seen = set()
        for item in self.items:
            if item.sample_id in seen:
                raise ManifestError(f"duplicate sample id {item.sample_id!r}")
            seen.add(item.sample_id)

    def __len__(self):
        return len(self.items)

    def captions(self):
        return [item.caption for item in self.items]

    def save(self, path) -> None:
        lines = [MANIFEST_HEADER]
        for item in self.items:
            lines.append(f"{item.sample_id}\t{item.caption}\t{item.image_path}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, split: str | None = None) -> "DatasetManifest":
        text = Path(path).read_text(encoding="utf-8")
        lines = text.splitlines()
        if not lines or lines[0].strip() != MANIFEST_HEADER:
            raise ManifestError(f"{path}: missing header line {MANIFEST_HEADER!r}")
        items = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ManifestError(
                    f"{path}:{lineno}: expected 3 tab-separated columns, got {len(parts)}"
                )
            sample_id, caption, image_path = parts
            parse_caption(caption)  # raises CaptionError on malformed rows
            items.append(ManifestItem(sample_id, caption, image_path))
        name = split if split is not None else Path(path).stem
        return cls(split=name, items=tuple(items))


def _radical_inventory(count: int):
    width = len(str(count))
    return [f"r{i + 1:0{width}d}" for i in range(count)]


# Leaf odds per remaining depth budget. Real decompositions are mostly
# one or two operators deep; with a flat leaf probability the depth cap
# dominates the draw (deep nests swamp the corpus) and the shallow
# layouts a model must master first become rare.
_LEAF_PROB = (0.0, 0.75, 0.60, 0.0)


def _random_tree(rng, structures, radical_ids, depth_left: int):
    if depth_left == 0 or rng.random() < _LEAF_PROB[min(depth_left, 3)]:
        return Leaf(radical_ids[int(rng.integers(len(radical_ids)))])
    op = structures[int(rng.integers(len(structures)))]
    arity = 2
    if op in (StructureOp.LEFT_RIGHT, StructureOp.TOP_BOTTOM) and rng.random() < 0.15:
        arity = 3
    children = tuple(
        _random_tree(rng, structures, radical_ids, depth_left - 1)
        for _ in range(arity)
    )
    return Internal(op, children)


def _split_counts(n: int, fractions):
    f_train, f_valid, f_test = fractions
    if min(f_train, f_valid, f_test) <= 0:
        raise ValueError("split fractions must all be positive")
    if abs(f_train + f_valid + f_test - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    n_train = round(f_train * n)
    n_valid = round(f_valid * n)
    n_test = n - n_train - n_valid
    if min(n_train, n_valid, n_test) < 1:
        raise ValueError(f"split of {n} by {fractions} leaves an empty subset")
    return n_train, n_valid, n_test


_MAX_TREE_ATTEMPTS_PER_SAMPLE = 200
_MAX_SPLIT_ATTEMPTS = 1000


def synth_dataset(
    radicals: int,
    structures,
    compositions: int,
    split_fractions,
    seed: int,
    out_dir,
    out_size: int = 64,
):
    """Generate a zero-shot dataset of composite glyphs under out_dir.

    Draws `compositions` distinct random trees (root always an operator,
    operator depth at most 3) over a generated radical inventory, splits
    them by composition so held-out trees never occur in training, and
    keeps re-drawing the split until every radical and operator appearing
    in a held-out tree also appears in some training tree. Writes one PGM
    per sample plus train/valid/test TSV manifests and returns the three
    manifests.
    """
    if radicals < 1:
        raise ValueError("need at least one radical")
    if compositions < 3:
        raise ValueError("need at least three compositions, one per split")
    structures = sorted(set(structures), key=lambda op: op.code)
    if not structures:
        raise ValueError("need at least one structure operator")
    radical_ids = _radical_inventory(radicals)
    n_train, n_valid, n_test = _split_counts(compositions, split_fractions)

    tree_rng = np.random.default_rng(
        int.from_bytes(hashlib.sha256(f"trees|{seed}".encode()).digest()[:8], "big")
    )
    captions = []
    seen = set()
    attempts_left = compositions * _MAX_TREE_ATTEMPTS_PER_SAMPLE
    while len(captions) < compositions:
        if attempts_left == 0:
            raise CoverageInfeasible(
                f"could not draw {compositions} distinct compositions from "
                f"{radicals} radicals and {len(structures)} operators"
            )
        attempts_left -= 1
        op = structures[int(tree_rng.integers(len(structures)))]
        arity = 2
        if op in (StructureOp.LEFT_RIGHT, StructureOp.TOP_BOTTOM) and tree_rng.random() < 0.15:
            arity = 3
        root = Internal(op, tuple(
            _random_tree(tree_rng, structures, radical_ids, 2) for _ in range(arity)
        ))
        caption = serialize(root)
        if caption not in seen:
            seen.add(caption)
            captions.append(caption)

    split_rng = np.random.default_rng(
        int.from_bytes(hashlib.sha256(f"split|{seed}".encode()).digest()[:8], "big")
    )
    for _attempt in range(_MAX_SPLIT_ATTEMPTS):
        perm = split_rng.permutation(compositions)
        train_idx = sorted(perm[:n_train])
        valid_idx = sorted(perm[n_train:n_train + n_valid])
        test_idx = sorted(perm[n_train + n_valid:])
        train_caps = [captions[i] for i in train_idx]
        heldout_caps = [captions[i] for i in valid_idx] + [captions[i] for i in test_idx]
        if zero_shot_check(train_caps, heldout_caps).ok:
            break
    else:
        raise CoverageInfeasible(
            f"no split of {compositions} compositions covered every held-out "
            f"radical and operator after {_MAX_SPLIT_ATTEMPTS} attempts"
        )

    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    atlas = RadicalAtlas.build(radical_ids, cell=out_size, seed=seed)
    id_width = max(4, len(str(compositions - 1)))
    rel_paths = []
    for i, caption in enumerate(captions):
        sample_id = f"s{i:0{id_width}d}"
        rel = f"images/{sample_id}.pgm"
        rel_paths.append((sample_id, rel))
        image = compose(parse_caption(caption), atlas, out_size)
        write_pgm(image, out_dir / rel)

    manifests = []
    for name, idxs in (("train", train_idx), ("valid", valid_idx), ("test", test_idx)):
        items = tuple(
            ManifestItem(rel_paths[i][0], captions[i], rel_paths[i][1]) for i in idxs
        )
        manifest = DatasetManifest(split=name, items=items)
        manifest.save(out_dir / f"{name}.tsv")
        manifests.append(manifest)
    return tuple(manifests)
