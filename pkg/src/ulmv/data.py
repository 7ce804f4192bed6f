"""Tile extraction, ROI filtering, resizing and split manifests for RGB rasters."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

MANIFEST_HEADER = ["source_id", "grid_x", "grid_y", "label", "path", "tissue_fraction", "kept", "split"]
SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.70, 0.15, 0.15)
LABEL_DIRS = {"case": 1, "control": 0, "1": 1, "0": 0}


@dataclass(frozen=True)
class TileRecord:
    source_id: str
    grid_x: int
    grid_y: int
    label: int
    path: str = ""
    tissue_fraction: float = 0.0
    kept: bool = True
    split: str = "unassigned"

    @property
    def key(self) -> tuple[str, int, int]:
        return self.source_id, self.grid_x, self.grid_y


@dataclass
class SplitManifest:
    records: list[TileRecord]
    seed: int = 0
    ratios: tuple[float, float, float] = DEFAULT_RATIOS
    grouping: str = "source"

    def __post_init__(self):
        keys = [r.key for r in self.records]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (source_id, grid_x, grid_y) in manifest")

    def split(self, name: str) -> list[TileRecord]:
        return [r for r in self.records if r.kept and r.split == name]

    def kept(self) -> list[TileRecord]:
        return [r for r in self.records if r.kept]


# raster operations

def tile_image(raster: np.ndarray, tile: int = 1024) -> list[tuple[int, int, np.ndarray]]:
    """Non-overlapping ``tile`` x ``tile`` crops as ``(grid_x, grid_y, pixels)``.

    Partial tiles at the right and bottom edges are dropped.
    """
    raster = np.asarray(raster)
    if raster.ndim != 3 or raster.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 raster, got shape {raster.shape}")
    rows, cols = raster.shape[0] // tile, raster.shape[1] // tile
    return [(gx, gy, raster[gy * tile:(gy + 1) * tile, gx * tile:(gx + 1) * tile])
            for gy in range(rows) for gx in range(cols)]


def resize_tile(tile: np.ndarray, size: int = 224) -> np.ndarray:
    """Bilinear resize with half-pixel centres (``align_corners=False``).

    8-bit input gives rounded 8-bit output; float input stays float.
    """
    src = np.asarray(tile)
    x = src.astype(np.float64)
    h, w = x.shape[:2]

    def coords(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = coords(h, size)
    c0, c1, fc = coords(w, size)
    fr = fr[:, None, None] if x.ndim == 3 else fr[:, None]
    fc = fc[None, :, None] if x.ndim == 3 else fc[None, :]
    top = x[r0][:, c0] * (1 - fc) + x[r0][:, c1] * fc
    bottom = x[r1][:, c0] * (1 - fc) + x[r1][:, c1] * fc
    out = top * (1 - fr) + bottom * fr
    if src.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out


def roi_filter(tile: np.ndarray, white: float = 220, min_saturation: float = 0.04,
               min_tissue: float = 0.25) -> tuple[bool, float]:
    """Keep a tile when enough pixels are neither near-white nor near-grey."""
    px = np.asarray(tile, dtype=np.float64).reshape(-1, 3)
    hi = px.max(axis=1)
    lo = px.min(axis=1)
    sat = np.divide(hi - lo, hi, out=np.zeros_like(hi), where=hi > 0)
    background = (lo > white) | (sat < min_saturation)
    fraction = 1.0 - float(np.count_nonzero(background)) / len(px)
    return fraction >= min_tissue, fraction


# splitting

def _allocate(n: int, ratios) -> list[int]:
    exact = np.asarray(ratios, dtype=np.float64) * n
    counts = np.floor(exact).astype(int)
    rest = n - counts.sum()
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts.tolist()


def _class_quotas(sizes: list[int], ratios) -> list[list[int]]:
    """Per-class split counts whose rows sum to the class sizes and whose
    columns sum to the largest-remainder split of the total.

    Every entry is the floor or ceiling of ``ratio * class_size``.
    """
    totals = np.asarray(_allocate(sum(sizes), ratios))
    exact = np.outer(sizes, np.asarray(ratios, dtype=np.float64))
    quotas = np.floor(exact).astype(int)
    deficit = totals - quotas.sum(axis=0)
    for k in np.argsort(-(np.asarray(sizes) - quotas.sum(axis=1)), kind="stable"):
        rest = sizes[k] - quotas[k].sum()
        frac = exact[k] - np.floor(exact[k])
        order = sorted(range(len(ratios)), key=lambda s: (-deficit[s], -frac[s], s))
        for s in order[:rest]:
            quotas[k, s] += 1
            deficit[s] -= 1
    return quotas.tolist()


def split_dataset(records, ratios=DEFAULT_RATIOS, seed: int = 0, grouping: str = "source") -> SplitManifest:
    """Seeded, per-class stratified assignment of kept records to train/val/test.

    Split totals follow the largest-remainder rounding of ``ratios * n``.
    With ``grouping="source"`` all tiles of one ``source_id`` share a split,
    filled greedily toward the per-class quotas.
    """
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise ValueError(f"ratios must be three values summing to 1, got {ratios}")
    if grouping not in ("tile", "source"):
        raise ValueError(f"grouping must be 'tile' or 'source', got {grouping!r}")
    records = sorted(records, key=lambda r: (r.source_id, r.grid_y, r.grid_x))
    kept = [r for r in records if r.kept]
    if not kept:
        raise ValueError("no kept records to split")
    if grouping == "source":
        source_labels: dict[str, set] = {}
        for r in kept:
            source_labels.setdefault(r.source_id, set()).add(r.label)
        mixed = sorted(s for s, v in source_labels.items() if len(v) > 1)
        if mixed:
            raise ValueError(f"sources with tiles of both labels cannot be source-grouped: {mixed[:3]}")
    rng = np.random.default_rng(seed)
    labels = sorted({r.label for r in kept})
    members_by_label = [[r for r in kept if r.label == label] for label in labels]
    quotas = _class_quotas([len(m) for m in members_by_label], ratios)
    assignment: dict[tuple, str] = {}
    for members, counts in zip(members_by_label, quotas):
        if grouping == "tile":
            perm = rng.permutation(len(members))
            bounds = np.cumsum([0] + counts)
            for s, name in enumerate(SPLITS):
                for i in perm[bounds[s]:bounds[s + 1]]:
                    assignment[members[i].key] = name
        else:
            groups: dict[str, list[TileRecord]] = {}
            for r in members:
                groups.setdefault(r.source_id, []).append(r)
            names = sorted(groups)
            remaining = np.asarray(counts, dtype=float)
            for i in rng.permutation(len(names)):
                g = groups[names[i]]
                s = int(np.argmax(remaining))
                remaining[s] -= len(g)
                for r in g:
                    assignment[r.key] = SPLITS[s]
    out = [replace(r, split=assignment.get(r.key, "unassigned")) for r in records]
    return SplitManifest(out, seed, tuple(ratios), grouping)


# manifest i/o

def manifest_text(manifest: SplitManifest) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_HEADER)
    for r in manifest.records:
        w.writerow([r.source_id, r.grid_x, r.grid_y, r.label, r.path, f"{r.tissue_fraction:.6f}",
                    int(r.kept), r.split])
    return buf.getvalue()


def write_manifest(path, manifest: SplitManifest) -> None:
    Path(path).write_text(manifest_text(manifest))


def read_manifest(path) -> SplitManifest:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != MANIFEST_HEADER:
        raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}")
    records = [TileRecord(r[0], int(r[1]), int(r[2]), int(r[3]), r[4], float(r[5]), r[6] == "1", r[7])
               for r in rows[1:] if r]
    return SplitManifest(records)


def write_normalization(path, mean, std) -> None:
    fmt = lambda v: ",".join(repr(float(x)) for x in v)  # noqa: E731
    Path(path).write_text(f"mean={fmt(mean)}\nstd={fmt(std)}\n")


def read_normalization(path) -> tuple[np.ndarray, np.ndarray]:
    values = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            k, v = line.split("=", 1)
            values[k.strip()] = np.array([float(x) for x in v.split(",")])
    return values["mean"], values["std"]


def _read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def _write_png(path, pixels: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8), "RGB").save(path, format="PNG")


def compute_normalization(manifest: SplitManifest, root) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of [0,1]-scaled pixels over the training split."""
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for r in manifest.split("train"):
        px = _read_png(Path(root) / r.path).reshape(-1, 3) / 255.0
        total += px.sum(axis=0)
        total_sq += (px * px).sum(axis=0)
        count += len(px)
    if count == 0:
        raise ValueError("training split is empty; cannot compute normalisation")
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean * mean, 1e-12))
    return mean, std


def missing_files(records, root) -> list[str]:
    return [r.path for r in records if not (Path(root) / r.path).is_file()]


def load_images(records, root, mean, std) -> np.ndarray:
    """Normalised ``[N,3,H,W]`` float array for the given records."""
    missing = missing_files(records, root)
    if missing:
        raise FileNotFoundError(f"{len(missing)} tile file(s) missing: {', '.join(missing)}")
    imgs = [(_read_png(Path(root) / r.path) / 255.0 - mean) / std for r in records]
    if not imgs:
        return np.zeros((0, 3, 0, 0))
    return np.stack(imgs).transpose(0, 3, 1, 2).astype(np.float64)


# directory pipeline

def discover_sources(input_dir) -> list[tuple[str, int, Path]]:
    """``(source_id, label, path)`` for every PNG, labelled by ``case``/``control`` subdirectory
    or by a ``labels.csv`` (``filename,label``) next to flat inputs."""
    input_dir = Path(input_dir)
    if not input_dir.is_dir():
        raise FileNotFoundError(f"input directory {input_dir} does not exist")
    found = []
    for sub in sorted(p for p in input_dir.iterdir() if p.is_dir() and p.name in LABEL_DIRS):
        for png in sorted(sub.glob("*.png")):
            found.append((png.stem, LABEL_DIRS[sub.name], png))
    flat = sorted(input_dir.glob("*.png"))
    if flat:
        labels_file = input_dir / "labels.csv"
        if not labels_file.is_file():
            raise ValueError(f"{input_dir} has PNGs but no labels.csv or case/control subdirectories")
        with open(labels_file, newline="") as fh:
            labels = {row[0]: int(row[1]) for row in csv.reader(fh) if row and row[0] != "filename"}
        for png in flat:
            if png.name not in labels:
                raise ValueError(f"no label for {png.name} in labels.csv")
            found.append((png.stem, labels[png.name], png))
    if not found:
        raise ValueError(f"no PNG rasters found in {input_dir}")
    ids = [s for s, _, _ in found]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate raster names across label directories")
    return sorted(found)


@dataclass
class PreprocessResult:
    manifest: SplitManifest
    kept: int
    discarded: int


def preprocess_directory(input_dir, out_dir, tile: int = 1024, resize: int = 224,
                         white: float = 220, min_saturation: float = 0.04, min_tissue: float = 0.25,
                         seed: int = 0, grouping: str = "source", ratios=DEFAULT_RATIOS) -> PreprocessResult:
    """Tile, filter and resize every raster; write tiles, ``manifest.csv`` and ``normalization.txt``."""
    out_dir = Path(out_dir)
    tiles_dir = out_dir / "tiles"
    tiles_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for source_id, label, path in discover_sources(input_dir):
        raster = _read_png(path)
        for gx, gy, pixels in tile_image(raster, tile):
            keep, frac = roi_filter(pixels, white, min_saturation, min_tissue)
            rel = ""
            if keep:
                rel = f"tiles/{source_id}_x{gx:03d}_y{gy:03d}.png"
                _write_png(out_dir / rel, resize_tile(pixels, resize))
            records.append(TileRecord(source_id, gx, gy, label, rel, frac, keep))
    if not any(r.kept for r in records):
        raise ValueError("no tiles passed the ROI filter")
    manifest = split_dataset(records, ratios, seed, grouping)
    write_manifest(out_dir / "manifest.csv", manifest)
    write_normalization(out_dir / "normalization.txt", *compute_normalization(manifest, out_dir))
    kept = sum(r.kept for r in records)
    return PreprocessResult(manifest, kept, len(records) - kept)


# synthetic stand-in data

BACKGROUND = np.array([243, 238, 240])


def _blob_field(rng, size):
    return gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16, mode="wrap")


def _ring_field(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    field = rng.uniform(0, 1e-3, (size, size))
    n_glands = max(4, int(size * size / 900))
    for _ in range(n_glands):
        cy, cx = rng.uniform(0, size, 2)
        radius = rng.uniform(5, 11)
        dist = np.hypot(yy - cy, xx - cx)
        field = np.maximum(field, np.exp(-((dist - radius) ** 2) / (2 * 1.6 ** 2)))
    return field


def synthetic_tile(rng, label: int, coverage: float, color, noise, size: int) -> np.ndarray:
    """Pink-on-white tile with exactly ``round(coverage*size^2)`` stained pixels."""
    field = _ring_field(rng, size) if label == 1 else _blob_field(rng, size)
    k = int(round(coverage * size * size))
    mask = np.zeros(size * size, dtype=bool)
    mask[np.argsort(-field.reshape(-1), kind="stable")[:k]] = True
    base = np.where(mask[:, None], np.asarray(color)[None, :], BACKGROUND[None, :])
    return (base.reshape(size, size, 3) + noise).astype(np.uint8)


def make_synthetic_dataset(out_dir, n_per_class: int = 32, seed: int = 0, size: int = 224,
                           ratios=DEFAULT_RATIOS, grouping: str = "source") -> SplitManifest:
    """Two texture classes whose mean colours are paired exactly.

    Class 0 holds smooth low-frequency blobs, class 1 rings of glandular size.
    Tile ``i`` of both classes shares stain colour, stained-pixel count and
    pixel noise, so any rule on mean colour alone scores 50%.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "tiles").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_per_class):
        coverage = rng.uniform(0.3, 0.5)
        color = np.array([rng.integers(185, 216), rng.integers(90, 131), rng.integers(155, 186)])
        noise = rng.integers(-6, 7, (size, size, 3))
        for label in (0, 1):
            pixels = synthetic_tile(rng, label, coverage, color, noise, size)
            source_id = f"synth{i:03d}_{'case' if label else 'control'}"
            rel = f"tiles/{source_id}.png"
            _write_png(out_dir / rel, pixels)
            keep, frac = roi_filter(pixels)
            records.append(TileRecord(source_id, 0, 0, label, rel, frac, keep))
    manifest = split_dataset(records, ratios, seed, grouping)
    write_manifest(out_dir / "manifest.csv", manifest)
    write_normalization(out_dir / "normalization.txt", *compute_normalization(manifest, out_dir))
    return manifest
