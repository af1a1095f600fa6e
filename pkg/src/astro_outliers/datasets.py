"""Galaxy catalog categorisation, subset assembly, preprocessing and splits.

Also contains a procedural galaxy renderer so the whole pipeline can run
without the Galaxy Zoo images.
"""

import csv
import json
import os
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .exceptions import ConfigError, DataError, ParseError, ShapeError
from .knn import round_half_up


class Category(IntEnum):
    COMPLETELY_ROUND_SMOOTH = 0
    IN_BETWEEN_SMOOTH = 1
    CIGAR_SHAPED_SMOOTH = 2
    EDGE_ON = 3
    SPIRAL = 4


# Kaggle Galaxy Zoo truth-table header (after GalaxyID), 11 tasks / 37 responses.
TRUTH_TABLE_COLUMNS = tuple(
    f"Class{task}.{r}"
    for task, n in ((1, 3), (2, 2), (3, 2), (4, 2), (5, 4), (6, 2), (7, 3), (8, 7), (9, 3), (10, 3), (11, 6))
    for r in range(1, n + 1)
)

# threshold names -> truth-table columns; override for other catalog exports
DEFAULT_ALIASES = {
    "f_smooth": "Class1.1",
    "f_features_disk": "Class1.2",
    "f_edge_on_yes": "Class2.1",
    "f_edge_on_no": "Class2.2",
    "f_spiral_yes": "Class4.1",
    "f_completely_round": "Class7.1",
    "f_in_between": "Class7.2",
    "f_cigar": "Class7.3",
}

# (category, ((response, minimum), ...)); checked in order, first match wins
THRESHOLDS = (
    (Category.COMPLETELY_ROUND_SMOOTH, (("f_smooth", 0.469), ("f_completely_round", 0.50))),
    (Category.IN_BETWEEN_SMOOTH, (("f_smooth", 0.469), ("f_in_between", 0.50))),
    (Category.CIGAR_SHAPED_SMOOTH, (("f_smooth", 0.469), ("f_cigar", 0.50))),
    (Category.EDGE_ON, (("f_features_disk", 0.430), ("f_edge_on_yes", 0.602))),
    (Category.SPIRAL, (("f_edge_on_no", 0.715), ("f_spiral_yes", 0.619))),
)

RAW_SIZE = 424
FIRST_CROP = 170
DOWNSCALED = 80
FINAL_SIZE = 64


@dataclass(frozen=True)
class CatalogRow:
    galaxy_id: str
    responses: tuple
    columns: tuple = TRUTH_TABLE_COLUMNS

    def __post_init__(self):
        if len(self.responses) != 37 or len(self.columns) != 37:
            raise ParseError(f"galaxy {self.galaxy_id}: expected 37 responses, got {len(self.responses)}")
        for name, v in zip(self.columns, self.responses):
            if not (0.0 <= v <= 1.0):
                raise ParseError(f"galaxy {self.galaxy_id}: response {name}={v} outside [0, 1]")

    def __getitem__(self, column):
        return self.responses[self.columns.index(column)]


def row_from_values(galaxy_id, **named):
    """Build a CatalogRow from threshold names (``f_smooth=0.8`` etc.); other responses are 0."""
    values = dict.fromkeys(TRUTH_TABLE_COLUMNS, 0.0)
    for key, v in named.items():
        values[DEFAULT_ALIASES.get(key, key)] = float(v)
    return CatalogRow(str(galaxy_id), tuple(values[c] for c in TRUTH_TABLE_COLUMNS))


def categorize(row, aliases=None):
    """Category of a catalog row, or ``None`` when no threshold rule matches."""
    aliases = aliases or DEFAULT_ALIASES
    try:
        for category, rules in THRESHOLDS:
            if all(row[aliases[name]] >= minimum for name, minimum in rules):
                return category
    except (ValueError, KeyError) as e:
        raise ParseError(f"galaxy {row.galaxy_id}: missing catalog column ({e})") from e
    return None


def read_catalog(path):
    """Parse a comma-delimited truth table: id column, then 37 named responses."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty catalog") from None
        columns = tuple(h.strip() for h in header[1:])
        if len(columns) != 37:
            raise ParseError(f"{path}: expected 37 response columns, found {len(columns)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 38:
                raise ParseError(f"{path}:{lineno}: expected 38 fields, found {len(rec)}")
            try:
                values = tuple(float(v) for v in rec[1:])
            except ValueError as e:
                raise ParseError(f"{path}:{lineno}: {e}") from e
            rows.append(CatalogRow(rec[0].strip(), values, columns))
    return rows


def category_counts(rows, aliases=None):
    counts = {c: 0 for c in Category}
    counts[None] = 0
    for row in rows:
        counts[categorize(row, aliases)] += 1
    return counts


# ----------------------------------------------------------------------------
# preprocessing
# ----------------------------------------------------------------------------


def center_offset(size_in, size_out):
    return (size_in - size_out) // 2


def preprocess_windows():
    """Row/column start offsets of the two center crops."""
    return center_offset(RAW_SIZE, FIRST_CROP), center_offset(DOWNSCALED, FINAL_SIZE)


def center_crop(img, size):
    h, w = img.shape[:2]
    oy, ox = center_offset(h, size), center_offset(w, size)
    return img[oy:oy + size, ox:ox + size]


def bilinear_resize(img, out_h, out_w):
    """Bilinear resampling with half-pixel centres and edge clamping."""
    h, w, c = img.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((out_h, out_w, c), dtype=np.float64)
    for ch in range(c):
        out[..., ch] = ndimage.map_coordinates(img[..., ch], [yy, xx], order=1, mode="nearest")
    return out


def rotate_image(img, angle):
    """Rotate about the image centre by ``angle`` degrees; exposed corners become 0."""
    return ndimage.rotate(img, angle, axes=(1, 0), reshape=False, order=1, mode="constant", cval=0.0)


def preprocess(raw, angle=None):
    """424x424x3 8-bit image -> 64x64x3 float image in [0, 1].

    Center-crop to 170, optionally rotate by ``angle`` degrees, bilinear
    downscale to 80, center-crop to 64, divide by 255.
    """
    raw = np.asarray(raw)
    if raw.shape != (RAW_SIZE, RAW_SIZE, 3):
        raise ShapeError(f"expected a {RAW_SIZE}x{RAW_SIZE}x3 image, got {raw.shape}")
    img = center_crop(raw.astype(np.float64), FIRST_CROP)
    if angle is not None:
        img = rotate_image(img, angle)
    img = bilinear_resize(img, DOWNSCALED, DOWNSCALED)
    img = center_crop(img, FINAL_SIZE) / 255.0
    return np.clip(img, 0.0, 1.0)


def uniform_angle(rng):
    return float(rng.uniform(0.0, 360.0))


def plan_augmentation(n_available, n_extra, seed, angle_sampler=uniform_angle):
    """``n_extra`` (source index, angle) pairs drawn from ``n_available`` originals."""
    rng = np.random.default_rng(seed)
    sources = rng.integers(0, n_available, size=n_extra)
    return [(int(s), angle_sampler(rng)) for s in sources]


def augment_rotate(images, target_count, seed=0, angle_sampler=uniform_angle):
    """Append randomly rotated copies of random originals until ``target_count`` images."""
    images = np.asarray(images)
    if len(images) == 0:
        raise ConfigError("cannot augment an empty image set")
    if target_count < len(images):
        raise ConfigError(f"target_count {target_count} is below the current count {len(images)}")
    plan = plan_augmentation(len(images), target_count - len(images), seed, angle_sampler)
    if not plan:
        return images.copy()
    extra = np.stack([np.clip(rotate_image(images[s], a), 0.0, 1.0) for s, a in plan]).astype(images.dtype)
    return np.concatenate([images, extra])


# ----------------------------------------------------------------------------
# subsets
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class SubsetSpec:
    counts: dict
    inlier_category: int = 0
    name: str = ""

    def __post_init__(self):
        counts = {int(k): int(v) for k, v in self.counts.items()}
        object.__setattr__(self, "counts", counts)
        if any(v < 0 for v in counts.values()):
            raise ConfigError("subset counts must be nonnegative")
        if sum(counts.values()) <= 0:
            raise ConfigError("subset must contain at least one sample")
        if any(c not in tuple(Category) for c in counts):
            raise ConfigError(f"unknown category in {counts}")

    @property
    def total(self):
        return sum(self.counts.values())

    @property
    def n_outliers(self):
        return sum(v for c, v in self.counts.items() if c != self.inlier_category)

    @property
    def outlier_fraction(self):
        return self.n_outliers / self.total

    def scaled(self, factor):
        """Shrink to ``factor`` of the size, keeping an even split across outlier categories."""
        inliers = round_half_up(self.counts.get(self.inlier_category, 0) * factor)
        outlier_cats = sorted(c for c, v in self.counts.items() if c != self.inlier_category and v > 0)
        n_out = round_half_up(self.n_outliers * factor)
        counts = {self.inlier_category: inliers}
        counts.update(_even_split(n_out, outlier_cats))
        return SubsetSpec(counts, self.inlier_category, self.name)


def _even_split(total, keys):
    if not keys:
        return {}
    base, extra = divmod(total, len(keys))
    return {k: base + (1 if i < extra else 0) for i, k in enumerate(keys)}


SUBSETS = {
    "subset1": SubsetSpec({0: 16000, 2: 1778}, 0, "subset1"),
    "subset2": SubsetSpec({0: 16000, 3: 1778}, 0, "subset2"),
    "subset3": SubsetSpec({0: 16000, 1: 1778}, 0, "subset3"),
    "subset4": SubsetSpec({0: 16000, 4: 1778}, 0, "subset4"),
    "subset5": SubsetSpec({0: 16000, **_even_split(1778, [1, 2, 3, 4])}, 0, "subset5"),
}


@dataclass(frozen=True)
class PlannedSample:
    sample_id: str
    source_id: str
    category: int
    angle: float = None


def plan_subset(ids_by_category, spec, seed=0):
    """Choose source images (and rotations, when short) for every requested sample."""
    rng = np.random.default_rng(seed)
    plan = []
    for cat in sorted(spec.counts):
        want = spec.counts[cat]
        if want == 0:
            continue
        available = list(ids_by_category.get(cat, ()))
        if not available:
            raise DataError(f"no source images for category {cat}")
        if want <= len(available):
            chosen = rng.choice(len(available), size=want, replace=False)
            plan.extend(PlannedSample(available[i], available[i], cat) for i in chosen)
            continue
        order = rng.permutation(len(available))
        plan.extend(PlannedSample(available[i], available[i], cat) for i in order)
        extra = plan_augmentation(len(available), want - len(available), rng.integers(2**63))
        for j, (src, angle) in enumerate(extra):
            sid = available[src]
            plan.append(PlannedSample(f"{sid}_rot{j}", sid, cat, angle))
    return plan


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    categories: np.ndarray
    ids: list = field(default_factory=list)
    seed: int = None
    provenance: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=bool)
        self.categories = np.asarray(self.categories, dtype=np.int8)
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.labels))]
        n = len(self.images)
        if not (len(self.labels) == len(self.categories) == len(self.ids) == n):
            raise ShapeError("images, labels, categories and ids must have equal length")

    def __len__(self):
        return len(self.labels)

    @property
    def outlier_fraction(self):
        return float(self.labels.mean()) if len(self) else 0.0

    def take(self, idx):
        idx = np.asarray(idx, dtype=int)
        return LabeledDataset(self.images[idx], self.labels[idx], self.categories[idx],
                              [self.ids[i] for i in idx], self.seed, self.provenance)


class ImageDirectory:
    """Loads ``<galaxy_id>.jpg`` (or ``.png``) 8-bit RGB images from a directory."""

    def __init__(self, path):
        self.path = Path(path)

    def __call__(self, galaxy_id):
        from PIL import Image

        for ext in (".jpg", ".png", ".jpeg"):
            p = self.path / f"{galaxy_id}{ext}"
            if p.exists():
                with Image.open(p) as im:
                    arr = np.asarray(im.convert("RGB"))
                if arr.shape != (RAW_SIZE, RAW_SIZE, 3):
                    raise ShapeError(f"{p}: expected {RAW_SIZE}x{RAW_SIZE}x3, got {arr.shape}")
                return arr
        raise DataError(f"no image for galaxy {galaxy_id} in {self.path}")


def build_subset(catalog, image_source, spec, seed=0, aliases=None):
    """Assemble a labelled dataset from catalog rows and raw images.

    ``image_source`` maps a galaxy id to its raw 424x424x3 image.  Samples
    of the inlier category are labelled False, all others True.
    """
    ids_by_category = {}
    for row in catalog:
        cat = categorize(row, aliases)
        if cat is not None:
            ids_by_category.setdefault(int(cat), []).append(row.galaxy_id)
    plan = plan_subset(ids_by_category, spec, seed)
    images = np.empty((len(plan), FINAL_SIZE, FINAL_SIZE, 3), dtype=np.float32)
    for i, p in enumerate(plan):
        images[i] = preprocess(image_source(p.source_id), p.angle)
    cats = np.array([p.category for p in plan])
    return LabeledDataset(images, cats != spec.inlier_category, cats,
                          [p.sample_id for p in plan], seed, f"catalog:{spec.name}")


def stratified_split_indices(labels, ratio=0.7, seed=0):
    """Seeded train/test index split preserving the label proportions.

    Each class contributes ``round(n_class * (1 - ratio))`` test samples.
    """
    if not 0 < ratio < 1:
        raise ConfigError("split ratio must lie in (0, 1)")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for value in np.unique(labels):
        members = np.flatnonzero(labels == value)
        members = members[rng.permutation(len(members))]
        n_test = round_half_up(len(members) * (1 - ratio))
        test.append(members[:n_test])
        train.append(members[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def split(dataset, ratio=0.7, seed=0):
    train_idx, test_idx = stratified_split_indices(dataset.labels, ratio, seed)
    return dataset.take(train_idx), dataset.take(test_idx)


# ----------------------------------------------------------------------------
# synthetic galaxies
# ----------------------------------------------------------------------------

# axis-ratio ranges of the smooth/elliptical renders
_AXIS_RATIO = {
    Category.COMPLETELY_ROUND_SMOOTH: (0.92, 1.0),
    Category.IN_BETWEEN_SMOOTH: (0.5, 0.8),
    Category.CIGAR_SHAPED_SMOOTH: (0.15, 0.35),
}
_COLOR = np.array([1.0, 0.85, 0.7])


def synth_galaxy(category, seed, size=FINAL_SIZE, noise=0.02):
    """Render one ``size x size x 3`` galaxy image of the given morphology."""
    if category is None or int(category) not in tuple(Category):
        raise ConfigError(f"cannot render category {category!r}")
    category = Category(int(category))
    rng = np.random.default_rng(seed)
    c = (size - 1) / 2.0
    cy, cx = c + rng.uniform(-1, 1, size=2)
    theta = rng.uniform(0, np.pi)
    amp = rng.uniform(0.6, 0.9)
    sigma = rng.uniform(4.0, 7.0) * size / 64.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)

    if category in _AXIS_RATIO:
        q = rng.uniform(*_AXIS_RATIO[category])
        light = np.exp(-0.5 * ((u / sigma) ** 2 + (v / (q * sigma)) ** 2))
    elif category == Category.EDGE_ON:
        length = sigma * rng.uniform(1.6, 2.2)
        thick = sigma * rng.uniform(0.12, 0.18)
        light = np.exp(-0.5 * ((u / length) ** 2 + (v / thick) ** 2))
        lane = 1.0 - 0.8 * np.exp(-0.5 * (v / (0.35 * thick)) ** 2)
        light = light * lane
    else:
        r = np.hypot(u, v) + 1e-9
        phi = np.arctan2(v, u)
        pitch = np.deg2rad(rng.uniform(15, 25))
        phase = phi - np.log(r / sigma) / np.tan(pitch)
        arms = (0.5 * (1 + np.cos(2 * phase))) ** 3
        disk = np.exp(-r / (1.2 * sigma))
        bulge = np.exp(-0.5 * (r / (0.45 * sigma)) ** 2)
        light = 0.55 * bulge + 0.8 * arms * disk * (1 - np.exp(-(r / (0.6 * sigma)) ** 2))
        light /= light.max()

    color = _COLOR * rng.uniform(0.9, 1.1, size=3)
    img = amp * light[..., None] * color
    if noise:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _render_seed(seed, category, i):
    return int(np.random.SeedSequence([seed, int(category), i]).generate_state(1)[0])


def synth_dataset(spec, seed=0, noise=0.02, size=FINAL_SIZE):
    """Render every sample of ``spec`` procedurally."""
    images, cats, ids = [], [], []
    for cat in sorted(spec.counts):
        for i in range(spec.counts[cat]):
            images.append(synth_galaxy(cat, _render_seed(seed, cat, i), size, noise))
            cats.append(cat)
            ids.append(f"synth-c{cat}-{i}")
    cats = np.array(cats)
    imgs = np.stack(images).astype(np.float32) if images else np.zeros((0, size, size, 3), np.float32)
    return LabeledDataset(imgs, cats != spec.inlier_category, cats, ids, seed,
                          f"synthetic:{spec.name or 'custom'}:noise={noise}")


# ----------------------------------------------------------------------------
# dataset cache
# ----------------------------------------------------------------------------

CACHE_FORMAT = "astro-outliers-dataset/1"


def save_dataset(dataset, directory):
    """Write manifest.json plus raw little-endian arrays into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    dataset.images.astype("<f4").tofile(d / "images.f32")
    dataset.labels.astype("u1").tofile(d / "labels.u8")
    dataset.categories.astype("i1").tofile(d / "categories.i8")
    (d / "ids.txt").write_text("\n".join(dataset.ids) + ("\n" if dataset.ids else ""))
    manifest = {
        "format": CACHE_FORMAT,
        "count": len(dataset),
        "dims": list(dataset.images.shape[1:]),
        "n_outliers": int(dataset.labels.sum()),
        "seed": dataset.seed,
        "provenance": dataset.provenance,
        "files": {"images": "images.f32", "labels": "labels.u8",
                  "categories": "categories.i8", "ids": "ids.txt"},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return d


def load_dataset(directory):
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"{d}: unreadable dataset manifest ({e})") from e
    if manifest.get("format") != CACHE_FORMAT:
        raise DataError(f"{d}: unsupported dataset format {manifest.get('format')!r}")
    n = manifest["count"]
    dims = tuple(manifest["dims"])
    images = np.fromfile(d / "images.f32", dtype="<f4")
    if images.size != n * int(np.prod(dims)):
        raise DataError(f"{d}: image payload has {images.size} values, expected {n * int(np.prod(dims))}")
    labels = np.fromfile(d / "labels.u8", dtype="u1").astype(bool)
    cats = np.fromfile(d / "categories.i8", dtype="i1")
    ids = (d / "ids.txt").read_text().splitlines()
    return LabeledDataset(images.astype(np.float32).reshape((n,) + dims), labels, cats, ids,
                          manifest.get("seed"), manifest.get("provenance", ""))


def dataset_exists(directory):
    return os.path.exists(os.path.join(directory, "manifest.json"))
