"""Synthetic labeled corpus of urban-issue scenes.

A procedural generator stands in for real citizen submissions: textured
asphalt backgrounds with class-specific primitives (dark potholes, bright
litter piles, saturated parked vehicles), condition toggles (low light,
adverse weather, clutter, season tint), exact ground-truth boxes, and a
line-delimited JSON manifest. Everything is deterministic given the config
seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from fractions import Fraction
from pathlib import Path

import numpy as np

from .imaging import BYTE, UNIT, RasterImage, denormalize, write_pnm, read_pnm


class CorpusError(ValueError):
    pass


class ManifestParseError(CorpusError):
    def __init__(self, message, line_no=None):
        super().__init__(f"line {line_no}: {message}" if line_no else message)
        self.line_no = line_no


class DanglingImageError(CorpusError):
    pass


class IssueClass(IntEnum):
    INFRASTRUCTURE_DAMAGE = 0
    WASTE_DISPOSAL = 1
    ILLEGAL_PARKING_MISC = 2


CLASS_TOKENS = {
    IssueClass.INFRASTRUCTURE_DAMAGE: "infrastructure_damage",
    IssueClass.WASTE_DISPOSAL: "waste_disposal",
    IssueClass.ILLEGAL_PARKING_MISC: "illegal_parking_misc",
}
TOKEN_CLASSES = {v: k for k, v in CLASS_TOKENS.items()}

LIGHTING = ("daylight", "low_light")
WEATHER = ("clear", "adverse")
CLUTTER = ("simple", "cluttered")
SEASONS = ("spring", "summer", "autumn", "winter")

LOW_LIGHT_FACTOR = 0.35
WEATHER_NOISE_STD = 0.08


@dataclass(frozen=True)
class SceneConditions:
    lighting: str = "daylight"
    weather: str = "clear"
    clutter: str = "simple"
    season: str = "summer"

    def validate(self):
        for val, allowed, name in (
            (self.lighting, LIGHTING, "lighting"),
            (self.weather, WEATHER, "weather"),
            (self.clutter, CLUTTER, "clutter"),
            (self.season, SEASONS, "season"),
        ):
            if val not in allowed:
                raise CorpusError(f"bad {name} value: {val!r}")
        return self


@dataclass(frozen=True)
class GroundTruthRegion:
    bbox: tuple  # (x, y, w, h) ints
    cls: IssueClass

    def validate(self, width=None, height=None):
        x, y, w, h = self.bbox
        if w < 1 or h < 1:
            raise CorpusError(f"region extent must be >= 1, got {self.bbox}")
        if x < 0 or y < 0:
            raise CorpusError(f"region origin must be >= 0, got {self.bbox}")
        if width is not None and (x + w > width or y + h > height):
            raise CorpusError(f"region {self.bbox} exceeds image {width}x{height}")
        return self


@dataclass
class CorpusConfig:
    n_images: int = 5712
    class_mix: tuple = (0.45, 0.30, 0.25)
    low_light_rate: float = 0.35
    adverse_weather_rate: float = 0.20
    clutter_rate: float = 0.25
    image_size: int = 256
    seed: int = 42
    bounds: tuple = (44.9, 45.1, 24.9, 25.1)  # lat_min, lat_max, lon_min, lon_max

    def validate(self):
        problems = []
        if self.n_images < 0:
            problems.append("n_images must be >= 0")
        if len(self.class_mix) != 3 or abs(sum(self.class_mix) - 1.0) > 1e-9:
            problems.append("class_mix must be three fractions summing to 1")
        for name in ("low_light_rate", "adverse_weather_rate", "clutter_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                problems.append(f"{name} must lie in [0, 1]")
        if self.image_size < 64:
            problems.append("image_size must be >= 64")
        if problems:
            raise CorpusError("invalid corpus config: " + "; ".join(problems))
        return self


@dataclass
class ManifestRecord:
    image_path: str
    cls: IssueClass
    conditions: SceneConditions
    regions: list
    location: tuple  # (lat, lon)
    seed_used: int

    def validate(self):
        self.conditions.validate()
        if not self.regions:
            raise CorpusError(f"record {self.image_path}: regions must be non-empty")
        for r in self.regions:
            r.validate()
        return self


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def class_counts(self):
        counts = [0, 0, 0]
        for r in self.records:
            counts[int(r.cls)] += 1
        return tuple(counts)


def largest_remainder_counts(n: int, fractions) -> list[int]:
    """Apportion n items to fractions; remainders break ties by lower index."""
    quotas = [n * f for f in fractions]
    counts = [math.floor(q) for q in quotas]
    short = n - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


# --- scene rendering ---------------------------------------------------------

SEASON_TINT = {
    "spring": (0.97, 1.03, 0.97),
    "summer": (1.04, 1.0, 0.94),
    "autumn": (1.06, 0.98, 0.9),
    "winter": (1.04, 1.04, 1.1),
}

# two constraints: luminance far from the asphalt band (saliency rim) and
# strong chroma (separable from gray potholes and near-gray litter)
VEHICLE_PALETTE = [
    (1.00, 0.95, 0.25),  # taxi yellow
    (0.05, 0.08, 0.50),  # navy
    (0.45, 0.03, 0.05),  # deep red
    (0.03, 0.22, 0.05),  # dark green
]


def _mask_bbox(mask):
    ys, xs = np.nonzero(mask)
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    return (x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def _paint(img, mask, color):
    img[mask] = color


def _ellipse_mask(size, cx, cy, rx, ry, angle, rough, rng):
    yy, xx = np.mgrid[0:size, 0:size]
    ca, sa = math.cos(angle), math.sin(angle)
    u = (xx - cx) * ca + (yy - cy) * sa
    v = -(xx - cx) * sa + (yy - cy) * ca
    # roughen the rim with a low-order angular wobble
    theta = np.arctan2(v, u)
    wob = 1.0
    for k in range(2, 5):
        wob = wob + rough * float(rng.uniform(-1, 1)) * np.sin(k * theta + float(rng.uniform(0, 6.28)))
    return (u / rx) ** 2 + (v / ry) ** 2 <= wob


def _polygon_mask(size, pts):
    yy, xx = np.mgrid[0:size, 0:size]
    inside = np.ones((size, size), dtype=bool)
    n = len(pts)
    # convex polygon, vertices ordered by ascending angle: point is inside iff
    # it sits on the same side of every edge
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        inside &= (xx - x0) * (y1 - y0) - (yy - y0) * (x1 - x0) <= 0
    return inside


def _convex_poly(rng, cx, cy, radius, nverts):
    angles = np.sort(rng.uniform(0, 2 * math.pi, size=nverts))
    radii = rng.uniform(0.55, 1.0, size=nverts) * radius
    return [(cx + r * math.cos(a), cy + r * math.sin(a)) for a, r in zip(angles, radii)]


def _render_background(size, season, rng):
    base = rng.uniform(0.42, 0.55)
    img = np.empty((size, size, 3))
    img[:, :, :] = base
    img += rng.normal(0.0, 0.02, size=(size, size, 1))  # asphalt grain
    # lane noise: a few soft lighter streaks
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(1, 4))):
        horizontal = bool(rng.integers(0, 2))
        pos = rng.uniform(0.1, 0.9) * size
        width = rng.uniform(2, 5)
        coord = yy if horizontal else xx
        streak = np.exp(-((coord - pos) ** 2) / (2 * width * width))
        img += (streak * rng.uniform(0.02, 0.06))[:, :, None]
    tint = SEASON_TINT[season]
    img *= np.array(tint)[None, None, :]
    return np.clip(img, 0.0, 1.0)


def _add_potholes(img, rng, size, limit=None):
    regions = []
    for _ in range(int(rng.integers(1, 4)) if limit is None else limit):
        rx = float(rng.uniform(size * 0.07, size * 0.15))
        ry = float(rng.uniform(size * 0.06, size * 0.13))
        cx = float(rng.uniform(rx + 2, size - rx - 2))
        cy = float(rng.uniform(ry + 2, size - ry - 2))
        mask = _ellipse_mask(size, cx, cy, rx, ry, float(rng.uniform(0, math.pi)), 0.12, rng)
        if not mask.any():
            continue
        depth = float(rng.uniform(0.05, 0.15))
        shade = np.array([depth, depth, depth]) * rng.uniform(0.9, 1.1, size=3)
        _paint(img, mask, np.clip(shade, 0.0, 1.0))
        # rubble texture inside the cavity
        speck = rng.normal(0.0, 0.03, size=(mask.sum(), 1))
        img[mask] = np.clip(img[mask] + speck, 0.0, 1.0)
        regions.append(GroundTruthRegion(_mask_bbox(mask), IssueClass.INFRASTRUCTURE_DAMAGE))
    return regions


def _add_litter(img, rng, size, limit=None):
    regions = []
    for _ in range(int(rng.integers(1, 5)) if limit is None else limit):
        n_pieces = int(rng.integers(6, 12))
        cx = float(rng.uniform(size * 0.12, size * 0.88))
        cy = float(rng.uniform(size * 0.12, size * 0.88))
        cluster = np.zeros((size, size), dtype=bool)
        px, py = cx, cy
        for _ in range(n_pieces):
            r = float(rng.uniform(size * 0.03, size * 0.06))
            piece = _polygon_mask(size, _convex_poly(rng, px, py, r, int(rng.integers(3, 6))))
            if piece.any():
                bright = float(rng.uniform(0.85, 0.99))
                color = np.clip(
                    np.array([bright, bright, bright]) * rng.uniform(0.9, 1.05, size=3), 0.0, 1.0
                )
                _paint(img, piece, color)
                cluster |= piece
            # random-walk placement keeps pieces touching into one pile
            px += float(rng.uniform(-0.8 * r, 0.8 * r))
            py += float(rng.uniform(-0.8 * r, 0.8 * r))
            px = min(max(px, 2.0), size - 3.0)
            py = min(max(py, 2.0), size - 3.0)
        if cluster.any():
            regions.append(GroundTruthRegion(_mask_bbox(cluster), IssueClass.WASTE_DISPOSAL))
    return regions


def _add_vehicle(img, rng, size, limit=None):
    # hatched no-stopping zone, deliberately low contrast against asphalt
    yy, xx = np.mgrid[0:size, 0:size]
    zx = float(rng.uniform(0.05, 0.45)) * size
    zy = float(rng.uniform(0.05, 0.45)) * size
    zw = float(rng.uniform(0.35, 0.5)) * size
    zh = float(rng.uniform(0.25, 0.4)) * size
    zone = (xx >= zx) & (xx < zx + zw) & (yy >= zy) & (yy < zy + zh)
    stripes = ((xx + yy) // 9) % 2 == 0
    img[zone & stripes] += 0.03
    img[zone & ~stripes] -= 0.03
    np.clip(img, 0.0, 1.0, out=img)

    vw = int(rng.uniform(size * 0.22, size * 0.30))
    vh = int(rng.uniform(size * 0.16, size * 0.20))
    if rng.integers(0, 2):
        vw, vh = vh, vw
    # vehicle overlaps the hatched zone
    vx = int(min(max(zx + rng.uniform(-0.2, 0.6) * zw, 1), size - vw - 1))
    vy = int(min(max(zy + rng.uniform(-0.2, 0.6) * zh, 1), size - vh - 1))
    color = np.array(VEHICLE_PALETTE[int(rng.integers(0, len(VEHICLE_PALETTE)))])
    color = np.clip(color * rng.uniform(0.9, 1.05), 0.0, 1.0)
    img[vy : vy + vh, vx : vx + vw] = color
    # glass band, roof highlight and wheels give the body internal structure
    glass = np.array([0.10, 0.12, 0.16])
    band = img[vy + vh // 4 : vy + vh // 2, vx + vw // 8 : vx + vw - vw // 8]
    band[:] = glass if color.mean() > 0.35 else np.clip(color + 0.3, 0.0, 1.0)
    roof = img[vy + vh // 2 : vy + vh // 2 + max(2, vh // 8), vx + vw // 6 : vx + vw - vw // 6]
    roof[:] = np.clip(color * 1.25 + 0.08, 0.0, 1.0)
    wr = max(2, vh // 6)
    img[vy + vh - wr : vy + vh, vx + vw // 8 : vx + vw // 8 + wr] = 0.05
    img[vy + vh - wr : vy + vh, vx + vw - vw // 8 - wr : vx + vw - vw // 8] = 0.05
    return [GroundTruthRegion((vx, vy, vw, vh), IssueClass.ILLEGAL_PARKING_MISC)]


def _add_distractors(img, rng, size):
    """Neutral clutter: outlines, thin streaks, soft mid-tone blobs.

    None of these match a class primitive (not dark-filled, not bright-filled,
    not saturated-filled).
    """
    for _ in range(int(rng.integers(3, 7))):
        kind = int(rng.integers(0, 3))
        if kind == 0:  # hollow rectangle outline
            w = int(rng.uniform(size * 0.08, size * 0.2))
            h = int(rng.uniform(size * 0.08, size * 0.2))
            x = int(rng.uniform(1, size - w - 1))
            y = int(rng.uniform(1, size - h - 1))
            shade = float(rng.uniform(0.3, 0.7))
            img[y : y + h, x : x + 2] = shade
            img[y : y + h, x + w - 2 : x + w] = shade
            img[y : y + 2, x : x + w] = shade
            img[y + h - 2 : y + h, x : x + w] = shade
        elif kind == 1:  # thin streak
            yy, xx = np.mgrid[0:size, 0:size]
            x0 = rng.uniform(0, size)
            y0 = rng.uniform(0, size)
            ang = rng.uniform(0, math.pi)
            d = np.abs((xx - x0) * math.sin(ang) - (yy - y0) * math.cos(ang))
            mask = d < rng.uniform(1.0, 2.0)
            img[mask] = float(rng.uniform(0.3, 0.7))
        else:  # soft mid-tone blob
            cx = float(rng.uniform(8, size - 8))
            cy = float(rng.uniform(8, size - 8))
            r = float(rng.uniform(size * 0.03, size * 0.08))
            mask = _ellipse_mask(size, cx, cy, r, r, 0.0, 0.05, rng)
            img[mask] = np.clip(img[mask] + rng.uniform(-0.08, 0.08), 0.0, 1.0)
    np.clip(img, 0.0, 1.0, out=img)


def _add_weather(img, rng, size):
    img += rng.normal(0.0, WEATHER_NOISE_STD, size=img.shape)
    # rain/fog streak occlusions
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(2, 6))):
        x0 = rng.uniform(0, size)
        ang = rng.uniform(math.pi / 3, 2 * math.pi / 3)
        d = np.abs((xx - x0) * math.sin(ang) - (yy - 0.0) * math.cos(ang))
        mask = d < rng.uniform(0.8, 1.6)
        img[mask] = img[mask] * 0.6 + 0.3
    np.clip(img, 0.0, 1.0, out=img)


def render_scene(
    cls: IssueClass,
    conditions: SceneConditions,
    size: int = 256,
    seed: int = 0,
    max_primitives: int | None = None,
) -> tuple[RasterImage, list]:
    """Render one synthetic scene; deterministic in its arguments.

    Returns the unit-domain raster and exact bounding boxes of the class
    primitives. max_primitives=1 renders a single-issue scene. Low light
    scales the whole frame by 0.35 before any weather noise is added.
    """
    if size < 64:
        raise CorpusError(f"size must be >= 64 (primitives would be sub-pixel), got {size}")
    conditions.validate()
    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(cls)])))
    img = _render_background(size, conditions.season, rng)
    if cls == IssueClass.INFRASTRUCTURE_DAMAGE:
        regions = _add_potholes(img, rng, size, max_primitives)
    elif cls == IssueClass.WASTE_DISPOSAL:
        regions = _add_litter(img, rng, size, max_primitives)
    else:
        regions = _add_vehicle(img, rng, size, max_primitives)
    if conditions.clutter == "cluttered":
        _add_distractors(img, rng, size)
    if conditions.lighting == "low_light":
        img *= LOW_LIGHT_FACTOR
    if conditions.weather == "adverse":
        _add_weather(img, rng, size)
    raster = RasterImage(img, UNIT)
    for r in regions:
        r.validate(size, size)
    return raster, regions


# --- corpus generation ---------------------------------------------------------


def _quota_flags(n, rate, rng):
    """Exactly round(rate*n) True flags in a seeded shuffle order."""
    k = int(round(rate * n))
    flags = np.zeros(n, dtype=bool)
    flags[:k] = True
    rng.shuffle(flags)
    return flags


def generate_corpus(config: CorpusConfig, output_dir) -> DatasetManifest:
    """Write n_images P6 rasters plus manifest.jsonl under output_dir."""
    config.validate()
    out = Path(output_dir)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    n = config.n_images
    counts = largest_remainder_counts(n, config.class_mix)
    classes = np.repeat(np.arange(3), counts)
    master = np.random.default_rng(np.random.PCG64(np.random.SeedSequence([config.seed, 0xC0])))
    master.shuffle(classes)

    low = _quota_flags(n, config.low_light_rate, master)
    adverse = _quota_flags(n, config.adverse_weather_rate, master)
    cluttered = _quota_flags(n, config.clutter_rate, master)
    seasons = np.repeat(np.arange(4), largest_remainder_counts(n, (0.25, 0.25, 0.25, 0.25)))
    master.shuffle(seasons)
    lat_min, lat_max, lon_min, lon_max = config.bounds
    lats = master.uniform(lat_min, lat_max, size=n)
    lons = master.uniform(lon_min, lon_max, size=n)

    records = []
    for i in range(n):
        cls = IssueClass(int(classes[i]))
        conditions = SceneConditions(
            lighting="low_light" if low[i] else "daylight",
            weather="adverse" if adverse[i] else "clear",
            clutter="cluttered" if cluttered[i] else "simple",
            season=SEASONS[int(seasons[i])],
        )
        scene_seed = int(np.random.SeedSequence([config.seed, i]).generate_state(1)[0])
        raster, regions = render_scene(cls, conditions, config.image_size, scene_seed)
        rel = f"images/{i:06d}.ppm"
        write_pnm(denormalize(raster), out / rel)
        records.append(
            ManifestRecord(
                image_path=rel,
                cls=cls,
                conditions=conditions,
                regions=regions,
                location=(float(lats[i]), float(lons[i])),
                seed_used=scene_seed,
            )
        )

    manifest = DatasetManifest(records)
    save_manifest(manifest, out / "manifest.jsonl")
    return manifest


def record_to_json(rec: ManifestRecord) -> dict:
    return {
        "image": rec.image_path,
        "class": CLASS_TOKENS[rec.cls],
        "lighting": rec.conditions.lighting,
        "weather": rec.conditions.weather,
        "clutter": rec.conditions.clutter,
        "season": rec.conditions.season,
        "lat": rec.location[0],
        "lon": rec.location[1],
        "regions": [
            {"x": r.bbox[0], "y": r.bbox[1], "w": r.bbox[2], "h": r.bbox[3], "class": CLASS_TOKENS[r.cls]}
            for r in rec.regions
        ],
        "seed": rec.seed_used,
    }


def record_from_json(obj: dict, line_no=None) -> ManifestRecord:
    try:
        cls_token = obj["class"]
        if cls_token not in TOKEN_CLASSES:
            raise ManifestParseError(f"unknown class token {cls_token!r}", line_no)
        regions = []
        for r in obj["regions"]:
            rtok = r["class"]
            if rtok not in TOKEN_CLASSES:
                raise ManifestParseError(f"unknown class token {rtok!r}", line_no)
            regions.append(GroundTruthRegion((int(r["x"]), int(r["y"]), int(r["w"]), int(r["h"])), TOKEN_CLASSES[rtok]))
        rec = ManifestRecord(
            image_path=obj["image"],
            cls=TOKEN_CLASSES[cls_token],
            conditions=SceneConditions(obj["lighting"], obj["weather"], obj["clutter"], obj["season"]),
            regions=regions,
            location=(float(obj["lat"]), float(obj["lon"])),
            seed_used=int(obj["seed"]),
        )
    except ManifestParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestParseError(str(exc), line_no) from exc
    return rec.validate()


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in manifest.records:
            fh.write(json.dumps(record_to_json(rec), separators=(",", ":")) + "\n")


def load_manifest(path, check_images: bool = True) -> DatasetManifest:
    """Parse a manifest; validates every record and image reference."""
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"bad JSON: {exc}", line_no) from exc
            rec = record_from_json(obj, line_no)
            if check_images:
                img_path = path.parent / rec.image_path
                if not img_path.exists():
                    raise DanglingImageError(f"line {line_no}: missing image file {img_path}")
            records.append(rec)
    return DatasetManifest(records)


def split_train_val(manifest: DatasetManifest, train_fraction: float = 0.8, seed: int = 0):
    """Stratified split; validation takes floor((1-f)*n), per-class largest remainder."""
    if not (0.0 < train_fraction < 1.0):
        raise CorpusError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(manifest)
    if n == 0:
        raise CorpusError("cannot split an empty manifest")
    # exact decimal arithmetic: floor((1 - 0.8) * 10) must be 2, not the
    # binary-float 1.9999... -> 1
    n_val = int((1 - Fraction(str(train_fraction))) * n)

    by_class = {c: [] for c in IssueClass}
    for idx, rec in enumerate(manifest.records):
        by_class[rec.cls].append(idx)
    present = [c for c in IssueClass if by_class[c]]
    fractions = [len(by_class[c]) / n for c in present]
    val_counts = largest_remainder_counts(n_val, fractions)

    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence([seed, 0x5B])))
    val_idx = set()
    for c, k in zip(present, val_counts):
        pool = np.array(by_class[c])
        rng.shuffle(pool)
        val_idx.update(int(i) for i in pool[:k])

    train_recs = [r for i, r in enumerate(manifest.records) if i not in val_idx]
    val_recs = [r for i, r in enumerate(manifest.records) if i in val_idx]
    return DatasetManifest(train_recs), DatasetManifest(val_recs)


def load_image(manifest_path, rec: ManifestRecord) -> RasterImage:
    return read_pnm(Path(manifest_path).parent / rec.image_path)


def corpus_stats(manifest: DatasetManifest) -> dict:
    n = len(manifest)
    counts = manifest.class_counts()
    def rate(pred):
        return sum(1 for r in manifest.records if pred(r)) / n if n else 0.0
    return {
        "n_images": n,
        "class_counts": {CLASS_TOKENS[IssueClass(i)]: counts[i] for i in range(3)},
        "low_light_rate": rate(lambda r: r.conditions.lighting == "low_light"),
        "adverse_weather_rate": rate(lambda r: r.conditions.weather == "adverse"),
        "clutter_rate": rate(lambda r: r.conditions.clutter == "cluttered"),
        "regions_total": sum(len(r.regions) for r in manifest.records),
    }
