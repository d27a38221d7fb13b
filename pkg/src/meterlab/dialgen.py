"""Synthetic pointer-meter dials: rendering, corruptions, labels and manifests.

Angles are measured in radians clockwise from 12 o'clock. The dial is centred
on the canvas with radius ``DIAL_RADIUS * size``; image pixel ``(row, col)``
covers the continuous square ``[col, col+1) x [row, row+1)``.
"""
from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

DIAL_RADIUS = 0.46
SUPERSAMPLE = 4

CORRUPTION_KINDS = (
    "tilted",
    "low_light",
    "blur",
    "occlusion",
    "missing_part_info",
    "mirror_reflection",
    "high_exposure",
    "mirror_pollution",
)

FACE_STYLES = {
    # face rgb, tick rgb, pointer rgb, decoration
    "white": ((245, 245, 242), (25, 25, 25), (15, 15, 15), None),
    "cream": ((240, 232, 205), (40, 30, 20), (20, 15, 10), "inner_ring"),
    "silver": ((214, 218, 222), (20, 20, 30), (160, 20, 20), None),
    "blue_tint": ((215, 228, 245), (15, 25, 60), (10, 10, 10), "red_zone"),
    "green_tint": ((218, 240, 220), (15, 45, 20), (120, 10, 10), "inner_ring"),
    "white_red_zone": ((250, 250, 250), (0, 0, 0), (25, 25, 25), "red_zone"),
}


class OutOfRangeError(ValueError):
    pass


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class DialSpec:
    archetype_id: int
    range_min: float
    range_max: float
    index_value: float
    angle_start: float = -3 * math.pi / 4
    angle_end: float = 3 * math.pi / 4
    face_style: str = "white"

    def __post_init__(self):
        if not self.range_max > self.range_min:
            raise ValueError("range_max must exceed range_min")
        if not self.index_value > 0:
            raise ValueError("index_value must be positive")
        q = (self.range_max - self.range_min) / self.index_value
        if abs(q - round(q)) > 1e-9 * max(1.0, q):
            raise ValueError("range span is not a multiple of index_value")
        sweep = abs(self.angle_end - self.angle_start)
        if not 0 < sweep < 2 * math.pi:
            raise ValueError("angular sweep must lie in (0, 2*pi)")
        if self.face_style not in FACE_STYLES:
            raise ValueError(f"unknown face_style {self.face_style!r}")

    @property
    def span(self) -> float:
        return self.range_max - self.range_min

    @property
    def n_minor(self) -> int:
        return int(round(self.span / self.index_value))

    @property
    def label_decimals(self) -> int:
        return _decimals(Decimal(repr(self.index_value)) / 2)

    def reading_grid(self) -> np.ndarray:
        """Half-index grid ``range_min + k * index_value / 2``."""
        n = 2 * self.n_minor
        d = self.label_decimals
        return np.array([round(self.range_min + k * self.index_value / 2, d) for k in range(n + 1)])


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: float
    seed: int = 0


@dataclass
class SampleRecord:
    id: str
    image_path: str
    label: str
    reading: float
    archetype_id: int
    corruptions: list[str]
    split: str

    def to_json(self) -> str:
        return json.dumps({
            "id": self.id,
            "image_path": self.image_path,
            "label": self.label,
            "reading": self.label,
            "archetype_id": self.archetype_id,
            "corruptions": list(self.corruptions),
            "split": self.split,
        })

    @classmethod
    def from_json(cls, line: str) -> "SampleRecord":
        d = json.loads(line)
        return cls(d["id"], d["image_path"], d["label"], parse_label(d["reading"]),
                   int(d["archetype_id"]), list(d["corruptions"]), d["split"])


# ---------------------------------------------------------------- labels

def _decimals(x: Decimal) -> int:
    exp = x.normalize().as_tuple().exponent
    return max(0, -exp)


def format_label(reading: float, spec: DialSpec) -> str:
    text = f"{reading:.{spec.label_decimals}f}"
    if text.startswith("-") and float(text) == 0:
        text = text[1:]
    return text


_LABEL_RE = re.compile(r"[+-]?\d+(\.\d+)?")


def parse_label(label: str) -> float:
    if not isinstance(label, str) or not _LABEL_RE.fullmatch(label):
        raise LabelError(f"malformed reading label {label!r}")
    return float(label)


# ---------------------------------------------------------------- geometry

def reading_to_angle(spec: DialSpec, reading: float) -> float:
    tol = 1e-9 * max(1.0, abs(spec.span))
    if not spec.range_min - tol <= reading <= spec.range_max + tol:
        raise OutOfRangeError(f"reading {reading} outside [{spec.range_min}, {spec.range_max}]")
    frac = (reading - spec.range_min) / spec.span
    return spec.angle_start + frac * (spec.angle_end - spec.angle_start)


def dial_geometry(size: int) -> tuple[float, float, float]:
    """Centre (x, y) and radius of the dial disc in pixel units."""
    return size / 2.0, size / 2.0, DIAL_RADIUS * size


def _polar(cx, cy, rho, angle):
    return cx + rho * math.sin(angle), cy - rho * math.cos(angle)


# ---------------------------------------------------------------- rendering

# seven-segment layout in a unit box (x right, y down)
_SEGMENTS = {
    "a": ((0, 0), (1, 0)), "b": ((1, 0), (1, 0.5)), "c": ((1, 0.5), (1, 1)),
    "d": ((0, 1), (1, 1)), "e": ((0, 0.5), (0, 1)), "f": ((0, 0), (0, 0.5)),
    "g": ((0, 0.5), (1, 0.5)),
}
_DIGIT_SEGMENTS = {
    "0": "abcdef", "1": "bc", "2": "abged", "3": "abgcd", "4": "fgbc",
    "5": "afgcd", "6": "afgedc", "7": "abc", "8": "abcdefg", "9": "abcdfg",
}


def _draw_text(draw, text, cx, cy, height, color, stroke):
    w = 0.55 * height
    gap = 0.35 * height
    glyph_w = [0.25 * height if ch == "." else w for ch in text]
    total = sum(glyph_w) + gap * (len(text) - 1)
    x = cx - total / 2
    y0 = cy - height / 2
    for ch, gw in zip(text, glyph_w):
        if ch == ".":
            r = stroke * 0.7
            draw.ellipse([x - r, y0 + height - r, x + r, y0 + height + r], fill=color)
        else:
            for seg in _DIGIT_SEGMENTS[ch]:
                (u0, v0), (u1, v1) = _SEGMENTS[seg]
                draw.line([(x + u0 * w, y0 + v0 * height), (x + u1 * w, y0 + v1 * height)],
                          fill=color, width=max(1, int(round(stroke))))
        x += gw + gap


def _needle_mask(dx, dy, angle, R, width_scale=1.0):
    """Tapered needle from a short tail behind the hub out to 0.88 R."""
    ux, uy = math.sin(angle), -math.cos(angle)
    along = dx * ux + dy * uy
    across = np.abs(dy * ux - dx * uy)
    tip, tail = 0.88 * R, 0.15 * R
    half_hub, half_tip = 0.045 * R * width_scale, 0.012 * R
    t = (along + tail) / (tip + tail)
    half = half_hub + (half_tip - half_hub) * t
    return (along >= -tail) & (along <= tip) & (across <= half)


def _major_every(spec: DialSpec) -> int:
    return 10 if spec.n_minor >= 50 else 5


def render_dial(spec: DialSpec, reading: float, render_seed: int, size: int = 64) -> np.ndarray:
    """Render a clean dial as an ``(size, size, 3)`` uint8 array."""
    angle = reading_to_angle(spec, reading)
    rng = np.random.default_rng([int(render_seed) & 0xFFFFFFFF, spec.archetype_id])
    face, tick, pointer, deco = FACE_STYLES[spec.face_style]
    face = tuple(int(np.clip(c + rng.integers(-6, 7), 0, 255)) for c in face)
    pointer = tuple(int(np.clip(c + rng.integers(-10, 11), 0, 255)) for c in pointer)
    bg = tuple(int(v) for v in rng.integers(70, 140, size=3))

    ss = SUPERSAMPLE
    big = size * ss
    img = Image.new("RGB", (big, big), bg)
    draw = ImageDraw.Draw(img)
    cx, cy, R = dial_geometry(size)
    cx, cy, R = cx * ss, cy * ss, R * ss

    def box(r):
        return [cx - r - 0.5, cy - r - 0.5, cx + r - 0.5, cy + r - 0.5]

    def pt(rho, a):
        x, y = _polar(cx, cy, rho, a)
        return (x - 0.5, y - 0.5)

    draw.ellipse(box(R), fill=(45, 45, 50))
    draw.ellipse(box(0.93 * R), fill=face)

    a0, a1 = spec.angle_start, spec.angle_end
    if deco == "red_zone":
        # arc over the last fifth of the sweep, between label ring and ticks
        for k in range(40):
            a = a0 + (0.8 + 0.2 * k / 39) * (a1 - a0)
            draw.line([pt(0.74 * R, a), pt(0.80 * R, a)], fill=(200, 40, 40), width=max(1, ss))
    elif deco == "inner_ring":
        draw.ellipse(box(0.12 * R), outline=tick, width=max(1, ss // 2))

    major = _major_every(spec)
    for k in range(spec.n_minor + 1):
        a = a0 + k / spec.n_minor * (a1 - a0)
        if k % major == 0:
            draw.line([pt(0.72 * R, a), pt(0.90 * R, a)], fill=tick, width=int(1.5 * ss))
            value = spec.range_min + k * spec.index_value
            text = f"{value:g}"
            lx, ly = pt(0.60 * R, a)
            _draw_text(draw, text, lx, ly, 0.13 * R, tick, 0.5 * ss)
        else:
            draw.line([pt(0.80 * R, a), pt(0.90 * R, a)], fill=tick, width=max(1, int(0.8 * ss)))

    # needle and hub are rasterised exactly (PIL polygons are edge-inclusive)
    hi = np.asarray(img, dtype=np.float64).copy()
    coords = (np.arange(big) + 0.5) / ss
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cx0, cy0, R0 = dial_geometry(size)
    mask = _needle_mask(xx - cx0, yy - cy0, angle, R0, 1 + 0.1 * rng.uniform(-1, 1))
    mask |= (xx - cx0) ** 2 + (yy - cy0) ** 2 <= (0.07 * R0) ** 2
    hi[mask] = pointer
    img = Image.fromarray(hi.astype(np.uint8))

    out = np.asarray(img.resize((size, size), Image.BOX), dtype=np.float64)
    out += rng.normal(0.0, 1.5, size=out.shape)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- corruptions

def _check_image(img: np.ndarray):
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError(f"expected (H, W, 3) uint8 image, got {img.shape} {img.dtype}")


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def _homography(src, dst) -> np.ndarray:
    """3x3 matrix mapping ``src`` points onto ``dst`` points (4 pairs)."""
    A, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        A.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        A.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    h = np.linalg.solve(np.array(A, float), np.array(b, float))
    return np.append(h, 1.0).reshape(3, 3)


def _border_color(img):
    edge = np.concatenate([img[0], img[-1], img[:, 0], img[:, -1]])
    return tuple(int(v) for v in np.median(edge, axis=0))


def _tilted(img, s, rng):
    H, W, _ = img.shape
    d = s * 0.25 * W
    corners = np.array([(0, 0), (W, 0), (W, H), (0, H)], float)
    moved = corners + rng.uniform(-d, d, size=(4, 2))
    # PIL wants the output -> input mapping
    m = _homography(moved, corners).reshape(-1)[:8]
    out = Image.fromarray(img).transform((W, H), Image.PERSPECTIVE, tuple(m),
                                         resample=Image.BILINEAR, fillcolor=_border_color(img))
    return np.asarray(out)


def _low_light(img, s, rng):
    x = img / 255.0
    return _to_u8(255.0 * (1 - 0.7 * s) * x ** (1 + 1.5 * s))


def _high_exposure(img, s, rng):
    return _to_u8(img * (1 + 1.5 * s) + 60 * s)


def _blur(img, s, rng):
    sigma = 4.0 * s
    return _to_u8(ndimage.gaussian_filter(img.astype(np.float64), sigma=(sigma, sigma, 0), mode="nearest"))


def _occlusion(img, s, rng):
    H, W, _ = img.shape
    cx, cy, R = dial_geometry(W)
    area = s * 0.30 * math.pi * R * R
    aspect = rng.uniform(0.5, 2.0)
    w = min(W, math.sqrt(area * aspect))
    h = min(H, area / w)
    r = 0.6 * R * math.sqrt(rng.uniform())
    phi = rng.uniform(0, 2 * math.pi)
    ox, oy = cx + r * math.cos(phi), cy + r * math.sin(phi)
    x0, x1 = int(round(ox - w / 2)), int(round(ox + w / 2))
    y0, y1 = int(round(oy - h / 2)), int(round(oy + h / 2))
    out = img.copy()
    color = rng.integers(30, 220) + rng.integers(-15, 16, size=3)
    out[max(0, y0):max(0, y1), max(0, x0):max(0, x1)] = np.clip(color, 0, 255)
    return out


def _segment_fraction(t):
    """Fraction of a unit disc beyond the chord at distance ``t`` from centre."""
    alpha = math.acos(max(-1.0, min(1.0, t)))
    return (alpha - math.sin(alpha) * math.cos(alpha)) / math.pi


def _missing_part(img, s, rng):
    H, W, _ = img.shape
    _, _, R = dial_geometry(W)
    target = s * 0.25
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = (lo + hi) / 2
        if _segment_fraction(mid) > target:
            lo = mid
        else:
            hi = mid
    keep = int(round(W / 2 + hi * R))
    keep = min(max(keep, 1), W)
    side = int(rng.integers(4))
    # crop one side away, then pad back to the original canvas
    rot = np.rot90(img, side)
    cropped = rot[:, :keep]
    padded = np.zeros_like(rot)
    padded[:, :keep] = cropped
    return np.ascontiguousarray(np.rot90(padded, -side))


def _mirror_reflection(img, s, rng):
    H, W, _ = img.shape
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    cx, cy = rng.uniform(0.2, 0.8) * W, rng.uniform(0.2, 0.8) * H
    a, b = rng.uniform(0.15, 0.45) * W, rng.uniform(0.08, 0.25) * H
    th = rng.uniform(0, math.pi)
    u = (xx - cx) * math.cos(th) + (yy - cy) * math.sin(th)
    v = -(xx - cx) * math.sin(th) + (yy - cy) * math.cos(th)
    glow = np.exp(-((u / a) ** 2 + (v / b) ** 2))
    return _to_u8(img + (s * 230.0 * glow)[..., None])


def _mirror_pollution(img, s, rng):
    H, W, _ = img.shape
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    smudge = np.zeros((H, W))
    for _ in range(3 + int(round(5 * s))):
        cx, cy = rng.uniform(0, W), rng.uniform(0, H)
        sig = rng.uniform(0.05, 0.2) * W
        smudge += np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sig * sig))
    texture = ndimage.gaussian_filter(rng.uniform(size=(H, W)), sigma=max(1.0, W / 40))
    texture = (texture - texture.min()) / (np.ptp(texture) + 1e-12)
    m = np.clip(smudge * (0.5 + texture), 0, 1)[..., None]
    tint = np.array([110.0, 90.0, 60.0])
    return _to_u8(img * (1 - 0.7 * s * m) + tint * 0.3 * s * m)


_CORRUPTORS = {
    "tilted": _tilted,
    "low_light": _low_light,
    "blur": _blur,
    "occlusion": _occlusion,
    "missing_part_info": _missing_part,
    "mirror_reflection": _mirror_reflection,
    "high_exposure": _high_exposure,
    "mirror_pollution": _mirror_pollution,
}


def apply_corruption(img: np.ndarray, c: CorruptionSpec) -> np.ndarray:
    if c.kind not in _CORRUPTORS:
        raise ValueError(f"unknown corruption kind {c.kind!r}")
    if not 0.0 <= c.severity <= 1.0:
        raise ValueError(f"severity {c.severity} outside [0, 1]")
    _check_image(img)
    if c.severity == 0:
        return img.copy()
    rng = np.random.default_rng(int(c.seed) & 0xFFFFFFFFFFFFFFFF)
    out = _CORRUPTORS[c.kind](img, float(c.severity), rng)
    assert out.shape == img.shape and out.dtype == np.uint8
    return out


# ---------------------------------------------------------------- datasets

PAPER_COUNTS = (2645, 502, 1155, 2056, 1290, 2182)


def default_specs() -> list[DialSpec]:
    """Six archetypes in the order range 10/0.2, three of range 3/0.1, two of range 6/0.2."""
    return [
        DialSpec(1, 0.0, 10.0, 0.2, face_style="white"),
        DialSpec(2, 0.0, 3.0, 0.1, face_style="cream"),
        DialSpec(3, 0.0, 3.0, 0.1, face_style="silver"),
        DialSpec(4, 0.0, 3.0, 0.1, face_style="blue_tint"),
        DialSpec(5, 0.0, 6.0, 0.2, face_style="green_tint"),
        DialSpec(6, 0.0, 6.0, 0.2, face_style="white_red_zone"),
    ]


@dataclass
class CorruptionMix:
    count_probs: tuple = (0.35, 0.45, 0.20)  # P(0), P(1), P(2) corruptions
    weights: dict = field(default_factory=lambda: {
        "tilted": 0.22, "blur": 0.20, "low_light": 0.11, "high_exposure": 0.11,
        "mirror_reflection": 0.10, "occlusion": 0.10, "missing_part_info": 0.08,
        "mirror_pollution": 0.08,
    })
    severity: tuple = (0.2, 0.8)


@dataclass
class ArchetypeEntry:
    spec: DialSpec
    count: int


@dataclass
class GenConfig:
    archetypes: list[ArchetypeEntry]
    master_seed: int = 0
    image_size: int = 64
    train_ratio: float = 0.81
    corruption_mix: CorruptionMix | None = None

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "master_seed": self.master_seed,
            "image_size": self.image_size,
            "train_ratio": self.train_ratio,
            "archetypes": [dict(asdict(a.spec), count=a.count) for a in self.archetypes],
            "corruption_mix": None if self.corruption_mix is None else {
                "count_probs": list(self.corruption_mix.count_probs),
                "weights": dict(self.corruption_mix.weights),
                "severity": list(self.corruption_mix.severity),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        if d.get("schema_version", 1) != 1:
            raise ValueError(f"unsupported generator config version {d['schema_version']}")
        entries = []
        for a in d["archetypes"]:
            a = dict(a)
            count = int(a.pop("count"))
            entries.append(ArchetypeEntry(DialSpec(**a), count))
        mix = d.get("corruption_mix")
        if mix is not None:
            mix = CorruptionMix(tuple(mix["count_probs"]), dict(mix["weights"]), tuple(mix["severity"]))
        return cls(entries, int(d.get("master_seed", 0)), int(d.get("image_size", 64)),
                   float(d.get("train_ratio", 0.81)), mix)

    def spec_by_id(self) -> dict[int, DialSpec]:
        return {a.spec.archetype_id: a.spec for a in self.archetypes}


def save_config(obj, path) -> None:
    Path(path).write_text(json.dumps(obj.to_dict(), indent=2) + "\n")


def load_gen_config(path) -> GenConfig:
    return GenConfig.from_dict(json.loads(Path(path).read_text()))


def _largest_remainder(quotas: Sequence[float], total: int) -> list[int]:
    base = [int(math.floor(q)) for q in quotas]
    rest = total - sum(base)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    return base


def paper_profile(total: int | None = None, master_seed: int = 0, image_size: int = 64,
                  corrupted: bool = False) -> GenConfig:
    """Archetype mix of the reference benchmark, optionally rescaled to ``total`` samples."""
    counts = list(PAPER_COUNTS)
    if total is not None:
        s = sum(counts)
        counts = _largest_remainder([c * total / s for c in counts], total)
    entries = [ArchetypeEntry(spec, n) for spec, n in zip(default_specs(), counts)]
    return GenConfig(entries, master_seed, image_size, 0.81, CorruptionMix() if corrupted else None)


def _sample_rng(master_seed: int, sample_id: str) -> np.random.Generator:
    key = zlib.crc32(sample_id.encode("utf-8"))
    return np.random.default_rng([int(master_seed) & 0xFFFFFFFF, key, len(sample_id)])


def sample_id(archetype_id: int, k: int) -> str:
    return f"m{archetype_id}-{k:05d}"


def _archetype_of(sid: str) -> int:
    m = re.fullmatch(r"m(\d+)-(\d+)", sid)
    if not m:
        raise ValueError(f"malformed sample id {sid!r}")
    return int(m.group(1))


@dataclass
class SamplePlan:
    spec: DialSpec
    reading: float
    label: str
    render_seed: int
    corruptions: list[CorruptionSpec]


def plan_sample(config: GenConfig, sid: str) -> SamplePlan:
    """Everything needed to build sample ``sid``; depends only on (master_seed, sid)."""
    spec = config.spec_by_id()[_archetype_of(sid)]
    rng = _sample_rng(config.master_seed, sid)
    grid = spec.reading_grid()
    reading = float(grid[rng.integers(len(grid))])
    render_seed = int(rng.integers(2 ** 31))
    corruptions = []
    mix = config.corruption_mix
    if mix is not None:
        n = int(rng.choice(len(mix.count_probs), p=np.asarray(mix.count_probs) / np.sum(mix.count_probs)))
        kinds = [k for k in CORRUPTION_KINDS if mix.weights.get(k, 0) > 0]
        w = np.array([mix.weights[k] for k in kinds], float)
        chosen = rng.choice(len(kinds), size=min(n, len(kinds)), replace=False, p=w / w.sum())
        for i in sorted(chosen):
            sev = float(rng.uniform(*mix.severity))
            corruptions.append(CorruptionSpec(kinds[i], sev, int(rng.integers(2 ** 63))))
    return SamplePlan(spec, reading, format_label(reading, spec), render_seed, corruptions)


def render_sample(config: GenConfig, sid: str) -> np.ndarray:
    plan = plan_sample(config, sid)
    img = render_dial(plan.spec, plan.reading, plan.render_seed, config.image_size)
    for c in plan.corruptions:
        img = apply_corruption(img, c)
    return img


@dataclass
class Manifest:
    records: list[SampleRecord]
    meta: dict

    def split(self, name: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == name]

    def write(self, path) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(r.to_json() + "\n")
        meta_path = path.with_suffix(".meta.json")
        meta_path.write_text(json.dumps(self.meta, indent=2) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    records = [SampleRecord.from_json(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    meta_path = path.with_suffix(".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return Manifest(records, meta)


def generate_dataset(config: GenConfig) -> Manifest:
    """Plan every sample and assign the train/test split (no pixels rendered)."""
    if not config.archetypes:
        raise ValueError("generator config lists no archetypes")
    ids = [a.spec.archetype_id for a in config.archetypes]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate archetype ids in config: {ids}")
    counts = [a.count for a in config.archetypes]
    total = sum(counts)
    if total == 0:
        raise ValueError("generator config requests zero samples")
    n_train = int(math.floor(config.train_ratio * total + 0.5))
    train_per = _largest_remainder([c * n_train / total for c in counts], n_train)

    records = []
    for entry, k_train in zip(config.archetypes, train_per):
        aid = entry.spec.archetype_id
        perm = np.random.default_rng([int(config.master_seed) & 0xFFFFFFFF, 7919, aid]).permutation(entry.count)
        train_set = set(perm[:k_train].tolist())
        for k in range(entry.count):
            sid = sample_id(aid, k)
            plan = plan_sample(config, sid)
            records.append(SampleRecord(
                id=sid,
                image_path=f"images/{sid}.png",
                label=plan.label,
                reading=plan.reading,
                archetype_id=aid,
                corruptions=[c.kind for c in plan.corruptions],
                split="train" if k in train_set else "test",
            ))
    records.sort(key=lambda r: r.id)
    meta = {"config": config.to_dict(), "total": total, "n_train": n_train}
    return Manifest(records, meta)


def render_records(config: GenConfig, records: Sequence[SampleRecord]) -> np.ndarray:
    """Stack of images for ``records`` as ``(N, H, W, 3)`` uint8."""
    n = config.image_size
    out = np.empty((len(records), n, n, 3), dtype=np.uint8)
    for i, r in enumerate(records):
        out[i] = render_sample(config, r.id)
    return out


def _write_one(args):
    config_dict, sid, path = args
    img = render_sample(GenConfig.from_dict(config_dict), sid)
    Image.fromarray(img).save(path, format="PNG")
    return sid


def write_dataset(config: GenConfig, out_dir, workers: int = 1) -> Manifest:
    """Render PNGs and write ``manifest.jsonl`` (+ ``manifest.meta.json``) under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest = generate_dataset(config)
    jobs = [(config.to_dict(), r.id, out_dir / r.image_path) for r in manifest.records]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            list(pool.map(_write_one, jobs, chunksize=32))
    else:
        for job in jobs:
            _write_one(job)
    manifest.write(out_dir / "manifest.jsonl")
    return manifest


def load_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
