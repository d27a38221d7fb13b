"""Classical angle-method reader for clean synthetic dials.

The dial centre and radius come from the rendering convention in
:mod:`meterlab.dialgen`; only the pointer direction is estimated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dialgen import DialSpec, OutOfRangeError, dial_geometry

# annulus between the hub and the label ring: only the needle crosses it
SCAN_INNER = 0.18
SCAN_OUTER = 0.46
MIN_CONFIDENCE = 0.3
SWEEP_TOLERANCE = math.radians(1.0)


@dataclass(frozen=True)
class PointerEstimate:
    angle: float
    confidence: float
    ok: bool = True


def _wrap(a: float) -> float:
    """Map to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


def _darkness(img: np.ndarray, cx, cy, R) -> np.ndarray:
    lum = img[..., :3].astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    H, W = lum.shape
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    face = lum[(xx - cx) ** 2 + (yy - cy) ** 2 <= (0.5 * R) ** 2]
    level = np.median(face) if face.size else lum.max()
    return np.clip(level - lum, 0.0, None)


def detect_pointer_angle(img: np.ndarray, spec: DialSpec | None = None, bins: int = 360,
                         smooth: float = 3.0) -> PointerEstimate:
    """Scan the darkness profile over ``bins`` angle bins and refine its peak.

    The profile is circularly smoothed (``smooth`` bins) so that the broad needle
    response is well approximated by a parabola near its maximum.
    """
    H, W = img.shape[:2]
    cx, cy, R = dial_geometry(W)
    dark = _darkness(img, cx, cy, R)

    angles = np.arange(bins) * (2 * math.pi / bins)
    radii = np.linspace(SCAN_INNER * R, SCAN_OUTER * R, 32)
    xs = cx + radii[:, None] * np.sin(angles)[None, :]
    ys = cy - radii[:, None] * np.cos(angles)[None, :]
    samples = ndimage.map_coordinates(dark, [ys - 0.5, xs - 0.5], order=1, mode="nearest")
    profile = samples.mean(axis=0)
    if smooth > 0:
        profile = ndimage.gaussian_filter1d(profile, smooth, mode="wrap")

    i = int(np.argmax(profile))
    y0, y1, y2 = profile[i - 1], profile[i], profile[(i + 1) % bins]
    denom = y0 - 2 * y1 + y2
    delta = 0.0 if denom == 0 else 0.5 * (y0 - y2) / denom
    angle = _wrap((i + max(-0.5, min(0.5, delta))) * 2 * math.pi / bins)

    conf = _confidence(dark, cx, cy, R, angle)
    return PointerEstimate(angle, conf, ok=conf >= MIN_CONFIDENCE)


def _confidence(dark, cx, cy, R, angle) -> float:
    """Fraction of dark annulus pixels lying on the fitted ray."""
    H, W = dark.shape
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    dx, dy = xx - cx, yy - cy
    rho = np.hypot(dx, dy)
    annulus = (rho >= SCAN_INNER * R) & (rho <= SCAN_OUTER * R)
    peak = dark[annulus].max() if annulus.any() else 0.0
    if peak < 40.0:
        return 0.0
    is_dark = annulus & (dark > 0.5 * peak)
    total = int(is_dark.sum())
    if total == 0:
        return 0.0
    ux, uy = math.sin(angle), -math.cos(angle)
    along = dx * ux + dy * uy
    across = np.abs(-dx * uy + dy * ux)
    on_ray = (along > 0) & (across <= 0.06 * R + 1.0)
    return float((is_dark & on_ray).sum() / total)


def angle_to_reading(spec: DialSpec, angle: float, tolerance: float = SWEEP_TOLERANCE) -> float:
    lo, hi = sorted((spec.angle_start, spec.angle_end))
    best = None
    k0 = math.floor((lo - angle) / (2 * math.pi))
    for k in range(k0 - 1, k0 + 3):
        a = angle + 2 * math.pi * k
        gap = max(lo - a, a - hi, 0.0)
        if best is None or gap < best[0]:
            best = (gap, a)
    gap, a = best
    if gap > tolerance:
        raise OutOfRangeError(f"angle {angle:.4f} outside dial sweep [{lo:.4f}, {hi:.4f}]")
    a = min(max(a, lo), hi)
    frac = (a - spec.angle_start) / (spec.angle_end - spec.angle_start)
    return spec.range_min + frac * spec.span


def read(img: np.ndarray, spec: DialSpec) -> float | None:
    """Reading in dial units, or None when the pointer cannot be located."""
    est = detect_pointer_angle(img, spec)
    if not est.ok:
        return None
    try:
        return angle_to_reading(spec, est.angle)
    except OutOfRangeError:
        return None
