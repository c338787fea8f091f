"""Reference curves: dense TCP positions with unit surface normals."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kinematics import beta_to_rotation

CSV_HEADER = ["x_mm", "y_mm", "z_mm", "nx", "ny", "nz"]


class CurveError(ValueError):
    pass


@dataclass(frozen=True)
class CurvePoint:
    p_star: np.ndarray
    n_star: np.ndarray


@dataclass(frozen=True)
class CurvePose:
    """Placement of a curve: centroid position (mm) and angle-product orientation."""

    p_curve: np.ndarray
    beta_curve: np.ndarray

    def to_dict(self):
        return {"p_curve_mm": [float(x) for x in self.p_curve], "beta_curve_rad": [float(x) for x in self.beta_curve]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["p_curve_mm"], dtype=float), np.array(d["beta_curve_rad"], dtype=float))


class Curve:
    """Ordered curve points ``p`` (K, 3) in mm with unit normals ``n`` (K, 3)."""

    def __init__(self, p, n, check=True):
        p = np.array(p, dtype=float).reshape(-1, 3)
        n = np.array(n, dtype=float).reshape(-1, 3)
        if len(p) != len(n):
            raise CurveError("positions and normals differ in length")
        if len(p) < 1:
            raise CurveError("empty curve")
        n = n / np.linalg.norm(n, axis=1, keepdims=True)
        steps = np.linalg.norm(np.diff(p, axis=0), axis=1)
        if check and np.any(steps <= 0):
            raise CurveError(f"repeated point at index {int(np.argmin(steps)) + 1}")
        self.p = p
        self.n = n
        self.s = np.concatenate([[0.0], np.cumsum(steps)])

    def __len__(self):
        return len(self.p)

    def __getitem__(self, k) -> CurvePoint:
        return CurvePoint(self.p[k], self.n[k])

    @property
    def length(self) -> float:
        return float(self.s[-1])

    @property
    def centroid(self) -> np.ndarray:
        return self.p.mean(axis=0)

    def tangents(self) -> np.ndarray:
        """Unit tangents from central differences (one-sided at the ends)."""
        if len(self.p) < 2:
            return np.tile([1.0, 0.0, 0.0], (len(self.p), 1))
        t = np.gradient(self.p, self.s, axis=0)
        return t / np.linalg.norm(t, axis=1, keepdims=True)

    def slice(self, i, j) -> "Curve":
        return Curve(self.p[i : j + 1], self.n[i : j + 1], check=False)


def gen_curve1(amplitudes=(60.0, 10.0), frequencies=(1.5, 5.0), length=1000.0, parabola_coeff=1.0 / 2000.0,
               samples=1000) -> Curve:
    """Multi-frequency sine on the parabolic surface ``z = c*x**2``.

    ``x`` runs over ``[-length/2, length/2]``; ``y`` is the sum of sines with
    ``frequencies`` counted in cycles over the full length.  Normals are the
    exact surface normals ``(-2cx, 0, 1)/|.|``.
    """
    if samples < 2:
        raise CurveError("samples must be >= 2")
    if len(amplitudes) != len(frequencies):
        raise CurveError("amplitudes and frequencies differ in length")
    x = np.linspace(-length / 2, length / 2, samples)
    u = (x + length / 2) / length
    y = np.zeros_like(x)
    for a, f in zip(amplitudes, frequencies):
        y += a * np.sin(2 * np.pi * f * u)
    c = parabola_coeff
    z = c * x**2
    n = np.stack([-2 * c * x, np.zeros_like(x), np.ones_like(x)], axis=1)
    return Curve(np.stack([x, y, z], axis=1), n)


def gen_curve2_analogue(chord=300.0, edge_radius=2000.0, span=800.0, samples=1000, twist_deg=20.0) -> Curve:
    """Leading edge of a swept, twisted blade.

    The edge is a planar arc of radius ``edge_radius`` and arc length ``span``
    in the xy plane.  The blade nose around the edge is a circle of radius
    ``0.04 * chord`` in each cross-section; the surface normal at the edge is
    the outward radial direction twisted about the edge tangent by an angle
    growing linearly from ``-twist`` to ``+twist`` along the span.  With
    ``span == 0`` the curve is the nose arc of the single cross-section.
    """
    if samples < 2:
        raise CurveError("samples must be >= 2")
    R = edge_radius
    r_nose = 0.04 * chord
    if span == 0:
        th = np.linspace(-np.pi / 2, np.pi / 2, samples)
        # cross-section plane at the arc apex (tangent = +y); nose centre behind the edge
        centre = np.array([R - r_nose, 0.0, 0.0])
        n = np.stack([np.cos(th), np.zeros_like(th), np.sin(th)], axis=1)
        return Curve(centre + r_nose * n, n)
    s = np.linspace(-span / 2, span / 2, samples)
    ang = s / R
    e_r = np.stack([np.cos(ang), np.sin(ang), np.zeros_like(ang)], axis=1)
    p = R * e_r
    phi = np.deg2rad(twist_deg) * (2 * s / span)
    n = np.cos(phi)[:, None] * e_r + np.sin(phi)[:, None] * np.array([0.0, 0.0, 1.0])
    return Curve(p, n)


def transform_curve(curve: Curve, pose: CurvePose) -> Curve:
    """Rotate about the centroid by ``beta_curve`` then move the centroid to ``p_curve``."""
    R = beta_to_rotation(pose.beta_curve)
    c = curve.centroid
    p = (curve.p - c) @ R.T + np.asarray(pose.p_curve, dtype=float)
    return Curve(p, curve.n @ R.T, check=False)


def resample(curve: Curve, spacing: float) -> Curve:
    """Uniform arc-length resampling; endpoints are kept exactly."""
    if spacing <= 0:
        raise CurveError("spacing must be positive")
    total = curve.length
    nseg = max(1, int(round(total / spacing)))
    st = np.linspace(0.0, total, nseg + 1)
    p = np.stack([np.interp(st, curve.s, curve.p[:, k]) for k in range(3)], axis=1)
    n = np.stack([np.interp(st, curve.s, curve.n[:, k]) for k in range(3)], axis=1)
    p[0], p[-1] = curve.p[0], curve.p[-1]
    return Curve(p, n)


def save_csv(curve: Curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for p, n in zip(curve.p, curve.n):
            w.writerow([repr(float(x)) for x in (*p, *n)])


def load_csv(path) -> Curve:
    """Load ``x_mm,y_mm,z_mm,nx,ny,nz`` rows.

    Normals off unit length by more than 1e-3 are rejected; smaller deviations
    are renormalised.
    """
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CurveError(f"{path}: empty file") from None
        if [h.strip() for h in header] != CSV_HEADER:
            raise CurveError(f"{path}:1: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise CurveError(f"{path}:{lineno}: expected 6 columns, got {len(row)}")
            try:
                vals = [float(x) for x in row]
            except ValueError:
                raise CurveError(f"{path}:{lineno}: non-numeric value") from None
            nn = np.linalg.norm(vals[3:])
            if abs(nn - 1.0) > 1e-3:
                raise CurveError(f"{path}:{lineno}: normal is not unit length (|n| = {nn:.6g})")
            if rows and np.allclose(vals[:3], rows[-1][:3], rtol=0, atol=0):
                raise CurveError(f"{path}:{lineno}: repeated point")
            rows.append(vals)
    if len(rows) < 2:
        raise CurveError(f"{path}: need at least two points")
    arr = np.array(rows)
    return Curve(arr[:, :3], arr[:, 3:])


GENERATORS = {"curve1": gen_curve1, "curve2": gen_curve2_analogue}
