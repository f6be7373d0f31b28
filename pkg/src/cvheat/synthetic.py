"""Synthetic event scenes: moving squares, discs and triangles seen by an event camera.

A moving edge fires events proportional to how far it sweeps, so objects
appear as dense contour bands with a sparse interior, over uniform background
noise. Static objects produce no events.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from cvheat.detection import GroundTruth
from cvheat.events import EVENT_DTYPE, empty_events

CLASSES = ("square", "disc", "triangle")
_STEP_US = 500


@dataclass
class SceneObject:
    """``size`` is the half-width of a square, the radius of a disc and the
    circumradius of an (upward pointing, equilateral) triangle. Positions are
    pixels, velocities pixels per millisecond."""

    shape: str
    cx: float
    cy: float
    size: float
    vx: float = 0.0
    vy: float = 0.0

    def __post_init__(self):
        if self.shape not in CLASSES:
            raise ValueError(f"shape must be one of {CLASSES}")
        if self.size <= 0:
            raise ValueError("size must be positive")

    @property
    def class_id(self) -> int:
        return CLASSES.index(self.shape)

    def center(self, t_us: float) -> Tuple[float, float]:
        return self.cx + self.vx * t_us / 1000.0, self.cy + self.vy * t_us / 1000.0

    def vertices(self) -> np.ndarray:
        s = self.size
        if self.shape == "square":
            return np.array([[-s, -s], [s, -s], [s, s], [-s, s]])
        ang = np.deg2rad([-90.0, 30.0, 150.0])
        return np.stack([s * np.cos(ang), s * np.sin(ang)], axis=1)

    def perimeter(self) -> float:
        if self.shape == "disc":
            return 2 * np.pi * self.size
        v = self.vertices()
        return float(np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1).sum())

    def area(self) -> float:
        if self.shape == "disc":
            return np.pi * self.size**2
        v = self.vertices()
        x, y = v[:, 0], v[:, 1]
        return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))

    def extent(self) -> Tuple[float, float, float, float]:
        """Offsets ``(x1, y1, x2, y2)`` of the bounding box from the centre."""
        if self.shape == "disc":
            return -self.size, -self.size, self.size, self.size
        v = self.vertices()
        return v[:, 0].min(), v[:, 1].min(), v[:, 0].max(), v[:, 1].max()

    def sample_contour(self, rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
        """``n`` uniform points on the outline (relative to the centre) and outward normals."""
        u = rng.random(n)
        if self.shape == "disc":
            ang = 2 * np.pi * u
            nrm = np.stack([np.cos(ang), np.sin(ang)], axis=1)
            return self.size * nrm, nrm
        v = self.vertices()
        seg = np.roll(v, -1, axis=0) - v
        lengths = np.linalg.norm(seg, axis=1)
        cum = np.concatenate([[0.0], np.cumsum(lengths)])
        s = u * cum[-1]
        k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(v) - 1)
        frac = (s - cum[k]) / lengths[k]
        pts = v[k] + frac[:, None] * seg[k]
        # vertices are listed clockwise in image coordinates (y down)
        nrm = np.stack([seg[k, 1], -seg[k, 0]], axis=1) / lengths[k, None]
        return pts, nrm

    def sample_interior(self, rng: np.random.Generator, n: int) -> np.ndarray:
        x1, y1, x2, y2 = self.extent()
        out = np.zeros((0, 2))
        while len(out) < n:
            cand = rng.uniform([x1, y1], [x2, y2], size=(2 * n + 4, 2))
            out = np.concatenate([out, cand[self._inside(cand)]])
        return out[:n]

    def _inside(self, p: np.ndarray) -> np.ndarray:
        if self.shape == "disc":
            return np.hypot(p[:, 0], p[:, 1]) <= self.size
        v = self.vertices()
        seg = np.roll(v, -1, axis=0) - v
        cross = seg[None, :, 0] * (p[:, None, 1] - v[None, :, 1]) - seg[None, :, 1] * (p[:, None, 0] - v[None, :, 0])
        return (cross >= 0).all(axis=1)


@dataclass
class SyntheticScene:
    width: int
    height: int
    objects: List[SceneObject] = field(default_factory=list)
    contour_density: float = 1.0
    """Expected events per contour pixel per pixel of motion."""
    interior_rate: float = 0.02
    """Interior events per pixel of area per pixel of motion."""
    noise_rate: float = 0.3
    """Background events per pixel per second."""


def _events_array(x, y, t, p) -> np.ndarray:
    ev = np.zeros(len(x), dtype=EVENT_DTYPE)
    ev["x"], ev["y"], ev["t"], ev["p"] = x, y, t, p
    return ev


def generate_events(scene: SyntheticScene, duration_us: int, rng: np.random.Generator, t0: int = 0) -> np.ndarray:
    """Events of one scene over ``[t0, t0 + duration_us)``, sorted by time."""
    xs, ys, ts, ps = [], [], [], []
    for step_start in range(0, duration_us, _STEP_US):
        step = min(_STEP_US, duration_us - step_start)
        for obj in scene.objects:
            speed = np.hypot(obj.vx, obj.vy)
            if speed == 0:
                continue
            moved = speed * step / 1000.0
            n = rng.poisson(scene.contour_density * obj.perimeter() * moved)
            if n:
                t = rng.uniform(step_start, step_start + step, n)
                pts, nrm = obj.sample_contour(rng, n)
                facing = (nrm[:, 0] * obj.vx + nrm[:, 1] * obj.vy) / speed
                # edges parallel to the motion sweep little area
                keep = rng.random(n) < 0.25 + 0.75 * np.abs(facing)
                cx, cy = obj.center(t)
                xs.append(cx[keep] + pts[keep, 0])
                ys.append(cy[keep] + pts[keep, 1])
                ts.append(t[keep])
                ps.append(np.where(facing[keep] >= 0, 1, -1))
            n_in = rng.poisson(scene.interior_rate * obj.area() * moved)
            if n_in:
                t = rng.uniform(step_start, step_start + step, n_in)
                pts = obj.sample_interior(rng, n_in)
                cx, cy = obj.center(t)
                xs.append(cx + pts[:, 0])
                ys.append(cy + pts[:, 1])
                ts.append(t)
                ps.append(rng.choice([-1, 1], n_in))
        n_noise = rng.poisson(scene.noise_rate * scene.width * scene.height * step / 1e6)
        if n_noise:
            xs.append(rng.uniform(0, scene.width, n_noise))
            ys.append(rng.uniform(0, scene.height, n_noise))
            ts.append(rng.uniform(step_start, step_start + step, n_noise))
            ps.append(rng.choice([-1, 1], n_noise))
    if not xs:
        return empty_events()
    x = np.floor(np.concatenate(xs)).astype(np.int64)
    y = np.floor(np.concatenate(ys)).astype(np.int64)
    t = np.floor(np.concatenate(ts)).astype(np.int64) + t0
    p = np.concatenate(ps).astype(np.int8)
    inside = (x >= 0) & (x < scene.width) & (y >= 0) & (y < scene.height)
    ev = _events_array(x[inside], y[inside], t[inside], p[inside])
    return ev[np.argsort(ev["t"], kind="stable")]


def ground_truth(scene: SyntheticScene, t_us: float, image_id: int, min_visible: float = 0.25) -> List[GroundTruth]:
    """Normalised corner boxes of the objects at time ``t_us``, clipped to the frame.

    Objects with less than ``min_visible`` of their box inside the frame are dropped.
    """
    out = []
    for obj in scene.objects:
        cx, cy = obj.center(t_us)
        ex1, ey1, ex2, ey2 = obj.extent()
        x1, y1, x2, y2 = cx + ex1, cy + ey1, cx + ex2, cy + ey2
        full = (x2 - x1) * (y2 - y1)
        cx1, cy1 = max(x1, 0.0), max(y1, 0.0)
        cx2, cy2 = min(x2, float(scene.width)), min(y2, float(scene.height))
        if cx2 <= cx1 or cy2 <= cy1 or (cx2 - cx1) * (cy2 - cy1) < min_visible * full:
            continue
        box = (cx1 / scene.width, cy1 / scene.height, cx2 / scene.width, cy2 / scene.height)
        out.append(GroundTruth(image_id, obj.class_id, box))
    return out


def generate_synthetic(
    scene: SyntheticScene, duration_us: int, seed: int, interval: int = 10_000
) -> Tuple[np.ndarray, List[List[GroundTruth]]]:
    """Event stream of one scene plus per-slice ground truth (boxes at slice mid-time)."""
    rng = np.random.default_rng(seed)
    events = generate_events(scene, duration_us, rng)
    n_slices = -(-duration_us // interval)
    gts = [ground_truth(scene, (i + 0.5) * interval, i) for i in range(n_slices)]
    return events, gts


def random_scene(
    rng: np.random.Generator,
    resolution: int,
    max_objects: int = 3,
    noise_rate: float = 0.3,
    contour_density: float = 1.0,
    cell: int = 32,
) -> SyntheticScene:
    """1..``max_objects`` moving objects with well separated centres.

    Object centres fall in distinct ``cell``-pixel grid cells and the objects
    do not overlap.
    """
    n_obj = int(rng.integers(1, max_objects + 1))
    objs: List[SceneObject] = []
    used_cells = set()
    lo, hi = 0.08 * resolution, 0.16 * resolution
    for _ in range(200):
        if len(objs) == n_obj:
            break
        size = rng.uniform(lo, hi)
        cx, cy = rng.uniform(size, resolution - size, 2)
        c = (int(cx // cell), int(cy // cell))
        if c in used_cells:
            continue
        if any(np.hypot(cx - o.cx, cy - o.cy) < size + o.size + 6 for o in objs):
            continue
        speed = rng.uniform(0.3, 0.8)
        ang = rng.uniform(0, 2 * np.pi)
        shape = CLASSES[int(rng.integers(len(CLASSES)))]
        objs.append(SceneObject(shape, cx, cy, size, speed * np.cos(ang), speed * np.sin(ang)))
        used_cells.add(c)
    return SyntheticScene(resolution, resolution, objs, contour_density=contour_density, noise_rate=noise_rate)


def scene_stream(
    n_scenes: int,
    resolution: int,
    interval: int,
    seed: int,
    max_objects: int = 3,
    noise_rate: float = 0.3,
    contour_density: float = 1.0,
) -> Tuple[np.ndarray, List[GroundTruth]]:
    """Stream of independent random scenes, scene ``i`` filling slice ``i``.

    Object positions are given for the start of each slice, so the scene is
    shifted back by half a slice before generating events; ground truth is at
    mid-slice.
    """
    rng = np.random.default_rng(seed)
    chunks, gts = [], []
    for i in range(n_scenes):
        scene = random_scene(rng, resolution, max_objects, noise_rate, contour_density)
        for o in scene.objects:
            o.cx -= o.vx * interval / 2000.0
            o.cy -= o.vy * interval / 2000.0
        chunks.append(generate_events(scene, interval, rng, t0=i * interval))
        gts.extend(ground_truth(scene, interval / 2.0, i))
    events = np.concatenate(chunks) if chunks else empty_events()
    return events, gts
