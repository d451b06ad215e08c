"""Procedural stand-in for a tracked embryo.

Cells sit in a thin shell on a sphere and cover a spherical cap whose opening
angle widens linearly over time, loosely mimicking epiboly. Every cell keeps
fixed intrinsic coordinates (area fraction within the cap, azimuth, radial
offset), so the cap growth moves it smoothly and its displacement between
frames is known exactly. New cells appear by splitting the cells with the
largest empty space around them, and a weak short-range repulsion spreads
crowded cells apart. A daughter's displacement is measured from its mother's
previous position. Flow, splitting and relaxation each get a fixed share of
``max_step`` (1/2, 1/4, 1/4) so no displacement exceeds it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Embryo4D, Frame, StageLabelMap
from .spatial import SpatialIndex


@dataclass(frozen=True)
class ReferenceConfig:
    n_frames: int = 370
    n_start: int = 1500
    n_end: int = 6000
    radius: float = 300.0  # sphere radius, um
    shell_thickness: float = 20.0  # um
    cap_start: float = 0.40 * np.pi  # cap half-angle at frame 0, rad
    cap_end: float = 0.90 * np.pi
    max_step: float | None = None  # bound on any per-frame displacement, um; None = automatic
    hpf_start: float = 4.7
    hpf_end: float = 10.0
    seed: int = 0

    def validate(self):
        if self.n_frames < 2:
            raise ValueError("reference needs at least 2 frames")
        if self.n_start < 10:
            raise ValueError("reference needs at least 10 starting points")
        if self.n_end < self.n_start:
            raise ValueError("n_end must be >= n_start")
        if not 0 < self.cap_start < self.cap_end <= np.pi:
            raise ValueError("cap angles must satisfy 0 < cap_start < cap_end <= pi")
        if self.radius <= 0 or self.shell_thickness < 0 or self.step_bound <= 0:
            raise ValueError("radius and max_step must be positive, shell_thickness non-negative")
        if self.shell_thickness >= self.radius:
            raise ValueError("shell_thickness must be smaller than radius")
        if self.max_flow_step() > self.step_bound / 2:
            raise ValueError(
                f"cap grows {self.max_flow_step():.3g} um/frame, more than max_step/2; "
                "use more frames or a larger max_step"
            )

    @property
    def step_bound(self) -> float:
        if self.max_step is not None:
            return float(self.max_step)
        return max(8.0, 2.2 * self.max_flow_step())

    def cap_angles(self) -> np.ndarray:
        return np.linspace(self.cap_start, self.cap_end, self.n_frames)

    def counts(self) -> np.ndarray:
        t = np.arange(self.n_frames) / (self.n_frames - 1)
        n = np.floor(self.n_start * (self.n_end / self.n_start) ** t + 0.5).astype(np.int64)
        n[0], n[-1] = self.n_start, self.n_end
        return np.maximum.accumulate(n)

    def max_flow_step(self) -> float:
        # a point's polar angle moves by at most the cap increment
        dtheta = (self.cap_end - self.cap_start) / (self.n_frames - 1)
        return 2 * (self.radius + self.shell_thickness / 2) * np.sin(dtheta / 2)


def _positions(frac, azim, radial, cap, radius):
    polar = np.arccos(np.clip(1.0 - frac * (1.0 - np.cos(cap)), -1.0, 1.0))
    r = radius + radial
    return np.column_stack([r * np.sin(polar) * np.cos(azim), r * np.sin(polar) * np.sin(azim), r * np.cos(polar)])


def _intrinsic(pos, cap, radius):
    r = np.linalg.norm(pos, axis=1)
    polar = np.arccos(np.clip(pos[:, 2] / r, -1.0, 1.0))
    frac = (1.0 - np.cos(polar)) / (1.0 - np.cos(cap))
    return np.clip(frac, 0.0, 1.0), np.arctan2(pos[:, 1], pos[:, 0]), r - radius


def generate_reference(cfg: ReferenceConfig = ReferenceConfig()) -> Embryo4D:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    caps, counts = cfg.cap_angles(), cfg.counts()
    half = cfg.shell_thickness / 2

    frac = rng.uniform(0.0, 1.0, cfg.n_start)
    azim = rng.uniform(-np.pi, np.pi, cfg.n_start)
    radial = rng.uniform(-half, half, cfg.n_start)

    prev = _positions(frac, azim, radial, caps[0], cfg.radius)
    frames = [Frame(0, prev)]
    for k in range(1, cfg.n_frames):
        pos = _positions(frac, azim, radial, caps[k], cfg.radius)
        frac, azim, radial, pos = _relax(pos, caps[k], cfg)
        mothers = np.arange(len(pos))
        while len(pos) < counts[k]:
            new = min(counts[k] - len(pos), len(pos))
            frac, azim, radial, pos, born = _split(frac, azim, radial, pos, new, caps[k], cfg, rng)
            mothers = np.concatenate([mothers, mothers[born]])
        disp = pos - prev[mothers]
        frames.append(Frame(k, pos, disp))
        prev = pos
    return Embryo4D(frames, StageLabelMap(cfg.hpf_start, cfg.hpf_end, cfg.n_frames))


def _split(frac, azim, radial, pos, n_new, cap, cfg, rng):
    """Add ``n_new`` daughters next to the cells with the largest voids."""
    index = SpatialIndex(pos)
    nn_id, nn_d = index.nearest_other()
    parents = np.lexsort((np.arange(len(pos)), -nn_d))[:n_new]

    p = pos[parents]
    normal = p / np.linalg.norm(p, axis=1, keepdims=True)
    away = p - pos[nn_id[parents]]
    away -= np.sum(away * normal, axis=1, keepdims=True) * normal
    norm = np.linalg.norm(away, axis=1, keepdims=True)
    fallback = np.cross(normal, rng.normal(size=p.shape))
    away = np.where(norm > 1e-12, away / np.maximum(norm, 1e-300), fallback / np.linalg.norm(fallback, axis=1, keepdims=True))
    limit = cfg.step_bound / 4
    step = np.minimum(0.5 * nn_d[parents], 0.9 * limit)[:, None]

    child = p + step * away
    for _ in range(3):
        f, a, r = _intrinsic(child, cap, cfg.radius)
        r = np.clip(r, -cfg.shell_thickness / 2, cfg.shell_thickness / 2)
        child = _positions(f, a, r, cap, cfg.radius)
        # clipping at the cap edge can move a daughter; pull it back toward its mother
        gap = np.linalg.norm(child - p, axis=1)
        far = gap > limit
        if not far.any():
            break
        child[far] = p[far] + (child[far] - p[far]) * (0.9 * limit / gap[far])[:, None]
    else:
        f, a, r = np.where(far, frac[parents], f), np.where(far, azim[parents], a), np.where(far, radial[parents], r)
        child[far] = p[far]

    return (
        np.concatenate([frac, f]),
        np.concatenate([azim, a]),
        np.concatenate([radial, r]),
        np.vstack([pos, child]),
        parents,
    )


def _relax(pos, cap, cfg, neighbours=6, gain=0.25):
    """Push cells closer than the mean spacing apart, tangentially."""
    n = len(pos)
    area = 2 * np.pi * cfg.radius**2 * (1 - np.cos(cap))
    spacing = np.sqrt(area / n)
    ids, d = SpatialIndex(pos).knn_batch(pos, neighbours + 1, exclude=np.arange(n))
    ok = ids >= 0
    safe = np.where(ok, ids, 0)
    vec = pos[:, None, :] - pos[safe]
    push = np.where(ok, np.maximum(0.0, spacing - d) / np.maximum(d, 1e-9), 0.0)
    move = gain * np.sum(vec * push[..., None], axis=1)
    normal = pos / np.linalg.norm(pos, axis=1, keepdims=True)
    move -= np.sum(move * normal, axis=1, keepdims=True) * normal
    length = np.linalg.norm(move, axis=1, keepdims=True)
    move *= np.minimum(1.0, (cfg.step_bound / 4) / np.maximum(length, 1e-300))
    f, a, r = _intrinsic(pos + move, cap, cfg.radius)
    r = np.clip(r, -cfg.shell_thickness / 2, cfg.shell_thickness / 2)
    return f, a, r, _positions(f, a, r, cap, cfg.radius)
