"""Domain types shared by the simulator, the network and the pipeline.

Coordinates are micrometres, stage labels are hours post fertilization (hpf),
both stored as float64. A frame keeps its points as an ``(n, 3)`` array and the
per-point forward displacements as another ``(n, 3)`` array in which a row of
NaN marks an absent displacement (untracked point, or any point of frame 0).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np


class StageRangeError(IndexError):
    """Frame index outside the labelled range."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class StageLabelMap:
    """Uniform mapping from frame index to developmental time."""

    hpf_start: float
    hpf_end: float
    num_frames: int

    def __post_init__(self):
        if not self.hpf_end > self.hpf_start:
            raise ValueError(f"hpf_end ({self.hpf_end}) must exceed hpf_start ({self.hpf_start})")
        if self.num_frames < 2:
            raise ValueError(f"num_frames must be >= 2, got {self.num_frames}")

    def hpf(self, i: int) -> float:
        return frame_to_hpf(self, i)

    def all_hpf(self) -> np.ndarray:
        return np.array([frame_to_hpf(self, i) for i in range(self.num_frames)])


def frame_to_hpf(label_map: StageLabelMap, i: int) -> float:
    """Stage in hours of frame ``i``; both endpoints are reproduced exactly."""
    n = label_map.num_frames
    if not 0 <= i < n:
        raise StageRangeError(f"frame index {i} outside [0, {n})")
    if i == n - 1:
        return float(label_map.hpf_end)
    span = label_map.hpf_end - label_map.hpf_start
    return float(label_map.hpf_start + i * span / (n - 1))


@dataclass(frozen=True, eq=False)
class Frame:
    """Centroids of one time point, with aligned forward displacements.

    ``displacements[i]`` is the motion of point ``i`` from the previous frame
    to this one; NaN rows are absent.
    """

    index: int
    points: np.ndarray
    displacements: np.ndarray = None

    def __post_init__(self):
        pts = _frozen(self.points if np.size(self.points) else np.empty((0, 3)))
        object.__setattr__(self, "points", pts)
        if self.displacements is None:
            disp = _frozen(np.full(pts.shape, np.nan))
        else:
            disp = _frozen(self.displacements if np.size(self.displacements) else np.empty((0, 3)))
        object.__setattr__(self, "displacements", disp)

    def __len__(self):
        return len(self.points)

    @property
    def present(self) -> np.ndarray:
        """Boolean mask of points carrying a displacement."""
        return np.all(np.isfinite(self.displacements), axis=1)

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (
            self.index == other.index
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.displacements, other.displacements, equal_nan=True)
        )


@dataclass(frozen=True, eq=False)
class Embryo4D:
    frames: Sequence[Frame]
    label_map: StageLabelMap

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, k) -> Frame:
        return self.frames[k]

    def counts(self) -> np.ndarray:
        return np.array([len(f) for f in self.frames])

    def hpf(self, k: int) -> float:
        return frame_to_hpf(self.label_map, k)

    def __eq__(self, other):
        if not isinstance(other, Embryo4D):
            return NotImplemented
        return (
            self.label_map == other.label_map
            and len(self.frames) == len(other.frames)
            and all(a == b for a, b in zip(self.frames, other.frames))
        )


def uniform_labels(num_frames: int, hpf_start: float = 4.7, hpf_end: float = 10.0) -> StageLabelMap:
    return StageLabelMap(hpf_start, hpf_end, num_frames)


@dataclass
class ValidationReport:
    failures: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def raise_if_failed(self):
        if self.failures:
            shown = "; ".join(self.failures[:5])
            more = f" (+{len(self.failures) - 5} more)" if len(self.failures) > 5 else ""
            raise ValueError(f"invalid embryo: {shown}{more}")


def validate_embryo(embryo: Embryo4D) -> ValidationReport:
    """Collect structural problems instead of raising on the first one."""
    report = ValidationReport()
    fail = report.failures.append
    if len(embryo.frames) == 0:
        fail("embryo has no frames")
    if embryo.label_map.num_frames != len(embryo.frames):
        fail(f"label map covers {embryo.label_map.num_frames} frames but embryo has {len(embryo.frames)}")
    for k, frame in enumerate(embryo.frames):
        if frame.index != k:
            fail(f"frame at position {k} has index {frame.index} (indices must run 0,1,2,...)")
        pts, disp = frame.points, frame.displacements
        if pts.ndim != 2 or pts.shape[1] != 3:
            fail(f"frame {frame.index}: points have shape {pts.shape}, expected (n, 3)")
            continue
        if len(pts) == 0:
            fail(f"frame {frame.index}: empty frame")
        if disp.ndim != 2 or disp.shape != pts.shape:
            fail(f"frame {frame.index}: displacements shape {disp.shape} misaligned with points {pts.shape}")
        else:
            partial = np.isnan(disp).any(axis=1) & ~np.isnan(disp).all(axis=1)
            for i in np.flatnonzero(partial)[:3]:
                fail(f"frame {frame.index}, point {i}: partially absent displacement")
            for i in np.flatnonzero(np.isinf(disp).any(axis=1))[:3]:
                fail(f"frame {frame.index}, point {i}: infinite displacement")
        for i, j in zip(*np.nonzero(~np.isfinite(pts))):
            fail(f"frame {frame.index}, point {i}: non-finite {'xyz'[j]} coordinate")
    return report
