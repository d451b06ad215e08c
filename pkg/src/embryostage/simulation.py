"""Backward-time synthesis of a simulated embryo from a tracked reference.

The simulation starts at the last reference frame with a jittered random
subset of the real positions and walks toward frame 0. Each step moves every
object along the averaged, negated track directions of its nearest reference
cells, then fuses pairs of objects until the count matches the requested
fraction of the reference count. Objects are fused where the simulation is
densest relative to the reference (normalized neighbour counts inside a fixed
radius), so the density pattern of the real embryo survives the thinning.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import Embryo4D, Frame, validate_embryo
from .spatial import SpatialIndex

log = logging.getLogger(__name__)


class SimulationConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    p: float = 0.75  # fraction of the reference count to keep
    k: int = 5  # reference neighbours averaged for the flow
    density_radius: float = 50.0  # um
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.p <= 1:
            raise SimulationConfigError(f"p must lie in (0, 1], got {self.p}")
        if self.k < 1:
            raise SimulationConfigError(f"k must be >= 1, got {self.k}")
        if not self.density_radius > 0:
            raise SimulationConfigError(f"density_radius must be positive, got {self.density_radius}")


def target_count(p: float, n_embryo: int) -> int:
    """``p * n`` rounded half up."""
    return int(np.floor(p * n_embryo + 0.5))


def merge_count(n_sim: int, p: float, n_embryo: int) -> int:
    if n_sim < 0 or n_embryo < 0:
        raise ValueError("counts must be non-negative")
    return max(0, n_sim - target_count(p, n_embryo))


def init_simulation(ref: Embryo4D, cfg: SimConfig, rng=None) -> np.ndarray:
    """Jittered subset of the last reference frame, shape ``(round(p*N), 3)``.

    Each sampled position moves in a uniformly random direction by a uniform
    distance of at most half the gap to its nearest real neighbour.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    last = ref.frames[-1]
    n = len(last)
    if n < 2:
        raise SimulationConfigError("last reference frame needs at least 2 points")
    n_obj = target_count(cfg.p, n)
    if n_obj == 0:
        raise SimulationConfigError(f"p={cfg.p} keeps no objects out of {n}")
    chosen = np.sort(rng.choice(n, size=n_obj, replace=False))
    _, nn_d = SpatialIndex(last.points).nearest_other(chosen)
    direction = rng.normal(size=(n_obj, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    length = rng.uniform(0.0, 0.5, n_obj) * nn_d
    return last.points[chosen] + direction * length[:, None]


def flow_displacements(positions, ref_frame: Frame, k: int, index: SpatialIndex | None = None):
    """Mean negated displacement of the ``k`` nearest reference points.

    Neighbours without a displacement are skipped and the mean is taken over
    the rest. Returns ``(moves, stalled)``; stalled rows had no usable
    neighbour and get a zero move.
    """
    index = SpatialIndex(ref_frame.points) if index is None else index
    ids, _ = index.knn_batch(positions, k)
    d = ref_frame.displacements[ids]  # (m, k, 3)
    present = np.all(np.isfinite(d), axis=2)
    used = present.sum(axis=1)
    total = -np.where(present[..., None], d, 0.0).sum(axis=1)
    stalled = used == 0
    moves = total / np.maximum(used, 1)[:, None]
    return moves, stalled


def flow_displacement(position, ref_frame: Frame, k: int, index: SpatialIndex | None = None) -> np.ndarray:
    moves, _ = flow_displacements(np.asarray(position, dtype=np.float64)[None, :], ref_frame, k, index)
    return moves[0]


@dataclass
class DensityStats:
    rho_sim: np.ndarray
    rho_embryo: np.ndarray
    rho_diff: np.ndarray
    n_sim: int
    n_embryo: int


def density_difference(sim_positions, ref_points, radius: float, ref_index: SpatialIndex | None = None,
                       sim_index: SpatialIndex | None = None) -> DensityStats:
    """Normalized neighbour-count difference, simulation minus reference.

    Counts are taken around each simulated position: among the other simulated
    objects (self excluded) and among all reference points.
    """
    sim_positions = np.asarray(sim_positions, dtype=np.float64)
    ref_index = SpatialIndex(ref_points) if ref_index is None else ref_index
    sim_index = SpatialIndex(sim_positions) if sim_index is None else sim_index
    n_sim, n_emb = len(sim_positions), len(ref_index)
    rho_sim = sim_index.count_in_radius_batch(sim_positions, radius, exclude=np.arange(n_sim))
    rho_emb = ref_index.count_in_radius_batch(sim_positions, radius)
    diff = rho_sim / n_sim - rho_emb / n_emb
    return DensityStats(rho_sim, rho_emb, diff, n_sim, n_emb)


@dataclass
class MergeResult:
    positions: np.ndarray
    origin: np.ndarray  # output row of every input object
    requested: int
    performed: int
    pairs: list = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return self.performed < self.requested


def select_and_merge(positions, stats: DensityStats, n_merge: int, index: SpatialIndex | None = None) -> MergeResult:
    """Fuse the ``n_merge`` highest-``rho_diff`` objects with their nearest partner.

    Candidates are taken in descending ``rho_diff`` (lower id first on ties).
    Each object joins at most one fusion per call; the fused object sits at
    the pair midpoint, in the slot of the selected object.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    if n_merge <= 0:
        return MergeResult(positions.copy(), np.arange(n), max(n_merge, 0), 0)
    index = SpatialIndex(positions) if index is None else index
    order = np.lexsort((np.arange(n), -stats.rho_diff))
    consumed = np.zeros(n, dtype=bool)
    partner_of = np.full(n, -1)
    pairs = []
    # most candidates find a free partner among their first few neighbours
    head = order[: min(n, 2 * n_merge + 8)]
    near, _ = index.knn_batch(index.points[head], 8, exclude=head)
    near = dict(zip(head.tolist(), near))
    for c in order:
        if len(pairs) == n_merge:
            break
        if consumed[c]:
            continue
        mate = _first_free(near[c], consumed) if c in near else -1
        if mate < 0:
            mate = _nearest_free(index, c, consumed)
        if mate < 0:
            continue
        consumed[c] = consumed[mate] = True
        partner_of[mate] = c
        pairs.append((int(c), int(mate)))

    out = positions.copy()
    for c, mate in pairs:
        out[c] = 0.5 * (positions[c] + positions[mate])
    keep = partner_of < 0
    new_row = np.cumsum(keep) - 1
    origin = np.where(keep, new_row, new_row[np.maximum(partner_of, 0)])
    result = MergeResult(out[keep], origin, n_merge, len(pairs), pairs)
    if result.partial:
        warnings.warn(f"merge candidates exhausted: {result.performed} of {n_merge} fusions", RuntimeWarning)
    return result


def _first_free(ids, consumed) -> int:
    for j in ids:
        if j >= 0 and not consumed[j]:
            return int(j)
    return -1


def _nearest_free(index: SpatialIndex, c: int, consumed: np.ndarray) -> int:
    n = len(index)
    k = 8
    while True:
        ids, _ = index.knn_batch(index.points[c], min(k, n), exclude=c)
        mate = _first_free(ids[0], consumed)
        if mate >= 0:
            return mate
        if k >= n:
            return -1
        k *= 4


def random_delete(positions, n_delete: int, rng) -> MergeResult:
    """Baseline thinning: drop ``n_delete`` uniformly chosen objects."""
    n = len(positions)
    n_delete = max(0, min(n_delete, n - 1))
    keep = np.ones(n, dtype=bool)
    if n_delete:
        keep[rng.choice(n, size=n_delete, replace=False)] = False
    new_row = np.cumsum(keep) - 1
    origin = np.where(keep, new_row, -1)
    return MergeResult(np.asarray(positions)[keep].copy(), origin, n_delete, n_delete)


def simulate(ref: Embryo4D, cfg: SimConfig = SimConfig(), strategy: str = "density") -> Embryo4D:
    """Synthesize a simulated embryo from ``ref``, walking backwards in time.

    ``strategy="random"`` swaps density-driven fusion for random deletion; it
    exists as a baseline for judging the fusion rule.

    The returned embryo carries the reference's stage labels. Its
    displacements follow object lineage: an object at frame k moved from the
    object it descends from at frame k-1 (a fused object is the ancestor of
    both its sources; objects deleted by the baseline leave their successors
    untracked).
    """
    if strategy not in ("density", "random"):
        raise SimulationConfigError(f"unknown strategy {strategy!r}")
    report = validate_embryo(ref)
    report.raise_if_failed()
    rng = np.random.default_rng(cfg.seed)
    T = len(ref.frames) - 1

    pos = init_simulation(ref, cfg, rng)
    states = [None] * (T + 1)
    ancestors = [None] * (T + 1)  # ancestors[k+1][i] = row at frame k of object i at k+1
    states[T] = pos
    ref_index = SpatialIndex(ref.frames[T].points)
    for k in range(T - 1, -1, -1):
        moves, stalled = flow_displacements(pos, ref.frames[k + 1], cfg.k, ref_index)
        if stalled.any():
            log.debug("frame %d: %d objects without tracked neighbours", k + 1, int(stalled.sum()))
        pos = pos + moves

        ref_index = SpatialIndex(ref.frames[k].points)
        n_merge = merge_count(len(pos), cfg.p, len(ref.frames[k]))
        if strategy == "density" and n_merge:
            sim_index = SpatialIndex(pos)
            stats = density_difference(pos, None, cfg.density_radius, ref_index=ref_index, sim_index=sim_index)
            result = select_and_merge(pos, stats, n_merge, index=sim_index)
        elif strategy == "random":
            result = random_delete(pos, n_merge, rng)
        else:
            result = MergeResult(pos, np.arange(len(pos)), 0, 0)
        pos = result.positions
        states[k] = pos
        ancestors[k + 1] = result.origin

    frames = [Frame(0, states[0])]
    for k in range(1, T + 1):
        origin = ancestors[k]
        disp = np.full(states[k].shape, np.nan)
        tracked = origin >= 0
        disp[tracked] = states[k][tracked] - states[k - 1][origin[tracked]]
        frames.append(Frame(k, states[k], disp))
    return Embryo4D(frames, ref.label_map)


def density_profile(sim: Embryo4D, ref: Embryo4D, radius: float = 50.0) -> np.ndarray:
    """Per-frame mean ``|rho_diff|`` of a simulation against its reference."""
    out = np.empty(len(sim.frames))
    for k, (s, r) in enumerate(zip(sim.frames, ref.frames)):
        out[k] = np.mean(np.abs(density_difference(s.points, r.points, radius).rho_diff))
    return out
