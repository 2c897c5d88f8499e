"""Symbolic reference agents.

``PositionDict`` is the dictionary agent: it path-integrates saccades from the
origin, stores the label seen at each absolute position, and predicts by
looking up the position the current saccade lands on.  ``TransitionCache`` is
the alternative memory that stores (label, saccade) -> next label tuples and
so cannot answer saccades it has never seen.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import Curve, curve_from_hits
from .worldgen import N_LABELS, Episode, TrainConstraint, generate_scene, sample_episode

GRID = 1e-4
MATCH_TOL = 1e-6
ORACLE_CSV_HEADER = ("timestep", "oracle_acc", "cache_acc")


class _QuantMap:
    """Map from (tag, 2-D point) to a value, matching points within ``tol``.

    Points are bucketed on a ``grid``-spaced lattice; a lookup checks the
    query's cell and its eight neighbours, so matches straddling a cell edge
    are still found.
    """

    def __init__(self, grid: float = GRID, tol: float = MATCH_TOL):
        self.grid = grid
        self.tol = tol
        self.cells: dict[tuple, list[list]] = {}

    def _cell(self, p) -> tuple[int, int]:
        return int(round(p[0] / self.grid)), int(round(p[1] / self.grid))

    def _find(self, tag, p) -> Optional[list]:
        cx, cy = self._cell(p)
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for entry in self.cells.get((tag, cx + dx, cy + dy), ()):
                    q = entry[0]
                    if abs(q[0] - p[0]) <= self.tol and abs(q[1] - p[1]) <= self.tol:
                        return entry
        return None

    def get(self, tag, p):
        e = self._find(tag, p)
        return None if e is None else e[1]

    def put(self, tag, p, value) -> None:
        e = self._find(tag, p)
        if e is not None:
            e[1] = value
            return
        cx, cy = self._cell(p)
        self.cells.setdefault((tag, cx, cy), []).append([(float(p[0]), float(p[1])), value])

    def __len__(self) -> int:
        return sum(len(v) for v in self.cells.values())


@dataclass
class PositionDict:
    entries: _QuantMap = field(default_factory=_QuantMap)
    p: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, pos) -> Optional[int]:
        return self.entries.get(None, pos)


@dataclass
class TransitionCache:
    entries: _QuantMap = field(default_factory=_QuantMap)
    pending: Optional[tuple[int, tuple[float, float]]] = None

    def __len__(self) -> int:
        return len(self.entries)


def oracle_step(d: PositionDict, observed_label: int, saccade, rng: np.random.Generator) -> tuple[int, bool]:
    """One step of the dictionary agent; returns (prediction, was_hit).

    The label is stored at the current position (overwriting whatever was
    there), the position advances by the saccade, and the label stored at the
    new position is returned if there is one; otherwise a uniform draw.
    """
    d.entries.put(None, d.p, int(observed_label))
    d.p = d.p + np.asarray(saccade, dtype=np.float64)
    hit = d.entries.get(None, d.p)
    if hit is not None:
        return hit, True
    return int(rng.integers(N_LABELS)), False


def cache_step(c: TransitionCache, observed_label: int, saccade,
               rng: np.random.Generator) -> tuple[int, bool]:
    """One step of the transition cache; returns (prediction, was_hit)."""
    sac = (float(saccade[0]), float(saccade[1]))
    if c.pending is not None:
        prev_label, prev_sac = c.pending
        c.entries.put(prev_label, prev_sac, int(observed_label))
    c.pending = (int(observed_label), sac)
    hit = c.entries.get(int(observed_label), sac)
    if hit is not None:
        return hit, True
    return int(rng.integers(N_LABELS)), False


def run_oracle(episode: Episode, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Predictions and hit flags of the dictionary agent over an episode."""
    d = PositionDict()
    preds = np.empty(len(episode), dtype=np.int64)
    hits = np.empty(len(episode), dtype=bool)
    for t, s in enumerate(episode.steps):
        preds[t], hits[t] = oracle_step(d, s.label, s.saccade_out, rng)
    return preds, hits


def run_cache(episode: Episode, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    c = TransitionCache()
    preds = np.empty(len(episode), dtype=np.int64)
    hits = np.empty(len(episode), dtype=bool)
    for t, s in enumerate(episode.steps):
        preds[t], hits[t] = cache_step(c, s.label, s.saccade_out, rng)
    return preds, hits


def target_previously_visited(episode: Episode) -> np.ndarray:
    """Whether the saccade target at step t was the current token at some step <= t."""
    seen: set[int] = set()
    out = np.empty(len(episode), dtype=bool)
    nxt = episode.next_indices()
    for t, s in enumerate(episode.steps):
        seen.add(s.token_index)
        out[t] = int(nxt[t]) in seen
    return out


@dataclass
class OracleCurves:
    oracle: Curve
    cache: Curve

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ORACLE_CSV_HEADER)
            for t, (a, b) in enumerate(zip(self.oracle.accuracy, self.cache.accuracy)):
                w.writerow((t, float(a), float(b)))


def curves_on(episodes: Sequence[Episode], rng: np.random.Generator) -> OracleCurves:
    """Per-timestep accuracy of both agents on the given episodes."""
    o_hits, c_hits = [], []
    for ep in episodes:
        y = ep.targets
        o_hits.append(run_oracle(ep, rng)[0] == y)
        c_hits.append(run_cache(ep, rng)[0] == y)
    return OracleCurves(curve_from_hits(np.stack(o_hits, axis=1)),
                        curve_from_hits(np.stack(c_hits, axis=1)))


def oracle_curve(n_episodes: int, seq_len: int, rng: np.random.Generator,
                 fallback_rng: Optional[np.random.Generator] = None,
                 n_tokens: Optional[int] = None,
                 constraint: Optional[TrainConstraint] = None) -> OracleCurves:
    """Monte-Carlo accuracy curves on freshly generated scenes.

    Episodes are drawn from ``rng``; fallback guesses use ``fallback_rng`` so
    they never shift the episode stream.
    """
    if fallback_rng is None:
        fallback_rng = rng.spawn(1)[0]
    eps = [sample_episode(generate_scene(rng, constraint, n_tokens), seq_len, rng)
           for _ in range(n_episodes)]
    return curves_on(eps, fallback_rng)
