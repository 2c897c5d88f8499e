"""Causal probes of in-context memory.

Four experiments run on a trained model, each with the dictionary oracle on
the very same episodes for contrast:

* withheld saccade: one ordered token pair is never traversed for the first
  101 steps, then forced at step 101;
* replacement: one token's label changes at a switch step, position fixed;
* addition: a sixth token appears in a five-token scene at a switch step;
* OOD binding: a constraint-trained model sees the restricted label away from
  its training position, and another label at that position.

Timestep convention: step ``t`` reads the token visited at ``t`` and predicts
the label of the token visited at ``t + 1``.  An edit "at" switch step ``s``
is in force for every visit after ``s``, so step ``s`` is the first
prediction whose target can reflect it.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import ModelParams, predict
from .oracle import run_cache, run_oracle
from .stats import two_proportion_test, wald_ci
from .worldgen import (BOUND, MIN_DIST, MAX_PLACEMENT_ATTEMPTS, N_LABELS, Episode, Scene,
                       SceneGenerationError, Token, TrainConstraint, episode_from_visits,
                       generate_scene, sample_episode)

KINDS = ("withheld_saccade", "replace", "add", "ood_binding")
WITHHELD_QUERY_STEP = 101
REPLACE_HEADER = ("timestep", "changed_acc", "unchanged_acc", "err_original", "err_other",
                  "ci_low", "ci_high")
ADD_HEADER = ("timestep", "new_acc", "old_acc", "ci_low", "ci_high")
OOD_HEADER = ("timestep", "k_acc", "control_acc", "k_ci_low", "k_ci_high",
              "control_ci_low", "control_ci_high")
WITHHELD_HEADER = ("agent", "accuracy", "ci_low", "ci_high", "n")


@dataclass(frozen=True)
class InterventionPlan:
    kind: str
    switch_timestep: int
    horizon: int
    n_tokens: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown intervention kind {self.kind!r}")
        if not 0 <= self.switch_timestep < self.horizon:
            raise ValueError("switch_timestep must lie in [0, horizon)")


def _masked_rate(hits: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-timestep mean of ``hits`` over entries where ``mask`` holds (nan if none)."""
    n = mask.sum(axis=1)
    k = (hits & mask).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        rate = np.where(n > 0, k / np.maximum(n, 1), np.nan)
    return rate, n


def _wald(rate: np.ndarray, n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = wald_ci(np.nan_to_num(rate), np.maximum(n, 1))
    lo = np.where(n > 0, lo, np.nan)
    hi = np.where(n > 0, hi, np.nan)
    return lo, hi


def _walk(n_at, length: int, rng: np.random.Generator, start: int = 0) -> list[int]:
    """Uniform successor walk where ``n_at(t)`` tokens are available at visit t."""
    visits = [start]
    cur = start
    for t in range(1, length + 1):
        n = n_at(t)
        nxt = int(rng.integers(n - 1))
        nxt += nxt >= cur
        visits.append(nxt)
        cur = nxt
    return visits


def rise_time(curve: np.ndarray, frac: float = 0.9, plateau_len: int = 50,
              smooth: int = 9) -> Optional[int]:
    """Steps until a smoothed curve first reaches ``frac`` of its plateau.

    The plateau is the mean of the last ``plateau_len`` points; smoothing is a
    centred moving average that ignores nan entries.  Returns None if never
    reached.
    """
    c = np.asarray(curve, dtype=np.float64)
    plateau = np.nanmean(c[-plateau_len:])
    half = smooth // 2
    for i in range(len(c)):
        w = c[max(0, i - half):i + half + 1]
        if np.all(np.isnan(w)):
            continue
        if np.nanmean(w) >= frac * plateau:
            return i
    return None


# -- withheld saccade --------------------------------------------------------

@dataclass
class WithheldReport:
    model_hits: np.ndarray
    oracle_hits: np.ndarray
    cache_hits: np.ndarray
    target_visited: np.ndarray   # target token seen before the query

    def summary(self) -> dict[str, tuple[float, float, float, int]]:
        out = {}
        for name, h in (("model", self.model_hits), ("oracle", self.oracle_hits),
                        ("cache", self.cache_hits)):
            p = float(np.mean(h))
            lo, hi = wald_ci(p, len(h))
            out[name] = (p, float(lo), float(hi), len(h))
        return out

    @property
    def oracle_visited_accuracy(self) -> float:
        return float(np.mean(self.oracle_hits[self.target_visited]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(WITHHELD_HEADER)
            for name, (p, lo, hi, n) in self.summary().items():
                w.writerow((name, p, lo, hi, n))


def withheld_episode(scene: Scene, rng: np.random.Generator,
                     query_step: int = WITHHELD_QUERY_STEP) -> tuple[Episode, tuple[int, int]]:
    """Episode whose step ``query_step`` is the first traversal of a withheld pair.

    A random ordered pair (a, b) is withheld; walks avoiding it are drawn
    until visit ``query_step`` lands on a, then b is forced.
    """
    n = len(scene)
    a = int(rng.integers(n))
    b = int(rng.integers(n - 1))
    b += b >= a
    while True:
        ep = sample_episode(scene, query_step, rng, withheld_pairs=[(a, b)])
        visits = list(ep.token_indices) + [int(ep.next_indices()[-1])]
        if visits[-1] == a:
            break
    visits.append(b)
    return episode_from_visits(scene, visits), (a, b)


def build_withheld_episodes(n_scenes: int, rng: np.random.Generator,
                            query_step: int = WITHHELD_QUERY_STEP,
                            n_tokens: Optional[int] = None) -> list[Episode]:
    return [withheld_episode(generate_scene(rng, n_tokens=n_tokens), rng, query_step)[0]
            for _ in range(n_scenes)]


def run_withheld_saccade(params: Optional[ModelParams], n_scenes: int, rng: np.random.Generator,
                         query_step: int = WITHHELD_QUERY_STEP,
                         fallback_rng: Optional[np.random.Generator] = None,
                         episodes: Optional[Sequence[Episode]] = None) -> WithheldReport:
    """Model, oracle and transition cache on the forced withheld query.

    With ``params`` None only the symbolic agents are run (model hits are
    then all False).
    """
    fallback_rng = rng.spawn(1)[0] if fallback_rng is None else fallback_rng
    eps = list(episodes) if episodes is not None else build_withheld_episodes(n_scenes, rng, query_step)
    y = np.array([e.targets[query_step] for e in eps])
    if params is not None:
        m = predict(params, eps)[query_step] == y
    else:
        m = np.zeros(len(eps), dtype=bool)
    o = np.array([run_oracle(e, fallback_rng)[0][query_step] for e in eps]) == y
    c = np.array([run_cache(e, fallback_rng)[0][query_step] for e in eps]) == y
    seen = np.array([int(e.next_indices()[query_step]) in set(e.token_indices[:query_step + 1].tolist())
                     for e in eps])
    return WithheldReport(m, o, c, seen)


# -- replacement --------------------------------------------------------------

@dataclass
class ReplacementEpisode:
    episode: Episode
    index: int        # token whose label changes
    old_label: int
    new_label: int


def replacement_episode(scene: Scene, switch: int, horizon: int,
                        rng: np.random.Generator) -> ReplacementEpisode:
    """Uniform walk of ``horizon`` steps; one token's label changes after ``switch``."""
    n = len(scene)
    idx = int(rng.integers(n))
    old = scene.tokens[idx].label
    new = int(rng.integers(N_LABELS - 1))
    new += new >= old
    edited = scene.with_label(idx, new)
    visits = _walk(lambda t: n, horizon, rng, scene.origin_index())
    scenes = [scene if t <= switch else edited for t in range(horizon + 1)]
    ep = episode_from_visits(edited, visits, scenes)
    return ReplacementEpisode(ep, idx, old, new)


@dataclass
class InterventionReport:
    """Per-timestep accuracy at the changed and unchanged positions.

    ``err_original`` and ``err_other`` split the changed-position errors into
    predictions of the replaced label and anything else; together with
    ``changed_acc`` they sum to one wherever the changed position was a
    target.
    """
    switch: int
    changed_acc: np.ndarray
    unchanged_acc: np.ndarray
    err_original: np.ndarray
    err_other: np.ndarray
    changed_n: np.ndarray
    unchanged_n: np.ndarray
    unchanged_hits: np.ndarray = field(repr=False)   # (T, N)
    unchanged_mask: np.ndarray = field(repr=False)

    def ci(self) -> tuple[np.ndarray, np.ndarray]:
        return _wald(self.changed_acc, self.changed_n)

    def rows(self):
        lo, hi = self.ci()
        for t in range(len(self.changed_acc)):
            yield (t, self.changed_acc[t], self.unchanged_acc[t], self.err_original[t],
                   self.err_other[t], lo[t], hi[t])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPLACE_HEADER)
            w.writerows(self.rows())

    def unchanged_test(self, window: int = 10) -> tuple[float, float, float, float]:
        """Two-proportion test on unchanged-position accuracy just before vs after the switch.

        Returns (pre_acc, post_acc, z, p).
        """
        s = self.switch
        pre = slice(max(0, s - window), s)
        post = slice(s, s + window)
        h, m = self.unchanged_hits, self.unchanged_mask
        k1, n1 = int((h[pre] & m[pre]).sum()), int(m[pre].sum())
        k2, n2 = int((h[post] & m[post]).sum()), int(m[post].sum())
        z, p = two_proportion_test(k1, n1, k2, n2)
        return k1 / n1, k2 / n2, z, p


def replacement_report(preds: np.ndarray, reps: Sequence[ReplacementEpisode], switch: int) -> InterventionReport:
    """Score predictions (T, N) on replacement episodes."""
    nxt = np.stack([r.episode.next_indices() for r in reps], axis=1)
    y = np.stack([r.episode.targets for r in reps], axis=1)
    idx = np.array([r.index for r in reps])[None, :]
    old = np.array([r.old_label for r in reps])[None, :]
    T = y.shape[0]
    post = (np.arange(T) >= switch)[:, None]
    changed = (nxt == idx) & post
    unchanged = nxt != idx
    hits = preds == y
    acc, n_c = _masked_rate(hits, changed)
    e_orig, _ = _masked_rate(preds == old, changed)
    e_other, _ = _masked_rate(~hits & (preds != old), changed)
    un_acc, n_u = _masked_rate(hits, unchanged)
    return InterventionReport(switch, acc, un_acc, e_orig, e_other, n_c, n_u, hits, unchanged)


def run_replacement(params: ModelParams, n_scenes: int, rng: np.random.Generator,
                    switch: int = 35, horizon: int = 250, n_tokens: int = 6,
                    fallback_rng: Optional[np.random.Generator] = None
                    ) -> tuple[InterventionReport, InterventionReport]:
    """Model and oracle reports for label replacement on ``n_tokens``-token scenes."""
    InterventionPlan("replace", switch, horizon, n_tokens)
    fallback_rng = rng.spawn(1)[0] if fallback_rng is None else fallback_rng
    reps = [replacement_episode(generate_scene(rng, n_tokens=n_tokens), switch, horizon, rng)
            for _ in range(n_scenes)]
    eps = [r.episode for r in reps]
    model = replacement_report(predict(params, eps), reps, switch)
    opreds = np.stack([run_oracle(e, fallback_rng)[0] for e in eps], axis=1)
    return model, replacement_report(opreds, reps, switch)


# -- addition -----------------------------------------------------------------

def place_new_token(scene: Scene, rng: np.random.Generator) -> Token:
    """A token at a uniformly drawn free position (min distance respected)."""
    pos = scene.positions
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        p = rng.uniform(-BOUND, BOUND, 2)
        if np.all(np.hypot(*(pos - p).T) >= MIN_DIST):
            return Token(int(rng.integers(N_LABELS)), (float(p[0]), float(p[1])))
    raise SceneGenerationError("no room for an extra token")


@dataclass
class AdditionReport:
    switch: int
    new_acc: np.ndarray
    old_acc: np.ndarray
    new_n: np.ndarray
    old_n: np.ndarray

    def ci(self):
        return _wald(self.new_acc, self.new_n)

    def post_switch(self) -> np.ndarray:
        """New-token accuracy from the switch step on."""
        return self.new_acc[self.switch:]

    def rise_time(self, frac: float = 0.9) -> Optional[int]:
        return rise_time(self.post_switch(), frac)

    def rows(self):
        lo, hi = self.ci()
        for t in range(len(self.new_acc)):
            yield t, self.new_acc[t], self.old_acc[t], lo[t], hi[t]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ADD_HEADER)
            w.writerows(self.rows())


def addition_episode(scene: Scene, switch: int, horizon: int,
                     rng: np.random.Generator) -> Episode:
    """Walk over ``scene``; a new token joins the rotation for visits after ``switch``."""
    while True:
        try:
            tok = place_new_token(scene, rng)
            break
        except SceneGenerationError:
            scene = generate_scene(rng, n_tokens=len(scene))
    n = len(scene)
    grown = scene.with_token(tok)
    visits = _walk(lambda t: n if t <= switch else n + 1, horizon, rng, scene.origin_index())
    scenes = [scene if t <= switch else grown for t in range(horizon + 1)]
    return episode_from_visits(grown, visits, scenes)


def addition_report(preds: np.ndarray, eps: Sequence[Episode], switch: int) -> AdditionReport:
    nxt = np.stack([e.next_indices() for e in eps], axis=1)
    y = np.stack([e.targets for e in eps], axis=1)
    new_idx = np.array([len(e.scene) - 1 for e in eps])[None, :]
    hits = preds == y
    new, n_new = _masked_rate(hits, nxt == new_idx)
    old, n_old = _masked_rate(hits, nxt != new_idx)
    return AdditionReport(switch, new, old, n_new, n_old)


def run_addition(params: ModelParams, n_scenes: int, rng: np.random.Generator,
                 switch: int = 35, post: int = 150, n_tokens: int = 5,
                 fallback_rng: Optional[np.random.Generator] = None
                 ) -> tuple[AdditionReport, AdditionReport]:
    """Model and oracle reports for adding a token at ``switch`` (horizon ``switch + post``)."""
    horizon = switch + post
    InterventionPlan("add", switch, horizon, n_tokens)
    fallback_rng = rng.spawn(1)[0] if fallback_rng is None else fallback_rng
    eps = [addition_episode(generate_scene(rng, n_tokens=n_tokens), switch, horizon, rng)
           for _ in range(n_scenes)]
    model = addition_report(predict(params, eps), eps, switch)
    opreds = np.stack([run_oracle(e, fallback_rng)[0] for e in eps], axis=1)
    return model, addition_report(opreds, eps, switch)


# -- out-of-distribution binding ---------------------------------------------

OOD_AXIS_MARGIN = 0.25


def _quadrant(p) -> tuple[bool, bool]:
    return p[0] > 0, p[1] > 0


def ood_scene(rng: np.random.Generator, constraint: TrainConstraint = TrainConstraint(),
              n_tokens: int = 6) -> tuple[Scene, int, int]:
    """Test scene for the constraint-trained model.

    Token 0 sits at the origin; the restricted label is placed uniformly in
    one of the three quadrants not holding the control position, at least
    ``OOD_AXIS_MARGIN`` from both axes; a different label sits exactly on the
    control position; the remaining tokens never carry the restricted label.
    Returns (scene, k_index, control_index).
    """
    k = constraint.restricted_label
    ctrl = np.array(constraint.control_position, dtype=np.float64)
    home = _quadrant(ctrl)

    def other_label():
        x = int(rng.integers(N_LABELS - 1))
        return x + (x >= k)

    placed = [np.zeros(2), ctrl]
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        p = rng.uniform(-BOUND, BOUND, 2)
        if (min(abs(p[0]), abs(p[1])) >= OOD_AXIS_MARGIN and _quadrant(p) != home
                and all(math.hypot(*(p - q)) >= MIN_DIST for q in placed)):
            break
    else:
        raise SceneGenerationError("could not place the restricted label")
    kpos = p
    placed.append(kpos)
    rest = []
    for _ in range(n_tokens - 3):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            p = rng.uniform(-BOUND, BOUND, 2)
            if all(math.hypot(*(p - q)) >= MIN_DIST for q in placed):
                break
        else:
            raise SceneGenerationError("could not place filler token")
        placed.append(p)
        rest.append(p)
    toks = [Token(other_label(), (0.0, 0.0)),
            Token(k, (float(kpos[0]), float(kpos[1]))),
            Token(other_label(), (float(ctrl[0]), float(ctrl[1])))]
    toks += [Token(other_label(), (float(q[0]), float(q[1]))) for q in rest]
    return Scene(tuple(toks)), 1, 2


@dataclass
class OODReport:
    k_acc: np.ndarray
    control_acc: np.ndarray
    k_n: np.ndarray
    control_n: np.ndarray

    def end_accuracy(self, last: int = 20) -> tuple[float, float]:
        """Mean accuracy for (k, control) over the final ``last`` timesteps."""
        return float(np.nanmean(self.k_acc[-last:])), float(np.nanmean(self.control_acc[-last:]))

    def rows(self):
        klo, khi = _wald(self.k_acc, self.k_n)
        clo, chi = _wald(self.control_acc, self.control_n)
        for t in range(len(self.k_acc)):
            yield t, self.k_acc[t], self.control_acc[t], klo[t], khi[t], clo[t], chi[t]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(OOD_HEADER)
            w.writerows(self.rows())


def ood_report(preds: np.ndarray, eps: Sequence[Episode], k_index: int = 1,
               control_index: int = 2) -> OODReport:
    nxt = np.stack([e.next_indices() for e in eps], axis=1)
    y = np.stack([e.targets for e in eps], axis=1)
    hits = preds == y
    k, nk = _masked_rate(hits, nxt == k_index)
    c, nc = _masked_rate(hits, nxt == control_index)
    return OODReport(k, c, nk, nc)


def run_ood_binding(params: ModelParams, n_scenes: int, rng: np.random.Generator,
                    seq_len: int = 100, constraint: TrainConstraint = TrainConstraint(),
                    fallback_rng: Optional[np.random.Generator] = None) -> tuple[OODReport, OODReport]:
    """Model and oracle accuracy curves on out-of-distribution placements."""
    fallback_rng = rng.spawn(1)[0] if fallback_rng is None else fallback_rng
    eps = []
    for _ in range(n_scenes):
        scene, _, _ = ood_scene(rng, constraint)
        eps.append(sample_episode(scene, seq_len, rng))
    model = ood_report(predict(params, eps), eps)
    opreds = np.stack([run_oracle(e, fallback_rng)[0] for e in eps], axis=1)
    return model, ood_report(opreds, eps)
