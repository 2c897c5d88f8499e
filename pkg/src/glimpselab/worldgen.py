"""Token scenes and saccade episodes.

A scene is a handful of labeled tokens scattered in the box [-4, 4]^2, one of
them pinned to the origin.  An episode walks over the tokens of a scene: at
each step the walker sits on a token, reports its label and the displacement
(saccade) to the next token, and the next token's label is the prediction
target.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, TextIO

import numpy as np

N_LABELS = 26
INPUT_DIM = N_LABELS + 2
BOUND = 4.0
MIN_DIST = 0.25
MAX_PLACEMENT_ATTEMPTS = 10_000
PENTAGON_RADIUS = 3.0


class SceneGenerationError(RuntimeError):
    pass


class EpisodeError(RuntimeError):
    pass


def label_char(label: int) -> str:
    return chr(ord("a") + int(label))


def char_label(c: str) -> int:
    k = ord(c) - ord("a")
    if not 0 <= k < N_LABELS:
        raise ValueError(f"not a label character: {c!r}")
    return k


@dataclass(frozen=True)
class Token:
    label: int
    position: tuple[float, float]


@dataclass(frozen=True)
class Scene:
    tokens: tuple[Token, ...]
    seed: int = 0

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.tokens], dtype=np.int64)

    @property
    def positions(self) -> np.ndarray:
        return np.array([t.position for t in self.tokens], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.tokens)

    def origin_index(self) -> int:
        for i, t in enumerate(self.tokens):
            if t.position == (0.0, 0.0):
                return i
        raise ValueError("scene has no token at the origin")

    def with_label(self, index: int, label: int) -> "Scene":
        toks = list(self.tokens)
        toks[index] = Token(int(label), toks[index].position)
        return Scene(tuple(toks), self.seed)

    def with_token(self, token: Token) -> "Scene":
        return Scene(self.tokens + (token,), self.seed)


@dataclass(frozen=True)
class TrainConstraint:
    """Pins one label to a single control position during training.

    Scenes containing ``restricted_label`` show it only at
    ``control_position``; no other label may sit within ``exclusion_radius``
    of that position.
    """

    restricted_label: int = 10  # 'k'
    control_position: tuple[float, float] = (1.0, 1.0)
    exclusion_radius: float = 0.25

    def __post_init__(self):
        if self.exclusion_radius <= 0:
            raise ValueError("exclusion_radius must be positive")
        if not 0 <= self.restricted_label < N_LABELS:
            raise ValueError("restricted_label out of range")


@dataclass(frozen=True)
class Step:
    token_index: int
    label: int
    position: tuple[float, float]
    saccade_out: tuple[float, float]
    target_label: int


@dataclass
class Episode:
    """A walk over a scene.

    ``steps[t].saccade_out`` leads to the token visited at ``t + 1``; the final
    step's saccade leads to one more (hidden) token whose label is the last
    target, so every step carries a prediction target.
    """

    scene: Scene
    steps: list[Step] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def token_indices(self) -> np.ndarray:
        return np.array([s.token_index for s in self.steps], dtype=np.int64)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.steps], dtype=np.int64)

    @property
    def targets(self) -> np.ndarray:
        return np.array([s.target_label for s in self.steps], dtype=np.int64)

    @property
    def saccades(self) -> np.ndarray:
        return np.array([s.saccade_out for s in self.steps], dtype=np.float64)

    @property
    def positions(self) -> np.ndarray:
        return np.array([s.position for s in self.steps], dtype=np.float64)

    def next_indices(self) -> np.ndarray:
        """Token index of the saccade target at each step."""
        out = np.empty(len(self.steps), dtype=np.int64)
        out[:-1] = self.token_indices[1:]
        last = self.steps[-1]
        dest = np.add(last.position, last.saccade_out)
        out[-1] = _index_at(self.scene, dest)
        return out


def _index_at(scene: Scene, pos) -> int:
    d = np.hypot(*(scene.positions - np.asarray(pos)).T)
    i = int(np.argmin(d))
    if d[i] > 1e-9:
        raise ValueError(f"no token at {tuple(pos)}")
    return i


def _far_enough(p: np.ndarray, placed: Sequence[np.ndarray], min_dist: float) -> bool:
    return all(math.hypot(p[0] - q[0], p[1] - q[1]) >= min_dist for q in placed)


def _new_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63, dtype=np.int64))


def generate_scene(rng: np.random.Generator,
                   constraint: Optional[TrainConstraint] = None,
                   n_tokens: Optional[int] = None) -> Scene:
    """Draw a random scene of 4-6 tokens (or ``n_tokens``).

    The scene's own seed is drawn from ``rng``, and all further randomness
    comes from a generator built on that seed, so ``scene_from_seed`` can
    rebuild it.
    """
    return scene_from_seed(_new_seed(rng), constraint, n_tokens)


def scene_from_seed(seed: int, constraint: Optional[TrainConstraint] = None,
                    n_tokens: Optional[int] = None) -> Scene:
    g = np.random.default_rng(seed)
    n = int(g.integers(4, 7)) if n_tokens is None else int(n_tokens)
    labels = [int(x) for x in g.integers(0, N_LABELS, n)]

    slots: list[Optional[tuple[float, float]]] = [None] * n
    origin = (0.0, 0.0)
    slots[0] = origin
    if constraint is not None:
        k = constraint.restricted_label
        if labels[0] == k:
            labels[0] = _redraw(g, k)
        placed_k = False
        for i in range(1, n):
            if labels[i] != k:
                continue
            if placed_k:
                labels[i] = _redraw(g, k)
            else:
                slots[i] = constraint.control_position
                placed_k = True

    placed = [np.array(p) for p in slots if p is not None]
    ctrl = None if constraint is None else np.array(constraint.control_position)
    for i in range(n):
        if slots[i] is not None:
            continue
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            p = g.uniform(-BOUND, BOUND, 2)
            if not _far_enough(p, placed, MIN_DIST):
                continue
            if ctrl is not None and math.hypot(*(p - ctrl)) < constraint.exclusion_radius:
                continue
            break
        else:
            raise SceneGenerationError(
                f"could not place token {i} after {MAX_PLACEMENT_ATTEMPTS} attempts")
        slots[i] = (float(p[0]), float(p[1]))
        placed.append(p)

    tokens = tuple(Token(labels[i], slots[i]) for i in range(n))
    return Scene(tokens, seed)


def _redraw(g: np.random.Generator, banned: int) -> int:
    while True:
        x = int(g.integers(0, N_LABELS))
        if x != banned:
            return x


def pentagon_positions(radius: float = PENTAGON_RADIUS) -> list[tuple[float, float]]:
    pts = [(0.0, 0.0)]
    for i in range(5):
        a = math.radians(90.0 + 72.0 * i)
        pts.append((radius * math.cos(a), radius * math.sin(a)))
    return pts


def generate_pentagon_scene(rng: np.random.Generator) -> Scene:
    """Center token plus five tokens on a regular pentagon of radius 3."""
    seed = _new_seed(rng)
    g = np.random.default_rng(seed)
    labels = g.integers(0, N_LABELS, 6)
    return Scene(tuple(Token(int(l), p) for l, p in zip(labels, pentagon_positions())), seed)


def sample_episode(scene: Scene, length: int, rng: np.random.Generator,
                   withheld_pairs: Optional[Iterable[tuple[int, int]]] = None,
                   start: Optional[int] = None) -> Episode:
    """Random walk of ``length`` steps starting at the origin token.

    Successors are uniform over the other tokens, minus any ordered
    ``(current, next)`` pair in ``withheld_pairs``.
    """
    if length < 1:
        raise ValueError("length must be positive")
    withheld = set(withheld_pairs or ())
    n = len(scene)
    succ = []
    for i in range(n):
        s = [j for j in range(n) if j != i and (i, j) not in withheld]
        if not s:
            raise EpisodeError(f"token {i} has no legal successor")
        succ.append(s)
    cur = scene.origin_index() if start is None else int(start)
    visits = [cur]
    for _ in range(length):
        s = succ[cur]
        cur = s[int(rng.integers(len(s)))]
        visits.append(cur)
    return episode_from_visits(scene, visits)


def episode_from_visits(scene: Scene, visits: Sequence[int],
                        scenes: Optional[Sequence[Scene]] = None) -> Episode:
    """Build an episode from ``len(visits) - 1`` consecutive token visits.

    ``scenes`` optionally gives the scene in force at each visit (for edited
    scenes); labels are read from it while positions come from the token index.
    """
    steps = []
    for t in range(len(visits) - 1):
        sc_now = scene if scenes is None else scenes[t]
        sc_next = scene if scenes is None else scenes[t + 1]
        a, b = sc_now.tokens[visits[t]], sc_next.tokens[visits[t + 1]]
        if visits[t] == visits[t + 1]:
            raise EpisodeError("self-saccade")
        sac = (b.position[0] - a.position[0], b.position[1] - a.position[1])
        steps.append(Step(int(visits[t]), a.label, a.position, sac, b.label))
    return Episode(scene, steps)


def encode_step(step: Step) -> np.ndarray:
    v = np.zeros(INPUT_DIM, dtype=np.float64)
    v[step.label] = 1.0
    v[N_LABELS:] = step.saccade_out
    return v


def encode_episode(episode: Episode, dtype=np.float32) -> np.ndarray:
    """(T, 28) input matrix; row t is ``encode_step(steps[t])``."""
    x = np.zeros((len(episode), INPUT_DIM), dtype=dtype)
    x[np.arange(len(episode)), episode.labels] = 1.0
    x[:, N_LABELS:] = episode.saccades
    return x


def encode_batch(episodes: Sequence[Episode], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Time-major inputs (T, B, 28) and targets (T, B)."""
    T = len(episodes[0])
    x = np.stack([encode_episode(e, dtype) for e in episodes], axis=1)
    y = np.stack([e.targets for e in episodes], axis=1)
    assert x.shape[0] == T
    return x, y


# -- text dump ---------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.9g}"


def dump_scene(scene: Scene, fh: TextIO) -> None:
    fh.write(f"SCENE seed={scene.seed} n={len(scene)}\n")
    for t in scene.tokens:
        fh.write(f"TOK {label_char(t.label)} {_fmt(t.position[0])} {_fmt(t.position[1])}\n")


def dump_episode(episode: Episode, fh: TextIO) -> None:
    dump_scene(episode.scene, fh)
    for t, s in enumerate(episode.steps):
        fh.write(f"STEP {t} {s.token_index} {_fmt(s.saccade_out[0])} {_fmt(s.saccade_out[1])}\n")


def load_records(fh: TextIO) -> list:
    """Parse a dump back into scenes and episodes (in file order).

    Positions and saccades come back rounded to 9 significant digits.
    """
    out: list = []
    scene_toks: list[Token] = []
    seed = 0
    steps: list[tuple[int, int]] = []

    def flush():
        if not scene_toks and not steps:
            return
        sc = Scene(tuple(scene_toks), seed)
        if steps:
            visits = [i for _, i in steps]
            # the final saccade's destination is implied by its displacement
            out.append(_episode_from_dump(sc, visits, last_saccades[-1]))
        else:
            out.append(sc)

    last_saccades: list[tuple[float, float]] = []
    for line in fh:
        parts = line.split()
        if not parts:
            continue
        tag = parts[0]
        if tag == "SCENE":
            flush()
            scene_toks, steps, last_saccades = [], [], []
            kv = dict(p.split("=", 1) for p in parts[1:])
            seed = int(kv["seed"])
        elif tag == "TOK":
            scene_toks.append(Token(char_label(parts[1]), (float(parts[2]), float(parts[3]))))
        elif tag == "STEP":
            steps.append((int(parts[1]), int(parts[2])))
            last_saccades.append((float(parts[3]), float(parts[4])))
        else:
            raise ValueError(f"unknown record: {line.strip()!r}")
    flush()
    return out


def _episode_from_dump(scene: Scene, visits: list[int], last_sac: tuple[float, float]) -> Episode:
    p = scene.tokens[visits[-1]].position
    dest = (p[0] + last_sac[0], p[1] + last_sac[1])
    d = np.hypot(*(scene.positions - np.asarray(dest)).T)
    return episode_from_visits(scene, visits + [int(np.argmin(d))])
