"""Linear decoding of labels, positions and label-position tuples from activations.

Activations come from pentagon scenes, whose six token positions are fixed,
so "position" is a 6-way class (the token index).  For every layer, target and
timestep in the analysis window a separate one-vs-rest linear SVM is trained
with scene-grouped 5-fold cross-validation; accuracies are then averaged over
the window.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from .linear_svm import fit_ovr
from .model import LAYERS, ModelParams, run_with_trace
from .stats import mean_ci
from .worldgen import N_LABELS, Episode, generate_pentagon_scene, sample_episode

N_POSITIONS = 6
OFFSETS = (0, 1, 2)
REPORT_HEADER = ("layer", "target", "offset", "congruent", "timestep",
                 "accuracy", "baseline", "ci_low", "ci_high")
UNINFORMATIVE_EPS = 0.01

# (label offset, position offset) pairs; equal offsets are congruent
TUPLES = ((0, 0), (1, 1), (0, 1), (1, 0))


@dataclass
class ProbeDataset:
    """Activations and targets for ``n`` scenes over a window of timesteps.

    ``acts[layer]`` is (n, W, hidden); ``labels[k]`` / ``positions[k]`` are
    (n, W) class indices for offset ``k`` (t + k), -1 where that step does not
    exist.
    """

    acts: dict[str, np.ndarray]
    timesteps: np.ndarray
    labels: dict[int, np.ndarray]
    positions: dict[int, np.ndarray]
    scene_ids: np.ndarray

    @property
    def n_scenes(self) -> int:
        return len(self.scene_ids)

    def n_samples(self, layer: str) -> int:
        a = self.acts[layer]
        return a.shape[0] * a.shape[1]

    def target(self, kind: str, offset) -> np.ndarray:
        """(n, W) class array for 'label', 'position' or 'tuple' targets.

        For tuples ``offset`` is a (label_offset, position_offset) pair and the
        class is ``label * 6 + position``.
        """
        if kind == "label":
            return self.labels[offset]
        if kind == "position":
            return self.positions[offset]
        if kind == "tuple":
            lo, po = offset
            lab, pos = self.labels[lo], self.positions[po]
            return np.where((lab >= 0) & (pos >= 0), lab * N_POSITIONS + pos, -1)
        raise ValueError(f"unknown target kind {kind!r}")


def dataset_from_episodes(params: ModelParams, episodes: Sequence[Episode],
                          window: tuple[int, int]) -> ProbeDataset:
    t0, t1 = window
    trace = run_with_trace(params, episodes)
    ts = np.arange(t0, t1 + 1)
    acts = {k: np.ascontiguousarray(trace.layers[k][t0:t1 + 1].transpose(1, 0, 2)) for k in LAYERS}
    n = len(episodes)
    # visits 0..T (the last one is the final saccade target)
    visits = np.stack([np.append(e.token_indices, e.next_indices()[-1]) for e in episodes])
    labs = np.stack([np.append(e.labels, e.targets[-1]) for e in episodes])
    labels, positions = {}, {}
    for k in OFFSETS:
        idx = ts + k
        ok = idx < visits.shape[1]
        lab = np.full((n, len(ts)), -1, dtype=np.int64)
        pos = np.full((n, len(ts)), -1, dtype=np.int64)
        lab[:, ok] = labs[:, idx[ok]]
        pos[:, ok] = visits[:, idx[ok]]
        labels[k], positions[k] = lab, pos
    return ProbeDataset(acts, ts, labels, positions, np.arange(n))


def collect_probe_data(params: ModelParams, n_scenes: int, rng: np.random.Generator,
                       seq_len: int = 100, window: tuple[int, int] = (35, 100)) -> ProbeDataset:
    """Run the model over fresh pentagon scenes and capture every layer."""
    if window[0] < 0 or window[0] > window[1]:
        raise ValueError(f"bad window {window}")
    length = max(seq_len, window[1] + 1)
    eps = [sample_episode(generate_pentagon_scene(rng), length, rng) for _ in range(n_scenes)]
    return dataset_from_episodes(params, eps, window)


# -- decoder -----------------------------------------------------------------

@dataclass
class LinearDecoder:
    """One-vs-rest linear classifier over ``n_classes`` classes.

    Hinge loss, L2 penalty ``C``, solved by dual coordinate descent
    (see ``linear_svm``).  Features are z-scored with training statistics.  A class absent
    from the training data keeps a zero weight vector and bias -1, which is
    the hinge solution for a problem with negatives only.
    """

    n_classes: int
    C: float = 1.0
    tol: float = 1e-4
    max_iter: int = 1000
    coef: Optional[np.ndarray] = None
    intercept: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None
    passes: Optional[np.ndarray] = None

    def fit(self, X: np.ndarray, y: np.ndarray) -> "LinearDecoder":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        self.mean = X.mean(axis=0)
        sd = X.std(axis=0)
        self.scale = np.where(sd > 1e-12, sd, 1.0)
        Z = (X - self.mean) / self.scale
        d = X.shape[1]
        self.coef = np.zeros((self.n_classes, d))
        self.intercept = np.full(self.n_classes, -1.0)
        present = np.unique(y)
        if len(present) == 1:
            self.intercept[present[0]] = 1.0
            return self
        coef, icpt, self.passes = fit_ovr(Z, y, present, self.C, self.tol, self.max_iter)
        self.coef[present] = coef
        self.intercept[present] = icpt
        return self

    def scores(self, X: np.ndarray) -> np.ndarray:
        Z = (np.asarray(X, dtype=np.float64) - self.mean) / self.scale
        return Z @ self.coef.T + self.intercept

    def predict(self, X: np.ndarray) -> np.ndarray:
        # argmax returns the first maximum: ties go to the lowest class index
        return np.argmax(self.scores(X), axis=1)


def scene_folds(n_scenes: int, k: int = 5, seed: int = 0) -> np.ndarray:
    """Fold id per scene from a seeded permutation (sizes differ by at most 1)."""
    perm = np.random.default_rng(seed).permutation(n_scenes)
    folds = np.empty(n_scenes, dtype=np.int64)
    folds[perm] = np.arange(n_scenes) % k
    return folds


def decode_timestep(X: np.ndarray, y: np.ndarray, folds: np.ndarray, n_classes: int,
                    C: float = 1.0) -> float:
    """Fold-averaged held-out accuracy for one (layer, target, timestep)."""
    accs = []
    for f in np.unique(folds):
        test = folds == f
        train = ~test
        tr = train & (y >= 0)
        te = test & (y >= 0)
        if not te.any() or not tr.any():
            continue
        dec = LinearDecoder(n_classes, C=C).fit(X[tr], y[tr])
        accs.append(float(np.mean(dec.predict(X[te]) == y[te])))
    return float(np.mean(accs)) if accs else float("nan")


N_CLASSES = {"label": N_LABELS, "position": N_POSITIONS, "tuple": N_LABELS * N_POSITIONS}


@dataclass
class DecodeResult:
    layer: str
    target: str
    offset: object
    per_timestep: np.ndarray  # accuracy per window timestep (nan where undefined)

    @property
    def mean(self) -> float:
        return float(np.nanmean(self.per_timestep))

    def ci(self) -> tuple[float, float, float]:
        v = self.per_timestep[~np.isnan(self.per_timestep)]
        return mean_ci(v)


def train_decoder(ds: ProbeDataset, layer: str, kind: str, offset, folds: np.ndarray,
                  timesteps: Optional[Iterable[int]] = None, C: float = 1.0) -> DecodeResult:
    """Per-timestep decoding of one target from one layer.

    ``timesteps`` (absolute) restricts the window; the result still has one
    entry per window timestep with nan for skipped ones.
    """
    X_all = ds.acts[layer]
    y_all = ds.target(kind, offset)
    want = set(ds.timesteps.tolist() if timesteps is None else timesteps)
    out = np.full(len(ds.timesteps), np.nan)
    for j, t in enumerate(ds.timesteps):
        if t not in want:
            continue
        y = y_all[:, j]
        if np.all(y < 0):
            continue
        out[j] = decode_timestep(X_all[:, j], y, folds, N_CLASSES[kind], C)
    return DecodeResult(layer, kind, offset, out)


# -- binding -----------------------------------------------------------------

@dataclass
class BindingRow:
    layer: str
    label_offset: int
    position_offset: int
    tuple_acc: np.ndarray
    baseline: np.ndarray  # per timestep: label acc x position acc

    @property
    def congruent(self) -> bool:
        return self.label_offset == self.position_offset

    @property
    def delta(self) -> np.ndarray:
        return self.tuple_acc - self.baseline

    def delta_ci(self) -> tuple[float, float, float]:
        d = self.delta
        return mean_ci(d[~np.isnan(d)])

    @property
    def mean_baseline(self) -> float:
        return float(np.nanmean(self.baseline))

    @property
    def uninformative(self) -> bool:
        return self.mean_baseline >= 1.0 - UNINFORMATIVE_EPS


def binding_analysis(ds: ProbeDataset, layer: str, folds: np.ndarray,
                     components: Optional[dict] = None,
                     timesteps: Optional[Iterable[int]] = None,
                     tuples: Sequence[tuple[int, int]] = TUPLES) -> list[BindingRow]:
    """Tuple decoding against the product-of-components baseline.

    ``components`` caches DecodeResults keyed by (kind, offset) and is filled
    in as needed, so component and tuple decoders share the same folds.
    """
    components = {} if components is None else components
    rows = []
    for lo, po in tuples:
        for key in (("label", lo), ("position", po)):
            if key not in components:
                components[key] = train_decoder(ds, layer, key[0], key[1], folds, timesteps)
        tup = train_decoder(ds, layer, "tuple", (lo, po), folds, timesteps)
        base = components[("label", lo)].per_timestep * components[("position", po)].per_timestep
        rows.append(BindingRow(layer, lo, po, tup.per_timestep, base))
    return rows


@dataclass
class BindingGap:
    """Pooled congruent vs incongruent excess over baseline for one layer."""
    layer: str
    congruent: tuple[float, float, float]    # (mean, lo, hi) over timesteps
    incongruent: tuple[float, float, float]
    informative: bool

    @property
    def separated(self) -> bool:
        return self.informative and self.congruent[1] > self.incongruent[2]


def binding_gap(rows: Sequence[BindingRow]) -> BindingGap:
    """Average the congruent and incongruent deltas per timestep, then compare.

    A layer is informative only if every tuple's baseline is below the
    ceiling; a gap is reported when the congruent interval sits wholly above
    the incongruent one.
    """
    with warnings.catch_warnings():
        # timesteps without a t+2 target are all-NaN columns
        warnings.simplefilter("ignore", RuntimeWarning)
        cong = np.nanmean([r.delta for r in rows if r.congruent], axis=0)
        inc = np.nanmean([r.delta for r in rows if not r.congruent], axis=0)
    ok = ~(np.isnan(cong) | np.isnan(inc))
    informative = not any(r.uninformative for r in rows)
    return BindingGap(rows[0].layer, mean_ci(cong[ok]), mean_ci(inc[ok]), informative)


@dataclass
class DecodingReport:
    components: dict[str, dict] = field(default_factory=dict)  # layer -> {(kind, offset): DecodeResult}
    binding: list[BindingRow] = field(default_factory=list)
    timesteps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def rows(self) -> Iterable[tuple]:
        """CSV rows; per-timestep rows followed by a window-mean row (timestep 'mean')."""
        ts = self.timesteps
        for layer, comps in self.components.items():
            for (kind, off), r in comps.items():
                for j, t in enumerate(ts):
                    if not np.isnan(r.per_timestep[j]):
                        yield (layer, kind, off, "", int(t), r.per_timestep[j], "", "", "")
                m, lo, hi = r.ci()
                yield (layer, kind, off, "", "mean", m, "", lo, hi)
        for b in self.binding:
            off = f"{b.label_offset}:{b.position_offset}"
            cong = int(b.congruent)
            for j, t in enumerate(ts):
                if not np.isnan(b.tuple_acc[j]):
                    yield (b.layer, "tuple", off, cong, int(t), b.tuple_acc[j], b.baseline[j], "", "")
            m, lo, hi = mean_ci(b.tuple_acc[~np.isnan(b.tuple_acc)])
            yield (b.layer, "tuple", off, cong, "mean", m, b.mean_baseline, lo, hi)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_HEADER)
            for row in self.rows():
                w.writerow(row)


def run_probe_suite(ds: ProbeDataset, layers: Sequence[str] = LAYERS, folds: Optional[np.ndarray] = None,
                    timesteps: Optional[Iterable[int]] = None, binding: bool = True,
                    fold_seed: int = 0) -> DecodingReport:
    """Component decoding at offsets t, t+1, t+2 plus the four tuple controls."""
    folds = scene_folds(ds.n_scenes, 5, fold_seed) if folds is None else folds
    ts = None if timesteps is None else list(timesteps)
    rep = DecodingReport(timesteps=ds.timesteps)
    for layer in layers:
        comps: dict = {}
        for kind in ("label", "position"):
            for off in OFFSETS:
                comps[(kind, off)] = train_decoder(ds, layer, kind, off, folds, ts)
        if binding:
            rep.binding.extend(binding_analysis(ds, layer, folds, comps, ts))
        rep.components[layer] = comps
    return rep


def factorized_null_dataset(n_scenes: int, n_timesteps: int, rng: np.random.Generator,
                            noise: float = 0.35, dim_pad: int = 8) -> ProbeDataset:
    """Synthetic activations with no binding.

    Each sample is the concatenation of independent noisy one-hot codes for
    label_t, position_t, label_t+1 and position_t+1 (plus noise features), so
    any tuple is decodable only as well as its two parts.
    """
    n, W = n_scenes, n_timesteps
    labels = {k: rng.integers(0, N_LABELS, (n, W)) for k in (0, 1, 2)}
    positions = {k: rng.integers(0, N_POSITIONS, (n, W)) for k in (0, 1, 2)}
    blocks = []
    for codes, size in ((labels[0], N_LABELS), (positions[0], N_POSITIONS),
                        (labels[1], N_LABELS), (positions[1], N_POSITIONS)):
        oh = np.eye(size)[codes]
        blocks.append(oh + noise * rng.standard_normal(oh.shape))
    blocks.append(rng.standard_normal((n, W, dim_pad)))
    X = np.concatenate(blocks, axis=2)
    acts = {"synthetic": X}
    return ProbeDataset(acts, np.arange(W), labels, positions, np.arange(n))
